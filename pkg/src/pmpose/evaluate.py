"""Metrics, baseline fitting wrappers, and leave-one-participant-out CV."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import baselines as bl
from .data import (
    LABELED_JOINT_NAMES,
    AugmentParams,
    LabeledFrame,
    MatGeometry,
    augment,
    build_input_stack,
    derive_rng,
    upsample2x,
)
from .nets import (
    BASELINE_MAGIC,
    ConvNetConfig,
    TrainedNet,
    _decode_batch,
    _read_container,
    _write_container,
    pretrain_then_specialize,
    train,
)
from .uncertainty import mc_dropout

NET_METHODS = {"direct": "direct", "kin-const": "kinematic_const_l",
               "kin-regress": "kinematic_regress_l"}
BASELINE_METHODS = ("knn", "lrr", "krr")
ALL_METHODS = tuple(NET_METHODS) + BASELINE_METHODS


def mpjpe(pred, truth) -> float:
    """Mean per joint position error in millimeters.

    pred/truth are (..., J, 3) stacks with matching joint order; the mean
    runs over every frame and joint.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.linalg.norm(p - t, axis=-1).mean() * 1000.0)


def per_joint_error(pred, truth):
    """Per-joint mean and std of the Euclidean error, in millimeters.

    Returns (means, stds) arrays over the joint axis.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 3:
        raise ValueError("expected matching (frames, joints, 3) stacks")
    err = np.linalg.norm(p - t, axis=-1) * 1000.0
    return err.mean(axis=0), err.std(axis=0)


def mean_pose_predictor(train_frames):
    """Constant predictor: the mean labeled pose of the training set."""
    joints = np.stack([f.joints for f in train_frames])
    mean = joints.mean(axis=0)

    def predictor(test_frames):
        return np.repeat(mean[None], len(test_frames), axis=0)

    return predictor


# ---------------------------------------------------------------------------
# baseline wrappers: HOG featurization + fit/predict/serialize
# ---------------------------------------------------------------------------

_BASELINE_AUGMENT = AugmentParams(
    flip_prob=0.5, shift_sigma=0.0286, scale_sigma=0.0, noise_sigma=1.0
)


@dataclass
class FittedBaseline:
    kind: str
    hog: bl.HogConfig
    k: int | None = None
    ridge: bl.RidgeModel | None = None
    train_features: np.ndarray | None = None
    train_labels: np.ndarray | None = None


def _hog_features(frames, hog_cfg):
    return np.stack([bl.hog(upsample2x(f.image.taxels), hog_cfg) for f in frames])


def fit_baseline(
    kind: str,
    frames,
    geom: MatGeometry,
    hog_cfg: bl.HogConfig = bl.HogConfig(),
    k: int = 10,
    alpha: float | None = None,
    gamma: float | None = None,
    augment_copies: int = 1,
    seed: int = 0,
) -> FittedBaseline:
    """Fit one classical baseline on HOG features.

    The training set is expanded with flip/shift/noise augmented copies
    (no scaling). alpha defaults to 0.7 for linear ridge and 0.4 for the
    RBF kernel.
    """
    if kind not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline {kind!r}")
    expanded = list(frames)
    for copy in range(augment_copies):
        for f in frames:
            params = replace(_BASELINE_AUGMENT, seated=f.image.bed_angle > 0)
            rng = derive_rng(seed, f.image.frame_id, 1000 + copy)
            expanded.append(augment(f, params, rng, geom))
    feats = _hog_features(expanded, hog_cfg)
    labels = np.stack([f.joints.ravel() for f in expanded])
    if kind == "knn":
        return FittedBaseline(
            kind=kind, hog=hog_cfg, k=k, train_features=feats, train_labels=labels
        )
    if kind == "lrr":
        model = bl.ridge_fit(feats, labels, "linear", 0.7 if alpha is None else alpha)
    else:
        model = bl.ridge_fit(
            feats, labels, "kernel_rbf", 0.4 if alpha is None else alpha, gamma
        )
    return FittedBaseline(kind=kind, hog=hog_cfg, ridge=model)


def baseline_predict(model: FittedBaseline, frames) -> np.ndarray:
    feats = _hog_features(frames, model.hog)
    if model.kind == "knn":
        out = bl.knn_predict(model.train_features, model.train_labels, feats, model.k)
    else:
        out = bl.ridge_predict(model.ridge, feats)
    return out.reshape(len(frames), 10, 3)


def save_baseline(model: FittedBaseline, path) -> None:
    header = {
        "format": 1,
        "kind": model.kind,
        "hog": {
            "cell_size": model.hog.cell_size,
            "block_size": model.hog.block_size,
            "orientation_bins": model.hog.orientation_bins,
            "block_norm": model.hog.block_norm,
        },
        "k": model.k,
    }
    arrays = []
    if model.kind == "knn":
        arrays = [("features", model.train_features), ("labels", model.train_labels)]
    else:
        r = model.ridge
        header["alpha"] = r.alpha
        header["gamma"] = r.gamma
        header["ridge_kind"] = r.kind
        arrays = [
            ("coef", r.coef),
            ("feature_mean", r.feature_mean),
            ("label_mean", r.label_mean),
        ]
        if r.train_features is not None:
            arrays.append(("train_features", r.train_features))
    _write_container(path, BASELINE_MAGIC, header, arrays)


def load_baseline(path) -> FittedBaseline:
    header, arrays = _read_container(path, BASELINE_MAGIC)
    hog_cfg = bl.HogConfig(**header["hog"])
    if header["kind"] == "knn":
        return FittedBaseline(
            kind="knn",
            hog=hog_cfg,
            k=header["k"],
            train_features=arrays["features"].astype(np.float64),
            train_labels=arrays["labels"].astype(np.float64),
        )
    ridge = bl.RidgeModel(
        kind=header["ridge_kind"],
        alpha=header["alpha"],
        gamma=header["gamma"],
        coef=arrays["coef"].astype(np.float64),
        feature_mean=arrays["feature_mean"].astype(np.float64),
        label_mean=arrays["label_mean"].astype(np.float64),
        train_features=(
            arrays["train_features"].astype(np.float64)
            if "train_features" in arrays
            else None
        ),
    )
    return FittedBaseline(kind=header["kind"], hog=hog_cfg, ridge=ridge)


def predict_frames(net: TrainedNet, frames, passes: int = 1, seed: int = 0):
    """Labeled-joint predictions for a list of frames, (F, 10, 3)."""
    out = np.empty((len(frames), 10, 3))
    if passes > 1:
        for i, f in enumerate(frames):
            est = mc_dropout(
                net, net.stack_for(f.image), passes, seed=seed, frame_id=f.image.frame_id
            )
            out[i] = est.labeled_mean
        return out
    net.model.eval()
    with torch.no_grad():
        for start in range(0, len(frames), 64):
            chunk = frames[start : start + 64]
            x = torch.from_numpy(
                np.stack([net.stack_for(f.image).channels for f in chunk])
            ).contiguous(memory_format=torch.channels_last)
            raw = net.model(x, None)
            labeled, _, _, _, _ = _decode_batch(net, raw)
            out[start : start + len(chunk)] = labeled.numpy()
    return out


# ---------------------------------------------------------------------------
# leave-one-participant-out cross validation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    seed: int
    participants: list
    n_frames: int
    mpjpe_supine: float
    mpjpe_seated: float
    mpjpe_overall: float
    joint_stats: dict  # posture -> (means, stds) over LABELED_JOINT_NAMES
    fold_mpjpe: dict  # participant -> mpjpe mm
    runtime_s: float = 0.0  # informational; excluded from report files

    def to_csv(self) -> str:
        """Canonical report text; stable bytes for fixed seed and data."""
        lines = ["# pmpose evaluation report"]
        lines.append(f"method,{self.method}")
        lines.append(f"seed,{self.seed}")
        lines.append("participants," + ";".join(str(p) for p in self.participants))
        lines.append(f"frames,{self.n_frames}")
        for posture, value in (
            ("supine", self.mpjpe_supine),
            ("seated", self.mpjpe_seated),
            ("overall", self.mpjpe_overall),
        ):
            lines.append(f"mpjpe_mm,{posture},{_fmt(value)}")
        for posture in ("supine", "seated", "overall"):
            means, stds = self.joint_stats[posture]
            for j, name in enumerate(LABELED_JOINT_NAMES):
                lines.append(
                    f"per_joint_mm,{name},{posture},{_fmt(means[j])},{_fmt(stds[j])}"
                )
        for pid in self.participants:
            lines.append(f"fold_mpjpe_mm,{pid},{_fmt(self.fold_mpjpe[pid])}")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def _posture_split(frames):
    supine = [i for i, f in enumerate(frames) if f.image.bed_angle == 0]
    seated = [i for i, f in enumerate(frames) if f.image.bed_angle > 0]
    return supine, seated


def lopo_cv(
    frames,
    geom: MatGeometry,
    method: str,
    seed: int = 0,
    net_config: ConvNetConfig | None = None,
    design_frames=None,
    pretrain_epochs: int = 10,
    passes: int = 1,
    hog_cfg: bl.HogConfig = bl.HogConfig(),
    knn_k: int = 10,
    lrr_alpha: float = 0.7,
    krr_alpha: float = 0.4,
    krr_gamma: float | None = None,
    baseline_copies: int = 1,
    verbose: bool = False,
) -> EvalReport:
    """One fold per participant; the held-out participant is never seen
    in training, and fold models are trained independently.

    ConvNet folds derive their seeds from (seed, fold); kinematic
    variants are initialized from one net pretrained on design_frames
    when given (itself excluded from every fold). The constant-length
    variant recomputes its length vector inside each fold's training set.
    """
    frames = list(frames)
    pids = sorted({f.image.participant_id for f in frames})
    if len(pids) < 2:
        raise ValueError("LOPO cross validation needs at least 2 participants")
    if method == "mean" :
        pass
    elif method not in ALL_METHODS:
        raise ValueError(f"unknown method {method!r}")

    t0 = time.time()
    pretrained = None
    if method in ("kin-const", "kin-regress") and design_frames:
        pretrained = pretrain_then_specialize(
            design_frames,
            geom,
            seed=int(np.random.SeedSequence((seed, 0xD5)).generate_state(1)[0] % 2**31),
            epochs=pretrain_epochs,
            base=net_config,
        )

    preds = np.zeros((len(frames), 10, 3))
    truths = np.stack([f.joints for f in frames])
    fold_mpjpe = {}
    for fold, held_out in enumerate(pids):
        train_idx = [i for i, f in enumerate(frames)
                     if f.image.participant_id != held_out]
        test_idx = [i for i, f in enumerate(frames)
                    if f.image.participant_id == held_out]
        train_frames = [frames[i] for i in train_idx]
        test_frames = [frames[i] for i in test_idx]
        fold_seed = int(
            np.random.SeedSequence((seed, fold)).generate_state(1)[0] % 2**31
        )
        if method in NET_METHODS:
            cfg = net_config if net_config is not None else ConvNetConfig()
            cfg = replace(cfg, variant=NET_METHODS[method], seed=fold_seed)
            if cfg.variant == "kinematic_const_l":
                cfg = replace(cfg, beta=0.0)
            net, _ = train(cfg, train_frames, geom, init=pretrained)
            fold_pred = predict_frames(net, test_frames, passes=passes, seed=fold_seed)
        elif method in BASELINE_METHODS:
            alpha = {"knn": None, "lrr": lrr_alpha, "krr": krr_alpha}[method]
            model = fit_baseline(
                method,
                train_frames,
                geom,
                hog_cfg,
                k=knn_k,
                alpha=alpha,
                gamma=krr_gamma,
                augment_copies=baseline_copies,
                seed=fold_seed,
            )
            fold_pred = baseline_predict(model, test_frames)
        else:  # mean-pose reference predictor
            fold_pred = mean_pose_predictor(train_frames)(test_frames)
        preds[test_idx] = fold_pred
        fold_mpjpe[held_out] = mpjpe(fold_pred, truths[test_idx])
        if verbose:
            print(
                f"[cv] method={method} fold={fold + 1}/{len(pids)} "
                f"held_out={held_out} mpjpe={fold_mpjpe[held_out]:.2f} mm",
                flush=True,
            )

    supine, seated = _posture_split(frames)
    joint_stats = {}
    for posture, idx in (("supine", supine), ("seated", seated)):
        if idx:
            joint_stats[posture] = per_joint_error(preds[idx], truths[idx])
        else:
            joint_stats[posture] = (np.full(10, np.nan), np.full(10, np.nan))
    joint_stats["overall"] = per_joint_error(preds, truths)

    return EvalReport(
        method=method,
        seed=seed,
        participants=pids,
        n_frames=len(frames),
        mpjpe_supine=mpjpe(preds[supine], truths[supine]) if supine else float("nan"),
        mpjpe_seated=mpjpe(preds[seated], truths[seated]) if seated else float("nan"),
        mpjpe_overall=mpjpe(preds, truths),
        joint_stats=joint_stats,
        fold_mpjpe=fold_mpjpe,
        runtime_s=time.time() - t0,
    )


def evaluate_on(frames, predictions) -> EvalReport:
    """Report for precomputed predictions over a frame list (no folds)."""
    truths = np.stack([f.joints for f in frames])
    preds = np.asarray(predictions)
    supine, seated = _posture_split(frames)
    joint_stats = {}
    for posture, idx in (("supine", supine), ("seated", seated)):
        if idx:
            joint_stats[posture] = per_joint_error(preds[idx], truths[idx])
        else:
            joint_stats[posture] = (np.full(10, np.nan), np.full(10, np.nan))
    joint_stats["overall"] = per_joint_error(preds, truths)
    pids = sorted({f.image.participant_id for f in frames})
    return EvalReport(
        method="precomputed",
        seed=0,
        participants=pids,
        n_frames=len(frames),
        mpjpe_supine=mpjpe(preds[supine], truths[supine]) if supine else float("nan"),
        mpjpe_seated=mpjpe(preds[seated], truths[seated]) if seated else float("nan"),
        mpjpe_overall=mpjpe(preds, truths),
        joint_stats=joint_stats,
        fold_mpjpe={p: float("nan") for p in pids},
    )
