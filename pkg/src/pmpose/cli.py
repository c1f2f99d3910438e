"""Command-line interface tying the package together.

Subcommands: simulate, train, eval, cv, infer, uncertainty-test,
discard-curve, ambiguity-demo. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import evaluate, simulator, skeleton, uncertainty
from .config import ExperimentConfig, ValidationError, load_config
from .data import MatGeometry, read_dataset
from .nets import load_checkpoint, save_checkpoint, train
from .simulator import PendulumArm, generate_dataset, pendulum_pressure

METHOD_CHOICES = ("direct", "kin-const", "kin-regress", "knn", "lrr", "krr")


def _build_parser():
    p = argparse.ArgumentParser(prog="pmpose")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, dataset=False, checkpoint=False, method=False, out=False):
        sp.add_argument("--config", default=None, help="experiment config file")
        sp.add_argument("--seed", type=int, default=None)
        if dataset:
            sp.add_argument("--dataset", default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", default=None)
        if method:
            sp.add_argument("--method", choices=METHOD_CHOICES, default=None)
        if out:
            sp.add_argument("--out", default=None)

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(sp, out=True)
    sp.add_argument("--participants", type=int, default=None)
    sp.add_argument("--frames", type=int, default=None,
                    help="frames per participant")

    sp = sub.add_parser("train", help="train one model, write a checkpoint")
    common(sp, dataset=True, method=True, out=True)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp, dataset=True, checkpoint=True, out=True)
    sp.add_argument("--passes", type=int, default=1)

    sp = sub.add_parser("cv", help="leave-one-participant-out cross validation")
    common(sp, dataset=True, method=True, out=True)

    sp = sub.add_parser("infer", help="single-frame pose + uncertainty CSV")
    common(sp, dataset=True, checkpoint=True, out=True)
    sp.add_argument("--frame", type=int, default=0, help="frame_id to estimate")
    sp.add_argument("--passes", type=int, default=25)

    sp = sub.add_parser("uncertainty-test",
                        help="elevated vs in-contact Welch t-test")
    common(sp, dataset=True, checkpoint=True, out=True)
    sp.add_argument("--passes", type=int, default=25)

    sp = sub.add_parser("discard-curve",
                        help="error/retention sweep over uncertainty cutoffs")
    common(sp, dataset=True, checkpoint=True, out=True)
    sp.add_argument("--passes", type=int, default=25)
    sp.add_argument("--levels", type=int, default=12)

    sp = sub.add_parser("ambiguity-demo",
                        help="pendulum pressure-ambiguity printout")
    common(sp)
    return p


def _load(cfg_path, args) -> ExperimentConfig:
    cfg = load_config(cfg_path)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.net = replace(cfg.net, seed=args.seed)
    if os.environ.get("PMPOSE_SEED") is not None:
        cfg.seed = int(os.environ["PMPOSE_SEED"])
        cfg.net = replace(cfg.net, seed=cfg.seed)
    for key in ("dataset", "method", "out"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "passes", None) is not None:
        cfg.passes = args.passes
    return cfg


def _require_dataset(cfg):
    if not cfg.dataset:
        raise ValidationError("--dataset is required")
    if not os.path.exists(cfg.dataset):
        raise ValidationError(f"dataset not found: {cfg.dataset}")
    return read_dataset(cfg.dataset)


def _cmd_simulate(args):
    cfg = _load(args.config, args)
    if not cfg.out:
        raise ValidationError("--out is required for simulate")
    n_p = args.participants if args.participants is not None else cfg.sim_participants
    n_f = args.frames if args.frames is not None else cfg.sim_frames
    frames, _ = generate_dataset(n_p, n_f, cfg.seed, cfg.out)
    print(f"wrote {len(frames)} frames to {cfg.out}")
    return 0


def _cmd_train(args):
    cfg = _load(args.config, args)
    if not cfg.out:
        raise ValidationError("--out is required for train")
    frames, geom = _require_dataset(cfg)
    if cfg.method in evaluate.NET_METHODS:
        net_cfg = replace(cfg.net, variant=evaluate.NET_METHODS[cfg.method])
        if net_cfg.variant == "kinematic_const_l":
            net_cfg = replace(net_cfg, beta=0.0)
        net, history = train(net_cfg, frames, geom)
        save_checkpoint(net, cfg.out)
        print(f"final training loss {history[-1]:.4f}; checkpoint at {cfg.out}")
    elif cfg.method in evaluate.BASELINE_METHODS:
        alpha = {"knn": None, "lrr": cfg.lrr_alpha, "krr": cfg.krr_alpha}[cfg.method]
        model = evaluate.fit_baseline(
            cfg.method, frames, geom, cfg.hog, k=cfg.knn_k, alpha=alpha,
            gamma=cfg.krr_gamma, augment_copies=cfg.baseline_copies, seed=cfg.seed,
        )
        evaluate.save_baseline(model, cfg.out)
        print(f"fitted {cfg.method} baseline; model at {cfg.out}")
    else:
        raise ValidationError(f"unknown method {cfg.method!r}")
    return 0


def _cmd_eval(args):
    cfg = _load(args.config, args)
    frames, geom = _require_dataset(cfg)
    ckpt = args.checkpoint
    if not ckpt or not os.path.exists(ckpt):
        raise ValidationError("--checkpoint is required and must exist")
    with open(ckpt, "rb") as fh:
        magic = fh.read(8)
    if magic == b"PMBASE01":
        model = evaluate.load_baseline(ckpt)
        preds = evaluate.baseline_predict(model, frames)
    else:
        net = load_checkpoint(ckpt)
        preds = evaluate.predict_frames(net, frames, passes=cfg.passes, seed=cfg.seed)
    report = evaluate.evaluate_on(frames, preds)
    _emit_report(report, cfg.out)
    return 0


def _cmd_cv(args):
    cfg = _load(args.config, args)
    frames, geom = _require_dataset(cfg)
    if cfg.method not in METHOD_CHOICES:
        raise ValidationError(f"--method must be one of {METHOD_CHOICES}")
    report = evaluate.lopo_cv(
        frames,
        geom,
        cfg.method,
        seed=cfg.seed,
        net_config=cfg.net,
        passes=cfg.passes,
        hog_cfg=cfg.hog,
        knn_k=cfg.knn_k,
        lrr_alpha=cfg.lrr_alpha,
        krr_alpha=cfg.krr_alpha,
        krr_gamma=cfg.krr_gamma,
        baseline_copies=cfg.baseline_copies,
        verbose=True,
    )
    _emit_report(report, cfg.out)
    print(f"runtime: {report.runtime_s:.1f} s", file=sys.stderr)
    return 0


def _emit_report(report, out):
    text = report.to_csv()
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"report written to {out}")
    else:
        sys.stdout.write(text)


def _cmd_infer(args):
    cfg = _load(args.config, args)
    frames, geom = _require_dataset(cfg)
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise ValidationError("--checkpoint is required and must exist")
    net = load_checkpoint(args.checkpoint)
    match = [f for f in frames if f.image.frame_id == args.frame]
    if not match:
        raise ValidationError(f"frame_id {args.frame} not in dataset")
    frame = match[0]
    est = uncertainty.mc_dropout(
        net, net.stack_for(frame.image), cfg.passes,
        seed=cfg.seed, frame_id=frame.image.frame_id,
    )
    names = (
        skeleton.JOINT_NAMES
        if est.mean_pose.shape[0] == skeleton.N_JOINTS
        else list(evaluate.LABELED_JOINT_NAMES)
    )
    out = cfg.out or "pose.csv"
    uncertainty.write_uncertainty_csv(out, [frame.image.frame_id], [est], names)
    print(f"pose estimate for frame {args.frame} written to {out}")
    return 0


def _families_from_provenance(path, frames):
    prov = path + ".prov"
    if not os.path.exists(prov):
        raise ValidationError(
            f"provenance sidecar {prov} is required to identify motion families"
        )
    fam = {}
    with open(prov, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("frame "):
                parts = line.split()
                fid = int(parts[1])
                kv = dict(x.split("=", 1) for x in parts[2:] if "=" in x)
                fam[fid] = kv.get("family", "")
    return [fam.get(f.image.frame_id, "") for f in frames]


def _cmd_uncertainty_test(args):
    cfg = _load(args.config, args)
    frames, geom = _require_dataset(cfg)
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise ValidationError("--checkpoint is required and must exist")
    net = load_checkpoint(args.checkpoint)
    fams = _families_from_provenance(cfg.dataset, frames)
    groups = {"leg_abduction_elevated": [], "leg_abduction_contact": []}
    for f, fam in zip(frames, fams):
        if fam in groups:
            groups[fam].append(f)
    if not groups["leg_abduction_elevated"] or not groups["leg_abduction_contact"]:
        raise ValidationError("dataset lacks elevated / contact abduction frames")

    def stds(fs):
        rows = []
        for f in fs:
            est = uncertainty.mc_dropout(
                net, net.stack_for(f.image), cfg.passes,
                seed=cfg.seed, frame_id=f.image.frame_id,
            )
            rows.append(est.per_joint_std)
        return np.stack(rows)

    elev = stds(groups["leg_abduction_elevated"])
    cont = stds(groups["leg_abduction_contact"])
    names = (
        skeleton.JOINT_NAMES
        if elev.shape[1] == skeleton.N_JOINTS
        else list(evaluate.LABELED_JOINT_NAMES)
    )
    tested = [n for n in ("knee_l", "knee_r", "ankle_l", "ankle_r") if n in names]
    lines = ["joint,t,p,larger_group"]
    for name in tested:
        j = names.index(name)
        res = uncertainty.uncertainty_ttest(elev[:, j], cont[:, j])
        larger = {"a": "elevated", "b": "contact", "equal": "equal"}[res.larger]
        lines.append(f"{name},{res.t:.6f},{res.p:.6g},{larger}")
    text = "\n".join(lines) + "\n"
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"t-test table written to {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_discard_curve(args):
    cfg = _load(args.config, args)
    frames, geom = _require_dataset(cfg)
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise ValidationError("--checkpoint is required and must exist")
    net = load_checkpoint(args.checkpoint)
    ests = [
        uncertainty.mc_dropout(
            net, net.stack_for(f.image), cfg.passes,
            seed=cfg.seed, frame_id=f.image.frame_id,
        )
        for f in frames
    ]
    truths = [f.joints for f in frames]
    all_stds = np.concatenate([
        e.per_joint_std if e.per_joint_std.shape[0] == 10
        else e.per_joint_std[list(skeleton.LABELED_JOINT_INDICES)]
        for e in ests
    ])
    thresholds = np.quantile(
        all_stds, np.linspace(1.0, 0.05, args.levels)
    )
    curve = uncertainty.discard_curve(ests, truths, thresholds)
    lines = ["threshold_m,mean_error_mm,retained_fraction"]
    for thr, err, frac in curve:
        lines.append(f"{thr:.6f},{err:.6f},{frac:.6f}")
    text = "\n".join(lines) + "\n"
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"discard curve written to {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_ambiguity_demo(args):
    geom = MatGeometry()
    theta1 = np.radians(75.0)
    up = PendulumArm(theta1=theta1, theta2=0.5)
    down = PendulumArm(theta1=theta1, theta2=-0.5)
    contact = PendulumArm(theta1=np.radians(40.0), theta2=-np.radians(43.0))
    p_up = pendulum_pressure(up, geom)
    p_down = pendulum_pressure(down, geom)
    p_contact = pendulum_pressure(contact, geom)
    print("Double-pendulum arm: reaction distribution P(x) over one taxel row")
    print("elbow-up   config:", np.array2string(p_up, precision=2))
    print("elbow-down config:", np.array2string(p_down, precision=2))
    print("identical while elevated:", bool(np.array_equal(p_up, p_down)))
    print("forearm-contact    :", np.array2string(p_contact, precision=2))
    print("changes on contact :", bool(not np.array_equal(p_up, p_contact)))
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "infer": _cmd_infer,
    "uncertainty-test": _cmd_uncertainty_test,
    "discard-curve": _cmd_discard_curve,
    "ambiguity-demo": _cmd_ambiguity_demo,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
