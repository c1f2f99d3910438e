"""Monte Carlo dropout pose uncertainty, group tests, joint discarding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .data import InputStack
from .nets import TrainedNet, _decode_batch, make_dropout_rng


@dataclass
class PoseEstimate:
    """Mean pose over V stochastic passes with a per-joint spread scalar.

    per_joint_std[j] is the standard deviation (meters) of the per-pass
    Euclidean distance from the mean position of joint j. covariances
    (per-joint 3x3, optional) are kept for debugging output only.
    """

    mean_pose: np.ndarray  # (J, 3); J = 17 kinematic, 10 direct
    labeled_mean: np.ndarray  # (10, 3)
    per_joint_std: np.ndarray  # (J,)
    passes: int
    covariances: np.ndarray | None = None

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if np.any(self.per_joint_std < 0):
            raise ValueError("per-joint std must be >= 0")


def mc_dropout(
    net: TrainedNet,
    stack: InputStack,
    passes: int,
    seed: int = 0,
    frame_id: int = 0,
) -> PoseEstimate:
    """V stochastic forward passes with dropout active at test time.

    The V passes run as one batch; pass v draws its dropout masks from an
    independent generator seeded by (seed, frame_id, v), so results do
    not depend on batching or pass order.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    x = torch.from_numpy(stack.channels).unsqueeze(0).repeat(passes, 1, 1, 1)
    x = x.contiguous(memory_format=torch.channels_last)
    gens = [
        make_dropout_rng(
            int(np.random.SeedSequence((seed, frame_id, v)).generate_state(1)[0])
        )
        for v in range(passes)
    ]
    net.model.eval()
    with torch.no_grad():
        raw = net.model(x, gens if net.config.dropout_p > 0 else None)
        labeled, all_joints, _, _, _ = _decode_batch(net, raw)
    samples = (all_joints if all_joints is not None else labeled).numpy()
    labeled = labeled.numpy()
    mean, std, cov = pose_statistics(samples)
    return PoseEstimate(
        mean_pose=mean,
        labeled_mean=labeled.mean(axis=0),
        per_joint_std=std,
        passes=passes,
        covariances=cov,
    )


def pose_statistics(samples: np.ndarray):
    """First/second moments of a (V, J, 3) stack of pose samples.

    Returns (mean (J,3), per-joint std of the Euclidean distance from the
    mean (J,), per-joint 3x3 covariance (J,3,3)). Symmetric in the pass
    order by construction.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[2] != 3:
        raise ValueError("expected a (V, J, 3) sample stack")
    mean = samples.mean(axis=0)
    dists = np.linalg.norm(samples - mean[None], axis=2)  # (V, J)
    std = dists.std(axis=0)
    centered = samples - mean[None]
    cov = np.einsum("vji,vjk->jik", centered, centered) / samples.shape[0]
    return mean, std, cov


@dataclass
class TTestResult:
    t: float
    p: float
    larger: str  # "a", "b", or "equal"
    degenerate: bool = False


def uncertainty_ttest(group_a: np.ndarray, group_b: np.ndarray) -> TTestResult:
    """Welch two-sample t-test on per-frame uncertainty samples.

    Reports which group has the larger mean. If both groups have zero
    variance the statistic is undefined and the result is flagged
    degenerate (t and p are NaN).
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 samples")
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        return TTestResult(t=float("nan"), p=float("nan"),
                           larger="equal" if a.mean() == b.mean() else
                           ("a" if a.mean() > b.mean() else "b"),
                           degenerate=True)
    t, p = stats.ttest_ind(a, b, equal_var=False)
    larger = "equal" if a.mean() == b.mean() else ("a" if a.mean() > b.mean() else "b")
    return TTestResult(t=float(t), p=float(p), larger=larger)


def per_joint_ttest(stds_a: np.ndarray, stds_b: np.ndarray):
    """Welch test per joint for two (frames, joints) uncertainty stacks."""
    a = np.atleast_2d(np.asarray(stds_a))
    b = np.atleast_2d(np.asarray(stds_b))
    if a.shape[1] != b.shape[1]:
        raise ValueError("groups must cover the same joints")
    return [uncertainty_ttest(a[:, j], b[:, j]) for j in range(a.shape[1])]


def discard_curve(estimates, truths, thresholds):
    """Error / retention trade-off as high-uncertainty joints are dropped.

    For each threshold, joints whose per_joint_std exceeds it are
    discarded; returns a list of (threshold, mean Euclidean error in mm
    over retained joints or NaN if none, fraction retained).
    """
    estimates = list(estimates)
    truths = [np.asarray(t) for t in truths]
    if not estimates or len(estimates) != len(truths):
        raise ValueError("need matching non-empty estimates and truths")
    errs, stds = [], []
    for est, truth in zip(estimates, truths):
        joints = est.labeled_mean if truth.shape[0] == 10 else est.mean_pose
        if joints.shape != truth.shape:
            raise ValueError("estimate/truth joint count mismatch")
        errs.append(np.linalg.norm(joints - truth, axis=1))
        std = est.per_joint_std
        if std.shape[0] != truth.shape[0]:
            # kinematic estimates carry 17 stds; select the labeled ones
            from .skeleton import LABELED_JOINT_INDICES

            std = std[list(LABELED_JOINT_INDICES)]
        stds.append(std)
    errs = np.concatenate(errs)
    stds = np.concatenate(stds)
    out = []
    for thr in thresholds:
        keep = stds <= thr
        frac = float(keep.mean())
        mean_err = float(errs[keep].mean() * 1000.0) if keep.any() else float("nan")
        out.append((float(thr), mean_err, frac))
    return out


def write_uncertainty_csv(path, frame_ids, estimates, joint_names):
    """Per-joint uncertainty report: frame, joint, mean xyz, std."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame_id,joint_name,mean_x,mean_y,mean_z,std\n")
        for fid, est in zip(frame_ids, estimates):
            for j, name in enumerate(joint_names):
                m = est.mean_pose[j]
                fh.write(
                    f"{fid},{name},{m[0]:.6f},{m[1]:.6f},{m[2]:.6f},"
                    f"{est.per_joint_std[j]:.6f}\n"
                )
