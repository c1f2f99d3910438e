"""ConvNet pose regressors: architectures, losses, training, checkpoints.

Two architectures share one conv trunk: the direct variant regresses the
10 labeled 3D positions; the kinematic variants regress a root position
plus 20 joint angles (and optionally 17 link lengths) that a forward-
kinematics layer turns into all 17 joint positions. Gradients flow
through that layer via the skeleton module's analytic Jacobian, so
training performs inverse kinematics by gradient descent.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from . import skeleton
from .data import (
    AugmentParams,
    ConfigurationError,
    InputStack,
    LabeledFrame,
    MatGeometry,
    NormStats,
    PressureImage,
    augment,
    build_input_stack,
    derive_rng,
    fit_normalization,
)
from .skeleton import (
    LABELED_JOINT_INDICES,
    N_DOFS,
    N_LENGTHS,
    LinkLengths,
    approximate_link_lengths,
    fk_jacobian,
    forward_kinematics,
)

VARIANTS = ("direct", "kinematic_const_l", "kinematic_regress_l")
_OUT_DIMS = {"direct": 30, "kinematic_const_l": 23, "kinematic_regress_l": 40}
CHECKPOINT_MAGIC = b"PMPOSE01"
BASELINE_MAGIC = b"PMBASE01"
_MIN_LENGTH = 1e-4  # floor under the softplus length head


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvNetConfig:
    variant: str = "direct"
    dropout_p: float = 0.10
    alpha: float = 0.5
    beta: float = 0.5
    learning_rate: float = 2e-5
    weight_decay: float = 5e-4
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    #: balanced sampling cap per participant per epoch; None uses the
    #: smallest participant's frame count
    frames_per_epoch: int | None = None
    augment: AugmentParams | None = AugmentParams()
    #: optional step decay: multiply the learning rate by lr_decay_factor
    #: once, at this epoch index
    lr_decay_epoch: int | None = None
    lr_decay_factor: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if self.variant == "kinematic_const_l" and self.beta != 0.0:
            raise ConfigurationError("constant-length variant requires beta = 0")

    @property
    def out_dim(self) -> int:
        return _OUT_DIMS[self.variant]


def _keep_mask(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Exact iid Bernoulli(1-p) keep mask via geometric gap skipping.

    Drawing one geometric gap per dropped element needs ~p*n random
    numbers instead of n, which keeps test-time Monte Carlo passes fast.
    """
    keep = np.ones(n, dtype=bool)
    if p <= 0.0 or n == 0:
        return keep
    log_keep = np.log1p(-p)
    pos = 0
    chunk = max(int(n * p * 1.25) + 16, 16)
    while pos < n:
        u = np.maximum(rng.random(chunk, dtype=np.float64), 1e-300)
        gaps = np.floor(np.log(u) / log_keep).astype(np.int64) + 1
        steps = pos + np.cumsum(gaps)
        hits = steps[steps <= n]
        keep[hits - 1] = False
        if len(steps) == 0 or steps[-1] > n:
            break
        pos = int(steps[-1])
    return keep


def make_dropout_rng(seed: int) -> np.random.Generator:
    """Dropout-mask random stream (fast bit generator, fixed seeding)."""
    return np.random.Generator(np.random.SFC64(seed))


class PoseConvNet(nn.Module):
    """Four 3x3 conv layers (64, 64, 128, 128), two max-pools, linear head.

    Pooling sits after the first two convs; pooling early keeps the
    deeper 128-channel layers and the linear head small enough for
    sub-second CPU inference. Dropout is applied functionally after
    every conv ReLU so that test-time stochastic passes can draw masks
    from caller-supplied generators (one numpy Generator per pass for
    Monte Carlo dropout).
    """

    def __init__(self, out_dim: int, dropout_p: float = 0.10):
        super().__init__()
        self.out_dim = out_dim
        self.dropout_p = dropout_p
        self.conv1 = nn.Conv2d(3, 64, 3, padding=1)
        self.conv2 = nn.Conv2d(64, 64, 3)
        self.conv3 = nn.Conv2d(64, 128, 3)
        self.conv4 = nn.Conv2d(128, 128, 3)
        self.pool = nn.MaxPool2d(2)
        self.fc = nn.Linear(128 * 27 * 8, out_dim)

    def _dropout(self, x, gens):
        p = self.dropout_p
        if gens is None or p == 0.0:
            return x
        per_item = int(np.prod(x.shape[1:]))
        if isinstance(gens, (list, tuple)):
            if len(gens) != x.shape[0]:
                raise ValueError("need one dropout generator per batch element")
            mask = np.stack([_keep_mask(per_item, p, g) for g in gens])
        else:
            mask = _keep_mask(x.shape[0] * per_item, p, gens)
        mask_t = torch.from_numpy(mask.reshape(x.shape))
        return x * mask_t / (1.0 - p)

    def forward(self, x, dropout_gens=None):
        x = self._dropout(torch.relu(self.conv1(x)), dropout_gens)
        x = self.pool(x)
        x = self._dropout(torch.relu(self.conv2(x)), dropout_gens)
        x = self.pool(x)
        x = self._dropout(torch.relu(self.conv3(x)), dropout_gens)
        x = self._dropout(torch.relu(self.conv4(x)), dropout_gens)
        return self.fc(x.flatten(1))


def parameter_count(out_dim: int) -> int:
    return sum(
        p.numel() for p in PoseConvNet(out_dim).parameters()
    )


class _FkLayer(torch.autograd.Function):
    """Batched FK with the analytic Jacobian as the backward pass."""

    @staticmethod
    def forward(ctx, root, angles, lengths):
        b = root.shape[0]
        dtype = root.dtype
        out = torch.empty(b, skeleton.N_JOINTS, 3, dtype=dtype)
        jac = torch.empty(b, skeleton.N_JOINTS * 3, 40, dtype=dtype)
        for i in range(b):
            r = root[i].detach().numpy().astype(np.float64)
            phi = angles[i].detach().numpy().astype(np.float64)
            l = lengths[i].detach().numpy().astype(np.float64)
            pose = forward_kinematics(r, phi, LinkLengths(l))
            out[i] = torch.from_numpy(pose.all_joints).to(dtype)
            jac[i] = torch.from_numpy(fk_jacobian(r, phi, LinkLengths(l))).to(dtype)
        ctx.save_for_backward(jac)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        (jac,) = ctx.saved_tensors
        flat = grad_out.reshape(grad_out.shape[0], -1, 1)
        grads = (jac.transpose(1, 2) @ flat).squeeze(-1)
        return grads[:, 0:3], grads[:, 3 : 3 + N_DOFS], grads[:, 3 + N_DOFS :]


def _fk_batch(root, angles, lengths):
    if torch.is_grad_enabled() and (
        root.requires_grad or angles.requires_grad or lengths.requires_grad
    ):
        return _FkLayer.apply(root, angles, lengths)
    out = torch.empty(root.shape[0], skeleton.N_JOINTS, 3, dtype=root.dtype)
    for i in range(root.shape[0]):
        pose = forward_kinematics(
            root[i].numpy().astype(np.float64),
            angles[i].numpy().astype(np.float64),
            LinkLengths(lengths[i].numpy().astype(np.float64)),
        )
        out[i] = torch.from_numpy(pose.all_joints).to(root.dtype)
    return out


@dataclass
class NetworkOutput:
    """Per-variant decoding of the raw head outputs for one frame."""

    raw: np.ndarray
    labeled_positions: np.ndarray  # (10, 3)
    all_joints: np.ndarray | None = None  # (17, 3), kinematic variants
    root: np.ndarray | None = None
    angles: np.ndarray | None = None
    lengths: np.ndarray | None = None


@dataclass
class TrainedNet:
    """A trained network plus everything needed to run it on raw frames."""

    config: ConvNetConfig
    model: PoseConvNet
    norm: NormStats
    geom: MatGeometry
    l_star: np.ndarray | None = None  # constant-length variant only

    def stack_for(self, image: PressureImage) -> InputStack:
        if self.norm is None:
            raise ConfigurationError("model has no normalization constants")
        return build_input_stack(image, self.geom, self.norm)


def _decode_batch(net: TrainedNet, raw: torch.Tensor):
    """Map raw head outputs to labeled joint positions (and pose pieces)."""
    cfg = net.config
    if cfg.variant == "direct":
        labeled = raw.reshape(-1, 10, 3)
        return labeled, None, None, None, None
    root = raw[:, 0:3]
    angles = raw[:, 3 : 3 + N_DOFS]
    if cfg.variant == "kinematic_regress_l":
        lengths = torch.nn.functional.softplus(raw[:, 3 + N_DOFS :]) + _MIN_LENGTH
    else:
        l_star = torch.as_tensor(net.l_star, dtype=raw.dtype)
        lengths = l_star.unsqueeze(0).expand(raw.shape[0], N_LENGTHS)
    all_joints = _fk_batch(root, angles, lengths)
    labeled = all_joints[:, list(LABELED_JOINT_INDICES)]
    return labeled, all_joints, root, angles, lengths


def network_forward(
    net: TrainedNet,
    stack: InputStack,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
) -> NetworkOutput:
    """Single-frame forward pass; deterministic when dropout is off."""
    x = torch.from_numpy(stack.channels).unsqueeze(0)
    gens = None
    if dropout_active:
        gens = rng if rng is not None else make_dropout_rng(0)
    net.model.eval()
    with torch.no_grad():
        raw = net.model(x, gens)
        labeled, all_joints, root, angles, lengths = _decode_batch(net, raw)
    return NetworkOutput(
        raw=raw[0].numpy(),
        labeled_positions=labeled[0].numpy(),
        all_joints=None if all_joints is None else all_joints[0].numpy(),
        root=None if root is None else root[0].numpy(),
        angles=None if angles is None else angles[0].numpy(),
        lengths=None if lengths is None else lengths[0].numpy(),
    )


def loss_direct(pred, truth):
    """Sum over joints of the Euclidean position error (batch mean)."""
    p = torch.as_tensor(pred)
    t = torch.as_tensor(truth)
    if p.shape != t.shape:
        raise ValueError("prediction and truth shapes differ")
    if p.dim() == 2:
        p, t = p.unsqueeze(0), t.unsqueeze(0)
    loss = torch.linalg.vector_norm(p - t, dim=2).sum(dim=1).mean()
    return loss if isinstance(pred, torch.Tensor) else float(loss)


def loss_kinematic(pred_labeled, pred_lengths, truth_labeled, truth_lengths,
                   alpha: float, beta: float):
    """Root error + alpha * other labeled-joint errors + beta * length L1.

    The root (chest) term is unweighted; the 7 unlabeled joints do not
    appear. beta = 0 makes the loss independent of the length estimate.
    """
    p = torch.as_tensor(pred_labeled)
    t = torch.as_tensor(truth_labeled)
    was_numpy = not isinstance(pred_labeled, torch.Tensor)
    if p.dim() == 2:
        p, t = p.unsqueeze(0), t.unsqueeze(0)
    err = torch.linalg.vector_norm(p - t, dim=2)  # (B, 10)
    chest = skeleton.LABELED_JOINT_INDICES.index(0)
    root_term = err[:, chest]
    other = err.sum(dim=1) - root_term
    loss = root_term + alpha * other
    if beta != 0.0:
        pl = torch.as_tensor(pred_lengths)
        tl = torch.as_tensor(truth_lengths)
        if pl.dim() == 1:
            pl, tl = pl.unsqueeze(0), tl.unsqueeze(0)
        loss = loss + beta * torch.abs(pl - tl).sum(dim=1)
    loss = loss.mean()
    return float(loss) if was_numpy else loss


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(np.maximum(y, 1e-6)))


def _build_model(
    cfg: ConvNetConfig,
    geom: MatGeometry,
    ref_lengths: np.ndarray,
    mean_labeled: np.ndarray | None = None,
):
    """Seeded construction; head biased so the initial output is the rest
    pose at the training set's mean position (mat center if unknown)."""
    torch.manual_seed(cfg.seed)
    model = PoseConvNet(cfg.out_dim, cfg.dropout_p)
    with torch.no_grad():
        model.fc.weight.mul_(0.1)
        if mean_labeled is None:
            mean_labeled = np.tile(
                [geom.width / 2.0, geom.length / 2.0, 0.12], (10, 1)
            )
        bias = np.zeros(cfg.out_dim)
        if cfg.variant == "direct":
            bias = mean_labeled.ravel()
        else:
            bias[0:3] = mean_labeled[1]  # chest slot of the labeled order
            if cfg.variant == "kinematic_regress_l":
                bias[3 + N_DOFS :] = _softplus_inv(ref_lengths - _MIN_LENGTH)
        model.fc.bias.copy_(torch.from_numpy(bias).float())
    return model.to(memory_format=torch.channels_last)


def _load_compatible(model: PoseConvNet, source: PoseConvNet):
    """Copy conv trunk always; copy the head rows shared across variants."""
    with torch.no_grad():
        for name in ("conv1", "conv2", "conv3", "conv4"):
            getattr(model, name).load_state_dict(getattr(source, name).state_dict())
        src_w, src_b = source.fc.weight, source.fc.bias
        n = model.fc.out_features
        if src_w.shape[0] >= n:
            model.fc.weight.copy_(src_w[:n])
            model.fc.bias.copy_(src_b[:n])


def _balanced_indices(by_participant: dict, n_per: int, rng: np.random.Generator):
    chosen = []
    for pid in sorted(by_participant):
        idx = by_participant[pid]
        take = rng.choice(len(idx), size=n_per, replace=n_per > len(idx))
        chosen.extend(idx[i] for i in take)
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


def _stack_batch(frames, cfg, geom, norm, epoch, train_mode):
    """Augment, featurize and collate one batch.

    Also reports the per-frame body-scale factor the augmentation
    applied (recovered from the elbow-wrist label distance), so length
    supervision can track scaled labels.
    """
    xs, joints, pids, scales = [], [], [], []
    for f in frames:
        scale = 1.0
        if train_mode and cfg.augment is not None:
            params = replace(cfg.augment, seated=f.image.bed_angle > 0)
            aug = augment(f, params, derive_rng(cfg.seed, f.image.frame_id, epoch), geom)
            ref = float(np.linalg.norm(f.joints[2] - f.joints[4]))
            if ref > 1e-9:
                scale = float(np.linalg.norm(aug.joints[2] - aug.joints[4])) / ref
            f = aug
        xs.append(build_input_stack(f.image, geom, norm).channels)
        joints.append(f.joints)
        pids.append(f.image.participant_id)
        scales.append(scale)
    x = torch.from_numpy(np.stack(xs)).contiguous(memory_format=torch.channels_last)
    return x, torch.from_numpy(np.stack(joints)).float(), pids, np.array(scales)


def train(
    config: ConvNetConfig,
    frames,
    geom: MatGeometry | None = None,
    init: TrainedNet | None = None,
):
    """Adam training with balanced per-participant sampling.

    Each epoch draws the same number of (augmented) frames from every
    participant. Kinematic variants backpropagate through the FK layer;
    their length ground truth is the per-participant approximation from
    the training fold. Deterministic for a fixed config seed.
    Returns (TrainedNet, per-epoch mean loss history).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("training set is empty")
    if geom is None:
        geom = MatGeometry()
    cfg = config
    norm = fit_normalization(frames, geom)

    by_pid = {}
    for i, f in enumerate(frames):
        by_pid.setdefault(f.image.participant_id, []).append(i)
    kinematic = cfg.variant != "direct"
    lengths_by_pid = {}
    if kinematic:
        for pid, idx in by_pid.items():
            lengths_by_pid[pid] = approximate_link_lengths(
                [frames[i] for i in idx]
            ).l
        counts = {pid: len(idx) for pid, idx in by_pid.items()}
        total = sum(counts.values())
        l_star = sum(lengths_by_pid[p] * c for p, c in counts.items()) / total
    else:
        l_star = None

    ref = l_star if l_star is not None else LinkLengths.from_stature(1.7).l
    mean_labeled = np.stack([f.joints for f in frames]).mean(axis=0)
    model = _build_model(cfg, geom, ref, mean_labeled)
    if init is not None:
        _load_compatible(model, init.model)
    net = TrainedNet(
        config=cfg,
        model=model,
        norm=norm,
        geom=geom,
        l_star=l_star if cfg.variant == "kinematic_const_l" else None,
    )

    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    drop_gen = make_dropout_rng(cfg.seed * 7919 + 1)
    sample_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5A17)))
    n_per = cfg.frames_per_epoch or min(len(v) for v in by_pid.values())

    history = []
    model.train()
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_epoch is not None and epoch == cfg.lr_decay_epoch:
            for group in opt.param_groups:
                group["lr"] *= cfg.lr_decay_factor
        order = _balanced_indices(by_pid, n_per, sample_rng)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [frames[i] for i in order[start : start + cfg.batch_size]]
            x, truth, pids, scales = _stack_batch(batch, cfg, geom, norm, epoch, True)
            raw = model(x, drop_gen if cfg.dropout_p > 0 else None)
            labeled, _, _, _, lengths = _decode_batch(net, raw)
            if kinematic:
                true_l = torch.from_numpy(
                    np.stack(
                        [lengths_by_pid[p] * s for p, s in zip(pids, scales)]
                    )
                ).float()
                loss = loss_kinematic(
                    labeled, lengths, truth, true_l, cfg.alpha, cfg.beta
                )
            else:
                loss = loss_direct(labeled, truth)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.append(epoch_loss / max(1, n_batches))
    model.eval()
    return net, history


def pretrain_then_specialize(design_frames, geom: MatGeometry | None = None,
                             seed: int = 0, epochs: int = 10,
                             base: ConvNetConfig | None = None) -> TrainedNet:
    """Train the kinematically embedded net (alpha = beta = 0.5) on the
    design set; the result initializes both kinematic variants."""
    cfg = base if base is not None else ConvNetConfig()
    cfg = replace(
        cfg,
        variant="kinematic_regress_l",
        alpha=0.5,
        beta=0.5,
        epochs=epochs,
        seed=seed,
    )
    net, _ = train(cfg, design_frames, geom)
    return net


def predict(
    net: TrainedNet,
    image: PressureImage,
    geom: MatGeometry | None = None,
    passes: int = 1,
    seed: int = 0,
):
    """Pose estimate for one frame: deterministic single pass, or Monte
    Carlo dropout statistics when passes > 1."""
    from .uncertainty import mc_dropout  # local import, avoids module cycle

    if geom is not None and geom != net.geom:
        raise ConfigurationError("geometry does not match the trained model")
    stack = net.stack_for(image)
    if passes > 1:
        return mc_dropout(net, stack, passes, seed=seed, frame_id=image.frame_id)
    out = network_forward(net, stack)
    joints = out.all_joints if out.all_joints is not None else out.labeled_positions
    from .uncertainty import PoseEstimate

    return PoseEstimate(
        mean_pose=joints,
        labeled_mean=out.labeled_positions,
        per_joint_std=np.zeros(len(joints)),
        passes=1,
    )


# ---------------------------------------------------------------------------
# checkpoint container: magic, u32 header length, JSON header, f32 blobs
# ---------------------------------------------------------------------------


def _write_container(path, magic: bytes, header: dict, arrays):
    blob = io.BytesIO()
    shapes = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        shapes.append({"name": name, "shape": list(arr.shape)})
        blob.write(arr.tobytes())
    header = dict(header, params=shapes)
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob.getvalue())


def _read_container(path, magic: bytes):
    with open(path, "rb") as fh:
        if fh.read(8) != magic:
            raise ConfigurationError(f"bad magic, expected {magic.decode()}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ConfigurationError("truncated parameter blob")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=np.float32).reshape(shape)
    return header, arrays


def save_checkpoint(net: TrainedNet, path) -> None:
    cfg = net.config
    header = {
        "format": 1,
        "variant": cfg.variant,
        "config": {
            "dropout_p": cfg.dropout_p,
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "learning_rate": cfg.learning_rate,
            "weight_decay": cfg.weight_decay,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
        },
        "geom": {"taxel_pitch": net.geom.taxel_pitch, "bend_row": net.geom.bend_row},
        "norm": {"means": list(net.norm.means), "stds": list(net.norm.stds)},
        "topology": {
            "joints": list(skeleton.JOINT_NAMES),
            "dofs": list(skeleton.DOF_NAMES),
            "lengths": list(skeleton.LENGTH_NAMES),
        },
        "l_star": None if net.l_star is None else [float(v) for v in net.l_star],
    }
    arrays = [(k, v.detach().numpy()) for k, v in net.model.state_dict().items()]
    _write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path) -> TrainedNet:
    header, arrays = _read_container(path, CHECKPOINT_MAGIC)
    cfg = ConvNetConfig(variant=header["variant"], **header["config"])
    geom = MatGeometry(**header["geom"])
    norm = NormStats(
        means=tuple(header["norm"]["means"]), stds=tuple(header["norm"]["stds"])
    )
    model = PoseConvNet(cfg.out_dim, cfg.dropout_p)
    state = {}
    for key, ref in model.state_dict().items():
        if key not in arrays:
            raise ConfigurationError(f"checkpoint missing parameter {key}")
        if tuple(arrays[key].shape) != tuple(ref.shape):
            raise ConfigurationError(f"checkpoint shape mismatch for {key}")
        state[key] = torch.from_numpy(arrays[key].copy())
    model.load_state_dict(state)
    model = model.to(memory_format=torch.channels_last)
    model.eval()
    l_star = header.get("l_star")
    return TrainedNet(
        config=cfg,
        model=model,
        norm=norm,
        geom=geom,
        l_star=None if l_star is None else np.asarray(l_star, dtype=np.float64),
    )
