"""Flat key = value experiment configuration files.

Sections: [experiment] method/dataset/seed/passes/out, [net] training
hyperparameters, [baselines] HOG and regressor settings, [simulate]
synthetic dataset size. Every key is optional; the PMPOSE_SEED
environment variable overrides the seed from any source.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

from .baselines import HogConfig
from .data import AugmentParams
from .nets import ConvNetConfig


class ValidationError(ValueError):
    """Bad configuration or arguments; maps to CLI exit code 1."""


@dataclass
class ExperimentConfig:
    method: str = "direct"
    dataset: str | None = None
    seed: int = 0
    passes: int = 1
    out: str | None = None
    net: ConvNetConfig = field(default_factory=ConvNetConfig)
    hog: HogConfig = field(default_factory=HogConfig)
    knn_k: int = 10
    lrr_alpha: float = 0.7
    krr_alpha: float = 0.4
    krr_gamma: float | None = None
    baseline_copies: int = 1
    pretrain_epochs: int = 10
    sim_participants: int = 5
    sim_frames: int = 400


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    if raw == "":
        return default
    if cast is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    try:
        return cast(raw)
    except ValueError as exc:
        raise ValidationError(f"[{section}] {key}: {exc}") from exc


def load_config(path: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ValidationError(f"config file not found: {path}")
        parser.read(path)

    cfg.method = _get(parser, "experiment", "method", str, cfg.method)
    cfg.dataset = _get(parser, "experiment", "dataset", str, cfg.dataset)
    cfg.seed = _get(parser, "experiment", "seed", int, cfg.seed)
    cfg.passes = _get(parser, "experiment", "passes", int, cfg.passes)
    cfg.out = _get(parser, "experiment", "out", str, cfg.out)

    net = cfg.net
    aug_on = _get(parser, "net", "augment", bool, True)
    augment = AugmentParams(
        flip_prob=_get(parser, "net", "flip_prob", float, 0.5),
        shift_sigma=_get(parser, "net", "shift_sigma", float, 0.0286),
        scale_sigma=_get(parser, "net", "scale_sigma", float, 0.06),
        noise_sigma=_get(parser, "net", "noise_sigma", float, 1.0),
    )
    cfg.net = ConvNetConfig(
        variant=net.variant,
        dropout_p=_get(parser, "net", "dropout_p", float, net.dropout_p),
        alpha=_get(parser, "net", "alpha", float, net.alpha),
        beta=_get(parser, "net", "beta", float, net.beta),
        learning_rate=_get(parser, "net", "learning_rate", float, net.learning_rate),
        weight_decay=_get(parser, "net", "weight_decay", float, net.weight_decay),
        epochs=_get(parser, "net", "epochs", int, net.epochs),
        batch_size=_get(parser, "net", "batch_size", int, net.batch_size),
        seed=cfg.seed,
        frames_per_epoch=_get(parser, "net", "frames_per_epoch", int, None),
        augment=augment if aug_on else None,
    )

    cfg.hog = HogConfig(
        cell_size=_get(parser, "baselines", "hog_cell", int, 8),
        block_size=_get(parser, "baselines", "hog_block", int, 2),
        orientation_bins=_get(parser, "baselines", "hog_bins", int, 9),
        block_norm=_get(parser, "baselines", "hog_l2", bool, True),
    )
    cfg.knn_k = _get(parser, "baselines", "knn_k", int, cfg.knn_k)
    cfg.lrr_alpha = _get(parser, "baselines", "lrr_alpha", float, cfg.lrr_alpha)
    cfg.krr_alpha = _get(parser, "baselines", "krr_alpha", float, cfg.krr_alpha)
    cfg.krr_gamma = _get(parser, "baselines", "krr_gamma", float, None)
    cfg.baseline_copies = _get(
        parser, "baselines", "augment_copies", int, cfg.baseline_copies
    )
    cfg.pretrain_epochs = _get(
        parser, "experiment", "pretrain_epochs", int, cfg.pretrain_epochs
    )
    cfg.sim_participants = _get(
        parser, "simulate", "participants", int, cfg.sim_participants
    )
    cfg.sim_frames = _get(
        parser, "simulate", "frames_per_participant", int, cfg.sim_frames
    )

    env_seed = os.environ.get("PMPOSE_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ValidationError(f"PMPOSE_SEED: {exc}") from exc
        cfg.net = replace(cfg.net, seed=cfg.seed)
    return cfg
