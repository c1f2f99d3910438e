"""Classical regression baselines over HOG features: KNN, LRR, KRR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import UP_COLS, UP_ROWS, ConfigurationError


@dataclass(frozen=True)
class HogConfig:
    """Histogram-of-oriented-gradients parameters.

    Cells that do not fit the image are truncated away; blocks slide one
    cell at a time and are L2-normalized when block_norm is set.
    """

    cell_size: int = 8
    block_size: int = 2
    orientation_bins: int = 9
    block_norm: bool = True

    def __post_init__(self):
        if self.orientation_bins < 2:
            raise ConfigurationError("need at least 2 orientation bins")
        if self.cell_size < 1 or self.block_size < 1:
            raise ConfigurationError("cell and block sizes must be >= 1")

    def descriptor_length(self, rows: int = UP_ROWS, cols: int = UP_COLS) -> int:
        cy, cx = rows // self.cell_size, cols // self.cell_size
        by = cy - self.block_size + 1
        bx = cx - self.block_size + 1
        if by < 1 or bx < 1:
            raise ConfigurationError("image too small for this HOG configuration")
        return by * bx * self.block_size**2 * self.orientation_bins


def hog(img: np.ndarray, cfg: HogConfig = HogConfig()) -> np.ndarray:
    """Unsigned-orientation HOG descriptor of a 128 x 54 image.

    Gradients are central differences (replicated edges); each pixel
    votes its gradient magnitude into one of orientation_bins unsigned
    bins over [0, pi).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("hog expects a 2D image")
    rows, cols = img.shape
    cy, cx = rows // cfg.cell_size, cols // cfg.cell_size
    by, bx = cy - cfg.block_size + 1, cx - cfg.block_size + 1
    if by < 1 or bx < 1:
        raise ConfigurationError("image too small for this HOG configuration")

    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)  # unsigned orientation
    bins = np.minimum(
        (ang / np.pi * cfg.orientation_bins).astype(int), cfg.orientation_bins - 1
    )

    crop_r, crop_c = cy * cfg.cell_size, cx * cfg.cell_size
    mag = mag[:crop_r, :crop_c]
    bins = bins[:crop_r, :crop_c]
    cells = np.zeros((cy, cx, cfg.orientation_bins))
    cr = np.repeat(np.arange(cy), cfg.cell_size)
    cc = np.repeat(np.arange(cx), cfg.cell_size)
    np.add.at(cells, (cr[:, None], cc[None, :], bins), mag)

    feats = []
    for i in range(by):
        for j in range(bx):
            block = cells[i : i + cfg.block_size, j : j + cfg.block_size].ravel()
            if cfg.block_norm:
                norm = np.linalg.norm(block)
                if norm > 1e-12:
                    block = block / norm
            feats.append(block)
    return np.concatenate(feats)


def knn_predict(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    query: np.ndarray,
    k: int = 10,
) -> np.ndarray:
    """Unweighted mean of the k nearest training labels (Euclidean).

    Distance ties are broken by training index order. query may be a
    single feature vector or a (Q, d) batch.
    """
    X = np.asarray(train_features, dtype=np.float64)
    Y = np.asarray(train_labels, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training set must be a non-empty 2D feature matrix")
    if k < 1 or k > len(X):
        raise ValueError(f"k must be in [1, {len(X)}]")
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    d2 = (
        (q * q).sum(axis=1)[:, None]
        - 2.0 * q @ X.T
        + (X * X).sum(axis=1)[None, :]
    )
    # stable sort keeps index order among equal distances
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = Y[idx].mean(axis=1)
    return out[0] if np.asarray(query).ndim == 1 else out


def _rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d2 = (
        (a * a).sum(axis=1)[:, None]
        - 2.0 * a @ b.T
        + (b * b).sum(axis=1)[None, :]
    )
    return np.exp(-gamma * np.maximum(d2, 0.0))


def default_gamma(features: np.ndarray) -> float:
    """1 / median pairwise squared distance, on a subsample.

    Median-distance scaling puts the kernel's e^-1 point at a typical
    neighbor, giving real locality on block-normalized HOG features.
    """
    X = np.asarray(features, dtype=np.float64)
    n = min(len(X), 256)
    sub = X[np.linspace(0, len(X) - 1, n).astype(int)]
    d2 = (
        (sub * sub).sum(axis=1)[:, None]
        - 2.0 * sub @ sub.T
        + (sub * sub).sum(axis=1)[None, :]
    )
    med = float(np.median(d2[np.triu_indices(n, k=1)])) if n > 1 else 1.0
    return 1.0 / max(med, 1e-12)


@dataclass
class RidgeModel:
    """Fitted ridge regressor: primal linear, or dual (kernel) form.

    kernel_linear exists to cross-check the dual and primal solutions
    against each other; the production kernel is the RBF.
    """

    kind: str  # "linear" | "kernel_rbf" | "kernel_linear"
    alpha: float
    gamma: float | None
    coef: np.ndarray
    feature_mean: np.ndarray
    label_mean: np.ndarray
    train_features: np.ndarray | None  # kernel forms only

    def __post_init__(self):
        if self.kind not in ("linear", "kernel_rbf", "kernel_linear"):
            raise ValueError(f"unknown ridge kind {self.kind!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.kind == "kernel_rbf" and (self.gamma is None or self.gamma <= 0):
            raise ValueError("kernel ridge needs gamma > 0")


def ridge_fit(
    features: np.ndarray,
    labels: np.ndarray,
    kind: str = "linear",
    alpha: float = 0.7,
    gamma: float | None = None,
) -> RidgeModel:
    """Closed-form ridge fit with an unpenalized intercept.

    linear: W = (Xc'Xc + aI)^-1 Xc'Yc on centered data. kernel_rbf: dual
    coefficients (K + aI)^-1 Yc. alpha = 0 is rejected up front; a
    singular system surfaces as a linear-algebra error.
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("features must be a non-empty 2D matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    if kind == "linear":
        a = Xc.T @ Xc + alpha * np.eye(X.shape[1])
        coef = scipy.linalg.solve(a, Xc.T @ Yc, assume_a="pos")
        train = None
        gamma_out = None
    elif kind == "kernel_rbf":
        if gamma is None:
            gamma = default_gamma(X)
        k = _rbf_kernel(Xc, Xc, gamma) + alpha * np.eye(len(X))
        coef = scipy.linalg.solve(k, Yc, assume_a="pos")
        train = Xc
        gamma_out = gamma
    elif kind == "kernel_linear":
        k = Xc @ Xc.T + alpha * np.eye(len(X))
        coef = scipy.linalg.solve(k, Yc, assume_a="pos")
        train = Xc
        gamma_out = None
    else:
        raise ValueError(f"unknown ridge kind {kind!r}")
    return RidgeModel(
        kind=kind,
        alpha=alpha,
        gamma=gamma_out,
        coef=coef,
        feature_mean=x_mean,
        label_mean=y_mean,
        train_features=train,
    )


def ridge_predict(model: RidgeModel, query: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if q.shape[1] != model.feature_mean.shape[0]:
        raise ValueError(
            f"query has {q.shape[1]} features, model expects "
            f"{model.feature_mean.shape[0]}"
        )
    qc = q - model.feature_mean
    if model.kind == "linear":
        out = qc @ model.coef + model.label_mean
    elif model.kind == "kernel_rbf":
        out = _rbf_kernel(qc, model.train_features, model.gamma) @ model.coef
        out = out + model.label_mean
    else:
        out = qc @ model.train_features.T @ model.coef + model.label_mean
    return out[0] if np.asarray(query).ndim == 1 else out
