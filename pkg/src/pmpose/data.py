"""Pressure-image data model, preprocessing and augmentation.

Coordinate conventions used throughout the package:

* The raw pressure image is a 64 x 27 grid. Rows run longitudinally
  (row 0 at the foot end, row 63 at the head end), columns laterally.
* Metric mat frame: x lateral, y longitudinal measured from the foot
  end, z vertical. Taxel (r, c) has its center at
  ``((c + 0.5) * pitch, (r + 0.5) * pitch, 0)`` on a flat bed.
* A person lies supine with the head toward high y; their anatomical
  left is at +x.
* The head-rest hinge runs along the center of row ``bend_row``. With
  head-rest angle theta, taxels above the hinge rise to
  ``d * sin(theta)`` where d is the along-mat distance from the hinge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

ROWS = 64
COLS = 27
UP_ROWS = 2 * ROWS
UP_COLS = 2 * COLS
N_LABELED_JOINTS = 10
PRESSURE_MAX = 100.0

#: Fixed order of the motion-capture labeled joints in every dataset file
#: and every 10-joint label array.
LABELED_JOINT_NAMES = (
    "head",
    "chest",
    "elbow_l",
    "elbow_r",
    "wrist_l",
    "wrist_r",
    "knee_l",
    "knee_r",
    "ankle_l",
    "ankle_r",
)

#: Index pairs swapped when a frame is mirrored across the longitudinal axis.
LEFT_RIGHT_PAIRS = ((2, 3), (4, 5), (6, 7), (8, 9))

DATASET_MAGIC = "PMPD1"


class DimensionError(ValueError):
    """Array has the wrong shape for the requested operation."""


class ConfigurationError(ValueError):
    """Required configuration (e.g. normalization constants) is missing."""


class ParseError(ValueError):
    """Dataset file is malformed; message carries the 1-based line number."""


@dataclass(frozen=True)
class MatGeometry:
    """Physical calibration of the pressure mat.

    taxel_pitch is the center-to-center spacing in meters (same both
    axes). bend_row indexes the row whose center lies on the head-rest
    hinge; the default puts the hinge at 60% of the mat length from the
    foot end.
    """

    taxel_pitch: float = 0.0286
    bend_row: int = 38

    def __post_init__(self):
        if self.taxel_pitch <= 0:
            raise ValueError(f"taxel_pitch must be > 0, got {self.taxel_pitch}")
        if not 0 <= self.bend_row < ROWS:
            raise ValueError(f"bend_row must be in [0, {ROWS}), got {self.bend_row}")

    @property
    def width(self) -> float:
        return COLS * self.taxel_pitch

    @property
    def length(self) -> float:
        return ROWS * self.taxel_pitch

    @property
    def hinge_y(self) -> float:
        """Longitudinal position of the hinge line in meters."""
        return (self.bend_row + 0.5) * self.taxel_pitch

    @property
    def center(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.length / 2.0, 0.0])


@dataclass
class PressureImage:
    """One raw mat sample: 64 x 27 taxel grid plus bed state."""

    taxels: np.ndarray
    bed_angle: float = 0.0
    frame_id: int = 0
    participant_id: int = 0

    def __post_init__(self):
        self.taxels = np.asarray(self.taxels, dtype=np.float64)
        if self.taxels.shape != (ROWS, COLS):
            raise DimensionError(
                f"taxels must be {ROWS}x{COLS}, got {self.taxels.shape}"
            )
        if not np.all(np.isfinite(self.taxels)):
            raise ValueError("taxel values must be finite")
        if self.taxels.min() < 0 or self.taxels.max() > PRESSURE_MAX:
            raise ValueError("taxel values must lie in [0, 100]")
        if not 0.0 <= self.bed_angle <= 90.0:
            raise ValueError(f"bed_angle must be in [0, 90], got {self.bed_angle}")


@dataclass
class LabeledFrame:
    """A pressure image paired with its 10 labeled 3D joint positions.

    joints is a (10, 3) array in meters, mat-frame global coordinates,
    ordered as LABELED_JOINT_NAMES.
    """

    image: PressureImage
    joints: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.shape != (N_LABELED_JOINTS, 3):
            raise DimensionError(
                f"joints must be {N_LABELED_JOINTS}x3, got {self.joints.shape}"
            )
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("joint coordinates must be finite")


@dataclass(frozen=True)
class AugmentParams:
    """Augmentation distribution parameters (sigmas in physical units)."""

    flip_prob: float = 0.5
    shift_sigma: float = 0.0286  # meters
    scale_sigma: float = 0.06
    noise_sigma: float = 1.0  # pressure units
    seated: bool = False

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        for name in ("shift_sigma", "scale_sigma", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class NormStats:
    """Per-channel standardization constants fitted on a training fold."""

    means: tuple
    stds: tuple

    def __post_init__(self):
        if len(self.means) != 3 or len(self.stds) != 3:
            raise ConfigurationError("NormStats needs exactly 3 means and 3 stds")

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(means=(0.0, 0.0, 0.0), stds=(1.0, 1.0, 1.0))


@dataclass
class InputStack:
    """Standardized 3 x 128 x 54 network input: pressure, edges, height."""

    channels: np.ndarray
    norm: NormStats

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.shape != (3, UP_ROWS, UP_COLS):
            raise DimensionError(
                f"channels must be 3x{UP_ROWS}x{UP_COLS}, got {self.channels.shape}"
            )


def upsample2x(img: np.ndarray) -> np.ndarray:
    """Upsample a 64 x 27 image to 128 x 54 by first-order interpolation.

    Output index i samples the input at coordinate i / 2, so even
    outputs copy input samples and odd outputs are midpoints of
    neighbors (edge rows/columns replicate). Preserves global min/max.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (ROWS, COLS):
        raise DimensionError(f"expected {ROWS}x{COLS}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("input values must be finite")

    def up_axis0(a):
        out = np.empty((2 * a.shape[0], a.shape[1]), dtype=np.float64)
        out[0::2] = a
        out[1:-1:2] = 0.5 * (a[:-1] + a[1:])
        out[-1] = a[-1]
        return out

    return up_axis0(up_axis0(img).T).T


def sobel_edges(img: np.ndarray) -> np.ndarray:
    """Gradient-magnitude edge map sqrt(Gx^2 + Gy^2) with 3x3 Sobel kernels.

    Boundaries are handled by edge replication so constant images map to
    exactly zero everywhere.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (UP_ROWS, UP_COLS):
        raise DimensionError(f"expected {UP_ROWS}x{UP_COLS}, got {img.shape}")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def bed_height_channel(bed_angle: float, geom: MatGeometry) -> np.ndarray:
    """Vertical taxel height map (meters) on the upsampled 128 x 54 grid.

    Taxels on the head side of the hinge rise to d * sin(theta), d being
    the along-mat distance from the hinge line; the flat section is zero.
    """
    if not 0.0 <= bed_angle <= 90.0:
        raise ValueError(f"bed_angle must be in [0, 90], got {bed_angle}")
    # Upsampled row i corresponds to raw row coordinate i / 2 (same
    # convention as upsample2x), hinge at raw row coordinate bend_row.
    row_coord = np.arange(UP_ROWS, dtype=np.float64) / 2.0
    d = np.maximum(0.0, row_coord - geom.bend_row) * geom.taxel_pitch
    height = d * math.sin(math.radians(bed_angle))
    return np.repeat(height[:, None], UP_COLS, axis=1)


def raw_channels(img: PressureImage, geom: MatGeometry) -> np.ndarray:
    """Unstandardized (3, 128, 54) stack: upsampled pressure, edges, height."""
    p = upsample2x(img.taxels)
    e = sobel_edges(p)
    b = bed_height_channel(img.bed_angle, geom)
    return np.stack([p, e, b])


def fit_normalization(frames, geom: MatGeometry) -> NormStats:
    """Per-channel mean/std over the raw stacks of a training set."""
    frames = list(frames)
    if not frames:
        raise ValueError("cannot fit normalization on an empty set")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    n = 0
    for f in frames:
        ch = raw_channels(f.image, geom)
        total += ch.sum(axis=(1, 2))
        total_sq += (ch * ch).sum(axis=(1, 2))
        n += ch.shape[1] * ch.shape[2]
    means = total / n
    var = np.maximum(total_sq / n - means * means, 0.0)
    # A dead channel (e.g. all frames flat-bed) would standardize to
    # 0/0; floor the std so it maps to exactly zero instead.
    stds = np.sqrt(np.maximum(var, 1e-16))
    return NormStats(means=tuple(means), stds=tuple(stds))


def build_input_stack(
    img: PressureImage, geom: MatGeometry, norm: NormStats
) -> InputStack:
    """Assemble and standardize the 3-channel network input for one frame."""
    if norm is None:
        raise ConfigurationError("normalization constants are required")
    ch = raw_channels(img, geom)
    means = np.asarray(norm.means)[:, None, None]
    stds = np.asarray(norm.stds)[:, None, None]
    return InputStack(channels=(ch - means) / stds, norm=norm)


def mirror_labels(joints: np.ndarray, geom: MatGeometry) -> np.ndarray:
    """Mirror labeled joints across the longitudinal axis, swapping L/R."""
    out = np.array(joints, dtype=np.float64, copy=True)
    out[:, 0] = geom.width - out[:, 0]
    for a, b in LEFT_RIGHT_PAIRS:
        out[[a, b]] = out[[b, a]]
    return out


def _shift_image(taxels: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Integer-taxel translation with zero fill."""
    out = np.zeros_like(taxels)
    src_r = slice(max(0, -di), ROWS - max(0, di))
    src_c = slice(max(0, -dj), COLS - max(0, dj))
    dst_r = slice(max(0, di), ROWS - max(0, -di))
    dst_c = slice(max(0, dj), COLS - max(0, -dj))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = taxels[src_r, src_c]
    return out


def _scale_image(taxels: np.ndarray, sc: float, geom: MatGeometry) -> np.ndarray:
    """Nearest-neighbor rescale about the mat center; vacated taxels are 0."""
    rr, cc = np.meshgrid(np.arange(ROWS), np.arange(COLS), indexing="ij")
    cr, ccol = (ROWS - 1) / 2.0, (COLS - 1) / 2.0
    src_r = np.rint((rr - cr) / sc + cr).astype(int)
    src_c = np.rint((cc - ccol) / sc + ccol).astype(int)
    valid = (src_r >= 0) & (src_r < ROWS) & (src_c >= 0) & (src_c < COLS)
    out = np.zeros_like(taxels)
    out[valid] = taxels[src_r[valid], src_c[valid]]
    return out


def augment(
    frame: LabeledFrame,
    params: AugmentParams,
    rng: np.random.Generator,
    geom: MatGeometry | None = None,
) -> LabeledFrame:
    """Randomized flip / shift / scale / noise with matching label transforms.

    Applied in order: longitudinal-axis mirror with probability
    flip_prob; planar shift ~ N(0, shift_sigma) (taxel-quantized on the
    image, continuous on labels; longitudinal component dropped when
    seated); multiplicative scale ~ N(1, scale_sigma) about the mat
    center (skipped entirely when seated); per-taxel noise
    ~ N(0, noise_sigma) clipped to [0, 100]. Shifts that would push all
    pressure off the mat are resampled up to 10 times, then dropped.
    """
    if geom is None:
        geom = MatGeometry()
    taxels = np.array(frame.image.taxels, copy=True)
    joints = np.array(frame.joints, copy=True)
    pitch = geom.taxel_pitch

    if params.flip_prob > 0 and rng.random() < params.flip_prob:
        taxels = taxels[:, ::-1].copy()
        joints = mirror_labels(joints, geom)

    if params.shift_sigma > 0:
        had_pressure = taxels.any()
        for attempt in range(10):
            dx = rng.normal(0.0, params.shift_sigma)
            dy = 0.0 if params.seated else rng.normal(0.0, params.shift_sigma)
            di, dj = int(round(dy / pitch)), int(round(dx / pitch))
            shifted = _shift_image(taxels, di, dj)
            if shifted.any() or not had_pressure:
                taxels = shifted
                joints[:, 0] += dx
                joints[:, 1] += dy
                break
        # all retries degenerate: leave the frame unshifted

    if params.scale_sigma > 0 and not params.seated:
        sc = rng.normal(1.0, params.scale_sigma)
        if sc > 0.1:
            taxels = _scale_image(taxels, sc, geom)
            center = geom.center[:2]
            joints[:, :2] = center + sc * (joints[:, :2] - center)
            joints[:, 2] *= sc

    if params.noise_sigma > 0:
        taxels = taxels + rng.normal(0.0, params.noise_sigma, taxels.shape)

    taxels = np.clip(taxels, 0.0, PRESSURE_MAX)
    image = replace(frame.image, taxels=taxels)
    return LabeledFrame(image=image, joints=joints)


def derive_rng(seed: int, frame_id: int, epoch: int) -> np.random.Generator:
    """Independent per-(frame, epoch) random stream for parallel augmentation."""
    return np.random.default_rng(np.random.SeedSequence((seed, frame_id, epoch)))


def write_dataset(frames, path, geom: MatGeometry | None = None) -> None:
    """Write frames in the line-oriented PMPD1 text format.

    Taxels are stored as integers; non-integral taxel values are
    rejected so that write -> read round-trips bit-exactly.
    """
    if geom is None:
        geom = MatGeometry()
    frames = list(frames)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{DATASET_MAGIC} rows={ROWS} cols={COLS} joints={N_LABELED_JOINTS} "
            f"pitch_m={geom.taxel_pitch:.6g} bend_row={geom.bend_row}\n"
        )
        for f in frames:
            t = f.image.taxels
            ti = np.rint(t).astype(np.int64)
            if not np.array_equal(ti, t):
                raise ValueError(
                    "dataset files store integer taxels; quantize before writing"
                )
            fields = [
                str(f.image.participant_id),
                str(f.image.frame_id),
                f"{f.image.bed_angle:.6g}",
            ]
            fields.extend(str(v) for v in ti.ravel())
            fields.extend(f"{v:.10g}" for v in f.joints.ravel())
            fh.write(",".join(fields) + "\n")


def read_dataset(path):
    """Parse a PMPD1 file into (frames, MatGeometry)."""
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        geom = _parse_header(header)
        n_fields = 3 + ROWS * COLS + N_LABELED_JOINTS * 3
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n_fields:
                raise ParseError(
                    f"line {lineno}: expected {n_fields} fields, got {len(parts)}"
                )
            try:
                pid = int(parts[0])
                fid = int(parts[1])
                angle = float(parts[2])
                taxels = np.array(parts[3 : 3 + ROWS * COLS], dtype=np.int64)
                joints = np.array(parts[3 + ROWS * COLS :], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            if taxels.min() < 0 or taxels.max() > PRESSURE_MAX:
                raise ParseError(f"line {lineno}: taxel value out of range [0, 100]")
            frames.append(
                LabeledFrame(
                    image=PressureImage(
                        taxels=taxels.reshape(ROWS, COLS).astype(np.float64),
                        bed_angle=angle,
                        frame_id=fid,
                        participant_id=pid,
                    ),
                    joints=joints.reshape(N_LABELED_JOINTS, 3),
                )
            )
    return frames, geom


def _parse_header(header: str) -> MatGeometry:
    parts = header.split()
    if not parts or parts[0] != DATASET_MAGIC:
        raise ParseError("line 1: bad magic, expected PMPD1 header")
    kv = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ParseError(f"line 1: malformed header field {p!r}")
        k, v = p.split("=", 1)
        kv[k] = v
    try:
        if int(kv["rows"]) != ROWS or int(kv["cols"]) != COLS:
            raise ParseError("line 1: unsupported grid dimensions")
        if int(kv["joints"]) != N_LABELED_JOINTS:
            raise ParseError("line 1: unsupported joint count")
        return MatGeometry(taxel_pitch=float(kv["pitch_m"]), bend_row=int(kv["bend_row"]))
    except KeyError as exc:
        raise ParseError(f"line 1: missing header field {exc}") from exc
