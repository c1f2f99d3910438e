"""Synthetic pressure-image generator and the pendulum ambiguity model.

Bodies are capsule sets attached to the skeleton. Rendering distributes
each segment's weight over the taxels its capsule touches (depth
proportional); segments lifted off the bed contribute nothing directly
and their weight is rerouted to the nearest supported segment up the
body, shifted within that footprint to keep the static moment balance.

The generator is the ground-truth oracle for the learning experiments:
labels are exact forward kinematics of the sampled state, and a sidecar
provenance file stores that state for independent checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import skeleton
from .data import (
    COLS,
    PRESSURE_MAX,
    ROWS,
    LabeledFrame,
    MatGeometry,
    PressureImage,
    write_dataset,
)
from .skeleton import (
    JOINT_NAMES,
    LENGTH_NAMES,
    LinkLengths,
    Pose,
    forward_kinematics,
    mirror_angles,
)

GRAVITY = 9.81
#: A segment touches the bed when its axis is within radius + tolerance
#: of the surface.
CONTACT_TOL = 0.005
#: Pressure (Pa) mapped to taxel value 100. Calibrated so a 94 kg supine
#: body at rest saturates about 5% of its contact taxels.
DEFAULT_SATURATION_PA = 3900.0

MOTION_FAMILIES = (
    "arm_traversal",
    "elbow_vertical",
    "leg_traversal",
    "leg_abduction_elevated",
    "leg_abduction_contact",
)
POSTURES = {"supine": 0.0, "seated": 60.0}


class NoContactError(RuntimeError):
    """The posed body touches no taxel; a static body cannot float."""


@dataclass(frozen=True)
class BodySegment:
    name: str
    joint_a: int
    joint_b: int
    mass: float  # kg
    radius: float  # m


@dataclass(frozen=True)
class CapsuleBody:
    segments: tuple
    total_mass: float
    stature: float

    def __post_init__(self):
        if any(s.mass <= 0 or s.radius <= 0 for s in self.segments):
            raise ValueError("segment masses and radii must be > 0")
        if abs(sum(s.mass for s in self.segments) - self.total_mass) > 1e-9:
            raise ValueError("segment masses must sum to total_mass")


# (name, joint_a, joint_b, mass fraction, base radius at 70 kg)
_SEGMENT_SPEC = (
    ("head", 9, 10, 0.081, 0.095),
    ("trunk", 9, 2, 0.357, 0.135),
    ("shoulder_bar", 11, 12, 0.060, 0.075),
    ("hip_bar", 3, 4, 0.080, 0.100),
    ("upper_arm_l", 11, 13, 0.028, 0.045),
    ("upper_arm_r", 12, 14, 0.028, 0.045),
    ("forearm_l", 13, 15, 0.022, 0.040),
    ("forearm_r", 14, 16, 0.022, 0.040),
    ("thigh_l", 3, 5, 0.100, 0.070),
    ("thigh_r", 4, 6, 0.100, 0.070),
    ("shin_l", 5, 7, 0.061, 0.050),
    ("shin_r", 6, 8, 0.061, 0.050),
)

#: Proximal fallback order for rerouting the weight of lifted segments.
_FALLBACK = {
    "head": ("trunk",),
    "trunk": ("hip_bar", "shoulder_bar"),
    "shoulder_bar": ("trunk",),
    "hip_bar": ("trunk",),
    "upper_arm_l": ("shoulder_bar", "trunk"),
    "upper_arm_r": ("shoulder_bar", "trunk"),
    "forearm_l": ("upper_arm_l", "shoulder_bar", "trunk"),
    "forearm_r": ("upper_arm_r", "shoulder_bar", "trunk"),
    "thigh_l": ("hip_bar", "trunk"),
    "thigh_r": ("hip_bar", "trunk"),
    "shin_l": ("thigh_l", "hip_bar", "trunk"),
    "shin_r": ("thigh_r", "hip_bar", "trunk"),
}


def build_body(stature: float, mass: float) -> CapsuleBody:
    """Capsule body with standard mass fractions, radii scaled by mass."""
    scale = math.sqrt(mass / 70.0)
    segs = []
    for name, a, b, frac, radius in _SEGMENT_SPEC:
        segs.append(BodySegment(name, a, b, frac * mass, radius * scale))
    return CapsuleBody(segments=tuple(segs), total_mass=mass, stature=stature)


def bed_surface_points(geom: MatGeometry, bed_angle: float) -> np.ndarray:
    """(64*27, 3) global positions of taxel centers for a given incline."""
    r = np.arange(ROWS, dtype=np.float64) + 0.5
    c = np.arange(COLS, dtype=np.float64) + 0.5
    y_flat = r * geom.taxel_pitch
    d = np.maximum(0.0, y_flat - geom.hinge_y)
    theta = math.radians(bed_angle)
    y = np.where(d > 0, geom.hinge_y + d * math.cos(theta), y_flat)
    z = d * math.sin(theta)
    x = c * geom.taxel_pitch
    pts = np.empty((ROWS, COLS, 3))
    pts[:, :, 0] = x[None, :]
    pts[:, :, 1] = y[:, None]
    pts[:, :, 2] = z[:, None]
    return pts.reshape(-1, 3)


def _segment_depths(points, a, b, radius):
    """Contact depth of each surface point w.r.t. capsule (a, b, radius)."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        t = np.zeros(len(points))
    else:
        t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    dist = np.linalg.norm(points - closest, axis=1)
    return np.maximum(0.0, (radius + CONTACT_TOL) - dist)


def _shifted_weights(base, xy, target_xy):
    """Rescale a footprint distribution so its centroid hits target_xy.

    Solves for a linear-in-position tilt of the base weights matching the
    first moments, then clips negatives and renormalizes. This is the
    lever-arm balance for weight rerouted from a lifted segment.
    """
    w = base / base.sum()
    centroid = w @ xy
    delta = xy - centroid
    m = (w[:, None] * delta).T @ delta  # central second moments, 2x2
    if np.linalg.det(m) < 1e-18:
        return w
    ab = np.linalg.solve(m, target_xy - centroid)
    tilted = w * (1.0 + delta @ ab)
    tilted = np.maximum(tilted, 0.0)
    s = tilted.sum()
    return w if s <= 0 else tilted / s


def synth_pressure(
    body: CapsuleBody,
    pose: Pose,
    bed_angle: float,
    geom: MatGeometry,
    saturation_pa: float = DEFAULT_SATURATION_PA,
    quantize: bool = True,
) -> np.ndarray:
    """Render the static pressure image (64 x 27) for a posed body.

    Returns integer-valued taxels in [0, 100] (floats when quantize is
    False, for calibration and linearity tests).
    """
    points = bed_surface_points(geom, bed_angle)
    joints = pose.all_joints

    depths = {}
    for seg in body.segments:
        d = _segment_depths(points, joints[seg.joint_a], joints[seg.joint_b], seg.radius)
        if d.any():
            depths[seg.name] = d
    if not depths:
        raise NoContactError("no body segment contacts the bed surface")

    segs = {s.name: s for s in body.segments}
    # Route every segment's weight to a supported footprint.
    loads = {name: [] for name in depths}  # host -> [(force, com_xy or None)]
    for seg in body.segments:
        force = seg.mass * GRAVITY
        if seg.name in depths:
            loads[seg.name].append((force, None))
            continue
        com = 0.5 * (joints[seg.joint_a] + joints[seg.joint_b])
        host = next((h for h in _FALLBACK[seg.name] if h in depths), None)
        if host is None:
            # fall back to the supported segment nearest the lifted mass
            host = min(
                depths,
                key=lambda n: float(
                    np.linalg.norm(
                        0.5 * (joints[segs[n].joint_a] + joints[segs[n].joint_b]) - com
                    )
                ),
            )
        loads[host].append((force, com[:2]))

    xy = points[:, :2]
    force = np.zeros(len(points))
    for host, entries in loads.items():
        base = depths[host]
        for f, com_xy in entries:
            if com_xy is None:
                force += f * base / base.sum()
            else:
                force += f * _shifted_weights(base, xy, com_xy)

    pressure = force / (geom.taxel_pitch**2)  # Pa per taxel
    values = np.clip(pressure / saturation_pa * PRESSURE_MAX, 0.0, PRESSURE_MAX)
    values = values.reshape(ROWS, COLS)
    return np.rint(values) if quantize else values


@dataclass(frozen=True)
class PendulumArm:
    """Double inverted pendulum standing in for a raised arm (x-z plane)."""

    theta1: float  # upper link angle from horizontal, radians
    theta2: float  # lower link angle from horizontal, radians
    m1: float = 2.0
    m2: float = 1.5
    l1: float = 0.30
    l2: float = 0.28
    anchor_x: float = 0.30  # shoulder support position along the row, m

    def __post_init__(self):
        if self.m1 <= 0 or self.m2 <= 0 or self.l1 <= 0 or self.l2 <= 0:
            raise ValueError("masses and lengths must be > 0")


def pendulum_pressure(
    arm: PendulumArm, geom: MatGeometry, patch_halfwidth: float = 0.05
) -> np.ndarray:
    """1D reaction distribution (27 taxels) under the pendulum support.

    While both links are elevated the distribution is a function of the
    total weight and the horizontal center of mass only, which is the
    static indeterminacy: distinct (theta1, theta2) with equal horizontal
    center of mass produce identical output. If the lower link comes
    within contact tolerance of the mat it adds its own footprint.
    """
    x_t = (np.arange(COLS) + 0.5) * geom.taxel_pitch
    elbow = np.array(
        [arm.anchor_x + arm.l1 * math.cos(arm.theta1), arm.l1 * math.sin(arm.theta1)]
    )
    wrist = elbow + arm.l2 * np.array([math.cos(arm.theta2), math.sin(arm.theta2)])
    com1_x = arm.anchor_x + 0.5 * arm.l1 * math.cos(arm.theta1)
    com2_x = elbow[0] + 0.5 * arm.l2 * math.cos(arm.theta2)
    w1, w2 = arm.m1 * GRAVITY, arm.m2 * GRAVITY

    # lower-link contact footprint: portion of the link within tolerance
    ts = np.linspace(0.0, 1.0, 33)
    seg = elbow[None, :] + ts[:, None] * (wrist - elbow)[None, :]
    touching = seg[seg[:, 1] <= CONTACT_TOL]

    out = np.zeros(COLS)
    if len(touching) > 0:
        lo, hi = touching[:, 0].min(), touching[:, 0].max()
        mask = (x_t >= lo - 0.5 * geom.taxel_pitch) & (x_t <= hi + 0.5 * geom.taxel_pitch)
        if not mask.any():
            mask = np.abs(x_t - 0.5 * (lo + hi)).argmin() == np.arange(COLS)
        out[mask] += w2 / mask.sum()
        shoulder_force, com_x = w1, com1_x
    else:
        shoulder_force, com_x = w1 + w2, (w1 * com1_x + w2 * com2_x) / (w1 + w2)

    patch = np.abs(x_t - arm.anchor_x) <= patch_halfwidth
    if not patch.any():
        patch = np.abs(x_t - arm.anchor_x).argmin() == np.arange(COLS)
    xs = x_t[patch] - arm.anchor_x
    n, s1, s2 = len(xs), xs.sum(), (xs * xs).sum()
    det = n * s2 - s1 * s1
    if abs(det) < 1e-18:
        profile = np.full(n, 1.0 / n)
    else:
        moment = com_x - arm.anchor_x
        u = (s2 - s1 * moment) / det
        v = (n * moment - s1) / det
        profile = np.maximum(u + v * xs, 0.0)
        profile /= profile.sum()
    out[patch] += shoulder_force * profile
    # exact force balance regardless of clipping above
    out *= (w1 + w2) / out.sum()
    return out


@dataclass
class PoseSample:
    """Full generator state for one frame; labels are a pure function of it."""

    family: str
    posture: str
    side: str
    phi: np.ndarray
    bed_angle: float
    offset_x: float = 0.0  # lateral body placement on the mat, m
    offset_y: float = 0.0  # longitudinal placement (supine only), m


def sample_pose(family: str, posture: str, rng: np.random.Generator) -> PoseSample:
    """Draw joint angles for one motion family.

    The torso is held static; non-moving limbs jitter a few degrees
    around rest, and the body placement on the mat varies frame to
    frame. Moving-limb side is chosen uniformly; right-side motions are
    the exact lateral mirror of left-side draws.
    """
    if family not in MOTION_FAMILIES:
        raise ValueError(f"unknown motion family {family!r}")
    if posture not in POSTURES:
        raise ValueError(f"unknown posture {posture!r}")

    phi = np.zeros(skeleton.N_DOFS)
    phi[:4] = rng.normal(0.0, 0.03, 4)  # spine and neck stay near rest
    phi[4:] = rng.normal(0.0, 0.08, skeleton.N_DOFS - 4)
    # keep resting arms slightly abducted so they clear the trunk capsule
    phi[4] += 0.15
    phi[7] -= 0.15
    side = "left" if rng.random() < 0.5 else "right"

    if family == "arm_traversal":
        phi[4] = rng.uniform(0.05, 2.1)  # sweep across the mat plane
        phi[6] = rng.normal(0.0, 0.05)
        phi[10] = -rng.uniform(0.0, 0.35)
    elif family == "elbow_vertical":
        phi[4] = rng.uniform(1.25, 1.85)  # upper arm out on the mat
        phi[10] = -rng.uniform(0.0, 1.55)  # forearm from flat to vertical
    elif family == "leg_traversal":
        phi[12] = rng.uniform(0.0, 0.55)
        phi[18] = rng.uniform(0.0, 0.45)
        phi[14] = rng.normal(0.0, 0.03)
    elif family == "leg_abduction_contact":
        phi[12] = rng.uniform(0.15, 0.7)
        phi[14] = rng.normal(0.0, 0.03)
        phi[18] = rng.uniform(0.0, 0.2)
    elif family == "leg_abduction_elevated":
        phi[12] = rng.uniform(0.0, 0.45)
        phi[14] = -rng.uniform(0.35, 0.95)  # hip flexion lifts the leg
        phi[18] = rng.uniform(0.0, 0.5)

    if side == "right":
        phi = mirror_angles(phi)
    return PoseSample(
        family=family,
        posture=posture,
        side=side,
        phi=phi,
        bed_angle=POSTURES[posture],
        offset_x=rng.uniform(-0.05, 0.05),
        offset_y=rng.uniform(-0.08, 0.08) if posture == "supine" else
        rng.uniform(-0.03, 0.03),
    )


def pose_from_sample(
    sample: PoseSample, lengths: LinkLengths, body: CapsuleBody, geom: MatGeometry
) -> Pose:
    """Deterministic global pose for a generator sample.

    Supine bodies lie flat with the structural plane at forearm-capsule
    height. Seated bodies are built flat, then the torso-side joints are
    rigidly rotated by the bed angle about the lateral axis through the
    pelvis, which is placed on the hinge line; legs stay flat and link
    lengths are preserved exactly.
    """
    l = lengths.l
    z_plane = _rest_height(body)
    root_z = z_plane + l[LENGTH_NAMES.index("chest_offset")]
    place = np.array([sample.offset_x, sample.offset_y, 0.0])

    if sample.posture == "supine":
        down = l[0] + l[1] + max(l[4], l[5]) + max(l[6], l[7])
        up = l[8] + l[9]
        root_y = (geom.length - (up - down)) / 2.0
        root = np.array([geom.width / 2.0, root_y, root_z]) + place
        return forward_kinematics(root, sample.phi, lengths)

    pose = forward_kinematics(np.array([0.0, 0.0, root_z]), sample.phi, lengths)
    joints = pose.all_joints.copy()
    pelvis = joints[JOINT_NAMES.index("pelvis")].copy()
    theta = math.radians(sample.bed_angle)
    rot = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, math.cos(theta), -math.sin(theta)],
            [0.0, math.sin(theta), math.cos(theta)],
        ]
    )
    torso_side = [0, 1, 9, 10, 11, 12, 13, 14, 15, 16]
    joints[torso_side] = (joints[torso_side] - pelvis) @ rot.T + pelvis
    target = np.array([geom.width / 2.0, geom.hinge_y - 0.04, z_plane]) + place
    joints += target - pelvis
    labeled = joints[list(skeleton.LABELED_JOINT_INDICES)]
    return Pose(root=joints[0], all_joints=joints, labeled_joints=labeled)


def _rest_height(body: CapsuleBody) -> float:
    """Height of the structural body plane: the thinnest limb just touches."""
    return min(s.radius for s in body.segments)


@dataclass
class Participant:
    participant_id: int
    body: CapsuleBody
    lengths: LinkLengths


def sample_participant(participant_id: int, rng: np.random.Generator) -> Participant:
    """Random body within the study population ranges (1.57-1.83 m, 45-94 kg)."""
    stature = rng.uniform(1.57, 1.83)
    mass = rng.uniform(45.0, 94.0)
    l = LinkLengths.from_stature(stature).l * rng.normal(1.0, 0.02, skeleton.N_LENGTHS)
    return Participant(
        participant_id=participant_id,
        body=build_body(stature, mass),
        lengths=LinkLengths(np.maximum(l, 0.02)),
    )


DEFAULT_RECIPE = (
    ("arm_traversal", "supine"),
    ("elbow_vertical", "supine"),
    ("leg_traversal", "supine"),
    ("leg_abduction_contact", "supine"),
    ("leg_abduction_elevated", "supine"),
    ("arm_traversal", "seated"),
    ("leg_traversal", "seated"),
)


@dataclass(frozen=True)
class SensorModel:
    """Per-frame measurement imperfections applied after rendering.

    Real mats show frame-to-frame gain drift, additive noise and dead
    taxels; all three are applied to the quantized image and the result
    re-clipped to the valid range.
    """

    gain_sigma: float = 0.05
    noise_sigma: float = 1.5
    dead_taxel_prob: float = 0.01

    def apply(self, taxels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = taxels * rng.normal(1.0, self.gain_sigma)
        out = out + rng.normal(0.0, self.noise_sigma, out.shape)
        if self.dead_taxel_prob > 0:
            out[rng.random(out.shape) < self.dead_taxel_prob] = 0.0
        return np.rint(np.clip(out, 0.0, PRESSURE_MAX))


def generate_dataset(
    n_participants: int,
    frames_per_participant: int,
    seed: int,
    path,
    recipe=DEFAULT_RECIPE,
    geom: MatGeometry | None = None,
    write_provenance: bool = True,
    sensor: SensorModel | None = SensorModel(),
):
    """Render a labeled synthetic dataset and write it in PMPD1 format.

    Frames cycle round-robin through the (family, posture) recipe.
    Labels are the forward kinematics of the sampled state, and a
    .prov sidecar records that state (per-participant lengths and
    per-frame angles) so labels can be re-derived independently.
    Sensor imperfections (gain drift, noise, dead taxels) are applied to
    the images only; pass sensor=None for noise-free rendering.
    """
    if n_participants < 1 or frames_per_participant < 1:
        raise ValueError("participant and frame counts must be >= 1")
    if geom is None:
        geom = MatGeometry()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0D1)))
    frames = []
    prov_lines = [f"# pmpose provenance seed={seed}"]
    frame_id = 0
    participants = []
    for pid in range(1, n_participants + 1):
        part = sample_participant(pid, rng)
        participants.append(part)
        prov_lines.append(
            f"participant {pid} stature={part.body.stature:.6f} "
            f"mass={part.body.total_mass:.6f} "
            "lengths=" + ",".join(f"{v:.9f}" for v in part.lengths.l)
        )
        for k in range(frames_per_participant):
            family, posture = recipe[k % len(recipe)]
            sample = sample_pose(family, posture, rng)
            pose = pose_from_sample(sample, part.lengths, part.body, geom)
            taxels = synth_pressure(part.body, pose, sample.bed_angle, geom)
            if sensor is not None:
                taxels = sensor.apply(taxels, rng)
            frames.append(
                LabeledFrame(
                    image=PressureImage(
                        taxels=taxels,
                        bed_angle=sample.bed_angle,
                        frame_id=frame_id,
                        participant_id=pid,
                    ),
                    joints=pose.labeled_joints,
                )
            )
            prov_lines.append(
                f"frame {frame_id} participant={pid} family={family} "
                f"posture={posture} side={sample.side} "
                f"offset={sample.offset_x:.9f},{sample.offset_y:.9f} "
                "phi=" + ",".join(f"{v:.9f}" for v in sample.phi)
            )
            frame_id += 1
    write_dataset(frames, path, geom)
    if write_provenance:
        with open(str(path) + ".prov", "w", encoding="utf-8") as fh:
            fh.write("\n".join(prov_lines) + "\n")
    return frames, participants
