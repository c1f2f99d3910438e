"""17-joint kinematic body model: forward kinematics, Jacobians, link lengths.

The skeleton is a tree rooted at the chest marker. Because the chest
marker sits atop the sternum while the spine's bending point lies inside
the body, the marker connects to an internal ``spine_top`` node through a
vertical offset; spine_top carries the rest of the body. spine_top is a
chain node only and is not reported as a joint, which is how a 17-entry
length vector (16 structural links + 1 marker offset) spans a 17-joint
tree.

Rest pose (all angles zero) is a person lying supine, arms at the sides,
legs straight, head toward +y, anatomical left at +x (see data module for
the mat frame). 20 angular DOFs:

* 2 spine bends, both revolute about x: one where the marker offset meets
  the body, one on the upper spine link; together they let the model fold
  at the bed hinge for seated postures.
* 2-DOF neck (pitch about x, yaw about z) moving the head only.
* 3-DOF shoulders and hips (intrinsic Z-Y-X Euler).
* 1-DOF elbows and knees (flexion about the local lateral axis).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LABELED_JOINT_NAMES

N_JOINTS = 17
N_DOFS = 20
N_LENGTHS = 17
N_NODES = 18  # 17 reported joints + internal spine_top

JOINT_NAMES = (
    "chest",
    "mid_spine",
    "pelvis",
    "hip_l",
    "hip_r",
    "knee_l",
    "knee_r",
    "ankle_l",
    "ankle_r",
    "neck",
    "head",
    "shoulder_l",
    "shoulder_r",
    "elbow_l",
    "elbow_r",
    "wrist_l",
    "wrist_r",
)
SPINE_TOP = 17  # internal node index

#: Reported-joint index for each labeled joint, in LABELED_JOINT_NAMES order.
LABELED_JOINT_INDICES = (10, 0, 13, 14, 15, 16, 5, 6, 7, 8)

LENGTH_NAMES = (
    "spine_upper",
    "spine_lower",
    "pelvis_l",
    "pelvis_r",
    "thigh_l",
    "thigh_r",
    "shin_l",
    "shin_r",
    "neck_base",
    "neck_head",
    "clavicle_l",
    "clavicle_r",
    "upper_arm_l",
    "upper_arm_r",
    "forearm_l",
    "forearm_r",
    "chest_offset",
)

DOF_NAMES = (
    "spine_bend_1",
    "spine_bend_2",
    "neck_pitch",
    "neck_yaw",
    "shoulder_l_z",
    "shoulder_l_y",
    "shoulder_l_x",
    "shoulder_r_z",
    "shoulder_r_y",
    "shoulder_r_x",
    "elbow_l",
    "elbow_r",
    "hip_l_z",
    "hip_l_y",
    "hip_l_x",
    "hip_r_z",
    "hip_r_y",
    "hip_r_x",
    "knee_l",
    "knee_r",
)

#: Body-segment lengths as fractions of stature, used for links whose
#: endpoints are not both motion-capture labeled. Values follow standard
#: body-segment proportion tables, adapted to this link set.
ANTHROPOMETRIC_RATIOS = {
    "spine_upper": 0.100,
    "spine_lower": 0.100,
    "pelvis_l": 0.050,
    "pelvis_r": 0.050,
    "thigh_l": 0.245,
    "thigh_r": 0.245,
    "shin_l": 0.246,
    "shin_r": 0.246,
    "neck_base": 0.110,
    "neck_head": 0.120,
    "clavicle_l": 0.129,
    "clavicle_r": 0.129,
    "upper_arm_l": 0.186,
    "upper_arm_r": 0.186,
    "forearm_l": 0.146,
    "forearm_r": 0.146,
    "chest_offset": 0.045,
}

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])
_AXES = {"x": _X, "y": _Y, "z": _Z}


@dataclass(frozen=True)
class Edge:
    """One kinematic link: parent/child node, rest direction, DOFs.

    dofs lists (dof_index, axis_name) pairs applied in order at the
    parent end of the edge; 3-DOF joints list them z, y, x so the
    composition is an intrinsic Z-Y-X Euler rotation.
    """

    parent: int
    child: int
    length_index: int
    rest_dir: tuple
    dofs: tuple = ()


_EDGES = (
    Edge(0, SPINE_TOP, 16, (0.0, 0.0, -1.0), ((0, "x"),)),
    Edge(SPINE_TOP, 1, 0, (0.0, -1.0, 0.0), ((1, "x"),)),
    Edge(1, 2, 1, (0.0, -1.0, 0.0)),
    Edge(2, 3, 2, (1.0, 0.0, 0.0)),
    Edge(2, 4, 3, (-1.0, 0.0, 0.0)),
    Edge(3, 5, 4, (0.0, -1.0, 0.0), ((12, "z"), (13, "y"), (14, "x"))),
    Edge(4, 6, 5, (0.0, -1.0, 0.0), ((15, "z"), (16, "y"), (17, "x"))),
    Edge(5, 7, 6, (0.0, -1.0, 0.0), ((18, "x"),)),
    Edge(6, 8, 7, (0.0, -1.0, 0.0), ((19, "x"),)),
    Edge(SPINE_TOP, 9, 8, (0.0, 1.0, 0.0)),
    Edge(9, 10, 9, (0.0, 1.0, 0.0), ((2, "x"), (3, "z"))),
    Edge(9, 11, 10, (1.0, 0.0, 0.0)),
    Edge(9, 12, 11, (-1.0, 0.0, 0.0)),
    Edge(11, 13, 12, (0.0, -1.0, 0.0), ((4, "z"), (5, "y"), (6, "x"))),
    Edge(12, 14, 13, (0.0, -1.0, 0.0), ((7, "z"), (8, "y"), (9, "x"))),
    Edge(13, 15, 14, (0.0, -1.0, 0.0), ((10, "x"),)),
    Edge(14, 16, 15, (0.0, -1.0, 0.0), ((11, "x"),)),
)


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree, DOF assignment and labeled-joint selection."""

    joints: tuple = JOINT_NAMES
    edges: tuple = _EDGES
    labeled_indices: tuple = LABELED_JOINT_INDICES
    dof_names: tuple = DOF_NAMES
    length_names: tuple = LENGTH_NAMES

    def __post_init__(self):
        if len(self.joints) != N_JOINTS:
            raise ValueError("topology must have exactly 17 joints")
        if len(self.labeled_indices) != 10:
            raise ValueError("exactly 10 joints must be labeled")
        if len(self.dof_names) != N_DOFS:
            raise ValueError("topology must have exactly 20 DOFs")


DEFAULT_TOPOLOGY = SkeletonTopology()


@dataclass
class JointAngles:
    """20 angular DOFs in radians, ordered as DOF_NAMES."""

    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.shape != (N_DOFS,):
            raise ValueError(f"phi must have shape ({N_DOFS},)")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("angles must be finite")

    @classmethod
    def zeros(cls) -> "JointAngles":
        return cls(np.zeros(N_DOFS))


@dataclass
class LinkLengths:
    """17 lengths in meters, ordered as LENGTH_NAMES (all > 0)."""

    l: np.ndarray

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64)
        if self.l.shape != (N_LENGTHS,):
            raise ValueError(f"l must have shape ({N_LENGTHS},)")
        if not np.all(self.l > 0):
            raise ValueError("all link lengths must be > 0")

    @classmethod
    def from_stature(cls, stature: float) -> "LinkLengths":
        return cls(
            np.array([ANTHROPOMETRIC_RATIOS[n] for n in LENGTH_NAMES]) * stature
        )


@dataclass
class Pose:
    """FK result: 17 reported joint positions plus the labeled subset."""

    root: np.ndarray
    all_joints: np.ndarray
    labeled_joints: np.ndarray
    joint_names: tuple = JOINT_NAMES


def _rot(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _as_phi(angles) -> np.ndarray:
    phi = angles.phi if isinstance(angles, JointAngles) else np.asarray(angles, float)
    if phi.shape != (N_DOFS,):
        raise ValueError(f"expected {N_DOFS} angles, got shape {phi.shape}")
    return phi


def _as_lengths(lengths) -> np.ndarray:
    l = lengths.l if isinstance(lengths, LinkLengths) else np.asarray(lengths, float)
    if l.shape != (N_LENGTHS,):
        raise ValueError(f"expected {N_LENGTHS} lengths, got shape {l.shape}")
    if not np.all(l > 0):
        raise ValueError("all link lengths must be > 0")
    return l


def forward_kinematics(
    root, angles, lengths, topo: SkeletonTopology = DEFAULT_TOPOLOGY
) -> Pose:
    """Compose per-edge rotations down the tree from the chest marker.

    Each edge applies its DOF rotations in the parent frame and then
    offsets by rest_dir * length in the rotated frame, so every link
    preserves its length exactly in every configuration.
    """
    root = np.asarray(root, dtype=np.float64)
    if root.shape != (3,):
        raise ValueError("root must be a 3-vector")
    phi = _as_phi(angles)
    l = _as_lengths(lengths)

    pos = np.zeros((N_NODES, 3))
    rot = np.zeros((N_NODES, 3, 3))
    pos[0] = root
    rot[0] = np.eye(3)
    for e in topo.edges:
        r = rot[e.parent]
        for dof_idx, axis in e.dofs:
            r = r @ _rot(axis, phi[dof_idx])
        rot[e.child] = r
        pos[e.child] = pos[e.parent] + r @ (np.asarray(e.rest_dir) * l[e.length_index])

    all_joints = pos[:N_JOINTS].copy()
    return Pose(
        root=all_joints[0],
        all_joints=all_joints,
        labeled_joints=all_joints[list(topo.labeled_indices)],
    )


def fk_jacobian(
    root, angles, lengths, topo: SkeletonTopology = DEFAULT_TOPOLOGY
) -> np.ndarray:
    """Analytic sensitivity of the 51 joint coordinates to all 40 inputs.

    Returns a (51, 40) matrix; columns are [root xyz | 20 angles |
    17 lengths], rows the 17 reported joints flattened xyz. Revolute
    columns use the instantaneous-axis rule dp = axis x (p - origin);
    length columns are the rotated unit rest directions.
    """
    root = np.asarray(root, dtype=np.float64)
    phi = _as_phi(angles)
    l = _as_lengths(lengths)

    pos = np.zeros((N_NODES, 3))
    rot = np.zeros((N_NODES, 3, 3))
    # Per node: list of (dof_index, global_axis, origin) on its chain,
    # and list of (length_index, global_dir).
    ang_chain = [[] for _ in range(N_NODES)]
    len_chain = [[] for _ in range(N_NODES)]
    pos[0] = root
    rot[0] = np.eye(3)
    for e in topo.edges:
        r = rot[e.parent]
        entries = []
        for dof_idx, axis in e.dofs:
            entries.append((dof_idx, r @ _AXES[axis], pos[e.parent]))
            r = r @ _rot(axis, phi[dof_idx])
        rot[e.child] = r
        direction = r @ np.asarray(e.rest_dir)
        pos[e.child] = pos[e.parent] + direction * l[e.length_index]
        ang_chain[e.child] = ang_chain[e.parent] + entries
        len_chain[e.child] = len_chain[e.parent] + [(e.length_index, direction)]

    jac = np.zeros((N_JOINTS * 3, 3 + N_DOFS + N_LENGTHS))
    for j in range(N_JOINTS):
        rows = slice(3 * j, 3 * j + 3)
        jac[rows, 0:3] = np.eye(3)
        for dof_idx, axis_vec, origin in ang_chain[j]:
            jac[rows, 3 + dof_idx] = np.cross(axis_vec, pos[j] - origin)
        for length_idx, direction in len_chain[j]:
            jac[rows, 3 + N_DOFS + length_idx] = direction
    return jac


def mirror_angles(phi: np.ndarray) -> np.ndarray:
    """DOF vector of the laterally mirrored pose.

    Mirror conjugation negates z and y rotations, keeps x rotations, and
    swaps left/right joint assignments.
    """
    phi = _as_phi(phi)
    out = phi.copy()
    swap = {4: 7, 5: 8, 6: 9, 10: 11, 12: 15, 13: 16, 14: 17, 18: 19}
    for a, b in swap.items():
        out[a], out[b] = phi[b], phi[a]
    # z- and y-axis rotations flip sign under lateral mirroring
    for idx, name in enumerate(DOF_NAMES):
        if name.endswith(("_z", "_y")) or name == "neck_yaw":
            out[idx] = -out[idx]
    return out


def mirror_lengths(l: np.ndarray) -> np.ndarray:
    """Length vector with left/right entries swapped."""
    l = _as_lengths(l)
    out = l.copy()
    for a in range(0, N_LENGTHS):
        name = LENGTH_NAMES[a]
        if name.endswith("_l"):
            b = LENGTH_NAMES.index(name[:-2] + "_r")
            out[a], out[b] = l[b], l[a]
    return out


#: Fraction of stature spanned by the rest-pose head-to-ankle chain,
#: derived from the ratio table; used to estimate stature from markers.
_HEAD_ANKLE_FRACTION = float(
    np.hypot(
        sum(
            ANTHROPOMETRIC_RATIOS[n]
            for n in ("neck_base", "neck_head", "spine_upper", "spine_lower",
                      "thigh_l", "shin_l")
        ),
        ANTHROPOMETRIC_RATIOS["pelvis_l"],
    )
)


def approximate_link_lengths(frames) -> LinkLengths:
    """Estimate a participant's link lengths from labeled frames.

    Links with both ends labeled (forearms, shins) are the mean
    frame-wise marker distance. The rest come from the anthropometric
    ratio table scaled by stature, estimated from the head-to-ankle
    marker extent in the flattest (minimum vertical spread) frame.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame to approximate link lengths")
    joints = np.stack([f.joints for f in frames])  # (F, 10, 3)

    def mean_dist(a, b):
        return float(np.linalg.norm(joints[:, a] - joints[:, b], axis=1).mean())

    # labeled order: head, chest, elbow_l, elbow_r, wrist_l, wrist_r,
    #                knee_l, knee_r, ankle_l, ankle_r
    forearm_l = mean_dist(2, 4)
    forearm_r = mean_dist(3, 5)
    shin_l = mean_dist(6, 8)
    shin_r = mean_dist(7, 9)

    spread = joints[:, :, 2].max(axis=1) - joints[:, :, 2].min(axis=1)
    flattest = int(np.argmin(spread))
    extent = max(
        float(np.linalg.norm(joints[flattest, 0] - joints[flattest, 8])),
        float(np.linalg.norm(joints[flattest, 0] - joints[flattest, 9])),
    )
    stature = extent / _HEAD_ANKLE_FRACTION

    l = LinkLengths.from_stature(stature).l
    l[LENGTH_NAMES.index("forearm_l")] = forearm_l
    l[LENGTH_NAMES.index("forearm_r")] = forearm_r
    l[LENGTH_NAMES.index("shin_l")] = shin_l
    l[LENGTH_NAMES.index("shin_r")] = shin_r
    return LinkLengths(l)
