"""Independent reference implementations used by the test suite.

These deliberately avoid the package's own computational paths: FK via
quaternion algebra, Sobel via explicit correlation, Welch via the
textbook formula, KNN via an exhaustive scan.
"""

import numpy as np
from scipy import stats

from pmpose import skeleton as sk


def _quat_mul(q, r):
    w1, x1, y1, z1 = q
    w2, x2, y2, z2 = r
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def _quat_axis(axis, angle):
    h = 0.5 * angle
    q = np.array([np.cos(h), 0.0, 0.0, 0.0])
    q[{"x": 1, "y": 2, "z": 3}[axis]] = np.sin(h)
    return q


def _quat_rotate(q, v):
    p = np.array([0.0, *v])
    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    return _quat_mul(_quat_mul(q, p), conj)[1:]


def quaternion_fk(root, phi, lengths):
    """Quaternion-composition forward kinematics over the same topology."""
    pos = np.zeros((sk.N_NODES, 3))
    quat = np.zeros((sk.N_NODES, 4))
    pos[0] = root
    quat[0] = (1.0, 0.0, 0.0, 0.0)
    for e in sk.DEFAULT_TOPOLOGY.edges:
        q = quat[e.parent]
        for dof_idx, axis in e.dofs:
            q = _quat_mul(q, _quat_axis(axis, phi[dof_idx]))
        quat[e.child] = q
        pos[e.child] = pos[e.parent] + _quat_rotate(
            q, np.asarray(e.rest_dir) * lengths[e.length_index]
        )
    return pos[: sk.N_JOINTS]


def fk_finite_differences(root, phi, lengths, eps=1e-6):
    """Central-difference Jacobian of the 51 joint coordinates."""
    from pmpose.skeleton import forward_kinematics

    x0 = np.concatenate([root, phi, lengths])

    def flat(x):
        return forward_kinematics(x[:3], x[3:23], x[23:]).all_joints.ravel()

    jac = np.empty((sk.N_JOINTS * 3, 40))
    for k in range(40):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += eps
        xm[k] -= eps
        jac[:, k] = (flat(xp) - flat(xm)) / (2 * eps)
    return jac


def welch(a, b):
    """Textbook Welch statistic and two-sided p value."""
    ma, mb = np.mean(a), np.mean(b)
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    na, nb = len(a), len(b)
    se2 = va / na + vb / nb
    t = (ma - mb) / np.sqrt(se2)
    dof = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, 2.0 * stats.t.sf(abs(t), dof)


def knn_scan(train_x, train_y, query, k):
    """Exhaustive nearest-neighbor scan with (distance, index) ordering."""
    scored = sorted(
        (float(np.sum((x - query) ** 2)), i) for i, x in enumerate(train_x)
    )
    picked = [i for _, i in scored[:k]]
    return np.mean([train_y[i] for i in picked], axis=0)
