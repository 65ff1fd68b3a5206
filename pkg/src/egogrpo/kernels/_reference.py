"""Pure-numpy kernels. Always available; the compiled module mirrors these
signatures exactly."""
from __future__ import annotations

import numpy as np


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_rotate(q, v):
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def forward_kinematics(parent, offset, root_rot, root_pos, local_rot):
    """Positions ``(..., N, 3)`` and global rotations ``(..., N, 4)``.

    Leading axes of ``root_rot``/``root_pos``/``local_rot`` are batch axes
    (frames, or samples x frames).
    """
    n = len(parent)
    lead = local_rot.shape[:-2]
    pos = np.empty(lead + (n, 3))
    rot = np.empty(lead + (n, 4))
    rot[..., 0, :] = quat_mul(root_rot, local_rot[..., 0, :])
    pos[..., 0, :] = root_pos
    for j in range(1, n):
        p = parent[j]
        pos[..., j, :] = pos[..., p, :] + quat_rotate(rot[..., p, :], offset[j])
        rot[..., j, :] = quat_mul(rot[..., p, :], local_rot[..., j, :])
    return pos, rot


def fade(f):
    return f * f * f * (f * (f * 6.0 - 15.0) + 10.0)


def perlin_1d(gradients, x):
    """Gradient noise on the integer lattice.

    ``gradients`` has shape ``(L, A)`` (lattice points x axes); ``x`` is any
    array of non-negative coordinates below ``L - 1``. Returns ``x.shape + (A,)``.
    """
    x = np.asarray(x, dtype=np.float64)
    i = np.floor(x).astype(np.int64)
    f = (x - i)[..., None]
    g0 = gradients[i]
    g1 = gradients[i + 1]
    a = g0 * f
    b = g1 * (f - 1.0)
    return a + fade(f) * (b - a)


def mean_pairwise_distance(x):
    """``1/(G(G-1)) * sum_{i != j} ||x_i - x_j||`` for rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = x.shape[0]
    total = 0.0
    for i in range(g):
        d = x[i + 1:] - x[i]
        total += 2.0 * float(np.sum(np.sqrt(np.sum(d * d, axis=1))))
    return total / (g * (g - 1))
