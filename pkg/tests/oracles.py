"""Independent reference computations used by the tests."""
import numpy as np


def central_difference(f, params, h=1e-5, max_entries=None, rng=None):
    """Numerical gradient of the scalar ``f()`` w.r.t. each array in ``params``.

    With ``max_entries`` only a random subset of entries per array is probed;
    the returned arrays hold NaN elsewhere.
    """
    out = []
    for p in params:
        g = np.full(p.shape, np.nan)
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        diff = np.abs(a[mask] - n[mask])
        scale = np.maximum(np.abs(a[mask]) + np.abs(n[mask]), floor)
        rel = np.where(diff < floor, 0.0, diff / scale)
        worst = max(worst, float(rel.max()))
    return worst


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
