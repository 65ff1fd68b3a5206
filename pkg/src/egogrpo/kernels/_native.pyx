# cython: language_level=3, boundscheck=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_reference``; same signatures."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()


cdef inline void _qmul(const double* a, const double* b, double* out) noexcept nogil:
    cdef double aw = a[0], ax = a[1], ay = a[2], az = a[3]
    cdef double bw = b[0], bx = b[1], by = b[2], bz = b[3]
    out[0] = aw * bw - ax * bx - ay * by - az * bz
    out[1] = aw * bx + ax * bw + ay * bz - az * by
    out[2] = aw * by - ax * bz + ay * bw + az * bx
    out[3] = aw * bz + ax * by - ay * bx + az * bw


cdef inline void _qrot(const double* q, const double* v, double* out) noexcept nogil:
    # v + w t + u x t, with t = 2 u x v
    cdef double w = q[0], ux = q[1], uy = q[2], uz = q[3]
    cdef double tx = 2.0 * (uy * v[2] - uz * v[1])
    cdef double ty = 2.0 * (uz * v[0] - ux * v[2])
    cdef double tz = 2.0 * (ux * v[1] - uy * v[0])
    out[0] = v[0] + w * tx + (uy * tz - uz * ty)
    out[1] = v[1] + w * ty + (uz * tx - ux * tz)
    out[2] = v[2] + w * tz + (ux * ty - uy * tx)


def quat_mul(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    shape = a.shape
    cdef const double[:, ::1] av = np.ascontiguousarray(a).reshape(-1, 4)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b).reshape(-1, 4)
    out = np.empty((av.shape[0], 4))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(av.shape[0]):
            _qmul(&av[i, 0], &bv[i, 0], &ov[i, 0])
    return out.reshape(shape)


def quat_rotate(q, v):
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lead = np.broadcast_shapes(q.shape[:-1], v.shape[:-1])
    cdef const double[:, ::1] qv = np.ascontiguousarray(np.broadcast_to(q, lead + (4,))).reshape(-1, 4)
    cdef const double[:, ::1] vv = np.ascontiguousarray(np.broadcast_to(v, lead + (3,))).reshape(-1, 3)
    out = np.empty((qv.shape[0], 3))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(qv.shape[0]):
            _qrot(&qv[i, 0], &vv[i, 0], &ov[i, 0])
    return out.reshape(lead + (3,))


def forward_kinematics(parent, offset, root_rot, root_pos, local_rot):
    local_rot = np.asarray(local_rot, dtype=np.float64)
    lead = local_rot.shape[:-2]
    cdef Py_ssize_t n = local_rot.shape[-2]
    cdef const double[:, :, ::1] lr = np.ascontiguousarray(local_rot).reshape(-1, n, 4)
    cdef Py_ssize_t m = lr.shape[0]
    cdef const double[:, ::1] rr = np.ascontiguousarray(np.broadcast_to(np.asarray(root_rot, dtype=np.float64), lead + (4,))).reshape(m, 4)
    cdef const double[:, ::1] rp = np.ascontiguousarray(np.broadcast_to(np.asarray(root_pos, dtype=np.float64), lead + (3,))).reshape(m, 3)
    cdef const double[:, ::1] off = np.ascontiguousarray(offset, dtype=np.float64)
    cdef const long[::1] par = np.ascontiguousarray(parent, dtype=np.int64).astype(np.int_)
    pos = np.empty((m, n, 3))
    rot = np.empty((m, n, 4))
    cdef double[:, :, ::1] pv = pos
    cdef double[:, :, ::1] qv = rot
    cdef double tmp[3]
    cdef Py_ssize_t i, j, p
    with nogil:
        for i in range(m):
            _qmul(&rr[i, 0], &lr[i, 0, 0], &qv[i, 0, 0])
            pv[i, 0, 0] = rp[i, 0]
            pv[i, 0, 1] = rp[i, 1]
            pv[i, 0, 2] = rp[i, 2]
            for j in range(1, n):
                p = par[j]
                _qrot(&qv[i, p, 0], &off[j, 0], tmp)
                pv[i, j, 0] = pv[i, p, 0] + tmp[0]
                pv[i, j, 1] = pv[i, p, 1] + tmp[1]
                pv[i, j, 2] = pv[i, p, 2] + tmp[2]
                _qmul(&qv[i, p, 0], &lr[i, j, 0], &qv[i, j, 0])
    return pos.reshape(lead + (n, 3)), rot.reshape(lead + (n, 4))


cdef inline double _fade(double f) noexcept nogil:
    return f * f * f * (f * (f * 6.0 - 15.0) + 10.0)


def fade(f):
    f = np.asarray(f, dtype=np.float64)
    return f * f * f * (f * (f * 6.0 - 15.0) + 10.0)


def perlin_1d(gradients, x):
    x = np.asarray(x, dtype=np.float64)
    cdef const double[:, ::1] g = np.ascontiguousarray(gradients, dtype=np.float64)
    cdef const double[::1] xv = np.ascontiguousarray(x).reshape(-1)
    cdef Py_ssize_t na = g.shape[1]
    out = np.empty((xv.shape[0], na))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, k, c
    cdef double f, s, a, b
    with nogil:
        for i in range(xv.shape[0]):
            c = <Py_ssize_t> floor(xv[i])
            f = xv[i] - c
            s = _fade(f)
            for k in range(na):
                a = g[c, k] * f
                b = g[c + 1, k] * (f - 1.0)
                ov[i, k] = a + s * (b - a)
    return out.reshape(x.shape + (na,))


def mean_pairwise_distance(x):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t g = xv.shape[0], d = xv.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0, acc, diff
    with nogil:
        for i in range(g):
            for j in range(i + 1, g):
                acc = 0.0
                for k in range(d):
                    diff = xv[i, k] - xv[j, k]
                    acc = acc + diff * diff
                total = total + 2.0 * sqrt(acc)
    return total / (g * (g - 1))
