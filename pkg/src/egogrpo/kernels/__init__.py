"""Hot numeric kernels.

The compiled extension ``egogrpo.kernels._native`` is used when it was built;
otherwise the numpy implementations in :mod:`._reference` are used. Set
``EGOGRPO_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from egogrpo.kernels import _reference

BACKEND = "python"
_impl = _reference

if os.environ.get("EGOGRPO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from egogrpo.kernels import _native as _impl  # type: ignore[no-redef]
        BACKEND = "native"
    except ImportError:
        _impl = _reference

quat_mul = _impl.quat_mul
quat_rotate = _impl.quat_rotate
forward_kinematics = _impl.forward_kinematics
perlin_1d = _impl.perlin_1d
mean_pairwise_distance = _impl.mean_pairwise_distance
fade = _reference.fade

__all__ = ["BACKEND", "quat_mul", "quat_rotate", "forward_kinematics", "perlin_1d",
           "mean_pairwise_distance", "fade"]
