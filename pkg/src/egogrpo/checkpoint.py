"""Binary weight files shared by the denoiser and the scorer.

Layout (little endian)::

    b"MGRP" | u16 version | u32 n_dims | n_dims x u32 dims | float64 weights...

For a denoiser the dims are the MLP layer widths; for a scorer they are
``[joints, width, blocks, hidden]``. Weights follow the model's ``params``
order, each array flattened in C order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from egogrpo.diffusion import TIME_EMBED_DIM, Denoiser
from egogrpo.numerics import Mlp
from egogrpo.scorer import PerceptualScorer

MAGIC = b"MGRP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(dims, params) -> bytes:
    head = MAGIC + struct.pack("<HI", VERSION, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    return head + body


def decode(blob: bytes):
    """``(dims, flat_weights)`` from a checkpoint byte string."""
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError("not an MGRP checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 10 + 4 * n
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    dims = list(struct.unpack_from(f"<{n}I", blob, 10))
    rest = len(blob) - start
    if rest % 8:
        raise CheckpointError(f"weight section of {rest} bytes is not a whole number of float64 values")
    return dims, np.frombuffer(blob, dtype="<f8", offset=start).astype(np.float64)


def _fill(params, flat, what):
    need = sum(p.size for p in params)
    if flat.size != need:
        raise CheckpointError(f"{what} checkpoint holds {flat.size} weights, architecture needs {need}")
    i = 0
    for p in params:
        p[...] = flat[i:i + p.size].reshape(p.shape)
        i += p.size


def _write(path, blob: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def save_denoiser(path, den: Denoiser) -> None:
    _write(path, encode(den.net.layer_dims, den.params))


def load_denoiser(path) -> Denoiser:
    with open(path, "rb") as f:
        dims, flat = decode(f.read())
    if len(dims) < 2:
        raise CheckpointError(f"denoiser needs at least two layer widths, got {dims}")
    motion = dims[-1]
    cond = dims[0] - motion - TIME_EMBED_DIM
    if cond <= 0:
        raise CheckpointError(f"layer widths {dims} do not describe a denoiser")
    net = Mlp(list(dims))
    _fill(net.params, flat, "denoiser")
    return Denoiser(net, motion, cond)


def save_scorer(path, scorer: PerceptualScorer) -> None:
    _write(path, encode(scorer.config_dims(), scorer.params))


def load_scorer(path) -> PerceptualScorer:
    with open(path, "rb") as f:
        dims, flat = decode(f.read())
    if len(dims) != 4:
        raise CheckpointError(f"scorer checkpoint needs 4 config dims, got {dims}")
    scorer = PerceptualScorer(*dims)
    _fill(scorer.params, flat, "scorer")
    return scorer
