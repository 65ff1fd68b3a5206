"""Dense float64 building blocks: a tanh MLP with hand-written backward pass,
Adam, and a splittable counter-based random generator.

numpy arrays play the role of tensors throughout; every public function keeps
them in float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up with a layer's declared widths."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :class:`Adam` when a gradient contains NaN or inf."""


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


def _derive_key(seed: int, path: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in path:
        h.update(b"\x1f")
        h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Philox stream keyed by ``(seed, path)``.

    ``child(label)`` derives a new stream from the key alone, so the samples a
    child produces never depend on how much its parent (or any sibling) has
    already drawn.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        key = _derive_key(self.seed, self.path)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(labels))

    def clone(self) -> "Rng":
        """Fresh stream with the same key (starts from the beginning)."""
        return Rng(self.seed, self.path)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"


def sample_gaussian(rng: Rng, shape) -> np.ndarray:
    """i.i.d. standard normal draws, reproducible from the generator key."""
    return rng.normal(shape)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """Fully connected net, tanh on hidden layers and identity on the output.

    ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i+1])`` so a batch of
    row vectors is mapped by ``x @ W + b``.
    """

    layer_dims: list[int]
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise DimensionError("an MLP needs at least an input and an output width")
        if not self.weights:
            self.weights = [np.zeros((a, b)) for a, b in zip(self.layer_dims, self.layer_dims[1:])]
            self.biases = [np.zeros(b) for b in self.layer_dims[1:]]
        self._check()

    def _check(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("number of weight matrices does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise DimensionError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not match "
                    f"{self.layer_dims[i]}->{self.layer_dims[i + 1]}"
                )

    @classmethod
    def initialized(cls, layer_dims: Sequence[int], rng: Rng, output_scale: float = 1.0) -> "Mlp":
        """Glorot-style init; ``output_scale`` shrinks the last layer."""
        dims = [int(d) for d in layer_dims]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            w = rng.child("w", i).normal((a, b)) * np.sqrt(1.0 / a)
            if i == len(dims) - 2:
                w *= output_scale
            weights.append(w)
            biases.append(np.zeros(b))
        return cls(dims, weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray, return_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.layer_dims[0]:
            raise DimensionError(
                f"layer 0 expects input width {self.layer_dims[0]}, got {x.shape[-1]}"
            )
        lead = x.shape[:-1]
        h = x.reshape(-1, self.layer_dims[0])
        acts = [h]
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        out = h.reshape(lead + (self.layer_dims[-1],))
        if return_cache:
            return out, (lead, acts)
        return out

    def backward(self, cache, output_grad: np.ndarray):
        """Returns ``(param_grads, input_grad)``; ``param_grads`` is ordered like
        :attr:`params`."""
        lead, acts = cache
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != lead + (self.layer_dims[-1],):
            raise DimensionError(
                f"output_grad shape {g.shape} does not match forward output {lead + (self.layer_dims[-1],)}"
            )
        g = g.reshape(-1, self.layer_dims[-1])
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)  # type: ignore[list-item]
        for i in range(self.n_layers - 1, -1, -1):
            if i != self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g.reshape(lead + (self.layer_dims[0],))


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def mlp_backward(net: Mlp, x: np.ndarray, output_grad: np.ndarray):
    _, cache = net.forward(x, return_cache=True)
    return net.backward(cache, output_grad)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction, updating the given arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise DimensionError(f"expected {len(self.params)} gradients, got {len(grads)}")
        bad = []
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise DimensionError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
            if not np.all(np.isfinite(g)):
                bad.append((i, int(np.count_nonzero(~np.isfinite(g)))))
        if bad:
            detail = ", ".join(f"param {i}: {n} non-finite" for i, n in bad)
            raise NonFiniteGradientError(f"update rejected at step {self.step_count + 1} ({detail})")

        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v


def adam_step(state: Adam, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise DimensionError("params do not belong to this optimizer state")
    state.step(grads)
    return params


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
