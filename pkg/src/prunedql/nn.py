"""Small dense-network engine: ReLU MLPs, backprop, Adam, portable checkpoints.

Everything is float64 numpy. A network is a list of ``(W, b)`` layers where
``W`` has shape ``(in_dim, out_dim)``; hidden layers use ReLU and the output
layer is linear. A network with no hidden layers is a plain affine map, which
doubles as a tabular Q-function when fed one-hot states.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"PRUNEQ1"


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class DenseNetwork:
    """Feed-forward network with ReLU hidden layers and a linear output."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k} input dim {w.shape[0]} != previous output dim "
                                 f"{self.weights[k - 1].shape[1]}")

    @classmethod
    def create(cls, input_dim: int, output_dim: int, hidden: Sequence[int] = (64, 64),
               rng: np.random.Generator | None = None, zero: bool = False) -> "DenseNetwork":
        """He-uniform initialised network; ``hidden=(64, 64)`` gives the 3-layer default."""
        rng = np.random.default_rng() if rng is None else rng
        dims = [input_dim, *hidden, output_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if zero:
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                bound = np.sqrt(6.0 / fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def clone(self) -> "DenseNetwork":
        return DenseNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected states of shape (batch, {self.input_dim}), got {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self._check_input(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that also returns the layer inputs needed by :meth:`backward_cached`."""
        h = self._check_input(x)
        inputs = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h, inputs

    def backward_cached(self, inputs: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        batch = inputs[0].shape[0]
        if grad_out.shape != (batch, self.output_dim):
            raise ShapeError(f"output gradient shape {grad_out.shape} != {(batch, self.output_dim)}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k:
                # inputs[k] is the post-ReLU activation of layer k-1
                g = (g @ self.weights[k].T) * (inputs[k] > 0.0)
        return grads

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * forward(x))`` w.r.t. :meth:`params`."""
        _, inputs = self.forward_cached(x)
        return self.backward_cached(inputs, np.asarray(grad_out, dtype=np.float64))


def forward(net: DenseNetwork, states: np.ndarray) -> np.ndarray:
    return net.forward(states)


def backward(net: DenseNetwork, states: np.ndarray, output_gradient: np.ndarray) -> list[np.ndarray]:
    return net.backward(states, output_gradient)


def same_architecture(a: DenseNetwork, b: DenseNetwork) -> bool:
    return a.dims == b.dims


def copy_parameters(src: DenseNetwork, dst: DenseNetwork) -> None:
    if not same_architecture(src, dst):
        raise ShapeError(f"architecture mismatch: {src.dims} vs {dst.dims}")
    for p_dst, p_src in zip(dst.params(), src.params()):
        np.copyto(p_dst, p_src)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads


@dataclass
class Adam:
    """Adam optimiser state for one network's parameter list."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeError(f"parameter {i}: shape {p.shape} != gradient {g.shape}")
            # a sum is non-finite iff some entry is (barring overflow)
            if not np.isfinite(g.sum()):
                raise NumericalError(f"non-finite gradient in layer {i // 2}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ShapeError("optimiser state does not match parameter shapes")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


@dataclass
class SGD:
    learning_rate: float = 1e-2
    step_count: int = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeError(f"parameter {i}: shape {p.shape} != gradient {g.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in layer {i // 2}")
        self.step_count += 1
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: Adam) -> list[np.ndarray]:
    state.step(params, grads)
    return params


# -- checkpoints ------------------------------------------------------------
#
# Layout (all integers little-endian uint32):
#   b"PRUNEQ1" | tag length | tag (utf-8) | layer count | (in, out) per layer
#   then per layer: W row-major (in*out float64 LE), b (out float64 LE)

def save_checkpoint(net: DenseNetwork, path: str | Path, tag: str = "dense") -> None:
    tag_bytes = tag.encode()
    parts = [MAGIC, struct.pack("<I", len(tag_bytes)), tag_bytes, struct.pack("<I", len(net.weights))]
    for w in net.weights:
        parts.append(struct.pack("<II", *w.shape))
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, expect_tag: str | None = None) -> tuple[DenseNetwork, str]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a PRUNEQ1 checkpoint")
    pos = len(MAGIC)
    (tag_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tag = raw[pos:pos + tag_len].decode()
    pos += tag_len
    if expect_tag is not None and tag != expect_tag:
        raise ValueError(f"{path}: checkpoint kind {tag!r}, expected {expect_tag!r}")
    (n_layers,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", raw, pos))
        pos += 8
    weights, biases = [], []
    for n_in, n_out in dims:
        w = np.frombuffer(raw, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_in, n_out)
        pos += 8 * n_in * n_out
        b = np.frombuffer(raw, dtype="<f8", count=n_out, offset=pos)
        pos += 8 * n_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return DenseNetwork(weights, biases), tag
