"""Small feed-forward networks with hand-written backprop and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_MAGIC = b"FMCK"
_VERSION = 1


class MLP:
    """Affine layers with ReLU between them, parameters in one flat vector.

    ``sizes`` lists every layer width including input and output, e.g.
    ``(40, 256, 256, 1)``. Hidden layers use uniform fan-in initialisation;
    the output layer starts at zero so initial outputs are exactly 0.
    """

    def __init__(self, sizes: Sequence[int], seed: int = 0, zero_last: bool = True) -> None:
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.seed = int(seed)
        self.step = 0
        shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        n = sum(o * i + o for o, i in shapes)
        self.params = np.zeros(n)
        self._views: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for o, i in shapes:
            w = self.params[offset : offset + o * i].reshape(o, i)
            offset += o * i
            b = self.params[offset : offset + o]
            offset += o
            self._views.append((w, b))
        rng = np.random.default_rng(seed)
        last = len(self._views) - 1
        for k, (w, b) in enumerate(self._views):
            if k == last and zero_last:
                continue
            bound = 1.0 / np.sqrt(w.shape[1])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        self._cache: list[np.ndarray] | None = None

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._views

    def __len__(self) -> int:
        return self.params.size

    def _run(self, x: np.ndarray, keep: bool) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.in_dim}")
        acts = [x]
        h = x
        last = len(self._views) - 1
        for k, (w, b) in enumerate(self._views):
            h = h @ w.T + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        if keep:
            self._cache = acts
        return h[0] if squeeze else h

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate and remember activations for a following ``backward``."""
        return self._run(x, keep=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Evaluate without touching the backward cache."""
        return self._run(x, keep=False)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(output * grad_out)`` w.r.t. ``params``.

        Uses the activations of the last ``forward`` call.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        acts = self._cache
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
        grad = np.zeros_like(self.params)
        offset = len(self.params)
        for k in range(len(self._views) - 1, -1, -1):
            w, _ = self._views[k]
            o, i = w.shape
            h_in = acts[k]
            offset -= o
            grad[offset : offset + o] = g.sum(axis=0)
            offset -= o * i
            grad[offset : offset + o * i] = (g.T @ h_in).ravel()
            if k > 0:
                g = (g @ w) * (acts[k] > 0)
        return grad

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = self.sizes
        other.seed = self.seed
        other.step = self.step
        other.params = self.params.copy()
        other._views = []
        offset = 0
        for w, b in self._views:
            o, i = w.shape
            nw = other.params[offset : offset + o * i].reshape(o, i)
            offset += o * i
            nb = other.params[offset : offset + o]
            offset += o
            other._views.append((nw, nb))
        other._cache = None
        return other

    def load_params(self, params: np.ndarray) -> None:
        if params.shape != self.params.shape:
            raise ValueError("parameter vector has the wrong size")
        self.params[...] = params


class Scalar:
    """A single trainable number (e.g. log Z) with the same interface as MLP."""

    def __init__(self, value: float = 0.0) -> None:
        self.params = np.array([float(value)])
        self.sizes = (0, 1)
        self.seed = 0
        self.step = 0

    @property
    def value(self) -> float:
        return float(self.params[0])

    def copy(self) -> "Scalar":
        out = Scalar(self.value)
        out.step = self.step
        return out

    def __len__(self) -> int:
        return 1


@dataclass
class Adam:
    """Bias-corrected Adam over a flat parameter vector."""

    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Update ``params`` in place and return it."""
        if params.shape != grads.shape:
            raise ValueError("params and grads differ in shape")
        if not np.all(np.isfinite(grads)):
            raise FloatingPointError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grads * grads
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale a group of gradients so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.dot(g, g)) for g in grads)))
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if max_norm is None or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def save_checkpoint(path: str | Path, model: MLP | Scalar) -> None:
    """Header (magic, version, dims, seed, step) then little-endian float64 params."""
    dims = model.sizes
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<qqQ", model.seed, model.step, model.params.size))
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> MLP | Scalar:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, ndims = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    dims = struct.unpack_from(f"<{ndims}I", data, off)
    off += 4 * ndims
    seed, step, n = struct.unpack_from("<qqQ", data, off)
    off += 24
    params = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
    if tuple(dims) == (0, 1):
        model: MLP | Scalar = Scalar(params[0])
    else:
        model = MLP(dims, seed=seed)
        model.load_params(params)
        model.seed = seed
    model.step = step
    return model


class FeatureEncoder:
    """The environment's own one-hot state features."""

    def __init__(self, env) -> None:
        self.env = env
        self.dim = env.encoding_dim

    def __call__(self, states) -> np.ndarray:
        return self.env.encode_batch(states)


class IndexEncoder:
    """One-hot over enumerated state ids; a linear model on top is a table."""

    def __init__(self, graph) -> None:
        self.graph = graph
        self.dim = graph.n

    def __call__(self, states) -> np.ndarray:
        out = np.zeros((len(states), self.dim))
        out[np.arange(len(states)), [self.graph.index[s] for s in states]] = 1.0
        return out
