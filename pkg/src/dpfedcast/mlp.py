"""Fully connected ReLU regressor with hand-written backprop and Adam.

Parameters live in one flat float64 vector; per-layer weight matrices and
bias vectors are reshaped views into it. Layer ``i`` stores a
``(fan_in, fan_out)`` weight block followed by its ``fan_out`` biases.

The numeric core works on a leading "model" axis so several independent
copies (one per client) can be trained with the same batched matmuls:
parameters ``(K, P)``, inputs ``(K, B, H)``, targets ``(K, B)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_LAYERS = (10, 128, 64, 32, 1)


@dataclass(frozen=True)
class Layout:
    layer_sizes: tuple[int, ...]
    slices: tuple[tuple[slice, slice], ...]
    n_params: int

    @property
    def n_layers(self) -> int:
        return len(self.slices)

    def views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``flat``; any leading axes are kept."""
        lead = flat.shape[:-1]
        out = []
        for (ws, bs), fan_in, fan_out in zip(self.slices, self.layer_sizes[:-1], self.layer_sizes[1:]):
            out.append((flat[..., ws].reshape(*lead, fan_in, fan_out), flat[..., bs]))
        return out


@lru_cache(maxsize=None)
def layout_for(layer_sizes: tuple[int, ...]) -> Layout:
    if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
        raise ValueError(f"need at least input and output sizes, all >= 1: {layer_sizes}")
    slices = []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + fan_in * fan_out)
        offset = w.stop
        b = slice(offset, offset + fan_out)
        offset = b.stop
        slices.append((w, b))
    return Layout(tuple(int(n) for n in layer_sizes), tuple(slices), offset)


@dataclass(frozen=True)
class ModelParams:
    layer_sizes: tuple[int, ...]
    flat: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        flat = np.array(self.flat, dtype=np.float64)
        if flat.shape != (self.layout.n_params,):
            raise ValueError(f"expected {self.layout.n_params} parameters for {sizes}, got shape {flat.shape}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    @property
    def layout(self) -> Layout:
        return layout_for(tuple(self.layer_sizes))

    @property
    def n_params(self) -> int:
        return self.layout.n_params

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self.layout.views(self.flat)

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "ModelParams":
        sizes = [np.shape(layers[0][0])[0]] + [np.shape(W)[1] for W, _ in layers]
        flat = np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])
        return cls(tuple(sizes), flat)

    def apply_update(self, update: np.ndarray) -> "ModelParams":
        return replace(self, flat=self.flat + _check_len(update, self.n_params))


def _check_len(v: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"update vector has shape {v.shape}, expected ({n},)")
    return v


def init_params(layer_sizes: Sequence[int] = DEFAULT_LAYERS, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    layout = layout_for(tuple(int(n) for n in layer_sizes))
    rng = np.random.default_rng(seed)
    flat = np.zeros(layout.n_params)
    for (W, _), fan_in, fan_out in zip(layout.views(flat), layout.layer_sizes[:-1], layout.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return ModelParams(layout.layer_sizes, flat)


def _forward_all(layout: Layout, theta: np.ndarray, X: np.ndarray) -> list[np.ndarray]:
    """Post-activation outputs of every layer, input first. theta (K,P), X (K,B,H)."""
    acts = [X]
    h = X
    last = layout.n_layers - 1
    for i, (W, b) in enumerate(layout.views(theta)):
        z = np.matmul(h, W)
        z += b[:, None, :]
        h = np.maximum(z, 0.0, out=z) if i < last else z
        acts.append(h)
    return acts


def predict_many(layout: Layout, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predictions ``(K, B)`` for stacked models."""
    return _forward_all(layout, theta, X)[-1][..., 0]


def loss_and_grad_many(
    layout: Layout, theta: np.ndarray, X: np.ndarray, y: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted squared-error loss ``sum_b w_b (f(x_b) - y_b)^2`` per model, and its gradient.

    With ``weights = 1/B`` on every row this is the batch MSE; zero weights
    mask padding rows.
    """
    if layout.layer_sizes[-1] != 1:
        raise ValueError("loss is defined for a single regression output")
    acts = _forward_all(layout, theta, X)
    resid = acts[-1][..., 0] - y
    loss = np.einsum("kb,kb->k", weights, resid * resid)
    grad = np.empty_like(theta)
    grad_views = layout.views(grad)
    weight_views = layout.views(theta)
    delta = (2.0 * weights * resid)[..., None]
    for i in range(layout.n_layers - 1, -1, -1):
        gW, gb = grad_views[i]
        np.matmul(acts[i].transpose(0, 2, 1), delta, out=gW)
        gb[...] = delta.sum(axis=1)
        if i:
            delta = np.matmul(delta, weight_views[i][0].transpose(0, 2, 1))
            delta *= acts[i] > 0
    return loss, grad


def forward(params: ModelParams, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.layer_sizes[0],):
        raise ValueError(f"input has shape {x.shape}, expected ({params.layer_sizes[0]},)")
    return float(predict_many(params.layout, params.flat[None], x[None, None])[0, 0])


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"inputs have shape {X.shape}, expected (n, {params.layer_sizes[0]})")
    if len(X) == 0:
        return np.zeros(0)
    return predict_many(params.layout, params.flat[None], X[None])[0]


def batch_loss_and_grad(params: ModelParams, batch) -> tuple[float, np.ndarray]:
    """Mean squared error over ``batch`` (WindowSamples or an ``(X, y)`` pair) and its gradient."""
    if isinstance(batch, tuple):
        X, y = (np.asarray(a, dtype=np.float64) for a in batch)
    else:
        X = np.array([s.x for s in batch], dtype=np.float64)
        y = np.array([s.y for s in batch], dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty batch")
    if X.shape != (len(y), params.layer_sizes[0]):
        raise ValueError(f"batch inputs have shape {X.shape}, expected ({len(y)}, {params.layer_sizes[0]})")
    w = np.full((1, len(y)), 1.0 / len(y))
    loss, grad = loss_and_grad_many(params.layout, params.flat[None], X[None], y[None], w)
    return float(loss[0]), grad[0]


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, **kw)


def adam_update_(
    theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: np.ndarray,
    lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
    scratch: np.ndarray | None = None,
) -> None:
    """In-place Adam step on stacked rows ``(K, P)``.

    ``t`` holds each row's step count *after* this step. ``scratch`` is an
    optional work buffer shaped like ``theta``; it saves an allocation per call.
    """
    tmp = np.empty_like(theta) if scratch is None else scratch
    t = np.asarray(t, dtype=np.float64)[..., None]
    m *= beta1
    np.multiply(grad, 1.0 - beta1, out=tmp)
    m += tmp
    v *= beta2
    np.multiply(grad, grad, out=tmp)
    tmp *= 1.0 - beta2
    v += tmp
    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded in
    np.sqrt(v, out=tmp)
    tmp /= np.sqrt(1.0 - beta2 ** t)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / (1.0 - beta1 ** t)
    theta -= tmp


def adam_step(state: AdamState, params: ModelParams, grad: np.ndarray) -> tuple[ModelParams, AdamState]:
    grad = _check_len(grad, params.n_params)
    if state.m.shape != grad.shape or state.v.shape != grad.shape:
        raise ValueError("Adam moments do not match the parameter count")
    theta = params.flat.copy()[None]
    m = state.m.copy()[None]
    v = state.v.copy()[None]
    t = state.t + 1
    adam_update_(theta, grad[None], m, v, np.array([t]), state.lr, state.beta1, state.beta2, state.eps)
    return replace(params, flat=theta[0]), replace(state, m=m[0], v=v[0], t=t)


# flat-vector helpers; updates are plain float64 arrays


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def _same_len(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _same_len(a, b)
    return a + b


def scale(v: np.ndarray, alpha: float) -> np.ndarray:
    return float(alpha) * np.asarray(v, dtype=np.float64)


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``alpha * x + y``"""
    x, y = _same_len(x, y)
    return alpha * x + y


# Checkpoint file, little-endian:
#   8s   magic b"DPFCKPT\0"
#   u32  format version (1)
#   u32  number of layer sizes n
#   n*u32 layer sizes
#   i64  federated round the parameters belong to (-1 if not applicable)
#   u64  parameter count P
#   P*f64 flat parameters, layer by layer: weights (row-major fan_in x fan_out), then biases

CHECKPOINT_MAGIC = b"DPFCKPT\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: ModelParams, round_index: int = -1) -> None:
    sizes = params.layer_sizes
    header = struct.pack(f"<8sII{len(sizes)}IqQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(sizes),
                         *sizes, round_index, params.n_params)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, int]:
    """Read a checkpoint; returns the parameters and their round index."""
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<8sII", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = struct.calcsize("<8sII")
    sizes = struct.unpack_from(f"<{n}I", data, offset)
    offset += 4 * n
    round_index, n_params = struct.unpack_from("<qQ", data, offset)
    offset += 16
    flat = np.frombuffer(data, dtype="<f8", count=n_params, offset=offset)
    if offset + 8 * n_params != len(data):
        raise ValueError(f"{path}: truncated or oversized checkpoint")
    return ModelParams(tuple(sizes), flat.astype(np.float64)), round_index
