"""Dense MLPs with reverse-mode gradients, input Jacobians, and Adam.

The networks are small compositions of affine maps and an elementwise
activation, so the backward pass is written layer by layer rather than
through a general tape. All arithmetic is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit


def silu(a):
    return a * expit(a)


def silu_grad(a):
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def _silu_both(a):
    s = expit(a)
    h = a * s
    return h, s + h * (1.0 - s)


def _tanh_grad(a):
    t = np.tanh(a)
    return 1.0 - t * t


def _tanh_both(a):
    t = np.tanh(a)
    return t, 1.0 - t * t


def _identity_both(a):
    return a, np.ones_like(a)


# name -> (f, f', (f, f') in one pass)
ACTIVATIONS: dict[str, tuple[Callable, Callable, Callable]] = {
    "silu": (silu, silu_grad, _silu_both),
    "tanh": (np.tanh, _tanh_grad, _tanh_both),
    "identity": (lambda a: a, np.ones_like, _identity_both),
}
_ACT_TAGS = {"silu": 1, "tanh": 2, "identity": 3}


class ShapeError(ValueError):
    pass


@dataclass
class Mlp:
    """Affine layers with ``activation`` between them (none after the last)."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "silu"

    @classmethod
    def init(cls, widths, rng: np.random.Generator | int = 0, activation="silu", zero_last=False) -> "Mlp":
        """Glorot-uniform weights, zero biases; ``zero_last`` zeroes the output layer."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        widths = tuple(int(w) for w in widths)
        ws, bs = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if zero_last and i == len(widths) - 2:
                w = np.zeros_like(w)
            ws.append(w)
            bs.append(np.zeros(fan_out))
        return cls(widths, ws, bs, activation)

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ShapeError("flat parameter vector has wrong length")
        off = 0
        for p in self.params():
            p[...] = vec[off : off + p.size].reshape(p.shape)
            off += p.size

    def copy(self) -> "Mlp":
        return Mlp(self.widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected batch of shape (N, {self.widths[0]}), got {x.shape}")
        return x

    def forward(self, x, cache: bool = False):
        x = self._check(x)
        act, _, both = ACTIVATIONS[self.activation]
        slopes, inputs = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w + b
            if i == last:
                h = a
            elif cache:
                h, da = both(a)
                slopes.append(da)
            else:
                h = act(a)
        if cache:
            return h, (inputs, slopes)
        return h

    __call__ = forward

    def backward(self, cache, grad_out, need_input: bool = False):
        """Vector-Jacobian product: gradients of ``sum(grad_out * out)``.

        Returns the parameter gradients in ``params()`` order and, when
        requested, the gradient with respect to the input batch.
        """
        inputs, slopes = cache
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        g = np.asarray(grad_out, dtype=float)
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or need_input:
                g = g @ self.weights[i].T
                if i > 0:
                    g = g * slopes[i - 1]
        return (grads, g) if need_input else grads

    def jacobian(self, x):
        """Per-sample Jacobian d out / d in, shape ``(N, d_out, d_in)``."""
        return self.forward_and_jacobian(x)[1]

    def forward_and_jacobian(self, x):
        """Output and per-sample input Jacobian ``(N, d_out, d_in)`` in one pass.

        Forward mode: the identity tangent is pushed through every layer,
        which is cheap because the input dimension is small.
        """
        x = self._check(x)
        both = ACTIVATIONS[self.activation][2]
        n, d_in = x.shape
        h = x
        # tangents stored as (N, d_in, width)
        tang = np.broadcast_to(self.weights[0], (n, d_in, self.widths[1]))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i > 0:
                tang = tang @ w
            if i < last:
                h, da = both(a)
                tang = tang * da[:, None, :]
            else:
                h = a
        return h, np.ascontiguousarray(tang.transpose(0, 2, 1))


def grad_params(net: Mlp, loss: Callable[[np.ndarray], tuple[float, np.ndarray]], batch):
    """Loss value and parameter gradients for ``loss(out) -> (value, dvalue/dout)``."""
    out, cache = net.forward(batch, cache=True)
    value, g = loss(out)
    return value, net.backward(cache, g)


def grad_input(net: Mlp, batch) -> np.ndarray:
    return net.jacobian(batch)


# --- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One Adam update in place, with decoupled weight decay.

    Parameters shrink by ``1 - lr * weight_decay`` before the bias-corrected
    moment step.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ShapeError("one gradient per parameter required")
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"LROMMLP\x00"
_CKPT_VERSION = 1


def save_checkpoint(net: Mlp, path, metadata: dict | None = None) -> None:
    """Binary blob (widths, activation tag, flat float64 params) plus ``.json`` sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<III", _CKPT_VERSION, len(net.widths), _ACT_TAGS[net.activation]))
        fh.write(struct.pack(f"<{len(net.widths)}I", *net.widths))
        flat = net.flat()
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())
    sidecar = {"widths": list(net.widths), "activation": net.activation, "n_params": net.n_params}
    sidecar.update(metadata or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[Mlp, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError("not a network checkpoint")
    version, n_w, tag = struct.unpack_from("<III", data, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 20
    widths = struct.unpack_from(f"<{n_w}I", data, off)
    off += 4 * n_w
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    flat = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
    activation = {v: k for k, v in _ACT_TAGS.items()}[tag]
    net = Mlp.init(widths, 0, activation)
    net.set_flat(flat)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return net, meta
