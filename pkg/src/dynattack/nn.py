"""Dense numpy layers with hand-written backward passes.

Everything runs in float64. Forward functions return ``(output, cache)``;
the matching backward function takes the upstream gradient and the cache,
accumulates into ``Parameter.grad`` and returns gradients for the inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEBUG_FINITE = True

CHECKPOINT_MAGIC = b"DNATCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def _finite(x: np.ndarray, where: str) -> np.ndarray:
    if DEBUG_FINITE and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values after {where}")
    return x


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.value.ndim == 1:
            self.value = self.value.reshape(1, -1)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# activations ---------------------------------------------------------------

def sigmoid(x):
    # tanh form is overflow-free and much faster than scipy's expit here
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def activate_backward(name: str, dout: np.ndarray, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "identity":
        return dout
    if name == "relu":
        return dout * (z > 0)
    if name == "sigmoid":
        return dout * out * (1.0 - out)
    if name == "tanh":
        return dout * (1.0 - out * out)
    raise ValueError(f"unknown activation {name!r}")


# graph convolution -----------------------------------------------------------

def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalisation ``D^-1/2 (A + I) D^-1/2`` with self-loops added."""
    a = np.asarray(a, dtype=np.float64)
    at = a + np.eye(a.shape[0])
    dinv = 1.0 / np.sqrt(at.sum(axis=1))
    return at * dinv[:, None] * dinv[None, :]


def gcn_forward(a_norm: np.ndarray, h: np.ndarray | None, w: Parameter, activation: str = "relu"):
    """``activation(a_norm @ h @ W)``; ``h=None`` stands for identity node features."""
    if h is None:
        if a_norm.shape[1] != w.value.shape[0]:
            raise ValueError(f"identity features need W with {a_norm.shape[1]} rows, got {w.shape}")
        hw = w.value
    else:
        if a_norm.shape[1] != h.shape[0] or h.shape[1] != w.value.shape[0]:
            raise ValueError(f"shape mismatch: A {a_norm.shape}, H {h.shape}, W {w.shape}")
        hw = h @ w.value
    z = a_norm @ hw
    out = _finite(activate(activation, z), "gcn_forward")
    return out, (a_norm, h, z, out, activation)


def gcn_backward(dout: np.ndarray, cache, w: Parameter) -> np.ndarray | None:
    a_norm, h, z, out, activation = cache
    dz = activate_backward(activation, dout, z, out)
    # a_norm is symmetric but do not rely on it
    d_hw = a_norm.T @ dz
    if h is None:
        w.grad += d_hw
        return None
    w.grad += h.T @ d_hw
    return d_hw @ w.value.T


# dense ---------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: Parameter, b: Parameter, activation: str = "identity"):
    if x.shape[1] != w.value.shape[0] or b.value.shape[1] != w.value.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, W {w.shape}, b {b.shape}")
    z = x @ w.value + b.value
    out = _finite(activate(activation, z), "dense_forward")
    return out, (x, z, out, activation)


def dense_backward(dout, cache, w: Parameter, b: Parameter, accumulate: bool = True):
    x, z, out, activation = cache
    dz = activate_backward(activation, dout, z, out)
    if accumulate:
        w.grad += x.T @ dz
        b.grad += dz.sum(axis=0, keepdims=True)
    return dz @ w.value.T


# LSTM ----------------------------------------------------------------------

@dataclass
class LSTMWeights:
    """Gate order along the 4H axis is input, forget, output, candidate."""

    wx: Parameter
    wh: Parameter
    b: Parameter

    @property
    def hidden(self) -> int:
        return self.wh.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.wx, self.wh, self.b]

    @classmethod
    def init(cls, rng, input_dim: int, hidden: int, prefix: str = "lstm") -> "LSTMWeights":
        wx = np.concatenate([glorot(rng, input_dim, hidden) for _ in range(4)], axis=1)
        wh = np.concatenate([glorot(rng, hidden, hidden) for _ in range(4)], axis=1)
        b = np.zeros((1, 4 * hidden))
        b[0, hidden:2 * hidden] = 1.0
        return cls(Parameter(f"{prefix}.wx", wx), Parameter(f"{prefix}.wh", wh), Parameter(f"{prefix}.b", b))


def lstm_step_forward(x, h_prev, c_prev, cell: LSTMWeights):
    H = cell.hidden
    if x.shape[1] != cell.wx.value.shape[0] or h_prev.shape != (x.shape[0], H) or c_prev.shape != h_prev.shape:
        raise ValueError(
            f"shape mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, hidden {H}"
        )
    pre = x @ cell.wx.value + h_prev @ cell.wh.value + cell.b.value
    gates = sigmoid(pre[:, :3 * H])
    i, f, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:]
    g = np.tanh(pre[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = _finite(o * tc, "lstm_step_forward")
    return (h, c), (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, cell: LSTMWeights):
    """Returns ``(dx, dh_prev, dc_prev)``; ``dc`` is the gradient arriving on ``c``."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    dpre = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1
    )
    cell.wx.grad += x.T @ dpre
    cell.wh.grad += h_prev.T @ dpre
    cell.b.grad += dpre.sum(axis=0, keepdims=True)
    dx = dpre @ cell.wx.value.T
    dh_prev = dpre @ cell.wh.value.T
    return dx, dh_prev, dc_prev


# MLP -----------------------------------------------------------------------

class MLP:
    """Stack of dense layers, ReLU between them, identity at the output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp"):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(Parameter(f"{name}.w{k}", glorot(rng, fi, fo)))
            self.biases.append(Parameter(f"{name}.b{k}", np.zeros((1, fo))))

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x):
        caches = []
        nl = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x, cache = dense_forward(x, w, b, "relu" if k < nl - 1 else "identity")
            caches.append(cache)
        return x, caches

    def backward(self, dout, caches, accumulate: bool = True):
        for k in reversed(range(len(self.weights))):
            dout = dense_backward(dout, caches[k], self.weights[k], self.biases[k], accumulate)
        return dout


# Adam ----------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed list of parameters. Zeroes grads after each step."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr != 0.0:
                p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


def adam_update(params: Sequence[Parameter], state: Adam) -> None:
    if list(params) != state.params:
        raise ValueError("Adam state was built for a different parameter list")
    state.step()


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tol: float
    worst: str = ""
    finite: bool = True
    unresolved: int = 0

    @property
    def passed(self) -> bool:
        # unresolved entries must stay rare or the check says nothing
        return self.finite and self.max_rel_error <= self.tol and self.unresolved * 10 <= self.checked


def gradient_check(
    closure: Callable[[], float],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = 40,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients to central differences.

    ``closure`` must zero the gradients, run forward and backward, and return
    the scalar loss. Relative error is ``|a - n| / max(|a| + |n|, abs_floor)``
    so exact zeros on both sides count as agreement. The roundoff bound of the
    difference quotient is subtracted from ``|a - n|`` first, so slopes far
    below what the loss scale lets finite differences resolve are not scored.

    An entry that disagrees is re-differenced with ``h / 2``. If the two
    numerical estimates disagree with each other beyond ``tol`` (a kink
    inside the stencil, or roundoff swamping a tiny slope) the entry is
    counted as ``unresolved`` instead of scored. This decision never looks at
    the analytic gradient.
    """
    rng = rng or np.random.default_rng(0)
    closure()
    analytic = [p.grad.copy() for p in params]
    worst, worst_at, checked, unresolved = 0.0, "", 0, 0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            num, noise = _central(closure, flat, i, h)
            a = ga.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                closure()
                return GradCheckReport(np.inf, checked, tol, f"{p.name}[{i}]", finite=False)
            rel = max(abs(a - num) - noise, 0.0) / max(abs(a) + abs(num), abs_floor)
            checked += 1
            if rel > tol:
                num2, noise2 = _central(closure, flat, i, h / 2)
                if max(abs(num - num2) - noise2, 0.0) / max(abs(num) + abs(num2), abs_floor) > tol:
                    unresolved += 1
                    continue
            if rel > worst:
                worst, worst_at = rel, f"{p.name}[{i}]"
    closure()
    return GradCheckReport(worst, checked, tol, worst_at, unresolved=unresolved)


def _central(closure, flat, i, h) -> tuple[float, float]:
    """Central difference and its roundoff bound ``16 eps |f| / h``."""
    orig = flat[i]
    flat[i] = orig + h
    fp = closure()
    flat[i] = orig - h
    fm = closure()
    flat[i] = orig
    noise = 16 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / h
    return (fp - fm) / (2 * h), noise


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: Sequence[Parameter], manifest: dict | None = None) -> None:
    """Flat binary: magic, version, shape table, then row-major float64 payload.

    A JSON manifest is written next to it as ``<path>.json``.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode()
            r, c = p.value.shape
            fh.write(struct.pack("<H", len(name)) + name + struct.pack("<QQ", r, c))
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    meta = {"format": "dynattack-checkpoint", "version": CHECKPOINT_VERSION,
            "tensors": [[p.name, list(p.value.shape)] for p in params]}
    meta.update(manifest or {})
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a dynattack checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        table = []
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            r, c = struct.unpack("<QQ", fh.read(16))
            table.append((name, r, c))
        tensors = {}
        for name, r, c in table:
            buf = fh.read(8 * r * c)
            tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(r, c).astype(np.float64)
    try:
        with open(f"{path}.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        manifest = {}
    return tensors, manifest


def assign(params: Sequence[Parameter], tensors: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in tensors:
            raise KeyError(f"checkpoint lacks tensor {p.name}")
        if tensors[p.name].shape != p.value.shape:
            raise ValueError(f"{p.name}: shape {tensors[p.name].shape} != {p.value.shape}")
        p.value[...] = tensors[p.name]
