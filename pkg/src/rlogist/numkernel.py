"""Minimal dense-tensor numeric core: tape-based reverse-mode differentiation,
masked softmax, and Adam.

All arrays are float32 numpy ndarrays; reductions accumulate in float64.
Every op takes a tape as its first argument. With ``tape=None`` the op runs
directly on ndarrays (fast inference path); with a live tape it records the
backward closure and returns a :class:`Var`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_LOGIT = -1.0e8

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")


class KernelError(Exception):
    pass


class InvalidSpecError(KernelError):
    pass


class ShapeError(KernelError):
    pass


class NoLegalActionError(KernelError):
    pass


class StaleTapeError(KernelError):
    pass


class NumericError(KernelError):
    pass


class Var:
    """A node in a recorded computation. Holds the forward value and, after
    backward(), the accumulated gradient."""

    __slots__ = ("value", "grad", "_backward", "_parents")

    def __init__(self, value, parents=(), backward=None):
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Ordered record of primitive ops; one backward pass per tape."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.param_vars: dict[str, Var] = {}
        self.consumed = False

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.param_vars:
            return self.param_vars[name]
        v = Var(value)
        self.param_vars[name] = v
        return v

    def record(self, out_value, parents, backward) -> Var:
        v = Var(out_value, parents=parents, backward=backward)
        self.nodes.append(v)
        return v


def _val(x):
    return x.value if isinstance(x, Var) else x


def _accum(var, g):
    if not isinstance(var, Var):
        return
    if var.grad is None:
        var.grad = np.asarray(g, dtype=np.float64).copy()
    else:
        var.grad += g


def backward(tape: Tape, seed: Var, seed_grad=None) -> dict[str, np.ndarray]:
    """Run the tape in reverse from ``seed``; returns parameter gradients
    (float32) keyed by parameter name."""
    if tape.consumed:
        raise StaleTapeError("tape already replayed")
    tape.consumed = True
    if seed_grad is None:
        seed_grad = np.ones_like(np.asarray(seed.value), dtype=np.float64)
    seed.grad = np.asarray(seed_grad, dtype=np.float64).copy()
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    grads = {}
    for name, pv in tape.param_vars.items():
        if pv.grad is None:
            grads[name] = np.zeros_like(pv.value)
        else:
            grads[name] = pv.grad.astype(np.float32)
    return grads


# ---------------------------------------------------------------------------
# primitive ops


def matmul(tape, a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return tape.record(out, (a, b), bwd)


def add(tape, a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    if tape is None:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g, np.shape(av)))
        _accum(b, _unbroadcast(g, np.shape(bv)))

    return tape.record(out, (a, b), bwd)


def sub(tape, a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    if tape is None:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g, np.shape(av)))
        _accum(b, _unbroadcast(-g, np.shape(bv)))

    return tape.record(out, (a, b), bwd)


def mul(tape, a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    if tape is None:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g * bv, np.shape(av)))
        _accum(b, _unbroadcast(g * av, np.shape(bv)))

    return tape.record(out, (a, b), bwd)


def scale(tape, a, s: float):
    av = _val(a)
    out = av * s
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g * s)

    return tape.record(out, (a,), bwd)


def neg(tape, a):
    return scale(tape, a, -1.0)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def relu(tape, a):
    av = _val(a)
    out = np.maximum(av, 0.0)
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g * (av > 0))

    return tape.record(out, (a,), bwd)


def tanh(tape, a):
    av = _val(a)
    out = np.tanh(av)
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return tape.record(out, (a,), bwd)


def sigmoid(tape, a):
    av = _val(a)
    out = 1.0 / (1.0 + np.exp(-av))
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return tape.record(out, (a,), bwd)


def identity(tape, a):
    av = _val(a)
    if tape is None:
        return av

    def bwd(g):
        _accum(a, g)

    return tape.record(av, (a,), bwd)


def exp(tape, a):
    av = _val(a)
    out = np.exp(av)
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g * out)

    return tape.record(out, (a,), bwd)


def log(tape, a):
    av = _val(a)
    out = np.log(av)
    if tape is None:
        return out

    def bwd(g):
        _accum(a, g / av)

    return tape.record(out, (a,), bwd)


def reduce_sum(tape, a, axis=None, keepdims=False):
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims, dtype=np.float64)
    if tape is None:
        return out

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, np.shape(av)))

    return tape.record(out, (a,), bwd)


def reduce_mean(tape, a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.shape(av)[axis]
    s = reduce_sum(tape, a, axis=axis, keepdims=keepdims)
    return scale(tape, s, 1.0 / n)


def reduce_max(tape, a, axis=0):
    av = _val(a)
    out = np.max(av, axis=axis)
    if tape is None:
        return out
    argmax = np.argmax(av, axis=axis)

    def bwd(g):
        full = np.zeros(np.shape(av), dtype=np.float64)
        idx = list(np.indices(out.shape))
        idx.insert(axis, argmax)
        full[tuple(idx)] = g
        _accum(a, full)

    return tape.record(out, (a,), bwd)


def concat(tape, parts, axis=0):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [np.shape(v)[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return tape.record(out, tuple(parts), bwd)


def reshape(tape, a, shape):
    av = _val(a)
    out = np.reshape(av, shape)
    if tape is None:
        return out

    def bwd(g):
        _accum(a, np.reshape(g, np.shape(av)))

    return tape.record(out, (a,), bwd)


def pick(tape, a, index):
    """Select one element of a flat vector as a scalar."""
    av = _val(a)
    flat = np.ravel(av)
    out = flat[index]
    if tape is None:
        return out

    def bwd(g):
        full = np.zeros(np.shape(av), dtype=np.float64)
        np.ravel(full)[index] = g
        _accum(a, full)

    return tape.record(out, (a,), bwd)


def minimum(tape, a, b):
    av, bv = _val(a), _val(b)
    out = np.minimum(av, bv)
    if tape is None:
        return out
    take_a = av <= bv

    def bwd(g):
        _accum(a, _unbroadcast(g * take_a, np.shape(av)))
        _accum(b, _unbroadcast(g * ~take_a, np.shape(bv)))

    return tape.record(out, (a, b), bwd)


def clip(tape, a, lo: float, hi: float):
    av = _val(a)
    out = np.clip(av, lo, hi)
    if tape is None:
        return out
    inside = (av > lo) & (av < hi)

    def bwd(g):
        _accum(a, g * inside)

    return tape.record(out, (a,), bwd)


def softmax_rows(tape, a):
    """Row-wise softmax of a 2D array."""
    av = _val(a)
    shifted = av - np.max(av, axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=1, keepdims=True)
    if tape is None:
        return out

    def bwd(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        _accum(a, out * (g - dot))

    return tape.record(out, (a,), bwd)


def attn_pool(tape, alpha, items):
    """Weighted sum of item sets: alpha (B,K) x items (B,K,D) -> (B,D)."""
    av, iv = _val(alpha), _val(items)
    out = np.einsum("bk,bkd->bd", av, iv)
    if tape is None:
        return out

    def bwd(g):
        _accum(alpha, np.einsum("bd,bkd->bk", g, iv))
        _accum(items, np.einsum("bk,bd->bkd", av, g))

    return tape.record(out, (alpha, items), bwd)


def bce_with_logit(tape, logit, y: float):
    """Numerically stable binary cross-entropy on a scalar logit."""
    x = float(_val(logit))
    out = max(x, 0.0) - x * y + np.log1p(np.exp(-abs(x)))
    if tape is None:
        return out
    p = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        _accum(logit, np.asarray(g * (p - y)).reshape(np.shape(_val(logit))))

    return tape.record(out, (logit,), bwd)


# ---------------------------------------------------------------------------
# masked softmax


def apply_mask(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Replace logits of illegal entries with the large negative constant."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[~legal] = MASK_LOGIT
    return masked


def masked_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Probability distribution over legal entries; illegal entries receive
    logit -1e8 before normalization."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    legal = np.asarray(legal, dtype=bool).ravel()
    if logits.shape != legal.shape:
        raise ShapeError(f"logits {logits.shape} vs mask {legal.shape}")
    if not legal.any():
        raise NoLegalActionError("all actions masked")
    masked = apply_mask(logits, legal)
    masked -= np.max(masked[legal])
    e = np.exp(masked)
    p = e / e.sum()
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite probabilities in masked_softmax")
    return p


def masked_log_softmax(tape, logits, legal: np.ndarray):
    """Differentiable log-probabilities with illegal entries masked out.

    Gradients flow only through legal entries."""
    lv = np.asarray(_val(logits), dtype=np.float64).ravel()
    legal = np.asarray(legal, dtype=bool).ravel()
    if not legal.any():
        raise NoLegalActionError("all actions masked")
    masked = apply_mask(lv, legal)
    m = np.max(masked[legal])
    shifted = masked - m
    lse = np.log(np.sum(np.exp(shifted)))
    out = shifted - lse
    if tape is None:
        return out
    p = np.exp(out)

    def bwd(g):
        grad = g - p * np.sum(g)
        grad = grad * legal
        _accum(logits, grad.reshape(np.shape(_val(logits))))

    return tape.record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# layered networks (the plain-MLP surface used by forward/backward)


@dataclass
class NetworkParams:
    layers: list[tuple[int, int, str]]
    params: dict[str, np.ndarray]

    def parameter_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int,
                zero: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Uniform [-sqrt(6/(fan_in+fan_out)), +...] weights, zero biases."""
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    b = np.zeros(fan_out, dtype=np.float32)
    return w, b


def build_network(layer_spec, seed: int = 0) -> NetworkParams:
    if not layer_spec:
        raise InvalidSpecError("layer spec is empty")
    for i, (fi, fo, act) in enumerate(layer_spec):
        if fi <= 0 or fo <= 0:
            raise InvalidSpecError(f"layer {i}: non-positive width")
        if act not in ACTIVATIONS:
            raise InvalidSpecError(f"layer {i}: unknown activation {act!r}")
        if i > 0 and layer_spec[i - 1][1] != fi:
            raise InvalidSpecError(f"layer {i}: width mismatch with layer {i - 1}")
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fi, fo, _act) in enumerate(layer_spec):
        w, b = init_linear(rng, fi, fo)
        params[f"w{i}"] = w
        params[f"b{i}"] = b
    return NetworkParams(layers=list(layer_spec), params=params)


_ACT_FNS = {"identity": identity, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def forward(net: NetworkParams, x: np.ndarray, record: bool = False):
    """Run the MLP; returns (output, tape) with tape None unless recording."""
    x = np.asarray(x, dtype=np.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.layers[0][0]:
        raise ShapeError(
            f"input width {x.shape[1]} != first layer width {net.layers[0][0]}")
    tape = Tape() if record else None
    h = x
    for i, (_fi, _fo, act) in enumerate(net.layers):
        if tape is not None:
            w = tape.param(f"w{i}", net.params[f"w{i}"])
            b = tape.param(f"b{i}", net.params[f"b{i}"])
        else:
            w = net.params[f"w{i}"]
            b = net.params[f"b{i}"]
        h = add(tape, matmul(tape, h, w), b)
        h = _ACT_FNS[act](tape, h)
    out_val = _val(h)
    if not np.all(np.isfinite(out_val)):
        raise NumericError("non-finite forward output")
    if squeeze:
        out_val = np.asarray(out_val)[0]
    if record:
        return out_val, (tape, h)
    return out_val, None


def network_backward(recorded, output_gradient: np.ndarray) -> dict[str, np.ndarray]:
    """Backward for a recorded forward(); returns per-parameter gradients."""
    tape, out_var = recorded
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != np.shape(out_var.value):
        raise ShapeError(
            f"output gradient shape {g.shape} != output shape {np.shape(out_var.value)}")
    return backward(tape, out_var, g)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    learning_rate: float = 2.5e-4
    epsilon: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm_clip(grads: dict[str, np.ndarray], max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
                        for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {k: (g * factor).astype(np.float32) for k, g in grads.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr_scale: float = 1.0):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate * lr_scale
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float32)
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[name] -= (lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(np.float32)
    return params, state


def linear_anneal(base_lr: float, progress: float) -> float:
    """Learning rate decayed linearly to 0 at progress=1."""
    return base_lr * max(0.0, 1.0 - progress)
