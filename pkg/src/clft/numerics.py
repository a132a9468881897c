"""Minimal define-by-run reverse-mode autodiff over numpy arrays, plus Adam.

A :class:`Tensor` wraps a float64 array. Operations on tensors that require
gradients record a backward closure; :func:`backward` walks the recorded graph
in reverse topological order. Graphs are rebuilt on every step.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op output. ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.values + b.values, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.values - b.values, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return make_node(av * bv, (a, b), bw)


def square(x: Tensor) -> Tensor:
    xv = x.values
    return make_node(xv * xv, (x,), lambda g: (2.0 * xv * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return make_node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    return make_node(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.values > 0
    return make_node(np.where(pos, x.values, 0.0), (x,), lambda g: (g * pos,))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.values.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_node(x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2:
        raise ValueError("matmul: left operand must be at least 2-D")
    vec = bv.ndim == 1

    def bw(g):
        ga = gb = None
        if vec:
            if a.requires_grad:
                ga = g[..., :, None] * bv
            if b.requires_grad:
                gb = (av * g[..., :, None]).reshape(-1, bv.shape[0]).sum(0)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return make_node(av @ bv, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[in, out]``."""
    x = as_tensor(x)
    xv, wv = x.values, w.values
    y = xv @ wv
    if b is not None:
        y = y + b.values
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(0) if b.requires_grad else None)

    return make_node(y, parents, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    mu = xv.mean(-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.values + beta.values
    n = xv.shape[-1]

    def bw(g):
        flat = (-1, n)
        gx = None
        if x.requires_grad:
            gh = g * gamma.values
            gx = inv * (gh - gh.mean(-1, keepdims=True)
                        - xhat * (gh * xhat).mean(-1, keepdims=True))
        gg = (g * xhat).reshape(flat).sum(0) if gamma.requires_grad else None
        gb = g.reshape(flat).sum(0) if beta.requires_grad else None
        return gx, gg, gb

    return make_node(y, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return make_node(y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Strided 1-D convolution over time for ``x`` of shape ``[N, T, C]``.

    ``w`` has shape ``[k, C, C_out]``. Output frame ``t`` reads input frames
    ``t*stride .. t*stride+k-1``, zero-padded on the right; the output length is
    ``ceil(T / stride)``.
    """
    xv, wv = x.values, w.values
    n, t_in, c = xv.shape
    k = wv.shape[0]
    t_out = -(-t_in // stride)
    span = (t_out - 1) * stride + k
    if span > t_in:
        xp = np.zeros((n, span, c))
        xp[:, :t_in] = xv
    else:
        xp = xv
    hi = (t_out - 1) * stride + 1
    taps = [xp[:, j:j + hi:stride] for j in range(k)]
    y = b.values + sum(taps[j] @ wv[j] for j in range(k))

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros((n, max(span, t_in), c))
            for j in range(k):
                gxp[:, j:j + hi:stride] += g @ wv[j].T
            gx = gxp[:, :t_in]
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([taps[j].reshape(-1, c).T @ g2 for j in range(k)])
        gb = g.reshape(-1, g.shape[-1]).sum(0) if b.requires_grad else None
        return gx, gw, gb

    return make_node(y, (x, w, b), bw)


def mask_replace(x: Tensor, mask: np.ndarray, emb: Tensor) -> Tensor:
    """Replace rows ``x[mask]`` (``mask`` over the leading axes) with ``emb``."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    y = np.where(m[..., None], emb.values, x.values)

    def bw(g):
        gx = np.where(m[..., None], 0.0, g) if x.requires_grad else None
        ge = g[m].sum(0) if emb.requires_grad else None
        return gx, ge

    return make_node(y, (x, emb), bw)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of squared errors over the rows selected by ``mask`` and all features."""
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum()) * pred.shape[-1]
    if count == 0:
        raise ValueError("masked_mse: mask selects no positions")
    diff = np.where(m[..., None], pred.values - target, 0.0)
    val = np.asarray((diff * diff).sum() / count)
    return make_node(val, (pred,), lambda g: (g * 2.0 * diff / count,))


def convex_combination(items: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_l softmax(weights)_l * items[l]``."""
    wv = weights.values
    if wv.shape != (len(items),):
        raise ValueError(f"expected {len(items)} weights, got shape {wv.shape}")
    shape = items[0].shape
    for it in items:
        if it.shape != shape:
            raise ValueError("convex_combination: items differ in shape")
    z = np.exp(wv - wv.max())
    s = z / z.sum()
    y = sum(s[i] * it.values for i, it in enumerate(items))

    def bw(g):
        grads = [s[i] * g if it.requires_grad else None for i, it in enumerate(items)]
        gw = None
        if weights.requires_grad:
            ds = np.array([(g * it.values).sum() for it in items])
            gw = s * (ds - (s * ds).sum())
        return (*grads, gw)

    return make_node(y, (*items, weights), bw)


# ---------------------------------------------------------------------------
# parameters and backward
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with a trainable flag; iteration is lexicographic.

    The trainable flag lives on the tensor (``requires_grad``) so a tensor
    shared by two stores has one consistent state.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, values, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=trainable, name=name)
        self._tensors[name] = t
        return t

    def attach(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def is_trainable(self, name: str) -> bool:
        return self._tensors[name].requires_grad

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._tensors[n].requires_grad]

    def set_trainable(self, names: Iterable[str] | None) -> None:
        """Make exactly ``names`` trainable (``None`` freezes everything)."""
        keep = set(names or ())
        unknown = keep - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for n, t in self._tensors.items():
            t.requires_grad = n in keep

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self._tensors[n].values.copy() for n in self.names()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._tensors):
            missing = set(self._tensors) ^ set(state)
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for n, v in state.items():
            if n not in self._tensors:
                continue
            t = self._tensors[n]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {v.shape} vs {t.shape}")
            t.values = v.copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self.items():
            out.add(n, t.values.copy(), trainable=t.requires_grad)
        return out

    def num_values(self, names: Iterable[str] | None = None) -> int:
        names = self.names() if names is None else names
        return int(sum(self._tensors[n].values.size for n in names))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Back-propagate a scalar loss.

    Leaf tensors receive ``.grad``. When ``params`` is given, returns a map
    with one gradient per trainable parameter (zeros for unreachable ones).
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.values).all():
        raise FloatingPointError("loss is not finite")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            if not np.isfinite(node.values).all():
                raise FloatingPointError("non-finite intermediate value in graph")
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._backward is None:
                    p.grad = None  # stale value from an earlier call
    if params is None:
        return {}
    out = {}
    for name in params.trainable_names():
        t = params[name]
        g = t.grad
        out[name] = np.zeros_like(t.values) if g is None else np.asarray(g).reshape(t.shape)
        t.grad = None
    return out


def finite_diff_check(f: Callable[[], float | Tensor], params: ParamStore, names: Sequence[str] | None = None,
                      h: float = 1e-5, n_coords: int = 50, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` evaluates the scalar loss from the current values in ``params``.
    Coordinates are sampled uniformly over the flattened ``names`` parameters.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(params.trainable_names() if names is None else names)
    saved = {n: params[n].requires_grad for n in params.names()}
    params.set_trainable(names)
    try:
        loss = f()
        again = f()
        if float(np.asarray(_value(loss))) != float(np.asarray(_value(again))):
            raise ValueError("function is not deterministic")
        if not isinstance(loss, Tensor):
            raise TypeError("f must return a Tensor for the analytic gradient")
        grads = backward(loss, params)
        sizes = [params[n].values.size for n in names]
        total = sum(sizes)
        rng = np.random.default_rng(seed)
        picks = rng.choice(total, size=min(n_coords, total), replace=False) if total else []
        offsets = np.cumsum([0] + sizes)
        worst = 0.0
        with no_grad():
            for flat in picks:
                i = int(np.searchsorted(offsets, flat, side="right") - 1)
                name, j = names[i], int(flat - offsets[i])
                t = params[name]
                base = t.values.copy()
                bumped = base.copy().reshape(-1)
                bumped[j] = base.reshape(-1)[j] + h
                t.values = bumped.reshape(base.shape)
                fp = _value(f())
                bumped[j] = base.reshape(-1)[j] - h
                t.values = bumped.reshape(base.shape)
                fm = _value(f())
                t.values = base
                numeric = (fp - fm) / (2 * h)
                analytic = float(grads[name].reshape(-1)[j])
                err = abs(analytic - numeric) / max(abs(analytic), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for n, flag in saved.items():
            params[n].requires_grad = flag


def _value(x) -> float:
    return float(x.values) if isinstance(x, Tensor) else float(x)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter update counts, so parameters unfrozen mid-run get fresh bias correction
    t: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: OptimizerState) -> tuple[ParamStore, OptimizerState]:
    """Apply one Adam update to the trainable parameters in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name in params.trainable_names():
        if name not in grads:
            raise KeyError(f"no gradient for trainable parameter {name!r}")
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        else:
            v = state.v[name]
            if m.shape != p.shape:
                raise ValueError(f"optimizer state shape mismatch for {name!r}")
        t = state.t.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.values = p.values - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        state.m[name], state.v[name], state.t[name] = m, v, t
    return params, state
