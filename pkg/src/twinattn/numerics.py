"""Dense float64 tensors with a small reverse-mode gradient tape.

Every exported operation takes ``Tensor`` (or array-like) inputs and returns a
new ``Tensor``. When any input requires a gradient, the result records its
parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` walks that graph in reverse topological order.

Masking is expressed as an additive bias holding ``0`` or ``-inf`` entries,
added before :func:`row_softmax`.
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -np.inf


class DimensionError(ValueError):
    """Raised when operand shapes are not conformable."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no finite entry."""


class Tensor:
    """A float64 array node in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named learnable tensor. Frozen parameters never receive gradient."""

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, data, frozen: bool = False):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=not frozen)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    z = x.data
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _node(out, (x,), backward)


# ----------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------- shape algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _node(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),)
    )


def take(x, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), backward)


# ----------------------------------------------------------- neural primitives


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` along the last axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def row_softmax(x, bias=None) -> Tensor:
    """Softmax over the last axis, after adding an optional mask bias.

    Entries equal to ``-inf`` map to exactly ``0``. A row with no finite entry
    raises :class:`DegenerateRowError`.
    """
    x = as_tensor(x)
    z = x.data if bias is None else x.data + np.asarray(bias, dtype=np.float64)
    peak = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        bad = np.argwhere(~np.isfinite(peak[..., 0]))
        raise DegenerateRowError(f"row_softmax: row(s) {bad[:4].tolist()} have no finite entry")
    e = np.exp(z - peak)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _node(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _node(out, (x, gain, bias), backward)


def segment_mean(x, ids: np.ndarray, count: int) -> Tensor:
    """Mean of the rows of ``x`` sharing each id in ``[0, count)``."""
    x = as_tensor(x)
    ids = np.asarray(ids)
    sizes = np.bincount(ids, minlength=count)
    if sizes.shape[0] != count or np.any(sizes == 0):
        raise ValueError(f"segment_mean: ids must cover every segment in [0, {count}) at least once")
    order = np.argsort(ids, kind="stable")
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    out = np.add.reduceat(x.data[order], starts, axis=0) / sizes[:, None]
    scale = (1.0 / sizes)[ids][:, None]
    return _node(out, (x,), lambda g: (g[ids] * scale,))


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (no reduction)."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    z = logits.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)
    return _node(out, (logits,), lambda g: (g * (p - t),))


# ----------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: str = ""
    checked: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error <= self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    tolerance: float = 1e-6,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values on each call. Relative error is measured per entry as
    ``|a - n| / max(|a|, |n|, 1e-3)``. When ``max_entries`` is given, that
    many randomly chosen entries of each parameter are probed.
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport(np.inf, tolerance, "loss", 0, ["non-finite loss at base point"])
    loss.backward()
    report = GradCheckReport(0.0, tolerance)
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            up = loss_fn().data
            flat[k] = orig - step
            down = loss_fn().data
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                report.failures.append(f"non-finite loss perturbing {p.name}[{k}]")
                continue
            numeric = float((up - down) / (2 * step))
            err = relative_error(float(analytic.reshape(-1)[k]), numeric)
            report.checked += 1
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = f"{p.name}[{k}]"
    for p in params:
        p.zero_grad()
    return report


# ------------------------------------------------------------ parameter store


class ParameterSet:
    """Ordered, name-unique collection of parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, frozen=frozen)
        self._params[name] = p
        return p

    def linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        """Xavier-uniform weight plus zero bias; returns ``(weight, bias)``."""
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = self.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        b = self.add(f"{name}.bias", np.zeros(fan_out))
        return w, b

    def norm(self, name: str, width: int):
        return self.add(f"{name}.gain", np.ones(width)), self.add(f"{name}.bias", np.zeros(width))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def trainable(self) -> list:
        return [p for p in self._params.values() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count(self, prefix: str = "") -> int:
        return int(builtins.sum(p.data.size for n, p in self._params.items() if n.startswith(prefix)))

    def state(self) -> dict:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, p in self._params.items():
            value = np.asarray(arrays[n], dtype=np.float64)
            if value.size != p.data.size:
                raise ValueError(f"{n}: stored size {value.size} != {p.data.size}")
            p.data[...] = value.reshape(p.shape)
