"""Small reverse-mode autodiff engine on top of numpy.

Every value is a float64 array wrapped in a :class:`Tensor`. Operations record
their inputs and a closure that maps the output gradient to input gradients;
``Tensor.backward`` walks the recorded graph in reverse topological order.

Tensors may carry leading batch axes (``(..., rows, cols)``); matmul and
row-wise ops act on the trailing axes. Broadcasting is limited to what the
model needs: bias vectors, size-1 axes and scalars.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
CHECKPOINT_VERSION = 1

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending op."""


class GraphStateError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (used for inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; divide by a constant array")
        return mul(self, Tensor(1.0 / np.asarray(other, dtype=DTYPE)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    # -- reverse pass -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf.

        Leaf gradients are added to, never overwritten; call ``zero_grad``
        between independent backward passes.
        """
        if self.data.size != 1:
            raise GraphStateError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphStateError("root does not depend on any differentiable tensor; nothing to backpropagate")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op} (shape {data.shape})")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError(f"log of non-positive value (min {a.data.min():.3e})")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """``x - log(sum(exp(x)))`` built from exp/sum/log with a detached shift."""
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    centred = a - shift
    return centred - log(sum(exp(centred), axis=axis, keepdims=True))


def inner(a, b, axis: int = -1) -> Tensor:
    """Inner product along ``axis``."""
    return sum(mul(a, b), axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward, "concat")


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer index array."""
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(f"gather_rows: index out of range [0, {rows}) for table {table.name or table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), backward, "gather")


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing with a scatter-add backward."""
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "take")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------
def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check(fn, params, eps: float = 1e-5, richardson: bool = False) -> GradCheckResult:
    """Compare backprop gradients with central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params`` (a Tensor or a name->Tensor mapping); any randomness inside
    must be frozen. Every coordinate of every parameter is perturbed.

    With ``richardson`` the central differences at ``eps`` and ``eps/2`` are
    combined as (4*D(eps/2) - D(eps)) / 3, cancelling the eps**2 term. This
    lets a larger step keep roundoff small on near-zero gradients without
    losing accuracy on strongly curved coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(params, Tensor):
        params = {params.name or "x": params}
    for p in params.values():
        p.zero_grad()
    fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def central(flat, i, h, name, shape):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            coord = np.unravel_index(i, shape)
            raise FloatingPointError(f"non-finite objective while perturbing {name}{list(coord)}")
        return (up - down) / (2 * h)

    worst_err, worst, checked, per_param = 0.0, None, 0, {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        with no_grad():
            for i in range(flat.size):
                d = central(flat, i, eps, name, p.shape)
                if richardson:
                    d = (4 * central(flat, i, eps / 2, name, p.shape) - d) / 3
                numeric[i] = d
        err = relative_error(analytic[name].reshape(-1), numeric)
        checked += flat.size
        per_param[name] = float(err.max()) if err.size else 0.0
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst = (name, tuple(int(c) for c in np.unravel_index(int(err.argmax()), p.shape)))
    for p in params.values():
        p.zero_grad()
    return GradCheckResult(worst_err, worst, checked, per_param)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------
class Adam:
    """Adam with bias-corrected moments. ``step`` reads ``.grad`` but never clears it."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array(self.t, dtype=np.int64)}
        for k in self.params:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam/t"])
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam/m/{k}"], dtype=DTYPE)
            self.v[k] = np.array(arrays[f"adam/v/{k}"], dtype=DTYPE)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a flat name -> array archive with a version header (npz)."""
    payload = {"__version__": np.array(CHECKPOINT_VERSION, dtype=np.int64)}
    payload.update({k: np.asarray(v) for k, v in arrays.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["__version__"]) if "__version__" in archive else None
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} in {path}")
        return {k: archive[k] for k in archive.files if k != "__version__"}
