"""Dense tensors with tape-based reverse-mode differentiation.

Every operation here works on numpy arrays and records a backward closure on
its output whenever one of its inputs requires a gradient. ``Tape`` orders the
recorded graph topologically so that a node's gradient is complete before it
is propagated to its inputs.

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes or a scalar operand. Anything else goes through an explicit op
(``expand``, ``linear``, ``masked_fill``).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_FLOOR = 1e-12

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for an operation."""


class InvalidMaskError(ValueError):
    """A softmax row has no unmasked position."""


class ContractError(ValueError):
    """A precondition of an operation or harness was violated."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64, np.complex128):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- gradients -----------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def backward(self, grad=None) -> None:
        Tape(self).backward(grad)

    # -- operator sugar ------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)


class Parameter(Tensor):
    """A named leaf tensor that is always differentiable."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Topologically ordered record of the operations that produced ``output``.

    Nodes are listed inputs-first; ``backward`` walks them in reverse so each
    node has received every contribution before it pushes gradient further.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)

    def backward(self, grad=None) -> None:
        out = self.output
        if grad is None:
            if out.size != 1:
                raise ContractError(f"backward needs an explicit gradient for shape {out.shape}")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z.real >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient below the floor."""
    live = x.data.real > floor
    clipped = np.where(live, x.data, floor)

    def backward(g):
        return (np.where(live, g / clipped, 0.0).astype(x.dtype),)

    return _make(np.log(clipped), (x,), backward, "log")


ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(op: str, *operands) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across any leading batch axes of ``a``) or has
    exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward, "linear")


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, tensors, backward, "stack")


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``size`` times along it."""
    data = np.repeat(np.expand_dims(x.data, axis), size, axis=axis)
    return _make(data, (x,), lambda g: (g.sum(axis=axis),), "expand")


def sum_(x: Tensor, axis=None) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(data, (x,), backward, "sum")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; mask broadcasts onto x."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make(data, (x,), lambda g: (np.where(mask, 0.0, g).astype(x.dtype),), "masked_fill")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"where: branch shapes differ {a.shape} vs {b.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)

    def backward(g):
        zero = np.zeros_like(g)
        return np.where(mask, g, zero), np.where(mask, zero, g)

    return _make(np.where(mask, a.data, b.data), (a, b), backward, "where")


# ----------------------------------------------------------------------
# reductions and normalisation
# ----------------------------------------------------------------------

def masked_softmax(logits: Tensor, mask=None, axis: int = -1, allow_empty: bool = False) -> Tensor:
    """Softmax along ``axis`` restricted to positions where ``mask`` is true.

    Masked positions (and positions holding -inf) get exactly zero. A row with
    nothing unmasked raises ``InvalidMaskError`` unless ``allow_empty`` is set,
    in which case the row is all zeros.
    """
    x = logits.data
    valid = ~np.isneginf(x.real)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"mask shape {mask.shape} differs from logits {x.shape}")
        valid = valid & mask
    any_valid = valid.any(axis=axis, keepdims=True)
    if not allow_empty and not any_valid.all():
        raise InvalidMaskError("softmax row has no unmasked position")
    shifted = np.where(valid, x, -np.inf)
    row_max = np.max(shifted.real, axis=axis, keepdims=True)
    row_max = np.where(any_valid, row_max, 0.0)
    e = np.where(valid, np.exp(np.where(valid, x - row_max, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = (e / np.where(any_valid, denom, 1.0)).astype(logits.dtype)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (logits,), backward, "masked_softmax")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(logits, None, axis)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal entry."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    arg = np.argmax(x.data.real, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(data, (x,), backward, "max")


# ----------------------------------------------------------------------
# indexing ops used by embeddings, pointers and losses
# ----------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b] = x[b, idx[b]]`` for a batch-leading tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(x.data[rows, idx], (x,), backward, "gather_rows")


def scatter_add(src: Tensor, idx: np.ndarray, size: int) -> Tensor:
    """``out[b, idx[b, i]] += src[b, i]`` into a zero ``(B, size)`` tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if src.ndim != 2 or idx.shape != src.shape:
        raise DimensionError(f"scatter_add: src {src.shape} vs index {idx.shape}")
    rows = np.broadcast_to(np.arange(src.shape[0])[:, None], idx.shape)
    out = np.zeros((src.shape[0], size), dtype=src.dtype)
    np.add.at(out, (rows, idx), src.data)
    return _make(out, (src,), lambda g: (g[rows, idx],), "scatter_add")


# ----------------------------------------------------------------------
# recurrent cell
# ----------------------------------------------------------------------

def gru_cell(x: Tensor, h: Tensor, w_input: Tensor, w_hidden: Tensor, bias: Tensor) -> Tensor:
    """One GRU step (update gate z, reset gate r, candidate c).

    Weights are stored fused in the order [z | r | c]::

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        c = tanh(x Wc + (r * h) Uc + bc)
        h' = z * h + (1 - z) * c
    """
    d = h.shape[-1]
    if w_input.shape != (x.shape[-1], 3 * d) or w_hidden.shape != (d, 3 * d) or bias.shape != (3 * d,):
        raise DimensionError(
            f"gru_cell: x {x.shape}, h {h.shape}, W {w_input.shape}, U {w_hidden.shape}, b {bias.shape}"
        )
    if x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"gru_cell: batch axes differ {x.shape} vs {h.shape}")
    xp = x.data @ w_input.data + bias.data
    u_zr = w_hidden.data[:, : 2 * d]
    u_c = w_hidden.data[:, 2 * d :]
    zr = _sigmoid(xp[..., : 2 * d] + h.data @ u_zr)
    z, r = zr[..., :d], zr[..., d:]
    rh = r * h.data
    c = np.tanh(xp[..., 2 * d :] + rh @ u_c)
    out = z * h.data + (1.0 - z) * c

    def backward(g):
        dz = g * (h.data - c) * z * (1.0 - z)
        dc_pre = g * (1.0 - z) * (1.0 - c * c)
        d_rh = dc_pre @ u_c.T
        dr = d_rh * h.data * r * (1.0 - r)
        dxp = np.concatenate([dz, dr, dc_pre], axis=-1)
        dh = g * z + d_rh * r + np.concatenate([dz, dr], axis=-1) @ u_zr.T
        dx = dxp @ w_input.data.T
        flat_x = x.data.reshape(-1, x.shape[-1])
        flat_h = h.data.reshape(-1, d)
        dW = flat_x.T @ dxp.reshape(-1, 3 * d)
        dU = np.concatenate(
            [flat_h.T @ np.concatenate([dz, dr], axis=-1).reshape(-1, 2 * d),
             rh.reshape(-1, d).T @ dc_pre.reshape(-1, d)],
            axis=1,
        )
        db = dxp.reshape(-1, 3 * d).sum(axis=0)
        return dx, dh, dW, dU, db

    return _make(out, (x, h, w_input, w_hidden, bias), backward, "gru_cell")


# ----------------------------------------------------------------------
# parameters and modules
# ----------------------------------------------------------------------

class Module:
    """Container whose Parameters and sub-Modules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                out.append((prefix + key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ParamFactory:
    """Seeded source of initialised Parameters.

    Weight matrices draw from uniform(-scale, scale); biases start at zero.
    """

    def __init__(self, rng: np.random.Generator, dtype=DEFAULT_DTYPE, scale: float = 0.1):
        self.rng = rng
        self.dtype = dtype
        self.scale = scale

    def weight(self, *shape: int) -> Parameter:
        return Parameter(self.rng.uniform(-self.scale, self.scale, size=shape), dtype=self.dtype)

    def bias(self, *shape: int) -> Parameter:
        return Parameter(np.zeros(shape), dtype=self.dtype)


def name_parameters(module: Module) -> None:
    """Stamp dotted attribute paths onto every Parameter of ``module``."""
    seen: set[str] = set()
    for name, p in module.named_parameters():
        if name in seen:
            raise ContractError(f"duplicate parameter name {name}")
        seen.add(name)
        p.name = name


# ----------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------

class GradCheckReport:
    def __init__(self, errors: dict[str, float], tol: float, numeric: dict[str, np.ndarray] | None = None):
        self.errors = errors
        self.tol = tol
        self.numeric = numeric or {}

    def against(self, analytic: dict[str, np.ndarray], tol: float) -> "GradCheckReport":
        """Score other analytic gradients (e.g. from a 32-bit pass) against the stored numeric ones."""
        errors = {name: _relative_error(analytic[name], n) for name, n in self.numeric.items()}
        return GradCheckReport(errors, tol, self.numeric)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [name for name, e in self.errors.items() if e > self.tol]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __repr__(self):
        status = "pass" if self.passed else f"FAIL {self.failing}"
        return f"GradCheckReport({status}, max_rel_err={self.max_error:.3e}, tol={self.tol:g})"


def _input_name(t: Tensor, i: int) -> str:
    return getattr(t, "name", "") or f"input[{i}]"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if not a.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / denom).max())


def _numeric_gradient(evaluate: Callable[[], complex], flat: np.ndarray, eps: float, method: str) -> np.ndarray:
    """Derivative of ``evaluate`` w.r.t. each entry of ``flat``, which it reads in place.

    ``central``: (f(x+e) - f(x-e)) / 2e.
    ``complex``: Im f(x + ie) / e, free of subtractive cancellation, so eps can be tiny.
    """
    out = np.zeros(flat.size, dtype=np.float64)
    for j in range(flat.size):
        orig = flat[j]
        if method == "central":
            flat[j] = orig + eps
            hi = evaluate().real
            flat[j] = orig - eps
            lo = evaluate().real
            out[j] = (hi - lo) / (2 * eps)
        else:
            flat[j] = orig + 1j * eps
            out[j] = evaluate().imag / eps
        flat[j] = orig
    return out


def _check_method(method: str) -> None:
    if method not in ("central", "complex"):
        raise ContractError(f"unknown finite-difference method {method!r}")


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-6,
    analytic_dtype=np.float64,
    method: str = "central",
) -> GradCheckReport:
    """Compare backward-pass gradients with numeric derivatives.

    ``f`` is called with tensors built from ``inputs``. The numeric side runs
    in float64 (complex128 for ``method="complex"``); the analytic side runs in
    ``analytic_dtype`` so 32-bit backward passes can be checked against a
    64-bit oracle. Per input, the reported error is
    ``max |a - n| / max(|a|, |n|, 1e-8)``.
    """
    _check_method(method)
    inputs = list(inputs)
    base = [np.array(t.data, dtype=np.float64) for t in inputs]

    analytic_in = [Tensor(b, requires_grad=True, dtype=analytic_dtype) for b in base]
    out = f(*analytic_in)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()

    work_dtype = np.complex128 if method == "complex" else np.float64
    work = [b.astype(work_dtype) for b in base]

    def evaluate() -> complex:
        with no_grad():
            return complex(f(*[Tensor(w, dtype=work_dtype) for w in work]).data)

    errors: dict[str, float] = {}
    numerics: dict[str, np.ndarray] = {}
    for i, t in enumerate(inputs):
        flat = work[i].reshape(-1)
        numeric = _numeric_gradient(evaluate, flat, eps, method)
        a = np.zeros_like(base[i]) if analytic_in[i].grad is None else analytic_in[i].grad
        name = _input_name(t, i)
        errors[name] = _relative_error(a, numeric)
        numerics[name] = numeric.reshape(base[i].shape)
    return GradCheckReport(errors, tol, numerics)


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    tol: float = 1e-6,
    analytic: dict[str, np.ndarray] | None = None,
    method: str = "central",
) -> GradCheckReport:
    """Numeric check of ``loss_fn`` with respect to parameters it closes over.

    Parameters are perturbed in place and must be float64. ``analytic`` may
    supply gradients computed elsewhere (for example by a float32 copy of the
    model); otherwise they come from one backward pass of ``loss_fn``.
    """
    _check_method(method)
    labels = [getattr(p, "name", None) or f"param[{i}]" for i, p in enumerate(params)]
    if len(set(labels)) != len(labels):
        labels = [f"param[{i}]" for i in range(len(params))]
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"parameter {p.name!r} must be float64 for finite differences")
    if analytic is None:
        for p in params:
            p.grad = None
        out = loss_fn()
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        analytic = {label: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                    for label, p in zip(labels, params)}

    def evaluate() -> complex:
        with no_grad():
            return complex(loss_fn().data)

    errors: dict[str, float] = {}
    numerics: dict[str, np.ndarray] = {}
    for label, p in zip(labels, params):
        original = p.data
        if method == "complex":
            p.data = original.astype(np.complex128)
        else:
            p.data = original.copy()
        try:
            numeric = _numeric_gradient(evaluate, p.data.reshape(-1), eps, method)
        finally:
            p.data = original
        errors[label] = _relative_error(analytic[label], numeric)
        numerics[label] = numeric.reshape(original.shape)
    return GradCheckReport(errors, tol, numerics)


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape), dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays)))

