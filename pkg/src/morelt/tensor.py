"""Dense float64 matrices with reverse-mode differentiation.

A ``Tensor`` wraps a 2-D float64 numpy array. Ops called on tensors that
require gradients record their parents and a vector-Jacobian closure;
``Tensor.backward`` walks the recorded graph in reverse topological order and
accumulates into every reachable ``Parameter.grad``.

Matrix products go through a fixed-order kernel: ``c[i, j]`` is summed over
the inner index from left to right, exactly like a naive triple loop, so
results are reproducible bit for bit.
"""

import contextlib

import numpy as np

from .errors import ContractError, ShapeError

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _matmul_numpy(a, b):
    m, k = a.shape
    out = np.zeros((m, b.shape[1]))
    for l in range(k):
        out += a[:, l : l + 1] * b[l : l + 1, :]
    return out


if numba is not None:

    @numba.njit(cache=True)
    def _matmul_kernel(a, b):
        m, k = a.shape
        n = b.shape[1]
        c = np.zeros((m, n))
        for i in range(m):
            for l in range(k):
                ail = a[i, l]
                for j in range(n):
                    c[i, j] += ail * b[l, j]
        return c

else:  # pragma: no cover
    _matmul_kernel = _matmul_numpy


def as_matrix(x):
    """Coerce to a 2-D float64 array (scalars become 1x1, vectors columns)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


def matmul_values(a, b):
    """Fixed-order product of two plain arrays."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None, op=""):
        self.value = as_matrix(value)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def backward(self):
        """Accumulate d(self)/d(param) into every reachable Parameter."""
        if self.value.shape != (1, 1):
            raise ContractError(f"backward() requires a scalar output, got shape {self.value.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones((1, 1))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; python numbers broadcast to this tensor's shape
    def _lift(self, other):
        if isinstance(other, (int, float)):
            return Tensor(np.full(self.shape, float(other)))
        return other

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf with a gradient accumulator of the same shape."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name=""):
        super().__init__(np.array(as_matrix(value), dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root):
    order = []
    seen = {id(root)}
    stack = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, vjp, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, vjp, op)
    return Tensor(value, op=op)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    a, b = tensor(a), tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return (
            matmul_values(g, bv.T) if a.requires_grad else None,
            matmul_values(av.T, g) if b.requires_grad else None,
        )

    return _make(matmul_values(av, bv), (a, b), vjp, "matmul")


def transpose(a):
    a = tensor(a)
    return _make(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,), "transpose")


def add(a, b):
    a, b = tensor(a), tensor(b)
    _same_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = tensor(a), tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = tensor(a), tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c):
    a = tensor(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_row(x, row):
    """Add a 1 x n row (or an n x 1 column, e.g. a bias) to every row of x."""
    x, row = tensor(x), tensor(row)
    rv = row.value
    transposed = rv.shape[1] == 1 and rv.shape[0] == x.shape[1] and x.shape[1] != 1
    r = rv.T if transposed else rv
    if r.shape != (1, x.shape[1]):
        raise ShapeError(f"add_row: cannot broadcast {rv.shape} over rows of {x.shape}")

    def vjp(g):
        gr = g.sum(axis=0, keepdims=True)
        return g, (gr.T if transposed else gr)

    return _make(x.value + r, (x, row), vjp, "add_row")


def mul_col(x, col):
    """Multiply row i of x by col[i]."""
    x, col = tensor(x), tensor(col)
    if col.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_col: column {col.shape} does not match rows of {x.shape}")
    xv, cv = x.value, col.value
    return _make(xv * cv, (x, col), lambda g: (g * cv, (g * xv).sum(axis=1, keepdims=True)), "mul_col")


def relu(a):
    a = tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_values(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = tensor(a)
    s = _sigmoid_values(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    a = tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_values(x)
    return _make(out, (a,), lambda g: (g * s,), "softplus")


def exp(a):
    a = tensor(a)
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    a = tensor(a)
    x = a.value
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a):
    a = tensor(a)
    x = a.value
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def power(a, p):
    """Elementwise a**p for a >= 0; the gradient at a == 0 is taken as 0."""
    a = tensor(a)
    p = float(p)
    if p == 0.0:
        return Tensor(np.ones_like(a.value), op="power")
    x = a.value
    out = x**p

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(x > 0, p * x ** (p - 1.0), 1.0 if p == 1.0 else 0.0)
        return (g * d,)

    return _make(out, (a,), vjp, "power")


def clip_min(a, floor):
    a = tensor(a)
    mask = a.value > floor
    return _make(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,), "clip_min")


def softmax(a):
    a = tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), vjp, "softmax")


def log_softmax(a):
    a = tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


def sum_rows(a):
    """Sum across columns: (n x m) -> (n x 1)."""
    a = tensor(a)
    shape = a.shape
    return _make(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_rows")


def total(a):
    """Sum of every entry as a 1x1 tensor."""
    a = tensor(a)
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(a):
    a = tensor(a)
    n = a.value.size
    shape = a.shape
    return _make(np.array([[a.value.sum() / n]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "square": square,
    "exp": exp,
    "log": log,
    "softplus": softplus,
}


def elementwise(kind, *args):
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(loss_fn, params, h=1e-5):
    """Max relative error between backprop gradients and central differences.

    ``loss_fn`` takes no arguments and rebuilds the scalar loss from the
    current parameter values. Parameters are restored on exit.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            p.value = np.ascontiguousarray(p.value)
            flat = p.value.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                err = abs(gflat[i] - fd) / (abs(fd) + 1e-12)
                worst = max(worst, err)
    return worst
