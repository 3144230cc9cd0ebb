"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

Define-by-run: every operation returns a new DiffValue holding the forward
result plus a closure that routes the upstream gradient to its parents. The
graph is rebuilt each step and freed afterwards. Only first derivatives, only
the operations the occupancy model and its losses need.

Backward closures receive the upstream gradient as an argument and may only
capture parent nodes and plain arrays, never the node they belong to; that
keeps the graph cycle-free so reference counting reclaims it the moment the
last output goes out of scope (training loops build one graph per step).

Checkpoint format (text, one file per model):

    occadapt-checkpoint v1
    <parameter count>
    <name> <ndim> <dim0> <dim1> ...
    <row-major values, space separated, one line>
    ... repeated per parameter ...

Values are written with %.17g so float64 round-trips exactly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12


class DiffValue:
    """Node of the computation graph: forward data plus accumulated gradient."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar value of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"DiffValue(shape={self.data.shape})"

    # operator sugar; scalars and arrays are wrapped as constant leaves
    def __add__(self, other):
        return add(self, _as_value(other))

    def __radd__(self, other):
        return add(_as_value(other), self)

    def __sub__(self, other):
        return sub(self, _as_value(other))

    def __rsub__(self, other):
        return sub(_as_value(other), self)

    def __mul__(self, other):
        return mul(self, _as_value(other))

    def __rmul__(self, other):
        return mul(_as_value(other), self)

    def __neg__(self):
        return mul(self, _as_value(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_value(other))


class Parameter(DiffValue):
    """Trainable leaf with a stable name used for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def constant(x) -> DiffValue:
    """Wrap an array as a non-trainable graph leaf."""
    return DiffValue(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: DiffValue, b: DiffValue, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_broadcast(a, b, "add")

    def backward(grad):
        a.grad += _unbroadcast(grad, a.shape)
        b.grad += _unbroadcast(grad, b.shape)

    return DiffValue(a.data + b.data, (a, b), backward)


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_broadcast(a, b, "sub")

    def backward(grad):
        a.grad += _unbroadcast(grad, a.shape)
        b.grad -= _unbroadcast(grad, b.shape)

    return DiffValue(a.data - b.data, (a, b), backward)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_broadcast(a, b, "mul")

    def backward(grad):
        a.grad += _unbroadcast(grad * b.data, a.shape)
        b.grad += _unbroadcast(grad * a.data, b.shape)

    return DiffValue(a.data * b.data, (a, b), backward)


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def backward(grad):
        a.grad += grad @ b.data.T
        b.grad += a.data.T @ grad

    return DiffValue(a.data @ b.data, (a, b), backward)


def transpose(a: DiffValue) -> DiffValue:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d value, got shape {a.shape}")

    def backward(grad):
        a.grad += grad.T

    return DiffValue(a.data.T, (a,), backward)


def reshape(a: DiffValue, shape) -> DiffValue:
    def backward(grad):
        a.grad += grad.reshape(a.shape)

    return DiffValue(a.data.reshape(shape), (a,), backward)


def concat(values: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    values = [_as_value(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * grad.ndim
            idx[axis] = slice(lo, hi)
            v.grad += grad[tuple(idx)]

    return DiffValue(np.concatenate([v.data for v in values], axis=axis),
                     tuple(values), backward)


def gather(a: DiffValue, indices, axis: int = 0) -> DiffValue:
    """Indexed selection along an axis (differentiable take)."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(grad):
        g = np.zeros_like(a.data)
        np.add.at(np.moveaxis(g, axis, 0), idx, np.moveaxis(grad, axis, 0))
        a.grad += g

    return DiffValue(np.take(a.data, idx, axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and transcendental functions
# ---------------------------------------------------------------------------

def leaky_relu(a: DiffValue, slope: float = 0.1) -> DiffValue:
    def backward(grad):
        a.grad += grad * np.where(a.data > 0.0, 1.0, slope)

    return DiffValue(np.where(a.data > 0.0, a.data, slope * a.data), (a,), backward)


def sigmoid(a: DiffValue) -> DiffValue:
    with np.errstate(over="ignore"):
        s = np.where(a.data >= 0.0,
                     1.0 / (1.0 + np.exp(-a.data)),
                     np.exp(a.data) / (1.0 + np.exp(a.data)))

    def backward(grad):
        a.grad += grad * s * (1.0 - s)

    return DiffValue(s, (a,), backward)


def log(a: DiffValue) -> DiffValue:
    """Natural log, guarded as log(max(x, 1e-12)) so entropies stay finite."""
    clipped = np.maximum(a.data, LOG_EPS)

    def backward(grad):
        # the clamp has zero slope below the floor
        a.grad += grad * np.where(a.data > LOG_EPS, 1.0 / clipped, 0.0)

    return DiffValue(np.log(clipped), (a,), backward)


def exp(a: DiffValue) -> DiffValue:
    e = np.exp(a.data)

    def backward(grad):
        a.grad += grad * e

    return DiffValue(e, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def vsum(a: DiffValue, axis: int | None = None) -> DiffValue:
    def backward(grad):
        if axis is None:
            a.grad += grad
        else:
            a.grad += np.expand_dims(grad, axis)

    return DiffValue(a.data.sum(axis=axis), (a,), backward)


def vmean(a: DiffValue, axis: int | None = None) -> DiffValue:
    n = a.data.size if axis is None else a.shape[axis]

    def backward(grad):
        if axis is None:
            a.grad += grad / n
        else:
            a.grad += np.expand_dims(grad, axis) / n

    return DiffValue(a.data.mean(axis=axis), (a,), backward)


def sqnorm(a: DiffValue) -> DiffValue:
    """Sum of squared entries as a scalar."""
    return vsum(mul(a, a))


# ---------------------------------------------------------------------------
# structured ops for the encoder
# ---------------------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,H,W,C*9) patches of the 3x3 neighbourhood, zero padded."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, h, w, c, 9), dtype=np.float64)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[..., k] = xp[:, :, di:di + h, dj:dj + w].transpose(0, 2, 3, 1)
            k += 1
    return cols.reshape(n, h, w, c * 9)


def conv3x3(x: DiffValue, weight: DiffValue, bias: DiffValue) -> DiffValue:
    """3x3 convolution, stride 1, zero padding 1.

    x: (N, Cin, H, W); weight: (Cout, Cin, 3, 3); bias: (Cout,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3x3: shape mismatch {x.shape} vs {weight.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col3(x.data)                                # (N,H,W,Cin*9)
    wmat = weight.data.reshape(cout, cin * 9)
    y = cols.reshape(-1, cin * 9) @ wmat.T + bias.data

    def backward(grad):
        gy = grad.transpose(0, 2, 3, 1).reshape(-1, cout)       # (N*H*W, Cout)
        weight.grad += (gy.T @ cols.reshape(-1, cin * 9)).reshape(cout, cin, 3, 3)
        bias.grad += gy.sum(axis=0)
        gcols = (gy @ wmat).reshape(n, h, w, cin, 9)
        gx = np.zeros((n, cin, h + 2, w + 2), dtype=np.float64)
        k = 0
        for di in range(3):
            for dj in range(3):
                gx[:, :, di:di + h, dj:dj + w] += gcols[..., k].transpose(0, 3, 1, 2)
                k += 1
        x.grad += gx[:, :, 1:1 + h, 1:1 + w]

    return DiffValue(y.reshape(n, h, w, cout).transpose(0, 3, 1, 2),
                     (x, weight, bias), backward)


def avg_pool2(x: DiffValue) -> DiffValue:
    """2x2 average pooling with stride 2; H and W must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: odd spatial size {x.shape}")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(grad):
        x.grad += np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25

    return DiffValue(y, (x,), backward)


def _bilinear_weights(coords: np.ndarray, h: int, w: int):
    """Clamped corner indices and weights for bilinear sampling on an (h,w) grid."""
    gu = np.clip(coords[:, 0], 0.0, h - 1.0)
    gv = np.clip(coords[:, 1], 0.0, w - 1.0)
    u0 = np.minimum(np.floor(gu).astype(np.intp), h - 2) if h > 1 else np.zeros(len(gu), np.intp)
    v0 = np.minimum(np.floor(gv).astype(np.intp), w - 2) if w > 1 else np.zeros(len(gv), np.intp)
    fu = gu - u0
    fv = gv - v0
    return u0, v0, fu, fv


def bilinear_sample(grid: DiffValue, coords: np.ndarray) -> DiffValue:
    """Bilinear sample a (C,H,W) grid at continuous grid coordinates (n,2).

    Coordinates index cell centers ((0,0) is the center of the first cell) and
    are clamped to the grid. Differentiable in the grid, not the coordinates.
    """
    c, h, w = grid.shape
    u0, v0, fu, fv = _bilinear_weights(np.asarray(coords, dtype=np.float64), h, w)
    w00 = (1 - fu) * (1 - fv)
    w01 = (1 - fu) * fv
    w10 = fu * (1 - fv)
    w11 = fu * fv
    g = grid.data
    vals = (g[:, u0, v0] * w00 + g[:, u0, v0 + 1] * w01 +
            g[:, u0 + 1, v0] * w10 + g[:, u0 + 1, v0 + 1] * w11)

    def backward(grad):
        gg = np.zeros_like(grid.data)
        go = grad.T                            # (C, n)
        np.add.at(gg, (slice(None), u0, v0), go * w00)
        np.add.at(gg, (slice(None), u0, v0 + 1), go * w01)
        np.add.at(gg, (slice(None), u0 + 1, v0), go * w10)
        np.add.at(gg, (slice(None), u0 + 1, v0 + 1), go * w11)
        grid.grad += gg

    return DiffValue(vals.T, (grid,), backward)          # (n, C)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def _toposort(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffValue):
    """Accumulate d(root)/d(leaf) into .grad of every reachable node.

    root must be scalar shaped. Repeated calls without zeroing add up.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    root.grad = root.grad + np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[DiffValue]):
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], DiffValue], params: Sequence[Parameter],
               step: float = 1e-4, coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f rebuilds and returns the scalar loss from the current parameter values;
    it must be deterministic. When coords_per_param is given, only that many
    randomly chosen coordinates of each parameter are probed.
    """
    zero_grads(params)
    root = f()
    backward(root)
    analytic = [p.grad.copy() for p in params]
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=coords_per_param, replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + step
            hi = f().item()
            flat[i] = keep - step
            lo = f().item()
            flat[i] = keep
            fd = (hi - lo) / (2.0 * step)
            if not (np.isfinite(fd) and np.isfinite(ga.reshape(-1)[i])):
                raise FloatingPointError(
                    f"grad_check: non-finite value at {getattr(p, 'name', '?')}[{i}]")
            err = abs(ga.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "occadapt-checkpoint v1"


def save_params(path, params: Sequence[Parameter]):
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in checkpoint")
    with open(path, "w") as fh:
        fh.write(_CKPT_MAGIC + "\n")
        fh.write(f"{len(params)}\n")
        for p in params:
            dims = " ".join(str(d) for d in p.data.shape)
            fh.write(f"{p.name} {p.data.ndim} {dims}".rstrip() + "\n")
            fh.write(" ".join("%.17g" % v for v in p.data.reshape(-1)) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (header {magic!r})")
        count = int(fh.readline())
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            head = fh.readline().split()
            name, ndim = head[0], int(head[1])
            shape = tuple(int(d) for d in head[2:2 + ndim])
            vals = np.array(fh.readline().split(), dtype=np.float64)
            if vals.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"checkpoint entry {name}: value count mismatch")
            out[name] = vals.reshape(shape)
    return out
