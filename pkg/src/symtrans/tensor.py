"""Reverse-mode autodiff on N-dimensional numpy arrays.

Every learnable operation in the package is built from the ops here (or
registers its own forward/backward pair through :func:`make_op`). Two scalar
precisions are supported as a tensor-level attribute: ``float32`` (standard,
used for training) and ``float64`` (wide, used for gradient checks and
oracles). Binary ops require matching dtypes and matching shapes; the only
implicit broadcast is scalar-with-tensor.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

STANDARD = np.float32
WIDE = np.float64

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """Array value participating in a reverse-mode differentiation graph.

    ``data`` is a numpy array (float32 or float64), ``grad`` is populated by
    :meth:`backward` for every node with ``requires_grad``. Non-leaf tensors
    keep references to their parents and a backward rule closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(STANDARD)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_rule = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable node with ``requires_grad``.

        The graph is traversed in exact reverse execution order (reverse
        topological order); gradients flowing into a node reached through
        several paths accumulate additively.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_rule is None or node.grad is None:
                continue
            grads = node._backward_rule(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ValueError(
                        f"backward rule produced shape {g.shape} for parent "
                        f"of shape {parent.data.shape}"
                    )
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g

    # operator sugar (scalars allowed, full broadcasting is not)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def make_op(parents, out_data, backward_rule) -> Tensor:
    """Wrap an op result into the graph.

    ``backward_rule(out_grad) -> tuple of parent grads (or None)`` is only
    attached when some parent requires a gradient.
    """
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = backward_rule
    return out


def _as_pair(a, b):
    """Coerce a python scalar operand to a constant Tensor of matching dtype."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precisions: {a.dtype} vs {b.dtype}")
    return a, b


def _check_binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return  # scalar-with-tensor is the one permitted broadcast
    raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape).astype(g.dtype)


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _check_binary_shapes(a, b, "add")
    out = a.data + b.data

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_op((a, b), out, rule)


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _check_binary_shapes(a, b, "sub")
    out = a.data - b.data

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(np.negative(g), b.shape)

    return make_op((a, b), out, rule)


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    _check_binary_shapes(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def rule(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return make_op((a, b), out, rule)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.dtype.type(c)

    def rule(g):
        return (g * a.dtype.type(c),)

    return make_op((a,), out, rule)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data >= 0, x.data, x.dtype.type(slope) * x.data)
    xd = x.data

    def rule(g):
        return (np.where(xd >= 0, g, x.dtype.type(slope) * g),)

    return make_op((x,), out, rule)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-form) GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * phi).astype(x.dtype)

    def rule(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((g * (phi + xd * pdf)).astype(x.dtype),)

    return make_op((x,), out, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precisions: {a.dtype} vs {b.dtype}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return make_op((a, b), out, rule)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return make_op((x,), s.astype(x.dtype), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine scale/shift."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ValueError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match feature dim {dim}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        dgamma = np.sum(g * xhat, axis=tuple(range(g.ndim - 1))).astype(x.dtype)
        dbeta = np.sum(g, axis=tuple(range(g.ndim - 1))).astype(x.dtype)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(x.dtype), dgamma, dbeta

    return make_op((x, gamma, beta), out.astype(x.dtype), rule)


def reshape(x: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {new_shape}")
    old_shape = x.shape

    def rule(g):
        return (g.reshape(old_shape),)

    return make_op((x,), x.data.reshape(new_shape), rule)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort(axes)

    def rule(g):
        return (np.transpose(g, inv),)

    return make_op((x,), np.transpose(x.data, axes), rule)


def transpose2d(x: Tensor) -> Tensor:
    return permute(x, (1, 0))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError("concat: mixed precisions")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return make_op(tuple(tensors), out, rule)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return make_op((x,), x.data[sl].copy(), rule)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def rule(g):
        return (np.full(shape, g, dtype=x.dtype),)

    return make_op((x,), np.array(x.data.sum(), dtype=x.dtype), rule)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape

    def rule(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return make_op((x,), np.array(x.data.mean(), dtype=x.dtype), rule)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row of a (rows, dim) tensor."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_rowvec: {x.shape} + {b.shape}")
    if x.dtype != b.dtype:
        raise TypeError(f"mixed precisions: {x.dtype} vs {b.dtype}")

    def rule(g):
        return g, g.sum(axis=0)

    return make_op((x, b), x.data + b.data, rule)


class GradCheckReport:
    """Per-leaf max relative error between analytic and central differences."""

    def __init__(self):
        self.per_leaf: dict[str, float] = {}
        self.worst_leaf: str | None = None
        self.worst_err: float = 0.0

    def record(self, name: str, err: float):
        self.per_leaf[name] = max(self.per_leaf.get(name, 0.0), err)
        if err >= self.worst_err:
            self.worst_err = err
            self.worst_leaf = name

    def max_err(self) -> float:
        return self.worst_err

    def __repr__(self):
        return (
            f"GradCheckReport(max={self.worst_err:.3e} at {self.worst_leaf!r}, "
            f"{len(self.per_leaf)} leaves)"
        )


def grad_check(
    build,
    leaves: dict[str, np.ndarray],
    eps_scale: float = 1e-3,
    coords_per_leaf: int = 5,
    rng: np.random.Generator | None = None,
    wide: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build`` maps a dict of leaf Tensors to a scalar-loss Tensor and must be
    deterministic. The analytic side runs at standard precision (or wide when
    ``wide=True``); the difference quotient is always evaluated in wide
    precision so the check measures the engine, not float32 roundoff. For each
    leaf, ``coords_per_leaf`` randomly chosen coordinates are probed with
    ``eps = eps_scale * scale(x)`` where ``scale(x) = max(1, rms(x))``. The
    reported error is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``,
    i.e. relative for O(1)-or-larger gradients and absolute below that, which
    keeps central-difference truncation noise on near-zero entries from
    swamping the report.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    dtype = WIDE if wide else STANDARD
    t_leaves = {
        k: Tensor(v.astype(dtype), requires_grad=True) for k, v in leaves.items()
    }
    loss = build(t_leaves)
    loss.backward()
    analytic = {}
    for k, t in t_leaves.items():
        analytic[k] = (
            np.zeros_like(t.data, dtype=WIDE) if t.grad is None else t.grad.astype(WIDE)
        )

    report = GradCheckReport()
    base = {k: v.astype(WIDE) for k, v in leaves.items()}
    for name, arr in base.items():
        n = arr.size
        k = min(coords_per_leaf, n)
        idx = rng.choice(n, size=k, replace=False) if n > k else np.arange(n)
        rms = float(np.sqrt(np.mean(arr ** 2))) if n else 1.0
        eps = eps_scale * max(1.0, rms)
        num = np.zeros(k, dtype=WIDE)
        for j, flat in enumerate(idx):
            for sign in (+1.0, -1.0):
                pert = {kk: vv.copy() for kk, vv in base.items()}
                pert[name].flat[flat] += sign * eps
                t = {kk: Tensor(vv, requires_grad=False) for kk, vv in pert.items()}
                val = float(build(t).data)
                num[j] += sign * val
            num[j] /= 2.0 * eps
        ana = analytic[name].flat[idx]
        for j in range(k):
            denom = max(abs(ana[j]), abs(num[j]), 1.0)
            report.record(name, abs(ana[j] - num[j]) / denom)
    return report
