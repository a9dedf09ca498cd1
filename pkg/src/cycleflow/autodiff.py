"""float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what an encoder/decoder conv net with warping
losses needs: 3x3 convolutions and transposed convolutions at stride 1
or 2, pointwise nonlinearities and arithmetic, channel concatenation,
batch stacking/slicing, reductions, a numerical gradient checker, and a
binary checkpoint format for named parameter sets.

Activations are planar [N,C,H,W]; weights are [K,C,3,3] (transposed
convs: [C,K,3,3]).  The convolutions are jit-compiled row stencils: at
desk-scale channel counts they beat BLAS-backed im2col by a wide margin
because nothing is materialized and every inner loop runs unit-stride
over image rows.

Each op validates that its output is finite and, when gradients are
enabled, records a backward closure on the result.  ``Tensor.backward``
sweeps the recorded graph once in reverse topological order,
accumulating into ``.grad``, then drops the recorded edges so the next
forward pass starts from a clean tape.  Tensors are immutable once
created except for their grad buffer.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field

import warnings

import numpy as np

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from numba import njit as _njit, prange


class NonFiniteError(ArithmeticError):
    """An op produced, or was fed, NaN or Inf."""


class GraphError(RuntimeError):
    """Backward misuse: non-scalar loss, or a graph that was already consumed."""


class NondeterministicFunctionError(RuntimeError):
    """gradcheck detected two forward passes disagreeing."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _finite_or_raise(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small operator sugar; scalars go through scale/shift, tensors need equal shape
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad for every recorded node.

        Grads sum across all uses of a tensor.  The recorded graph is
        cleared afterwards; calling backward a second time raises.
        """
        if self.data.shape != ():
            raise GraphError("backward requires a scalar loss")
        if self._consumed:
            raise GraphError("graph already consumed; re-record the forward pass")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            node._consumed = True


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g) -> None:
    """Add a gradient contribution to t; allocates the buffer on first use."""
    if not t.requires_grad:
        # still needed as a propagation buffer when t has recorded parents
        if t._backward is None:
            return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# pointwise / arithmetic


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(x, s: float) -> Tensor:
    x = astensor(x)
    s = float(s)

    def bw(g):
        _accum(x, g * s)

    return _make(x.data * s, "scale", (x,), bw)


def shift(x, c: float) -> Tensor:
    x = astensor(x)

    def bw(g):
        _accum(x, g)

    return _make(x.data + float(c), "shift", (x,), bw)


def neg(x) -> Tensor:
    return scale(x, -1.0)


def square(x) -> Tensor:
    x = astensor(x)

    def bw(g):
        _accum(x, g * (2.0 * x.data))

    return _make(x.data * x.data, "square", (x,), bw)


def relu(x) -> Tensor:
    x = astensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        # subgradient at 0 is 0
        _accum(x, g * (x.data > 0.0))

    return _make(out, "relu", (x,), bw)


# largest double strictly below 1; keeps sigmoid output in the open interval
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(x) -> Tensor:
    x = astensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    np.clip(out, 5e-324, _ONE_MINUS, out=out)

    def bw(g):
        _accum(x, g * (out * (1.0 - out)))

    return _make(out, "sigmoid", (x,), bw)


def log(x) -> Tensor:
    x = astensor(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: domain error (non-positive input)")

    def bw(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), "log", (x,), bw)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    x = astensor(x)
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        _accum(x, g * inside)

    return _make(np.clip(x.data, lo, hi), "clip", (x,), bw)


def minimum_const(x, cap: float) -> Tensor:
    """Elementwise min(x, cap); entries at or above the cap get zero gradient."""
    x = astensor(x)
    below = x.data < cap

    def bw(g):
        _accum(x, g * below)

    return _make(np.minimum(x.data, cap), "minimum_const", (x,), bw)


def tsum(x) -> Tensor:
    x = astensor(x)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum()), "sum", (x,), bw)


def mean(x) -> Tensor:
    x = astensor(x)
    return scale(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# shape plumbing


def concat_channels(parts) -> Tensor:
    """Concatenate 4-D [N,C,H,W] tensors along the channel axis."""
    parts = [astensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels: empty input")
    ref = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 4 or (p.data.shape[0],) + p.data.shape[2:] != (ref[0],) + ref[2:]:
            raise ValueError(
                f"concat_channels: incompatible shapes {ref} vs {p.data.shape}")
    sizes = [p.data.shape[1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for p, a, b in zip(parts, offs[:-1], offs[1:]):
            _accum(p, g[:, a:b])

    return _make(np.concatenate([p.data for p in parts], axis=1), "concat_channels",
                 tuple(parts), bw)


def concat0(parts) -> Tensor:
    """Concatenate tensors along axis 0 (batch stacking)."""
    parts = [astensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for p, a, b in zip(parts, offs[:-1], offs[1:]):
            _accum(p, g[a:b])

    return _make(np.concatenate([p.data for p in parts], axis=0), "concat0",
                 tuple(parts), bw)


def slice0(x, start: int, stop: int) -> Tensor:
    x = astensor(x)
    if not (0 <= start < stop <= x.data.shape[0]):
        raise ValueError(f"slice0: bad range [{start}:{stop}] for axis size {x.data.shape[0]}")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        _accum(x, gx)

    return _make(x.data[start:stop].copy(), "slice0", (x,), bw)


def index_batch(x, i: int) -> Tensor:
    x = astensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        _accum(x, gx)

    return _make(x.data[i].copy(), "index_batch", (x,), bw)


def permute(x, axes) -> Tensor:
    x = astensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), "permute", (x,), bw)


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    orig = x.data.shape

    def bw(g):
        _accum(x, g.reshape(orig))

    return _make(x.data.reshape(shape).copy(), "reshape", (x,), bw)


# ---------------------------------------------------------------------------
# convolutions (3x3, zero padding 1, stride 1 or 2, planar [N,C,H,W] layout)
#
# Three jit stencil kernels cover everything: a transposed conv is the
# exact adjoint of a conv, so tconv forward reuses the scatter kernel,
# tconv input-grad reuses the gather kernel, and both weight grads reuse
# the correlation kernel with swapped operands.


@_njit(parallel=True, fastmath=True, cache=True)
def _k_conv_fwd(xp, w, b, out, stride):
    N, K, Ho, Wo = out.shape
    C = xp.shape[1]
    for nk in prange(N * K):
        n = nk // K
        k = nk % K
        for i in range(Ho):
            orow = out[n, k, i]
            for j in range(Wo):
                orow[j] = b[k]
            for c in range(C):
                for di in range(3):
                    xrow = xp[n, c, i * stride + di]
                    for dj in range(3):
                        wv = w[k, c, di, dj]
                        if stride == 1:
                            for j in range(Wo):
                                orow[j] += wv * xrow[j + dj]
                        else:
                            for j in range(Wo):
                                orow[j] += wv * xrow[j * stride + dj]


@_njit(parallel=True, fastmath=True, cache=True)
def _k_conv_bwd_x(g, w, gxp, stride):
    N, K, Ho, Wo = g.shape
    C = gxp.shape[1]
    for nc in prange(N * C):
        n = nc // C
        c = nc % C
        for k in range(K):
            for i in range(Ho):
                grow = g[n, k, i]
                for di in range(3):
                    xrow = gxp[n, c, i * stride + di]
                    for dj in range(3):
                        wv = w[k, c, di, dj]
                        if stride == 1:
                            for j in range(Wo):
                                xrow[j + dj] += wv * grow[j]
                        else:
                            for j in range(Wo):
                                xrow[j * stride + dj] += wv * grow[j]


@_njit(parallel=True, fastmath=True, cache=True)
def _k_conv_bwd_w(xp, g, gw, stride):
    N, K, Ho, Wo = g.shape
    C = xp.shape[1]
    for kc in prange(K * C):
        k = kc // C
        c = kc % C
        for di in range(3):
            for dj in range(3):
                acc = 0.0
                for n in range(N):
                    for i in range(Ho):
                        grow = g[n, k, i]
                        xrow = xp[n, c, i * stride + di]
                        if stride == 1:
                            for j in range(Wo):
                                acc += grow[j] * xrow[j + dj]
                        else:
                            for j in range(Wo):
                                acc += grow[j] * xrow[j * stride + dj]
                gw[k, c, di, dj] = acc


def _pad_planar(x: np.ndarray) -> np.ndarray:
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def _conv_checks(x: Tensor, w: Tensor, b: Tensor, stride: int, op: str, in_axis: int) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op}: input must be [N,C,H,W]")
    if w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ValueError(f"{op}: weight must be 4-D with 3x3 kernels")
    if w.data.shape[in_axis] != x.data.shape[1]:
        raise ValueError(
            f"{op}: channel mismatch (input {x.data.shape[1]}, weight {w.data.shape[in_axis]})")
    if b.data.ndim != 1:
        raise ValueError(f"{op}: bias must be 1-D")
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2")
    if x.data.shape[2] < 1 or x.data.shape[3] < 1:
        raise ValueError(f"{op}: non-positive spatial dims")


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """Cross-correlation with 3x3 kernels, zero padding 1.

    Stride 1 preserves H,W; stride 2 yields ceil(H/2) x ceil(W/2).
    x: [N,C,H,W], w: [K,C,3,3], b: [K] -> [N,K,H',W'].
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    _conv_checks(x, w, b, stride, "conv2d", in_axis=1)
    N, C, H, W = x.data.shape
    K = w.data.shape[0]
    if b.data.shape != (K,):
        raise ValueError("conv2d: bias length must equal output channels")
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    xp = _pad_planar(x.data)
    y = np.empty((N, K, Ho, Wo))
    _k_conv_fwd(xp, w.data, b.data, y, stride)

    def bw(g):
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.empty((K, C, 3, 3))
            _k_conv_bwd_w(xp, np.ascontiguousarray(g), gw, stride)
            _accum(w, gw)
        if x.requires_grad or x._backward is not None:
            gxp = np.zeros((N, C, H + 2, W + 2))
            _k_conv_bwd_x(np.ascontiguousarray(g), w.data, gxp, stride)
            _accum(x, gxp[:, :, 1:-1, 1:-1])

    return _make(y, "conv2d", (x, w, b), bw)


def tconv2d(x, w, b, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d) with 3x3 kernels.

    Stride 1 preserves H,W; stride 2 yields exactly 2H x 2W.
    x: [N,C,H,W], w: [C,K,3,3], b: [K] -> [N,K,sH,sW].
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    _conv_checks(x, w, b, stride, "tconv2d", in_axis=0)
    N, C, H, W = x.data.shape
    K = w.data.shape[1]
    if b.data.shape != (K,):
        raise ValueError("tconv2d: bias length must equal output channels")
    Ho, Wo = stride * H, stride * W
    op_ = np.zeros((N, K, Ho + 2, Wo + 2))
    _k_conv_bwd_x(x.data, w.data, op_, stride)
    y = op_[:, :, 1:-1, 1:-1] + b.data[None, :, None, None]

    def bw(g):
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gp = _pad_planar(np.ascontiguousarray(g))
        if w.requires_grad:
            gw = np.empty((C, K, 3, 3))
            _k_conv_bwd_w(gp, x.data, gw, stride)
            _accum(w, gw)
        if x.requires_grad or x._backward is not None:
            gx = np.empty((N, C, H, W))
            _k_conv_fwd(gp, w.data, np.zeros(C), gx, stride)
            _accum(x, gx)

    return _make(y, "tconv2d", (x, w, b), bw)


def pointwise(kind: str, *args) -> Tensor:
    """Dispatch helper: relu | sigmoid | add | mul | concat-channels."""
    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul}
    if kind in table:
        return table[kind](*args)
    if kind == "concat-channels":
        return concat_channels(args[0] if len(args) == 1 else list(args))
    raise ValueError(f"pointwise: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_err: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    failures: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    coords_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"gradcheck eps={self.eps:g} tol={self.tol:g} "
                 f"coords={self.coords_checked} skipped={len(self.skipped)} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.max_rel_err.items():
            lines.append(f"  {name}: max_rel_err={err:.3e}")
        for c in self.failures:
            lines.append(f"  FAIL at {c}")
        return "\n".join(lines)


def gradcheck(f, params, eps: float = 1e-4, tol: float = 1e-4,
              max_coords: int | None = None, seed: int = 0,
              smooth_tol: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of the scalar function f against central
    finite differences.

    f re-runs the forward pass from scratch on each call and must be
    deterministic (verified with two evaluations).  params maps names to
    the Tensors whose gradients are checked.  Relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.  Coordinates where
    the one-sided differences disagree are reported as skipped
    non-smooth points rather than failures.
    """
    if eps <= 0:
        raise ValueError("gradcheck: eps must be positive")
    params = OrderedDict(params)
    rng = np.random.default_rng(seed)

    with no_grad():
        f0 = float(f().data)
        f0b = float(f().data)
    if f0 != f0b:
        raise NondeterministicFunctionError(
            f"two forward passes disagree: {f0!r} vs {f0b!r}")

    for t in params.values():
        t.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}

    report = GradCheckReport(eps=eps, tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            idxs = rng.choice(n, size=max_coords, replace=False)
        else:
            idxs = np.arange(n)
        def central(i, e):
            orig = flat[i]
            flat[i] = orig + e
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - e
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            return fp, fm

        worst = 0.0
        for i in idxs:
            fp, fm = central(i, eps)
            d_plus = (fp - f0) / eps
            d_minus = (f0 - fm) / eps
            if abs(d_plus - d_minus) > smooth_tol * max(1.0, abs(d_plus), abs(d_minus)):
                report.skipped.append(f"{name}[{i}] (non-smooth point)")
                continue
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]

            def rel_of(n):
                return abs(a - n) / max(abs(a), abs(n), 1e-8)

            rel = rel_of(numeric)
            if rel > tol:
                # weak kinks inside the interval pollute one side linearly
                # in eps while roundoff dominates tiny gradients at small
                # eps; a correct analytic gradient matches the central
                # estimate at SOME scale, a wrong one matches none
                for e2 in (4.0 * eps, eps / 4.0, eps / 16.0, eps / 64.0):
                    fp2, fm2 = central(i, e2)
                    rel = min(rel, rel_of((fp2 - fm2) / (2.0 * e2)))
                    if rel <= tol:
                        break
            worst = max(worst, rel)
            report.coords_checked += 1
            if rel > tol:
                report.failures.append(
                    f"{name}[{i}]: analytic={a:.6e} numeric={numeric:.6e} rel={rel:.3e}")
        report.max_rel_err[name] = worst
    return report


def gradcheck_directional(f, params, eps: float = 1e-5, tol: float = 1e-4,
                          n_dirs: int = 5, seed: int = 0,
                          smooth_tol: float = 1e-3) -> GradCheckReport:
    """Directional-derivative variant of gradcheck.

    Each probe draws one random unit direction over the concatenated
    parameter vector and compares the analytic directional derivative
    <grad, v> against the central difference of f along v.  Directional
    magnitudes sit at the gradient-norm scale, so this resolves deep
    compositions whose individual components are too small for
    per-coordinate quotients; a wrong gradient component still shows up
    because every direction touches all coordinates.
    """
    if eps <= 0:
        raise ValueError("gradcheck_directional: eps must be positive")
    params = OrderedDict(params)
    rng = np.random.default_rng(seed)
    with no_grad():
        f0 = float(f().data)
        f0b = float(f().data)
    if f0 != f0b:
        raise NondeterministicFunctionError(
            f"two forward passes disagree: {f0!r} vs {f0b!r}")
    for t in params.values():
        t.zero_grad()
    loss = f()
    loss.backward()
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
             for k, t in params.items()}
    report = GradCheckReport(eps=eps, tol=tol)
    worst = 0.0
    for d in range(n_dirs):
        dirs = {}
        norm2 = 0.0
        for k, t in params.items():
            v = rng.normal(size=t.data.shape)
            dirs[k] = v
            norm2 += float((v * v).sum())
        scale_ = 1.0 / np.sqrt(norm2)
        analytic = sum(float((grads[k] * dirs[k]).sum()) for k in params) * scale_

        def central(e):
            for k, t in params.items():
                t.data += e * scale_ * dirs[k]
            with no_grad():
                fp = float(f().data)
            for k, t in params.items():
                t.data -= 2.0 * e * scale_ * dirs[k]
            with no_grad():
                fm = float(f().data)
            for k, t in params.items():
                t.data += e * scale_ * dirs[k]
            return fp, fm

        def rel_of(n):
            return abs(analytic - n) / max(abs(analytic), abs(n), 1e-8)

        fp, fm = central(eps)
        d_plus = (fp - f0) / eps
        d_minus = (f0 - fm) / eps
        if abs(d_plus - d_minus) > smooth_tol * max(1.0, abs(d_plus), abs(d_minus)):
            report.skipped.append(f"direction[{d}] (non-smooth point)")
            continue
        rel = rel_of((fp - fm) / (2.0 * eps))
        if rel > tol:
            for e2 in (4.0 * eps, eps / 4.0, eps / 16.0):
                fp2, fm2 = central(e2)
                rel = min(rel, rel_of((fp2 - fm2) / (2.0 * e2)))
                if rel <= tol:
                    break
        worst = max(worst, rel)
        report.coords_checked += 1
        if rel > tol:
            report.failures.append(f"direction[{d}]: rel={rel:.3e}")
    report.max_rel_err["directional"] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint format: magic "CYCF", u32 version, then per-array records
# (u32 name length, utf-8 name, u32 rank, u32 extents, float64 LE payload)

_MAGIC = b"CYCF"
_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays) -> None:
    """Write named float64 arrays; round-trips bit exactly."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, arr in arrays.items():
            a = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            a = np.asarray(a, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(
                np.float64, copy=True)
    return out
