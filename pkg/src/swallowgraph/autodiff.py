"""Reverse-mode automatic differentiation over dense float64 tensors.

Tape-based: every primitive records a backward closure on its output node.
The primitive set is exactly what the swallow-classification models need
(matmul, elementwise arithmetic, concat, reductions, softmax, leaky-relu,
sigmoid, masked fill, gather, L2 row normalization, dilated causal 1-D
convolution, layer norm building blocks). No GPU, no higher-order grads.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """A primitive produced NaN or Inf; the step must be aborted."""


LEAKY_SLOPE = 0.01  # fixed activation slope, documented constant


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _check_finite(name, arr):
    # one-pass screen: a finite sum implies no NaN, and an Inf in the data
    # makes the sum non-finite (our magnitudes cannot overflow the sum)
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"primitive '{name}' produced non-finite values")


class Tensor:
    """Dense float64 tensor participating in a backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name",
                 "_grad_owned")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None, name=""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = tuple(_prev)
        self._backward = _backward
        self.name = name
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def _accumulate(self, g):
        # borrow the first incoming gradient (no copy); only materialize an
        # owned buffer when a second contributor shows up
        g = np.broadcast_to(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Reverse sweep from this scalar; fills .grad on reachable tensors."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise AutodiffError("backward requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(name, data, parents, backward):
    _check_finite(name, data)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, requires_grad=False)

    def bw(g):
        for parent, gfun in backward:
            if parent.requires_grad or parent._backward is not None:
                parent._accumulate(gfun(g))

    return Tensor(data, requires_grad=True, _prev=parents, _backward=bw, name=name)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make("add", out, (a, b), [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make("sub", out, (a, b), [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make("mul", out, (a, b), [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make("div", out, (a, b), [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


# ---------------------------------------------------------------------------
# matmul / shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def ga(g):
        bt = np.swapaxes(b.data, -1, -2)
        return _unbroadcast(np.matmul(g, bt), a.data.shape)

    def gb(g):
        at = np.swapaxes(a.data, -1, -2)
        return _unbroadcast(np.matmul(at, g), b.data.shape)

    return _make("matmul", out, (a, b), [(a, ga), (b, gb)])


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), [(a, lambda g: g.reshape(a.data.shape))])


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make("transpose", out, (a,), [(a, lambda g: g.transpose(inv))])


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    backward = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def gslice(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        backward.append((t, gslice))
    return _make("concat", out, tuple(tensors), backward)


def gather(a, indices, axis=0):
    """Select rows along `axis` with an integer index vector."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)
    n = a.data.shape[axis]

    def ga(g):
        # scatter-add realized as a 0/1 matrix product (fast for small axes)
        onehot = (idx[:, None] == np.arange(n)[None, :]).astype(np.float64)
        gm = np.moveaxis(g, axis, -1)
        gx = np.matmul(gm, onehot)
        return np.moveaxis(gx, -1, axis)

    return _make("gather", out, (a,), [(a, ga)])


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def ga(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make("sum", out, (a,), [(a, ga)])


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        denom = a.data.size
    else:
        denom = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), [(a, lambda g: g * out)])


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    return _make("log", out, (a,), [(a, lambda g: g / a.data)])


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), [(a, lambda g: g * 0.5 / out)])


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), [(a, lambda g: g * out * (1.0 - out))])


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    out = np.where(a.data >= 0, a.data, slope * a.data)
    return _make("leaky_relu", out, (a,), [
        (a, lambda g: g * np.where(a.data >= 0, 1.0, slope)),
    ])


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def ga(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make("softmax", out, (a,), [(a, ga)])


def log_softmax(a, axis=-1):
    """Numerically stable log(softmax); shift constant carries no gradient."""
    a = as_tensor(a)
    shift = constant(a.data.max(axis=axis, keepdims=True))
    s = sub(a, shift)
    return sub(s, log(tsum(exp(s), axis=axis, keepdims=True)))


def masked_fill(a, mask, value):
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)
    return _make("masked_fill", out, (a,), [
        (a, lambda g: np.where(mask, 0.0, g)),
    ])


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale slices along `axis` to unit Euclidean norm."""
    a = as_tensor(a)
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    return div(a, sqrt(add(sq, eps)))


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


# ---------------------------------------------------------------------------
# 1-D dilated causal convolution


def conv1d_causal(x, w, dilation=1):
    """Causal conv: x [B,T,Cin], w [K,Cin,Cout] -> [B,T,Cout].

    Output at t depends on inputs at t, t-d, ..., t-(K-1)d only (left
    zero padding).
    """
    x, w = as_tensor(x), as_tensor(w)
    k, cin, cout = w.data.shape
    b, t, cx = x.data.shape
    if cx != cin:
        raise AutodiffError(f"conv1d width mismatch: input {cx} vs kernel {cin}")
    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (pad, 0), (0, 0)))
    out = np.zeros((b, t, cout))
    for j in range(k):
        out += np.matmul(xp[:, j * dilation:j * dilation + t, :], w.data[j])

    def gx(g):
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j * dilation:j * dilation + t, :] += np.matmul(g, w.data[j].T)
        return gxp[:, pad:, :]

    def gw(g):
        gwd = np.zeros_like(w.data)
        for j in range(k):
            sl = xp[:, j * dilation:j * dilation + t, :]
            gwd[j] = np.einsum("bti,bto->io", sl, g)
        return gwd

    return _make("conv1d_causal", out, (x, w), [(x, gx), (w, gw)])


# ---------------------------------------------------------------------------
# primitive registry / spec surface

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "gather": gather,
    "sum": tsum,
    "mean": tmean,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "softmax": softmax,
    "masked_fill": masked_fill,
    "l2_normalize": l2_normalize,
    "layer_norm": layer_norm,
    "conv1d_causal": conv1d_causal,
}


def apply_primitive(name, *inputs, **kwargs):
    if name not in PRIMITIVES:
        raise AutodiffError(f"unknown primitive '{name}'")
    return PRIMITIVES[name](*inputs, **kwargs)


def backward(loss, leaves=None):
    """Run reverse mode from `loss`; return {id(tensor): gradient array}.

    Leaves not reached by the trace get zero gradients.
    """
    loss.backward()
    out = {}
    if leaves is not None:
        for leaf in leaves:
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            out[id(leaf)] = g
    return out


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    def __init__(self, max_rel_error, passed, n_checked):
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.n_checked = n_checked

    def __repr__(self):
        tag = "pass" if self.passed else "FAIL"
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, {tag})"


def grad_check(fn, point, step=1e-5, tolerance=1e-4, max_components=None, rng=None):
    """Compare backward gradients against central finite differences.

    fn maps a Tensor to a scalar Tensor and must be deterministic (verified
    by re-evaluation). `point` is checked componentwise; `max_components`
    caps the number of checked components (seeded subsample via `rng`).

    A component failing at the base step is retried on a small step ladder
    (larger steps beat float roundoff on near-zero gradients, smaller steps
    beat truncation and piecewise-linear kink crossings); its recorded
    error is the best across steps. A wrong analytic gradient disagrees at
    every step, so the retry never masks a real defect.
    """
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    loss = fn(x)
    if abs(float(loss.data) - float(fn(Tensor(x.data.copy(), requires_grad=False)).data)) > 0:
        raise AutodiffError("grad_check: function is not deterministic")
    loss.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    idxs = np.arange(flat.size)
    if max_components is not None and flat.size > max_components:
        rng = rng or np.random.default_rng(0)
        idxs = rng.choice(flat.size, size=max_components, replace=False)

    def central(i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x.data, requires_grad=False)).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(x.data, requires_grad=False)).data)
        flat[i] = orig
        return (fp - fm) / (2.0 * h)

    ladder = (step, step * 10.0, step * 100.0, step / 10.0, step / 100.0)
    max_rel = 0.0
    aflat = analytic.reshape(-1)
    for i in idxs:
        best = np.inf
        for h in ladder:
            numeric = central(i, h)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            best = min(best, rel)
            if best < tolerance:
                break
        max_rel = max(max_rel, best)
    return GradCheckReport(max_rel, max_rel < tolerance, len(idxs))
