"""Reverse-mode differentiation over numpy arrays.

A small tape of array-valued nodes, in the micrograd style but with
whole signals (complex or real ndarrays) as node values instead of
scalars.  Every differentiable operation used by the receiver forward
passes is registered here with an analytic reverse rule; building a
node with an unregistered operation name raises ``ContractViolation``.

Gradient convention for complex-valued nodes: the loss is always a
real scalar, and the gradient stored for a complex array ``z`` is

    grad(z) = dL/d(Re z) + 1j * dL/d(Im z)

so that real/imaginary parameter pairs read their gradients off as
``grad.real`` and ``grad.imag``.  For a holomorphic elementwise map
``w = f(z)`` this convention gives the chain rule
``grad(z) = grad(w) * conj(f'(z))``.  Gradients accumulated into a
real-valued node are projected onto their real part, which is the
correct derivative when the imaginary part is structurally zero.

Operations accept plain ndarrays or ``Var`` nodes interchangeably;
with no ``Var`` among the inputs they return a plain ndarray, so the
same forward code serves both evaluation and training.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ContractViolation",
    "Var",
    "backward",
    "value_of",
    "registered_ops",
    "add", "sub", "neg", "mul", "conv_same", "mirror_expand", "flip",
    "downsample", "upsample", "take", "abs2", "rotate", "complex_pair",
    "stack_rows", "row", "matmul2", "su2_matrix", "mimo_conv",
    "sum_all", "mean_all", "fake_quant",
]


class ContractViolation(RuntimeError):
    """An operation without a registered reverse rule entered the graph."""


_REGISTRY: dict[str, object] = {}


def _register(name):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def registered_ops():
    """Names of all operations with a registered reverse rule."""
    return sorted(_REGISTRY)


class Var:
    """One node of the computation graph.

    ``value`` is a float64 or complex128 ndarray (scalars become 0-d
    arrays).  Leaves are built directly from parameter values; interior
    nodes are built by the registered operations below and carry a
    closure that scatters the node's gradient to its parents.
    """

    __slots__ = ("value", "grad", "op", "_parents", "_backward")

    def __init__(self, value, parents=(), op="leaf"):
        if op != "leaf" and op not in _REGISTRY:
            raise ContractViolation(f"operation {op!r} has no registered reverse rule")
        value = np.asarray(value)
        if value.dtype.kind == "c":
            value = value.astype(np.complex128, copy=False)
        else:
            value = value.astype(np.float64, copy=False)
        self.value = value
        self.grad = None
        self.op = op
        self._parents = tuple(p for p in parents if isinstance(p, Var))
        self._backward = None

    @property
    def is_complex(self):
        return self.value.dtype.kind == "c"

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def value_of(x):
    """Underlying ndarray of a Var, or the input unchanged."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def _needs_graph(*args):
    return any(isinstance(a, Var) for a in args)


def _accumulate(node: Var, g):
    """Add an incoming gradient to ``node``, projecting dtype and shape.

    Real-valued nodes take the real part; scalar-shaped nodes used in
    broadcast positions take the sum over the broadcast axes.
    """
    g = np.asarray(g)
    if not node.is_complex and g.dtype.kind == "c":
        g = g.real
    if g.shape != node.value.shape:
        # only scalar/1-element broadcasting is used by the ops below
        g = np.sum(g).reshape(node.value.shape) if node.value.size == 1 else g.reshape(node.value.shape)
    if node.grad is None:
        node.grad = g.astype(node.value.dtype, copy=True)
    else:
        node.grad = node.grad + g.astype(node.value.dtype, copy=False)


def backward(loss: Var):
    """Run reverse accumulation from a real scalar loss node.

    After the call every node reachable from ``loss`` carries its
    gradient in ``.grad`` (leaves included); unused leaves keep None.
    """
    if not isinstance(loss, Var):
        raise TypeError("backward expects a Var")
    if loss.value.size != 1 or loss.is_complex:
        raise ValueError("loss must be a real scalar")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


@_register("add")
def add(a, b):
    av, bv = value_of(a), value_of(b)
    out_val = av + bv
    if not _needs_graph(a, b):
        return out_val
    out = Var(out_val, (a, b), op="add")

    def _bw(g):
        if isinstance(a, Var):
            _accumulate(a, g)
        if isinstance(b, Var):
            _accumulate(b, g)
    out._backward = _bw
    return out


@_register("sub")
def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out_val = av - bv
    if not _needs_graph(a, b):
        return out_val
    out = Var(out_val, (a, b), op="sub")

    def _bw(g):
        if isinstance(a, Var):
            _accumulate(a, g)
        if isinstance(b, Var):
            _accumulate(b, -g)
    out._backward = _bw
    return out


@_register("neg")
def neg(a):
    if not _needs_graph(a):
        return -value_of(a)
    out = Var(-a.value, (a,), op="neg")

    def _bw(g):
        _accumulate(a, -g)
    out._backward = _bw
    return out


@_register("mul")
def mul(a, b):
    """Elementwise product; either factor may broadcast as a scalar."""
    av, bv = value_of(a), value_of(b)
    out_val = av * bv
    if not _needs_graph(a, b):
        return out_val
    out = Var(out_val, (a, b), op="mul")

    def _bw(g):
        if isinstance(a, Var):
            _accumulate(a, g * np.conj(bv))
        if isinstance(b, Var):
            _accumulate(b, g * np.conj(av))
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution and index plumbing


def _conv_same(x, h, center):
    """y[n] = sum_k h[k] x[n-k+center], accumulated in ascending k.

    The explicit tap loop fixes the floating-point summation order so a
    naive per-sample reference loop reproduces the result bit-for-bit.
    """
    n, k = len(x), len(h)
    dtype = np.result_type(x.dtype, h.dtype)
    xp = np.zeros(n + 2 * k, dtype=dtype)
    xp[k:k + n] = x
    out = np.zeros(n, dtype=dtype)
    base = k + center
    for i in range(k):
        out += h[i] * xp[base - i:base - i + n]
    return out


@_register("conv_same")
def conv_same(x, h, center=None):
    """Linear convolution y[n] = sum_k h[k] x[n-k+center], same length as x.

    Default center (K-1)//2 keeps odd-length filters delay-free; the
    edge samples touched by the filter support are guard samples.
    """
    xv, hv = value_of(x), value_of(h)
    K = len(hv)
    c = (K - 1) // 2 if center is None else center
    out_val = _conv_same(xv, hv, c)
    if not _needs_graph(x, h):
        return out_val
    out = Var(out_val, (x, h), op="conv_same")
    N = len(xv)

    def _bw(g):
        if isinstance(x, Var):
            _accumulate(x, _conv_same(g, np.conj(hv[::-1]), K - 1 - c))
        if isinstance(h, Var):
            gh = np.empty(K, dtype=np.complex128)
            xp = np.concatenate([np.zeros(K, xv.dtype), xv, np.zeros(K, xv.dtype)])
            for k in range(K):
                # x[n-k+c] for n = 0..N-1 lives at xp[K-k+c : K-k+c+N]
                gh[k] = np.dot(g, np.conj(xp[K - k + c:K - k + c + N]))
            _accumulate(h, gh)
    out._backward = _bw
    return out


@_register("mirror_expand")
def mirror_expand(half, full_length):
    """Symmetric taps from their stored half: h[k] = h[K-1-k] exactly."""
    hv = value_of(half)
    n_half = (full_length + 1) // 2
    if len(hv) != n_half:
        raise ValueError(f"half taps length {len(hv)} != ceil({full_length}/2)")
    out_val = np.concatenate([hv, hv[:-1][::-1]])
    if not _needs_graph(half):
        return out_val
    out = Var(out_val, (half,), op="mirror_expand")

    def _bw(g):
        gh = g[:n_half].copy()
        gh[:n_half - 1] += g[n_half:][::-1]
        _accumulate(half, gh)
    out._backward = _bw
    return out


@_register("flip")
def flip(h):
    if not _needs_graph(h):
        return value_of(h)[::-1]
    out = Var(h.value[::-1], (h,), op="flip")

    def _bw(g):
        _accumulate(h, g[::-1])
    out._backward = _bw
    return out


@_register("downsample")
def downsample(x, start, step, count):
    """x[start::step], truncated to ``count`` entries."""
    xv = value_of(x)
    idx = start + step * np.arange(count)
    if idx[-1] >= len(xv) or start < 0:
        raise IndexError("downsample range exceeds signal length")
    out_val = xv[idx]
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="downsample")

    def _bw(g):
        gx = np.zeros_like(xv)
        gx[idx] = g
        _accumulate(x, gx)
    out._backward = _bw
    return out


@_register("upsample")
def upsample(x, factor, total_length=None):
    """Zero-stuffing upsampler: out[k*factor] = x[k]."""
    xv = value_of(x)
    n = len(xv) * factor if total_length is None else total_length
    out_val = np.zeros(n, dtype=xv.dtype)
    out_val[::factor][:len(xv)] = xv[:1 + (n - 1) // factor]
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="upsample")

    def _bw(g):
        _accumulate(x, g[::factor][:len(xv)])
    out._backward = _bw
    return out


@_register("take")
def take(x, start, stop):
    """Contiguous slice x[start:stop] along the last axis."""
    xv = value_of(x)
    out_val = xv[..., start:stop]
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="take")

    def _bw(g):
        gx = np.zeros_like(xv)
        gx[..., start:stop] = g
        _accumulate(x, gx)
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinear and complex-structure ops


@_register("abs2")
def abs2(u):
    """Instantaneous power |u|^2 (real-valued)."""
    uv = value_of(u)
    out_val = (uv * np.conj(uv)).real
    if not _needs_graph(u):
        return out_val
    out = Var(out_val, (u,), op="abs2")

    def _bw(g):
        _accumulate(u, 2.0 * g * uv)
    out._backward = _bw
    return out


@_register("rotate")
def rotate(u, phi, sign=1.0):
    """Pointwise phase rotation u * exp(1j*sign*phi) with real phi."""
    uv, pv = value_of(u), value_of(phi)
    w = np.exp(1j * sign * pv)
    out_val = uv * w
    if not _needs_graph(u, phi):
        return out_val
    out = Var(out_val, (u, phi), op="rotate")

    def _bw(g):
        if isinstance(u, Var):
            _accumulate(u, g * np.conj(w))
        if isinstance(phi, Var):
            _accumulate(phi, sign * (g * np.conj(out_val)).imag)
    out._backward = _bw
    return out


@_register("complex_pair")
def complex_pair(re, im):
    """Combine real/imaginary parameter arrays into a complex array."""
    rv, iv = value_of(re), value_of(im)
    out_val = rv + 1j * iv
    if not _needs_graph(re, im):
        return out_val
    out = Var(out_val, (re, im), op="complex_pair")

    def _bw(g):
        if isinstance(re, Var):
            _accumulate(re, g.real)
        if isinstance(im, Var):
            _accumulate(im, g.imag)
    out._backward = _bw
    return out


@_register("stack_rows")
def stack_rows(parts):
    """Stack equal-length 1-D nodes into a (len(parts), N) array."""
    vals = [value_of(p) for p in parts]
    out_val = np.stack(vals, axis=0)
    if not _needs_graph(*parts):
        return out_val
    out = Var(out_val, tuple(parts), op="stack_rows")

    def _bw(g):
        for i, p in enumerate(parts):
            if isinstance(p, Var):
                _accumulate(p, g[i])
    out._backward = _bw
    return out


@_register("row")
def row(x, i):
    xv = value_of(x)
    out_val = xv[i]
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="row")

    def _bw(g):
        gx = np.zeros_like(xv)
        gx[i] = g
        _accumulate(x, gx)
    out._backward = _bw
    return out


@_register("matmul2")
def matmul2(m, x):
    """Apply one 2x2 matrix to a (2, N) dual-polarization array."""
    mv, xv = value_of(m), value_of(x)
    out_val = mv @ xv
    if not _needs_graph(m, x):
        return out_val
    out = Var(out_val, (m, x), op="matmul2")

    def _bw(g):
        if isinstance(m, Var):
            _accumulate(m, g @ np.conj(xv).T)
        if isinstance(x, Var):
            _accumulate(x, np.conj(mv).T @ g)
    out._backward = _bw
    return out


@_register("su2_matrix")
def su2_matrix(angles):
    """Determinant-one unitary from three real angles (theta, phi1, phi2).

        [[ cos(t) e^{+j p1},  sin(t) e^{+j p2}],
         [-sin(t) e^{-j p2},  cos(t) e^{-j p1}]]

    Smooth and unconstrained; covers the full group.
    """
    av = value_of(angles)
    t, p1, p2 = av
    ct, st = np.cos(t), np.sin(t)
    e1, e2 = np.exp(1j * p1), np.exp(1j * p2)
    out_val = np.array([[ct * e1, st * e2],
                        [-st * np.conj(e2), ct * np.conj(e1)]])
    if not _needs_graph(angles):
        return out_val
    out = Var(out_val, (angles,), op="su2_matrix")

    d_t = np.array([[-st * e1, ct * e2],
                    [-ct * np.conj(e2), -st * np.conj(e1)]])
    d_p1 = np.array([[1j * ct * e1, 0.0],
                     [0.0, -1j * ct * np.conj(e1)]])
    d_p2 = np.array([[0.0, 1j * st * e2],
                     [1j * st * np.conj(e2), 0.0]])

    def _bw(g):
        ga = np.array([np.sum((np.conj(g) * d).real) for d in (d_t, d_p1, d_p2)])
        _accumulate(angles, ga)
    out._backward = _bw
    return out


@_register("mimo_conv")
def mimo_conv(p, t, center=None):
    """S-channel real MIMO convolution.

    p: (S, N) input waveforms, t: (S_out, S, L) tap tensor;
    out[i, n] = sum_j sum_k t[i, j, k] * p[j, n - k + center].
    """
    pv, tv = value_of(p), value_of(t)
    s_out, s_in, L = tv.shape
    if pv.shape[0] != s_in:
        raise ValueError(f"channel count mismatch: waveforms {pv.shape[0]}, tensor {s_in}")
    c = (L - 1) // 2 if center is None else center
    n = pv.shape[1]
    out_val = np.zeros((s_out, n))
    for i in range(s_out):
        for j in range(s_in):
            out_val[i] += _conv_same(pv[j], tv[i, j], c)
    if not _needs_graph(p, t):
        return out_val
    out = Var(out_val, (p, t), op="mimo_conv")

    def _bw(g):
        if isinstance(p, Var):
            gp = np.zeros_like(pv)
            for j in range(s_in):
                for i in range(s_out):
                    gp[j] += _conv_same(g[i], tv[i, j][::-1], L - 1 - c)
            _accumulate(p, gp)
        if isinstance(t, Var):
            gt = np.empty_like(tv)
            pad = np.zeros((s_in, L))
            pp = np.concatenate([pad, pv, pad], axis=1)
            for k in range(L):
                seg = pp[:, L - k + c:L - k + c + n]
                gt[:, :, k] = g @ seg.T
            _accumulate(t, gt)
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions and quantization


@_register("sum_all")
def sum_all(x):
    xv = value_of(x)
    out_val = np.sum(xv)
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="sum_all")

    def _bw(g):
        _accumulate(x, np.broadcast_to(g, xv.shape))
    out._backward = _bw
    return out


@_register("mean_all")
def mean_all(x):
    xv = value_of(x)
    out_val = np.mean(xv)
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="mean_all")

    def _bw(g):
        _accumulate(x, np.broadcast_to(g / xv.size, xv.shape))
    out._backward = _bw
    return out


def quantize_midtread(x, bits, scale):
    """Symmetric mid-tread quantizer: step scale/(2^(b-1)-1), clamped."""
    x = np.asarray(x, dtype=np.float64)
    n_max = 2 ** (bits - 1) - 1
    if scale == 0.0:
        return np.zeros_like(x)
    delta = scale / n_max
    return np.clip(np.round(x / delta), -n_max, n_max) * delta


@_register("fake_quant")
def fake_quant(x, bits, scale):
    """Quantize-dequantize in the forward pass, straight-through backward.

    Gradient passes unchanged where |x| <= scale and is zero outside
    (the saturated region), so training still moves in float.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"quantizer bits must lie in [2, 16], got {bits}")
    xv = value_of(x)
    out_val = quantize_midtread(xv, bits, scale)
    if not _needs_graph(x):
        return out_val
    out = Var(out_val, (x,), op="fake_quant")

    def _bw(g):
        _accumulate(x, g * (np.abs(xv) <= scale))
    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# finite differences, the independent check on every reverse rule


def finite_difference_grad(fn, x0, h=1e-6):
    """Central-difference gradient of a scalar function of one real array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        xp = flat.copy(); xp[i] += step
        xm = flat.copy(); xm[i] -= step
        gf[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * step)
    return g


def check_gradient(fn, x0, h=1e-6, rtol=1e-4):
    """Compare analytic and finite-difference gradients of ``fn``.

    ``fn(Var) -> Var`` must build a real scalar loss from one real
    leaf.  Returns (analytic, numeric, max relative error).
    """
    leaf = Var(np.asarray(x0, dtype=np.float64))
    loss = fn(leaf)
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)

    numeric = finite_difference_grad(lambda x: float(value_of(fn(Var(x)))), x0, h)
    denom = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    err = np.max(np.abs(analytic - numeric)) / denom
    return analytic, numeric, err
