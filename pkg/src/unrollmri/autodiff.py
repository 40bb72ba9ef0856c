"""Minimal reverse-mode automatic differentiation on numpy arrays.

The op set is deliberately small: exactly what the unrolled reconstruction
networks, data-consistency layers and losses need. Values are float64 or
complex128 arrays. Gradients of complex nodes are stored packed as complex
arrays with ``grad.real = dL/d(value.real)`` and ``grad.imag = dL/d(value.imag)``,
i.e. derivatives with respect to the split real representation. Real-valued
finite differences on any upstream real parameter are therefore an exact test
of every rule here.

A graph instance must be built and differentiated from a single thread;
independent graphs can run concurrently.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ctensor

ABS_EPS = 1e-12  # smoothing of |z| at zero


class Tensor:
    """A node in the computation graph wrapping an ndarray value."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "vjps", "name")

    def __init__(self, value, requires_grad: bool = False,
                 parents: tuple = (), vjps: tuple = (), name: str = ""):
        v = np.asarray(value)
        if v.dtype not in (np.float64, np.complex128):
            v = v.astype(np.complex128 if np.iscomplexobj(v) else np.float64)
        self.value = v
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, grad={self.grad is not None})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A trainable leaf. Gradients accumulate across backward() calls until
    cleared; optimizer state lives in the optimizer, keyed by name."""

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x, name: str = "const") -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def _project(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cast a packed gradient to the dtype of the node it belongs to."""
    if np.iscomplexobj(ref):
        return g.astype(np.complex128) if not np.iscomplexobj(g) else g
    return g.real if np.iscomplexobj(g) else g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(value, parents: Sequence[Tensor], vjps: Sequence[Callable], name: str) -> Tensor:
    return Tensor(value, parents=tuple(parents), vjps=tuple(vjps), name=name)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 (lambda g: _project(_unbroadcast(g, a.shape), a.value),
                  lambda g: _project(_unbroadcast(g, b.shape), b.value)),
                 "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 (lambda g: _project(_unbroadcast(g, a.shape), a.value),
                  lambda g: _project(-_unbroadcast(g, b.shape), b.value)),
                 "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), (lambda g: -g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product. For complex factors the packed-gradient rule is
    ``dL/da = g * conj(b)`` (projected to a's dtype)."""
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 (lambda g: _project(_unbroadcast(g * np.conj(b.value), a.shape), a.value),
                  lambda g: _project(_unbroadcast(g * np.conj(a.value), b.shape), b.value)),
                 "mul")


def div(a, b) -> Tensor:
    """Elementwise quotient, real operands only."""
    a, b = as_tensor(a), as_tensor(b)
    if a.is_complex or b.is_complex:
        raise TypeError("div supports real tensors only")
    return _node(a.value / b.value, (a, b),
                 (lambda g: _unbroadcast(g / b.value, a.shape),
                  lambda g: _unbroadcast(-g * a.value / b.value**2, b.shape)),
                 "div")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise TypeError("reciprocal supports real tensors only")
    return _node(1.0 / a.value, (a,), (lambda g: -g / a.value**2,), "reciprocal")


def conj(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.conj(a.value), (a,), (lambda g: np.conj(g),), "conj")


def real_part(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.ascontiguousarray(a.value.real), (a,),
                 (lambda g: _project(g, a.value),), "real_part")


# ---------------------------------------------------------------------------
# reductions and inner products


def summ(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).astype(a.value.dtype)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), (vjp,), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n).astype(a.value.dtype)

    return _node(a.value.mean(axis=axis, keepdims=keepdims), (a,), (vjp,), "mean")


def cdot_real(a, b) -> Tensor:
    """Real part of the complex inner product, as a scalar node:
    ``Re <a, b> = sum(a.re*b.re + a.im*b.im)``. This is the inner product of
    the split real representation, which is what CG on Hermitian systems and
    dense heads need."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cdot_real shape mismatch {a.shape} vs {b.shape}")
    val = np.real(np.vdot(a.value, b.value))
    return _node(np.float64(val), (a, b),
                 (lambda g: _project(g * b.value, a.value),
                  lambda g: _project(g * a.value, b.value)),
                 "cdot_real")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise TypeError("relu expects a real tensor")
    return _node(np.maximum(a.value, 0.0), (a,),
                 (lambda g: g * (a.value > 0),), "relu")


def prelu(a, slope: Tensor) -> Tensor:
    """Parametric ReLU with a scalar learnable negative slope."""
    a, slope = as_tensor(a), as_tensor(slope)
    if a.is_complex:
        raise TypeError("prelu expects a real tensor")
    s = float(slope.value)
    pos = a.value > 0
    return _node(np.where(pos, a.value, s * a.value), (a, slope),
                 (lambda g: g * np.where(pos, 1.0, s),
                  lambda g: np.float64(np.sum(g * a.value * (~pos)))),
                 "prelu")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), numerically stable; used to keep DC scalars positive."""
    a = as_tensor(a)
    v = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return _node(v, (a,), (lambda g: g * sig,), "softplus")


def abs_smooth(a, eps: float = ABS_EPS) -> Tensor:
    """Magnitude with eps-smoothing at zero: sqrt(re^2 + im^2 + eps)."""
    a = as_tensor(a)
    r = np.sqrt(a.value.real**2 + a.value.imag**2 + eps)
    return _node(r, (a,),
                 (lambda g: _project((g / r) * a.value, a.value),), "abs_smooth")


def abs_exact(a) -> Tensor:
    """|a| for real tensors with the sign subgradient (0 at 0); keeps the
    l1 loss exactly zero on identical inputs."""
    a = as_tensor(a)
    if a.is_complex:
        raise TypeError("abs_exact expects a real tensor; use abs_smooth for complex")
    return _node(np.abs(a.value), (a,), (lambda g: g * np.sign(a.value),), "abs_exact")


def rss(a, eps: float = ABS_EPS) -> Tensor:
    """Root-sum-of-squares over the channel axis: [C,H,W] complex -> [H,W] real."""
    a = as_tensor(a)
    r = np.sqrt(np.sum(a.value.real**2 + a.value.imag**2, axis=0) + eps)
    return _node(r, (a,),
                 (lambda g: _project((g / r)[None] * a.value, a.value),), "rss")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,),
                 (lambda g: g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return _project(g[tuple(sl)], tensors[i].value)
        return vjp

    return _node(np.concatenate([t.value for t in tensors], axis=axis),
                 tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))),
                 "concat")


def crop(a, slices: tuple) -> Tensor:
    """Slice a tensor; the backward pass scatters into a zero tensor."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        out[slices] = g
        return _project(out, a.value)

    return _node(a.value[slices], (a,), (vjp,), "crop")


def pad_zero(a, pads) -> Tensor:
    """Zero padding, numpy pad-width convention."""
    a = as_tensor(a)
    slices = tuple(slice(p[0], p[0] + s) for p, s in zip(pads, a.shape))
    return _node(np.pad(a.value, pads), (a,),
                 (lambda g: g[slices],), "pad_zero")


def pad_reflect(a, pads) -> Tensor:
    """Reflect padding. The backward pass folds border gradients back onto
    their mirrored source cells."""
    a = as_tensor(a)
    idx = np.pad(np.arange(a.value.size).reshape(a.shape), pads, mode="reflect")

    def vjp(g):
        out = np.zeros(a.value.size, dtype=g.dtype)
        np.add.at(out, idx.ravel(), g.ravel())
        return _project(out.reshape(a.shape), a.value)

    return _node(np.pad(a.value, pads, mode="reflect"), (a,), (vjp,), "pad_reflect")


def pixel_shuffle(a, r: int) -> Tensor:
    """Sub-pixel rearrangement [C*r^2, H, W] -> [C, r*H, r*W] (raster order)."""
    a = as_tensor(a)
    c2, h, w = a.shape
    if c2 % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: {c2} channels not divisible by r^2={r*r}")
    c = c2 // (r * r)

    def fwd(v):
        return v.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)

    def vjp(g):
        return g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c2, h, w)

    return _node(fwd(a.value), (a,), (vjp,), "pixel_shuffle")


def pixel_unshuffle(a, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`; round trip is bitwise exact."""
    a = as_tensor(a)
    c, hr, wr = a.shape
    if hr % r != 0 or wr % r != 0:
        raise ValueError("pixel_unshuffle: spatial dims not divisible by r")
    h, w = hr // r, wr // r

    def fwd(v):
        return v.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)

    def vjp(g):
        return g.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, hr, wr)

    return _node(fwd(a.value), (a,), (vjp,), "pixel_unshuffle")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """2D cross-correlation: input [C_in,H,W], kernel [C_out,C_in,kh,kw].

    ``same`` zero-pads by k//2 so the output is [C_out, ceil(H/s), ceil(W/s)];
    ``valid`` uses no padding. Real tensors only; odd kernels only.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.is_complex or kernel.is_complex:
        raise TypeError("conv2d expects real tensors (split complex first)")
    cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin_k != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.value, ((0, 0), (ph, ph), (pw, pw))) if ph or pw else x.value
    hp, wp = h + 2 * ph, w + 2 * pw
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than (padded) input")
    cols = _im2col(xp, kh, kw, stride, stride, ho, wo)
    k2 = kernel.value.reshape(cout, cin * kh * kw)
    out = (k2 @ cols).reshape(cout, ho, wo)

    def vjp_x(g):
        dcols = k2.T @ g.reshape(cout, ho * wo)
        dc = dcols.reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, i, j]
        return dxp[:, ph:ph + h, pw:pw + w] if ph or pw else dxp

    def vjp_k(g):
        return (g.reshape(cout, ho * wo) @ cols.T).reshape(kernel.shape)

    return _node(out, (x, kernel), (vjp_x, vjp_k), "conv2d")


def add_bias(x, bias) -> Tensor:
    """Per-channel bias add for [C,H,W] activations."""
    x, bias = as_tensor(x), as_tensor(bias)
    return _node(x.value + bias.value[:, None, None], (x, bias),
                 (lambda g: g, lambda g: g.sum(axis=(1, 2))), "add_bias")


# ---------------------------------------------------------------------------
# spectral / complex structure


def fft2c(a) -> Tensor:
    """Centered orthonormal 2D FFT node; the backward rule is the inverse
    transform (the map is unitary on the split representation)."""
    a = as_tensor(a)
    return _node(ctensor.fft2c(a.value.astype(np.complex128)), (a,),
                 (lambda g: _project(ctensor.ifft2c(g), a.value),), "fft2c")


def ifft2c(a) -> Tensor:
    a = as_tensor(a)
    return _node(ctensor.ifft2c(a.value.astype(np.complex128)), (a,),
                 (lambda g: _project(ctensor.fft2c(g), a.value),), "ifft2c")


def apply_linop(x, fwd: Callable[[np.ndarray], np.ndarray],
                adj: Callable[[np.ndarray], np.ndarray], name: str = "linop") -> Tensor:
    """Apply a fixed C-linear operator given as (forward, adjoint) ndarray
    callables. The packed-gradient vjp of a C-linear map is its adjoint."""
    x = as_tensor(x)
    return _node(fwd(x.value), (x,),
                 (lambda g: _project(adj(np.asarray(g, dtype=np.complex128)), x.value),),
                 name)


def complex_to_channels(a) -> Tensor:
    """[C,H,W] complex -> [2C,H,W] real, stacking all real planes then all
    imaginary planes."""
    a = as_tensor(a)
    c = a.shape[0]
    val = np.concatenate([a.value.real, a.value.imag], axis=0)
    return _node(val, (a,),
                 (lambda g: g[:c] + 1j * g[c:],), "complex_to_channels")


def channels_to_complex(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise TypeError("channels_to_complex expects a real tensor")
    c2 = a.shape[0]
    if c2 % 2 != 0:
        raise ValueError("channels_to_complex: channel count must be even")
    c = c2 // 2
    val = a.value[:c] + 1j * a.value[c:]
    return _node(val, (a,),
                 (lambda g: np.concatenate([g.real, g.imag], axis=0),), "channels_to_complex")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a finite real scalar ``loss``.

    Accumulates ``dL/dp`` into ``p.grad`` for every reachable node with
    ``requires_grad``. Raises on a non-finite intermediate gradient, naming
    the offending node.
    """
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    if np.iscomplexobj(loss.value):
        raise TypeError("backward expects a real scalar loss")
    if not np.isfinite(loss.value):
        raise FloatingPointError("loss is non-finite")

    order = _toposort(loss)
    needs: dict[int, bool] = {}
    for node in order:  # parents precede children
        needs[id(node)] = node.requires_grad or any(needs[id(p)] for p in node.parents)
    if not needs[id(loss)]:
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not needs[id(node)]:
            continue
        # isfinite on complex input checks both components; a float64 view
        # would need a contiguous last axis, which sliced gradients lack.
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at node {node.name!r}")
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, vjp in zip(node.parents, node.vjps):
            if not needs[id(parent)]:
                continue
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter],
               h: float = 1e-4, n_coords: int = 32, seed: int = 0) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current parameter values and return
    a real scalar Tensor. At least ``n_coords`` random coordinates of every
    parameter are probed (all of them for small parameters). Returns the
    maximum relative error, where the denominator is floored at
    ``1e-4 * max(1, grad scale)`` so exactly-zero coordinates do not inflate
    the ratio with finite-difference roundoff.

    Piecewise-linear activations make the loss non-smooth on a measure-zero
    set; when the +-h interval happens to straddle such a kink the central
    difference is wrong by a step-independent amount. Coordinates whose error
    looks suspicious are therefore re-probed with a 100x smaller step: a kink
    artifact vanishes, a wrong backward rule does not.
    """
    zero_grads(params)
    backward(fn())
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                for p in params]

    rng = np.random.default_rng(seed)
    gmax = max([1.0] + [float(np.max(np.abs(a))) for a in analytic])
    floor = 1e-4 * gmax
    worst = 0.0

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn().value)
        flat[i] = orig - step
        f_minus = float(fn().value)
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * step)

    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
        for i in idx:
            a = float(ana.reshape(-1)[i])
            num = central(flat, i, h)
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            if rel > 1e-5:
                num2 = central(flat, i, h / 100.0)
                rel = min(rel, abs(a - num2) / max(abs(a), abs(num2), floor))
            worst = max(worst, rel)
    return worst
