"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately closed: elementwise arithmetic, silu, 2D matmul,
2D/3D convolution (stride 1, same padding), group norm, softmax, multilinear
grid sampling, plus the movement/reduction ops (reshape, transpose, concat,
repeat, sum, mean, pooling, nearest upsampling) that the network layers are
built from. Gradients are recorded on an explicit tape whose recording order
is the topological order; backward walks it strictly in reverse.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records op nodes in execution order. Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def clear(self):
        self.nodes.clear()


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=config.float_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # movement / reduction methods (thin wrappers over the module ops)
    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr, op_name):
    # a single-pass reduction: any NaN/Inf in arr propagates into the sum
    if config.check_finite_enabled() and not np.isfinite(np.sum(arr)):
        if not np.all(np.isfinite(arr)):  # rule out pure summation overflow
            raise NonFiniteError(f"{op_name} produced non-finite values")
    return arr


def _make(data, parents, backward_fn, op_name):
    """Wrap op output; record on the active tape if any parent needs grad."""
    _check(data, op_name)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def backward(loss: Tensor):
    """Backpropagate from a scalar loss through the active tape.

    Accumulates into `.grad` of every tensor that requires grad and returns
    the map of leaf tensors to their gradients. The tape is cleared.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _active_tape()
    if tape is None or not loss.requires_grad:
        raise ValueError("loss is not attached to an active tape")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not recorded on the active tape")

    loss.grad = np.ones((), dtype=loss.data.dtype)
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=False)
            else:
                parent.grad = parent.grad + g
            if id(parent) not in produced:
                leaves[id(parent)] = parent
    tape.clear()
    return {t: t.grad for t in leaves.values()}


# ---------------------------------------------------------------------------
# elementwise ops: add, sub, mul, scale, silu


def _binary_prep(a, b, op_name):
    a = as_tensor(a)
    if isinstance(b, (int, float)) or (isinstance(b, np.ndarray) and b.ndim == 0):
        return a, None, float(b)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b, None


def add(a, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "add")
    if bt is None:
        return _make(a.data + bs, [a], lambda g: (g,), "add")
    return _make(a.data + bt.data, [a, bt], lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "sub")
    if bt is None:
        return _make(a.data - bs, [a], lambda g: (g,), "sub")
    return _make(a.data - bt.data, [a, bt], lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, bt, bs = _binary_prep(a, b, "mul")
    if bt is None:
        return _make(a.data * bs, [a], lambda g: (g * bs,), "mul")
    ad, bd = a.data, bt.data
    return _make(ad * bd, [a, bt], lambda g: (g * bd, g * ad), "mul")


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar."""
    return mul(a, float(s))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, [a], bwd, "silu")


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (g @ bd.T, ad.T @ g)

    return _make(ad @ bd, [a, b], bwd, "matmul")


# ---------------------------------------------------------------------------
# convolution (stride 1, zero same-padding, odd kernel), 2D and 3D


def _pad_same(x, kshape):
    """Zero same-padding of (C, *S) for odd kernel extents (faster than np.pad)."""
    pads = [k // 2 for k in kshape]
    shape = (x.shape[0],) + tuple(s + 2 * p for s, p in zip(x.shape[1:], pads))
    xp = np.zeros(shape, dtype=x.dtype)
    sl = (slice(None),) + tuple(slice(p, p + s) for s, p in zip(x.shape[1:], pads))
    xp[sl] = x
    return xp


def _offsets(kshape):
    grids = np.meshgrid(*[np.arange(k) for k in kshape], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)  # (K, nd)


def _extract_patches_kc(x, kshape):
    """im2col in (K, C_in, npix) layout built from per-offset slice copies.

    Offset-major layout keeps each copy a large mostly-contiguous block, far
    cheaper than one generic strided walk over the window view.
    """
    spatial = x.shape[1:]
    xp = _pad_same(x, kshape)
    offs = _offsets(kshape)
    buf = np.empty((len(offs), x.shape[0]) + spatial, dtype=x.dtype)
    for i, off in enumerate(offs):
        sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
        buf[i] = xp[sl]
    return buf.reshape(len(offs), x.shape[0], -1)


def _weight_kc(w):
    """Reorder (C_out, C_in, *K) to (C_out, K*C_in) matching the patch layout."""
    nd = w.ndim - 2
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,)
    return np.ascontiguousarray(w.transpose(perm)).reshape(w.shape[0], -1)


def _conv_forward_raw(x, w, patches=None):
    """Cross-correlation of x (C_in, *S) with w (C_out, C_in, *K), same padding."""
    spatial = x.shape[1:]
    if patches is None:
        patches = _extract_patches_kc(x, w.shape[2:])
    k, c_in, npix = patches.shape
    out = _weight_kc(w) @ patches.reshape(k * c_in, npix)  # (C_out, npix)
    return out.reshape((w.shape[0],) + spatial)


def conv(x, weight, bias=None, dims=2) -> Tensor:
    """Convolution with stride 1 and zero same-padding.

    x: (C_in, *spatial), weight: (C_out, C_in, *kernel) with odd kernel
    extents, optional bias (C_out,). Gradients for input and kernel go
    through the transposed correlation.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bt = as_tensor(bias) if bias is not None else None
    if x.data.ndim != dims + 1 or weight.data.ndim != dims + 2:
        raise ValueError(
            f"conv{dims}d: expected input (C_in, *spatial{dims}) and kernel "
            f"(C_out, C_in, *k), got {x.shape} and {weight.shape}"
        )
    if weight.shape[1] != x.shape[0]:
        raise ValueError(f"conv: channel mismatch, input {x.shape[0]} vs kernel {weight.shape[1]}")
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ValueError(f"conv: kernel extents must be odd, got {weight.shape[2:]}")
    if bt is not None and bt.shape != (weight.shape[0],):
        raise ValueError("conv: bias shape must be (C_out,)")

    xd, wd = x.data, weight.data
    out = _conv_forward_raw(xd, wd)
    if bt is not None:
        out = out + bt.data.reshape((-1,) + (1,) * dims)

    nd = dims
    spatial_axes = tuple(range(1, nd + 1))

    need_gx = x.requires_grad
    need_gw = weight.requires_grad

    def bwd(g):
        g2d = g.reshape(g.shape[0], -1)  # (C_out, npix)
        kshape = wd.shape[2:]
        nk = int(np.prod(kshape))
        gw = None
        if need_gw:
            # kernel grad from recomputed input patches, undoing the K-major layout
            patches = _extract_patches_kc(xd, kshape)
            gw_kc = g2d @ patches.reshape(nk * wd.shape[1], -1).T  # (C_out, K*C_in)
            gw = gw_kc.reshape((wd.shape[0],) + kshape + (wd.shape[1],))
            gw = np.ascontiguousarray(gw.transpose((0, nd + 1) + tuple(range(1, nd + 1))))
        gx = None
        if need_gx:
            # input grad: same-padded correlation with the flipped, swapped kernel
            wt = np.flip(wd, axis=tuple(range(2, nd + 2))).swapaxes(0, 1)
            gx = _conv_forward_raw(g, wt)
        gb = g.sum(axis=spatial_axes) if bt is not None else None
        return (gx, gw, gb) if bt is not None else (gx, gw)

    parents = [x, weight] if bt is None else [x, weight, bt]
    return _make(out, parents, bwd, f"conv{dims}d")


# ---------------------------------------------------------------------------
# group norm


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (C, *spatial) followed by a channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[0]
    if c % groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("group_norm: gamma/beta must have shape (C,)")
    spatial = x.shape[1:]
    m = (c // groups) * int(np.prod(spatial))  # elements per group

    xg = x.data.reshape(groups, m)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gcol = gamma.data.reshape((c,) + (1,) * len(spatial))
    out = xhat * gcol + beta.data.reshape((c,) + (1,) * len(spatial))

    def bwd(g):
        dxhat = (g * gcol).reshape(groups, m)
        xh = xhat.reshape(groups, m)
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=1, keepdims=True))
        sum_axes = tuple(range(1, 1 + len(spatial)))
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(out, [x, gamma, beta], bwd, "group_norm")


# ---------------------------------------------------------------------------
# softmax


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, [x], bwd, "softmax")


# ---------------------------------------------------------------------------
# grid sampling (bilinear / trilinear, zero outside, coords are constants)


class SamplePlan:
    """Precompiled multilinear sampling pattern: corner indices and weights.

    Sample locations in this architecture are camera constants, so the floor /
    fraction / validity arithmetic can be done once and reused every step.
    """

    __slots__ = ("lin", "w", "spatial", "m")

    def __init__(self, lin, w, spatial, m):
        self.lin = lin  # (corners, M) int64 flat cell indices (0 where invalid)
        self.w = w  # (corners, M) weights (0 where invalid)
        self.spatial = spatial
        self.m = m


def make_sample_plan(coords, spatial) -> SamplePlan:
    """Build the corner gather pattern for coords (M, nd) over a grid `spatial`."""
    coords = np.asarray(coords, dtype=np.float64)
    nd = len(spatial)
    if coords.ndim != 2 or coords.shape[1] != nd:
        raise ValueError(f"coords must be (M, {nd}), got {coords.shape}")
    m = coords.shape[0]
    base = np.floor(coords).astype(np.int64)
    frac = coords - base

    strides = np.ones(nd, dtype=np.int64)
    for a in range(nd - 2, -1, -1):
        strides[a] = strides[a + 1] * spatial[a + 1]

    n_corners = 2 ** nd
    lin_all = np.empty((n_corners, m), dtype=np.int64)
    w_all = np.empty((n_corners, m), dtype=config.float_dtype())
    bounds = np.array(spatial)
    for corner in range(n_corners):
        offs = np.array([(corner >> (nd - 1 - a)) & 1 for a in range(nd)], dtype=np.int64)
        idx = base + offs  # (M, nd)
        valid = np.all((idx >= 0) & (idx < bounds), axis=1)
        w = np.ones(m, dtype=np.float64)
        for a in range(nd):
            w = w * (frac[:, a] if offs[a] else 1.0 - frac[:, a])
        w_all[corner] = np.where(valid, w, 0.0)
        lin_all[corner] = np.where(valid, (idx * strides).sum(axis=1), 0)
    return SamplePlan(lin_all, w_all, tuple(spatial), m)


def grid_sample(features, coords) -> Tensor:
    """Multilinear interpolation of a feature grid at fractional index coords.

    features: (C, *spatial) with 2 or 3 spatial axes; coords: ndarray (M, nd)
    in continuous index space of the spatial axes, or a precompiled
    SamplePlan. Samples with any corner outside the grid take zero
    contribution from that corner; fully out-of-range points return zero
    vectors. Gradients flow to features only (sample locations are fixed by
    camera geometry). Returns (M, C).
    """
    features = as_tensor(features)
    nd = features.data.ndim - 1
    if nd not in (2, 3):
        raise ValueError(f"grid_sample supports 2 or 3 spatial axes, got shape {features.shape}")
    spatial = features.shape[1:]
    if isinstance(coords, SamplePlan):
        plan = coords
        if plan.spatial != tuple(spatial):
            raise ValueError(f"plan built for grid {plan.spatial}, features have {spatial}")
    else:
        plan = make_sample_plan(coords, spatial)

    c = features.shape[0]
    # row-major (cells, C) layout makes corner gathers contiguous row reads
    cells = np.ascontiguousarray(features.data.reshape(c, -1).T)
    dtype = features.data.dtype

    out = np.zeros((plan.m, c), dtype=dtype)
    n_corners = plan.lin.shape[0]
    for corner in range(n_corners):
        out += plan.w[corner].astype(dtype, copy=False)[:, None] * cells[plan.lin[corner]]

    def bwd(g):
        size = cells.shape[0]
        lin_flat = plan.lin.reshape(-1)
        # weighted output grads for every (corner, sample) pair at once
        contrib = plan.w.reshape(-1, 1) * np.tile(g, (n_corners, 1))  # (corners*M, C)
        gf = np.empty((c, size), dtype=g.dtype)
        for ch in range(c):
            gf[ch] = np.bincount(lin_flat, weights=contrib[:, ch], minlength=size)
        return (gf.reshape(features.shape),)

    return _make(out, [features], bwd, "grid_sample")


# ---------------------------------------------------------------------------
# movement and reduction ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), [x], lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        [x],
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def repeat(x, times: int, axis: int) -> Tensor:
    """Repeat each entry `times` times along `axis` (block repeat)."""
    x = as_tensor(x)
    axis = axis % x.data.ndim
    n = x.shape[axis]

    def bwd(g):
        gshape = list(g.shape)
        gshape[axis:axis + 1] = [n, times]
        return (g.reshape(gshape).sum(axis=axis + 1),)

    return _make(np.repeat(x.data, times, axis=axis), [x], bwd, "repeat")


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        shp = x.shape

        def bwd_all(g):
            return (np.broadcast_to(g, shp).astype(x.data.dtype, copy=True),)

        return _make(x.data.sum(), [x], bwd_all, "sum")

    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),)

    return _make(x.data.sum(axis=axis), [x], bwd, "sum")


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    shp = x.shape

    def bwd(g):
        return (np.broadcast_to(g / n, shp).astype(x.data.dtype, copy=True),)

    return _make(x.data.mean(), [x], bwd, "mean")


def avg_pool2d(x, factor: int = 2) -> Tensor:
    """Average pooling over (C, H, W) with stride = window = factor."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: spatial {h}x{w} not divisible by {factor}")
    blocks = x.data.reshape(c, h // factor, factor, w // factor, factor)
    out = blocks.mean(axis=(2, 4))

    def bwd(g):
        gx = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / (factor * factor)
        return (gx,)

    return _make(out, [x], bwd, "avg_pool2d")


def upsample2d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling over (C, H, W)."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bwd(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(out, [x], bwd, "upsample2d")


def mse(a, b) -> Tensor:
    """Mean squared error, composed from the closed op set."""
    d = sub(a, b)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# deterministic RNG


class Rng:
    """Seeded PCG64 stream: identical seed gives identical samples."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seed_repr = seed.entropy
            self._gen = np.random.Generator(np.random.PCG64(seed))
        else:
            self._seed_repr = int(seed)
            self._gen = np.random.Generator(np.random.PCG64(int(seed)))

    def spawn(self, *key: int) -> "Rng":
        """Derive an independent stream from (seed, *key), not from consumption state."""
        return Rng(np.random.SeedSequence((self._seed_repr,) + tuple(int(k) for k in key)))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=config.float_dtype())

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        u = self._gen.random(shape, dtype=np.float64)
        return (low + (high - low) * u).astype(config.float_dtype())

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self._seed_repr,
            "pcg_state": str(st["state"]["state"]),
            "pcg_inc": str(st["state"]["inc"]),
            "has_uint32": st["has_uint32"],
            "uinteger": st["uinteger"],
        }

    @state.setter
    def state(self, st: dict):
        self._seed_repr = st["seed"]
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(st["pcg_state"]), "inc": int(st["pcg_inc"])},
            "has_uint32": st["has_uint32"],
            "uinteger": st["uinteger"],
        }

    @classmethod
    def from_state(cls, st: dict) -> "Rng":
        rng = cls(0)
        rng.state = st
        return rng


# ---------------------------------------------------------------------------
# parameter helpers


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=config.float_dtype())


def he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * math.sqrt(2.0 / fan_in)
