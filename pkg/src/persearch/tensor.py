"""Double-precision tensors with reverse-mode automatic differentiation.

Everything downstream (attention, the re-ID transformer, the identity losses)
is built from the primitives in this module.  A ``Tensor`` is an immutable
wrapper around a C-contiguous float64 numpy array.  Operations are pure
functions; while a ``GradTape`` is active they also append a node holding a
vector-Jacobian product closure, so gradients of a scalar loss with respect
to any participating tensor can be recovered by replaying the tape in
reverse.  Without an active tape the same functions run eagerly and keep no
graph, which is what evaluation uses.

The set of primitives is deliberately small: matrix products, the handful of
shape tools the attention stack needs, row softmax, layer norm, bilinear
feature-map sampling, and l2 normalization.  Each analytic gradient here is
validated against central differences by ``central_diff_gradcheck``.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "matmul",
    "transpose",
    "add",
    "add_scalar",
    "scale",
    "mul",
    "powc",
    "log",
    "sum_all",
    "mean_all",
    "sum_row_groups",
    "concat_cols",
    "slice_cols",
    "take_rows",
    "gather_pairs",
    "reshape",
    "softmax_rows",
    "layer_norm",
    "l2_normalize",
    "l2_normalize_rows",
    "bilinear_sample",
    "bilinear_sample_rows",
    "dropout",
    "central_diff_gradcheck",
    "write_blob",
    "read_blob",
]

_NORM_EPS = 1e-12


class Tensor:
    """Immutable n-dimensional array of float64 values.

    The backing numpy array is made read-only at construction, so a Tensor
    can be shared freely between the tape, parameter dictionaries and
    checkpoints without defensive copies.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "_data", arr)

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying float64 array."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Small amount of operator sugar so call sites stay readable.  All of it
    # routes through the module-level primitives and therefore the tape.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE_TAPE: "GradTape | None" = None


class GradTape:
    """Ordered record of primitive applications for reverse-mode autodiff.

    Use as a context manager around the forward computation of a scalar
    loss, then call :meth:`gradients`.  Tapes do not nest and a tape is
    owned by a single thread (the training loop); evaluation code simply
    runs without one.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("GradTape does not support nesting")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self._nodes.append(_Node(out, inputs, vjp))

    def gradients(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradient of the scalar ``loss`` for each source tensor.

        Sources that did not participate in the computation get zeros of
        their own shape.  The tape may be replayed multiple times.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            for inp, g_in in zip(node.inputs, node.vjp(g_out)):
                if g_in is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        out = []
        for src in sources:
            g = grads.get(id(src))
            out.append(np.zeros(src.shape) if g is None else np.asarray(g))
        return out


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors, (m,k) @ (k,n) -> (m,n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a rank-2 tensor")
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias broadcast over rows."""
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add shapes incompatible: {a.shape} + {b.shape}")


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data + c, (x,), lambda g: (g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a (m,1) column broadcast over columns
    of a (m,n) tensor, or a scalar-shaped tensor."""
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if a.ndim == 2 and b.shape == (a.shape[0], 1):
        return _emit(
            ad * bd,
            (a, b),
            lambda g: (g * bd, (g * ad).sum(axis=1, keepdims=True)),
        )
    if b.size == 1 and b.ndim == 0:
        return _emit(ad * bd, (a, b), lambda g: (g * bd, np.sum(g * ad)))
    raise ValueError(f"mul shapes incompatible: {a.shape} * {b.shape}")


def powc(x: Tensor, c: float) -> Tensor:
    """Elementwise power with a constant exponent.

    For non-integer exponents the input must be non-negative.  Exponents 0
    and 1 short-circuit so (1 - p)^gamma stays defined at p = 1.
    """
    c = float(c)
    xd = x.data
    if c == 0.0:
        return _emit(np.ones_like(xd), (x,), lambda g: (np.zeros_like(g),))
    if c == 1.0:
        return _emit(xd.copy(), (x,), lambda g: (g,))
    yd = xd**c

    def vjp(g):
        return (g * c * xd ** (c - 1.0),)

    return _emit(yd, (x,), vjp)


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.size
    return _emit(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),)
    )


def sum_row_groups(x: Tensor, group: int) -> Tensor:
    """Sum consecutive groups of ``group`` rows: (G*group, n) -> (G, n)."""
    if x.ndim != 2 or x.shape[0] % group != 0:
        raise ValueError(f"cannot group rows of {x.shape} by {group}")
    g_rows = x.shape[0] // group
    n = x.shape[1]
    data = x.data.reshape(g_rows, group, n).sum(axis=1)
    return _emit(data, (x,), lambda g: (np.repeat(g, group, axis=0),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors with equal row counts along columns."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.ndim != 2 or not (0 <= j0 < j1 <= x.shape[1]):
        raise ValueError(f"bad column slice [{j0}:{j1}] of {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, j0:j1] = g
        return (full,)

    return _emit(x.data[:, j0:j1].copy(), (x,), vjp)


def take_rows(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx].copy(), (x,), vjp)


def gather_pairs(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Pick entries x[rows[i], cols[i]] into a rank-1 tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape:
        raise ValueError("rows and cols must have equal length")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _emit(x.data[rows, cols].copy(), (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    return _emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis of a 1-D or 2-D tensor."""
    if x.ndim not in (1, 2):
        raise ValueError("softmax_rows expects a rank-1 or rank-2 tensor")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _emit(p, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.ndim not in (1, 2):
        raise ValueError("layer_norm expects a rank-1 or rank-2 tensor")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError("gamma/beta must have the normalized-axis length")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def vjp(g):
        gx = g * gd
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = (gx - m1 - xhat * m2) * inv
        axis0 = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axis0) if g.ndim > 1 else g * xhat
        dbeta = g.sum(axis=axis0) if g.ndim > 1 else g
        return dx, dgamma, dbeta

    return _emit(xhat * gd + beta.data, (x, gamma, beta), vjp)


def _normalize_rows_impl(xd: np.ndarray):
    norms = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    safe = np.where(norms > _NORM_EPS, norms, 1.0)
    y = np.where(norms > _NORM_EPS, xd / safe, 0.0)
    return y, norms, safe


def l2_normalize(v: Tensor) -> Tensor:
    """Unit-norm copy of a vector; inputs with norm <= 1e-12 map to zeros."""
    if v.ndim != 1:
        raise ValueError("l2_normalize expects a rank-1 tensor")
    return _l2_impl(v)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Row-wise l2 normalization of a rank-2 tensor."""
    if x.ndim != 2:
        raise ValueError("l2_normalize_rows expects a rank-2 tensor")
    return _l2_impl(x)


def _l2_impl(x: Tensor) -> Tensor:
    y, norms, safe = _normalize_rows_impl(x.data)
    live = norms > _NORM_EPS

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        dx = (g - y * dot) / safe
        return (np.where(live, dx, 0.0),)

    return _emit(y, (x,), vjp)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------
#
# A sample location lives in pixel units of the map: x in [0, W-1] horizontal,
# y in [0, H-1] vertical.  Out-of-bounds corners contribute zeros.  The cell
# index uses ceil(x) - 1 rather than floor(x): the interpolated value is
# identical, but exactly on a grid line the derivative becomes the left-cell
# one, which fixes the subgradient choice at the (measure-zero) ties.


def _corner_values(fmap: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    # fmap is (C, H, W); ys/xs are integer index arrays of equal shape.
    c, h, w = fmap.shape
    inb = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    ysc = np.clip(ys, 0, h - 1)
    xsc = np.clip(xs, 0, w - 1)
    vals = fmap[:, ysc, xsc]  # (C, ...)
    return np.where(inb, vals, 0.0)


def _bilinear_forward(fmap: np.ndarray, pts: np.ndarray):
    """Shared kernel: pts is (P, 2) as (x, y); returns (P, C) plus residuals."""
    xs, ys = pts[:, 0], pts[:, 1]
    x0 = np.ceil(xs).astype(np.intp) - 1
    y0 = np.ceil(ys).astype(np.intp) - 1
    dx = xs - x0
    dy = ys - y0
    v00 = _corner_values(fmap, y0, x0)  # (C, P)
    v10 = _corner_values(fmap, y0, x0 + 1)
    v01 = _corner_values(fmap, y0 + 1, x0)
    v11 = _corner_values(fmap, y0 + 1, x0 + 1)
    out = (
        v00 * (1 - dx) * (1 - dy)
        + v10 * dx * (1 - dy)
        + v01 * (1 - dx) * dy
        + v11 * dx * dy
    ).T  # (P, C)
    return out, (x0, y0, dx, dy, v00, v10, v01, v11)


def _bilinear_vjp(fmap_shape, res, g):
    """Gradients for the batched kernel; g is (P, C)."""
    x0, y0, dx, dy, v00, v10, v01, v11 = res
    gt = g.T  # (C, P)
    gx = (gt * ((1 - dy) * (v10 - v00) + dy * (v11 - v01))).sum(axis=0)
    gy = (gt * ((1 - dx) * (v01 - v00) + dx * (v11 - v10))).sum(axis=0)
    g_pts = np.stack([gx, gy], axis=1)  # (P, 2)

    c, h, w = fmap_shape
    g_map = np.zeros(fmap_shape)
    for oy, ox, wgt in (
        (0, 0, (1 - dx) * (1 - dy)),
        (0, 1, dx * (1 - dy)),
        (1, 0, (1 - dx) * dy),
        (1, 1, dx * dy),
    ):
        ys = y0 + oy
        xs = x0 + ox
        inb = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        if not inb.any():
            continue
        np.add.at(
            g_map,
            (slice(None), ys[inb], xs[inb]),
            gt[:, inb] * wgt[inb],
        )
    return g_map, g_pts


def bilinear_sample(fmap: Tensor, point) -> Tensor:
    """Sample one location of a (C, H, W) map, returning a (C,) tensor.

    ``point`` is (x, y) in pixel units, either a rank-1 Tensor of length 2
    (gradients then flow into the coordinates) or a plain pair of floats.
    """
    if fmap.ndim != 3:
        raise ValueError("bilinear_sample expects a (C, H, W) map")
    as_tensor = isinstance(point, Tensor)
    if as_tensor:
        if point.shape != (2,):
            raise ValueError("point tensor must have shape (2,)")
        pts = point.data.reshape(1, 2)
    else:
        pts = np.array([[float(point[0]), float(point[1])]])
    out, res = _bilinear_forward(fmap.data, pts)
    fshape = fmap.shape

    def vjp(g):
        g_map, g_pts = _bilinear_vjp(fshape, res, g.reshape(1, -1))
        return (g_map, g_pts[0]) if as_tensor else (g_map,)

    inputs = (fmap, point) if as_tensor else (fmap,)
    return _emit(out[0], inputs, vjp)


def bilinear_sample_rows(fmap: Tensor, points: Tensor) -> Tensor:
    """Batched sampling: (P, 2) pixel locations -> (P, C) feature rows."""
    if fmap.ndim != 3:
        raise ValueError("bilinear_sample_rows expects a (C, H, W) map")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must have shape (P, 2)")
    out, res = _bilinear_forward(fmap.data, points.data)
    fshape = fmap.shape

    def vjp(g):
        return _bilinear_vjp(fshape, res, g)

    return _emit(out, (fmap, points), vjp)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout.  rate 0 is the identity and needs no generator."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    if rng is None:
        raise ValueError("nonzero dropout rate requires a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-12) over flattened entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    err = np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)
    return float(err.max()) if err.size else 0.0


def numeric_gradient(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function at ``x``."""
    base = x.data
    grad = np.zeros(base.shape)
    flat = grad.reshape(-1)
    for i in range(base.size):
        lo = base.copy().reshape(-1)
        hi = base.copy().reshape(-1)
        lo[i] -= h
        hi[i] += h
        f_hi = f(Tensor(hi.reshape(base.shape))).item()
        f_lo = f(Tensor(lo.reshape(base.shape))).item()
        flat[i] = (f_hi - f_lo) / (2.0 * h)
    return grad


def central_diff_gradcheck(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6
) -> float:
    """Compare the taped gradient of ``f`` at ``x`` against central differences.

    ``f`` must map a Tensor to a scalar Tensor.  Returns the max relative
    error over coordinates; raises if the function value is not finite.
    """
    with GradTape() as tape:
        out = f(x)
        if out.size != 1:
            raise ValueError("gradcheck target must return a scalar")
        if not np.isfinite(out.item()):
            raise FloatingPointError("non-finite function value in gradcheck")
        (analytic,) = tape.gradients(out, [x])
    numeric = numeric_gradient(f, x, h)
    return max_rel_error(analytic, numeric)


# ---------------------------------------------------------------------------
# tensor blob format
# ---------------------------------------------------------------------------
#
# Layout: magic "SQTR", u32 version (1), u8 dtype code (0 = float64 LE),
# u8 ndim, then ndim u64 dims, then the raw little-endian values.  Integers
# are little-endian.  Round-trips are bit-exact.

_BLOB_MAGIC = b"SQTR"
_BLOB_VERSION = 1
_DTYPE_F64 = 0


def write_blob(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<IBB", _BLOB_VERSION, _DTYPE_F64, t.ndim))
        for dim in t.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_blob(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BLOB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, dtype, ndim = struct.unpack("<IBB", fh.read(6))
        if version != _BLOB_VERSION:
            raise ValueError(f"{path}: unsupported blob version {version}")
        if dtype != _DTYPE_F64:
            raise ValueError(f"{path}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError(f"{path}: truncated blob")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(arr)
