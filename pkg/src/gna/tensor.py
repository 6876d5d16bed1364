"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operator set the localization network needs is provided. Feature
maps are channel-last: ``(H, W, C)`` or batched ``(B, H, W, C)``. Convolution
weights are laid out as ``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError

_MAGIC = b"GNAT"
_VERSION = 1


class Tensor:
    """A float64 array that may participate in gradient computation.

    Non-leaf tensors produced by an op keep references to their parents and a
    backward rule; together these form the computation tape that
    :func:`backward` replays in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        """Wrap an op result, recording it on the tape if any parent needs grad.

        ``backward_fn(grad_out)`` returns one gradient (or ``None``) per parent.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.name = None
        out.grad = None
        needs = any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                     coords: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a float64 array shaped like ``x``. When ``coords`` is given
    only those entries are estimated; the rest of the result is NaN.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.full(base.shape, np.nan) if coords is not None else np.zeros(base.shape)
    it = coords if coords is not None else np.ndindex(*base.shape)
    for c in it:
        c = tuple(c)
        orig = base[c]
        base[c] = orig + h
        fp = float(f(base.copy()))
        base[c] = orig - h
        fm = float(f(base.copy()))
        base[c] = orig
        out[c] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_param_grads(loss_fn: Callable[[], Tensor], params: dict, coords_per_tensor: int = 2,
                      seed: int = 0, steps: Sequence[float] = (1e-5, 1e-6),
                      floor: float = 1e-6) -> dict[str, float]:
    """Compare tape gradients with central differences on sampled entries.

    ``loss_fn`` must rebuild the graph from ``params`` and reproduce any
    random draws itself. Returns the worst relative error per tensor.

    Each entry is differenced at every step in ``steps`` and the closest
    estimate counts, so a ReLU or max-pool switch inside one stencil does not
    fail a correct gradient. The error floor is ``floor * max(1, |loss|)``
    because difference round-off grows with the loss magnitude.
    """
    for p in params.values():
        p.grad = None
    root = loss_fn()
    backward(root)
    scale_floor = floor * max(1.0, abs(float(root.data.reshape(-1)[0])))
    analytic = {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in params.items():
        flat = rng.choice(p.data.size, size=min(coords_per_tensor, p.data.size), replace=False)
        coords = [np.unravel_index(int(i), p.data.shape) for i in flat]
        original = p.data

        def f(x):
            p.data = x
            try:
                return float(loss_fn().data.reshape(-1)[0])
            finally:
                p.data = original

        idx = tuple(np.array(coords).T)
        a = analytic[name][idx]
        errs = []
        for h in steps:
            num = finite_diff_grad(f, original, h, coords)[idx]
            errs.append(np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), scale_floor))
        worst[name] = float(np.max(np.min(errs, axis=0)))
    for p in params.values():
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.array([x.data.sum()]), (x,),
                          lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.data.size
        return Tensor.from_op(np.array([x.data.mean()]), (x,),
                              lambda g: (np.full(shape, g.reshape(-1)[0] / n),))
    n = shape[axis]
    out = x.data.mean(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return Tensor.from_op(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of empty list")
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.data.ndim != nd or any(
            x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor.from_op(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError("stack: shapes differ")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return Tensor.from_op(np.stack([x.data for x in xs], axis=axis), xs, bw)


def index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return Tensor.from_op(x.data[i], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and attention building blocks


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return Tensor.from_op(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return Tensor.from_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {x.shape}")
    s = softmax_array(x.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), bw)


def gather_indices(x: Tensor, idx) -> Tensor:
    """Rows ``x[r, c, :]`` for each ``(r, c)`` in ``idx``; backward scatter-adds."""
    if x.data.ndim != 3:
        raise ShapeError(f"gather_indices expects an (H, W, d) map, got {x.shape}")
    H, W, d = x.shape
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 2)
    rows, cols = idx[:, 0], idx[:, 1]
    if np.any((rows < 0) | (rows >= H) | (cols < 0) | (cols >= W)):
        raise IndexError(f"gather_indices: index outside [0,{H})x[0,{W})")
    flat = rows * W + cols

    def bw(g):
        acc = np.zeros((H * W, d))
        np.add.at(acc, flat, g)
        return (acc.reshape(H, W, d),)

    return Tensor.from_op(x.data.reshape(H * W, d)[flat], (x,), bw)


# ---------------------------------------------------------------------------
# convolution family


def _batched(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what}: expected (H,W,C) or (B,H,W,C), got {x.shape}")


def _conv_out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    xb, squeeze = _batched(x.data, "conv2d")
    w = weights.data
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weights must be (kh,kw,cin,cout), got {w.shape}")
    kh, kw, cin, cout = w.shape
    B, H, W, C = xb.shape
    if C != cin:
        raise ShapeError(f"conv2d: input has {C} channels, weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    Ho = _conv_out_size(H, kh, stride, dilation, padding)
    Wo = _conv_out_size(W, kw, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel does not fit a {H}x{W} input")

    p = padding
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    cols = np.empty((B, Ho, Wo, kh, kw, C))
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            cols[:, :, :, a, b, :] = xp[:, r0:r0 + stride * (Ho - 1) + 1:stride,
                                        c0:c0 + stride * (Wo - 1) + 1:stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    w2 = w.reshape(kh * kw * C, cout)
    out = cols2 @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, cout)
    if squeeze:
        out = out[0]

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                r0 = a * dilation
                for b in range(kw):
                    c0 = b * dilation
                    gxp[:, r0:r0 + stride * (Ho - 1) + 1:stride,
                        c0:c0 + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, a, b, :]
            gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weights, bias) if bias is not None else (x, weights)
    return Tensor.from_op(out, parents, bw)


def deconv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 2,
             padding: int = 1, output_padding: int = 1) -> Tensor:
    """Transposed convolution. With a 3x3 kernel and the defaults the output is
    exactly twice the input extent."""
    xb, squeeze = _batched(x.data, "deconv2d")
    w = weights.data
    if w.ndim != 4:
        raise ShapeError(f"deconv2d: weights must be (kh,kw,cin,cout), got {w.shape}")
    kh, kw, cin, cout = w.shape
    B, H, W, C = xb.shape
    if C != cin:
        raise ShapeError(f"deconv2d: input has {C} channels, weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"deconv2d: bias shape {bias.shape} != ({cout},)")
    if output_padding >= stride or padding < 0:
        raise ShapeError("deconv2d: output_padding must be < stride, padding >= 0")
    s, p = stride, padding
    Hf, Wf = (H - 1) * s + kh, (W - 1) * s + kw
    Ho = (H - 1) * s - 2 * p + kh + output_padding
    Wo = (W - 1) * s - 2 * p + kw + output_padding
    if Ho < 1 or Wo < 1:
        raise ShapeError("deconv2d: empty output")
    # room for output padding past the last kernel tap
    Hb, Wb = max(Hf, p + Ho), max(Wf, p + Wo)

    x2 = xb.reshape(B * H * W, C)
    wt = w.transpose(2, 0, 1, 3).reshape(C, kh * kw * cout)
    cols = (x2 @ wt).reshape(B, H, W, kh, kw, cout)
    full = np.zeros((B, Hb, Wb, cout))
    for a in range(kh):
        for b in range(kw):
            full[:, a:a + s * (H - 1) + 1:s, b:b + s * (W - 1) + 1:s, :] += cols[:, :, :, a, b, :]
    out = full[:, p:p + Ho, p:p + Wo, :]
    if bias is not None:
        out = out + bias.data
    else:
        out = out.copy()
    if squeeze:
        out = out[0]

    def bw(g):
        gb = g.reshape(-1, cout).sum(axis=0) if bias is not None else None
        gfull = np.zeros((B, Hb, Wb, cout))
        gfull[:, p:p + Ho, p:p + Wo, :] = g if not squeeze else g[None]
        gcols = np.empty((B, H, W, kh, kw, cout))
        for a in range(kh):
            for b in range(kw):
                gcols[:, :, :, a, b, :] = gfull[:, a:a + s * (H - 1) + 1:s,
                                                b:b + s * (W - 1) + 1:s, :]
        gc2 = gcols.reshape(B * H * W, kh * kw * cout)
        gw = (x2.T @ gc2).reshape(C, kh, kw, cout).transpose(1, 2, 0, 3)
        gx = None
        if x.requires_grad:
            gx = (gc2 @ wt.T).reshape(B, H, W, C)
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weights, bias) if bias is not None else (x, weights)
    return Tensor.from_op(out, parents, bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    xb, squeeze = _batched(x.data, "max_pool2d")
    B, H, W, C = xb.shape
    if H % size or W % size:
        raise ShapeError(f"max_pool2d: {H}x{W} not divisible by {size}")
    Ho, Wo = H // size, W // size
    blocks = xb.reshape(B, Ho, size, Wo, size, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(B, Ho, Wo, C, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def bw(g):
        gb = g[None] if squeeze else g
        gblocks = np.zeros((B, Ho, Wo, C, size * size))
        np.put_along_axis(gblocks, arg[..., None], gb[..., None], axis=-1)
        gx = gblocks.reshape(B, Ho, Wo, C, size, size).transpose(0, 1, 4, 2, 5, 3)
        gx = gx.reshape(B, H, W, C)
        return (gx[0] if squeeze else gx,)

    return Tensor.from_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# serialization


def write_tensor(fp: BinaryIO, arr) -> None:
    a = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    fp.write(_MAGIC)
    fp.write(struct.pack("<II", _VERSION, a.ndim))
    fp.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fp.write(a.tobytes(order="C"))


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = fp.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    head = fp.read(8)
    if len(head) != 8:
        raise FormatError("truncated tensor header")
    version, rank = struct.unpack("<II", head)
    if version != _VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    ext = fp.read(8 * rank)
    if len(ext) != 8 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", ext)
    n = int(np.prod(shape)) if rank else 1
    payload = fp.read(8 * n)
    if len(payload) != 8 * n:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
