"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Only the primitives the saliency network needs are provided. Every tensor is
either rank 4 ``[N, C, H, W]`` or a rank-0 scalar (losses). Operations record
themselves on the innermost active :class:`Tape`; :func:`backward` replays the
tape in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_EPS = 1e-12

_TAPES: list["Tape"] = []
_CORRUPTED: set[str] = set()


class ShapeError(ValueError):
    """Raised when operands violate a primitive's shape contract."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (e.g. a second backward pass)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim not in (0, 4):
            raise ShapeError(f"tensor must be rank 4 [N,C,H,W] or a scalar, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A learnable tensor with a persistent gradient and a momentum buffer."""

    __slots__ = ("momentum", "learnable")

    def __init__(self, data, name: str = "", learnable: bool = True, dtype=None):
        super().__init__(data, requires_grad=learnable, name=name, dtype=dtype)
        self.learnable = learnable
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.data.astype(dtype), name=self.name, learnable=self.learnable)
        p.momentum = self.momentum.astype(dtype)
        return p


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed primitives.

    Use as a context manager; primitives executed inside the block whose
    inputs require gradients are appended to ``records``. ``patterns`` keeps
    the piecewise-linear activation patterns (relu signs, pool argmax) seen
    during the forward pass so gradient checks can detect kink crossings.
    """

    records: list[_Record] = field(default_factory=list)
    patterns: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def corrupt_backward(op: str) -> Iterator[None]:
    """Test hook: perturb the backward rule of primitive ``op`` while active."""
    _CORRUPTED.add(op)
    try:
        yield
    finally:
        _CORRUPTED.discard(op)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _note_pattern(mask: np.ndarray) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.patterns.append(mask)


def _check_rank4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 [N,C,H,W], got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (numpy level)


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Patches of padded ``xp`` [N,C,Hp,Wp] laid out as [N, C, kh, kw, Ho, Wo] (contiguous)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    if kh % s == 0 and kw % s == 0 and s > 1:
        qh, qw = kh // s, kw // s
        yh, yw = ho - 1 + qh, wo - 1 + qw
        v = xp[:, :, : yh * s, : yw * s].reshape(n, c, yh, s, yw, s)
        if s * s <= ho * wo:
            # phase-major copy: v[n, c, r, t, y, x] = xp[n, c, y*s + r, x*s + t]
            v = np.ascontiguousarray(v.transpose(0, 1, 3, 5, 2, 4))
        else:
            v = v.transpose(0, 1, 3, 5, 2, 4)
        blocks = cols.reshape(n, c, qh, s, qw, s, ho, wo)
        for a in range(qh):
            for b in range(qw):
                blocks[:, :, a, :, b] = v[:, :, :, :, a : a + ho, b : b + wo]
        return cols
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return cols


def _col2im(cols: np.ndarray, out_shape: tuple[int, int, int, int], s: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: sum [N, C, kh, kw, Ho, Wo] patches into an [N,C,Hp,Wp] image."""
    n, c, kh, kw, ho, wo = cols.shape
    _, _, hp, wp = out_shape
    if kh % s == 0 and kw % s == 0 and s > 1:
        qh, qw = kh // s, kw // s
        yh, yw = ho - 1 + qh, wo - 1 + qw
        blocks = cols.reshape(n, c, qh, s, qw, s, ho, wo)
        if s * s > ho * wo:
            # large stride, tiny map: accumulate directly in image layout
            out = np.zeros((n, c, yh, s, yw, s), dtype=cols.dtype)
            for a in range(qh):
                for b in range(qw):
                    out[:, :, a : a + ho, :, b : b + wo] += blocks[:, :, a, :, b].transpose(0, 1, 4, 2, 5, 3)
            return out.reshape(n, c, yh * s, yw * s)
        acc = np.zeros((n, c, s, s, yh, yw), dtype=cols.dtype)
        for a in range(qh):
            for b in range(qw):
                acc[:, :, :, :, a : a + ho, b : b + wo] += blocks[:, :, a, :, b]
        return acc.transpose(0, 1, 4, 2, 5, 3).reshape(n, c, yh * s, yw * s)
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, i, j]
    return out


def _pixel_major(kh: int, kw: int, s: int, ho: int, wo: int) -> bool:
    """Use pixel-major patches when the stride tiles the kernel and dwarfs the map."""
    return s > 1 and kh % s == 0 and kw % s == 0 and s * s >= ho * wo


def _im2col_pm(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Pixel-major patches [N, Ho, Wo, C, kh, kw]; requires ``s`` to divide the kernel."""
    n, c = xp.shape[:2]
    qh, qw = kh // s, kw // s
    yh, yw = ho - 1 + qh, wo - 1 + qw
    v = xp[:, :, : yh * s, : yw * s].reshape(n, c, yh, s, yw, s)
    cols = np.empty((n, ho, wo, c, qh, s, qw, s), dtype=xp.dtype)
    for a in range(qh):
        for b in range(qw):
            cols[:, :, :, :, a, :, b, :] = v[:, :, a : a + ho, :, b : b + wo, :].transpose(0, 2, 4, 1, 3, 5)
    return cols.reshape(n, ho, wo, c, kh, kw)


def _col2im_pm(cols: np.ndarray, out_shape: tuple[int, int, int, int], s: int) -> np.ndarray:
    """Adjoint of :func:`_im2col_pm`."""
    n, ho, wo, c, kh, kw = cols.shape
    qh, qw = kh // s, kw // s
    yh, yw = ho - 1 + qh, wo - 1 + qw
    blocks = cols.reshape(n, ho, wo, c, qh, s, qw, s)
    out = np.zeros((n, c, yh, s, yw, s), dtype=cols.dtype)
    for a in range(qh):
        for b in range(qw):
            out[:, :, a : a + ho, :, b : b + wo, :] += blocks[:, :, :, :, a, :, b, :].transpose(0, 3, 1, 4, 2, 5)
    return out.reshape(n, c, yh * s, yw * s)


def _batched_outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ b[n].T for a [N, P, K], b [N, Q, K]."""
    return np.matmul(a, b.transpose(0, 2, 1)).sum(axis=0)


def _conv_extent(size: int, k: int, stride: int, pad: int, dim: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: {dim} extent {size} with kernel {k}, stride {stride}, pad {pad} "
            f"does not give an integral positive output extent"
        )
    return span // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _crop(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def _maybe_corrupt(op: str, grads):
    if op not in _CORRUPTED:
        return grads
    return [None if g is None else g * 1.5 + 0.01 for g in grads]


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw]."""
    _check_rank4(x, "conv2d input")
    _check_rank4(weight, "conv2d weight")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight input channels {wcin}")
    if bias is not None and bias.data.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias must have shape (1,{cout},1,1), got {bias.shape}")
    ho = _conv_extent(h, kh, stride, pad, "height")
    wo = _conv_extent(w, kw, stride, pad, "width")
    wd = weight.data

    w2 = wd.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    if _pixel_major(kh, kw, stride, ho, wo):
        return _conv2d_pm(x, weight, bias, stride, pad, ho, wo)
    if pointwise:
        cols = x.data.reshape(n, cin, h * w)
    else:
        cols = _im2col(_pad(x.data, pad), kh, kw, stride, ho, wo).reshape(n, cin * kh * kw, ho * wo)
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        g3 = g.reshape(n, cout, ho * wo)
        gw = _batched_outer_sum(g3, cols).reshape(wd.shape)
        dcols = np.matmul(w2.T, g3)
        if pointwise:
            gx = dcols.reshape(n, cin, h, w)
        else:
            dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
            gx = np.ascontiguousarray(_crop(_col2im(dcols, (n, cin, h + 2 * pad, w + 2 * pad), stride), pad))
        return _maybe_corrupt("conv2d", [gx, gw, gb])

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is laid out [Cin, Cout, kh, kw].

    Output extent is ``(H-1)*stride - 2*pad + kh``. With zero bias this is the
    adjoint of :func:`conv2d` using the same weight array.
    """
    _check_rank4(x, "transposed_conv2d input")
    _check_rank4(weight, "transposed_conv2d weight")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"transposed_conv2d: input channels {cin} != weight input channels {wcin}")
    if bias is not None and bias.data.shape != (1, cout, 1, 1):
        raise ShapeError(f"transposed_conv2d: bias must have shape (1,{cout},1,1), got {bias.shape}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (w - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transposed_conv2d: computed output extent ({ho}, {wo}) is not positive")
    wd = weight.data

    w2 = wd.reshape(cin, cout * kh * kw)
    x3 = x.data.reshape(n, cin, h * w)
    if _pixel_major(kh, kw, stride, h, w):
        return _transposed_conv2d_pm(x, weight, bias, stride, pad, ho, wo)
    cols = np.matmul(w2.T, x3).reshape(n, cout, kh, kw, h, w)
    out = np.ascontiguousarray(_crop(_col2im(cols, (n, cout, ho + 2 * pad, wo + 2 * pad), stride), pad))
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        patches = _im2col(_pad(g, pad), kh, kw, stride, h, w).reshape(n, cout * kh * kw, h * w)
        gx = np.matmul(w2, patches).reshape(n, cin, h, w)
        gw = _batched_outer_sum(x3, patches).reshape(wd.shape)
        return _maybe_corrupt("transposed_conv2d", [gx, gw, gb])

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("transposed_conv2d", inputs, out, backward)


def _conv2d_pm(x, weight, bias, stride, pad, ho, wo) -> Tensor:
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    w2 = weight.data.reshape(cout, cin * kh * kw)
    patches = _im2col_pm(_pad(x.data, pad), kh, kw, stride, ho, wo).reshape(n * ho * wo, cin * kh * kw)
    out = np.ascontiguousarray((patches @ w2.T).reshape(n, ho * wo, cout).transpose(0, 2, 1)).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        g2 = g.reshape(n, cout, ho * wo).transpose(0, 2, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ patches).reshape(weight.shape)
        dp = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
        gx = np.ascontiguousarray(_crop(_col2im_pm(dp, (n, cin, h + 2 * pad, w + 2 * pad), stride), pad))
        return _maybe_corrupt("conv2d", [gx, gw, gb])

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, backward)


def _transposed_conv2d_pm(x, weight, bias, stride, pad, ho, wo) -> Tensor:
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    w2 = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * w).transpose(0, 2, 1).reshape(n * h * w, cin)
    cols = (x2 @ w2).reshape(n, h, w, cout, kh, kw)
    out = np.ascontiguousarray(_crop(_col2im_pm(cols, (n, cout, ho + 2 * pad, wo + 2 * pad), stride), pad))
    if bias is not None:
        out += bias.data

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        patches = _im2col_pm(_pad(g, pad), kh, kw, stride, h, w).reshape(n * h * w, cout * kh * kw)
        gx = np.ascontiguousarray((patches @ w2.T).reshape(n, h * w, cin).transpose(0, 2, 1)).reshape(n, cin, h, w)
        gw = (x2.T @ patches).reshape(weight.shape)
        return _maybe_corrupt("transposed_conv2d", [gx, gw, gb])

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("transposed_conv2d", inputs, out, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first element."""
    _check_rank4(x, "maxpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extent ({h}, {w}) must be even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    _note_pattern(idx)

    def backward(g: np.ndarray):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return _maybe_corrupt("maxpool2", [gx])

    return _record("maxpool2", (x,), np.ascontiguousarray(out), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_pattern(mask)

    def backward(g: np.ndarray):
        return _maybe_corrupt("relu", [g * mask])

    return _record("relu", (x,), x.data * mask, backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    for t in inputs:
        _check_rank4(t, "concat_channels input")
    n, _, h, w = inputs[0].shape
    for i, t in enumerate(inputs):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: input {i} has (N,H,W)={(t.shape[0], t.shape[2], t.shape[3])}, "
                f"expected {(n, h, w)}"
            )
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([t.shape[1] for t in inputs])[:-1]
    out = np.concatenate([t.data for t in inputs], axis=1)

    def backward(g: np.ndarray):
        return _maybe_corrupt("concat_channels", np.split(g, bounds, axis=1))

    return _record("concat_channels", tuple(inputs), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return _maybe_corrupt("add", [g, g])

    return _record("add", (a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return [g * b.data, g * a.data]

    return _record("mul", (a, b), a.data * b.data, backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g: np.ndarray):
        return [np.broadcast_to(g, shape).astype(x.data.dtype)]

    return _record("sum_all", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), backward)


def weighted_sum(scalars: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum of rank-0 tensors (used for the joint loss)."""
    if len(scalars) != len(weights):
        raise ShapeError(f"weighted_sum: {len(scalars)} terms but {len(weights)} weights")
    dtype = scalars[0].data.dtype
    total = np.asarray(sum(float(w) * s.data for s, w in zip(scalars, weights)), dtype=dtype)

    def backward(g: np.ndarray):
        return [np.asarray(g * w, dtype=dtype) for w in weights]

    return _record("weighted_sum", tuple(scalars), total, backward)


def softmax_pair(scores: Tensor) -> Tensor:
    """Two-class softmax over channels (0 = background, 1 = foreground)."""
    _check_rank4(scores, "softmax_pair input")
    if scores.shape[1] != 2:
        raise ShapeError(f"softmax_pair: channel count must be 2, got {scores.shape[1]}")
    z = scores.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        d = (g[:, 1:2] - g[:, 0:1]) * p[:, 1:2] * p[:, 0:1]
        return _maybe_corrupt("softmax_pair", [np.concatenate([-d, d], axis=1)])

    return _record("softmax_pair", (scores,), p, backward)


def _check_binary(gt: np.ndarray) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (values in {0, 1})")


def balance_weights(gt: np.ndarray, flip: bool = False) -> np.ndarray:
    """Per-image foreground fraction, shape [N]. ``flip`` returns 1 - fraction."""
    beta = gt.reshape(gt.shape[0], -1).mean(axis=1)
    return 1.0 - beta if flip else beta


def balanced_bce_loss(probs: Tensor, gt, eps: float = LOG_EPS, flip_beta: bool = False) -> Tensor:
    """Class-balanced cross entropy summed over pixels and images.

    ``beta`` is the per-image foreground fraction; the foreground term is
    weighted by ``beta`` and the background term by ``1 - beta``. With
    ``flip_beta`` the weights are swapped.
    """
    _check_rank4(probs, "balanced_bce_loss probs")
    y = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    n, c, h, w = probs.shape
    if c != 2:
        raise ShapeError(f"balanced_bce_loss: probs must have 2 channels, got {c}")
    if y.shape != (n, 1, h, w):
        raise ShapeError(f"balanced_bce_loss: gt shape {y.shape} != {(n, 1, h, w)}")
    _check_binary(y)
    dtype = probs.data.dtype
    y = y.astype(dtype)
    beta = balance_weights(y, flip_beta).astype(dtype).reshape(n, 1, 1, 1)
    p0 = probs.data[:, 0:1]
    p1 = probs.data[:, 1:2]
    c0 = np.maximum(p0, eps)
    c1 = np.maximum(p1, eps)
    fg_w = beta * y
    bg_w = (1 - beta) * (1 - y)
    loss = -(fg_w * np.log(c1)).sum() - (bg_w * np.log(c0)).sum()

    def backward(g: np.ndarray):
        d1 = np.where(p1 > eps, -fg_w / c1, 0.0)
        d0 = np.where(p0 > eps, -bg_w / c0, 0.0)
        gp = (g * np.concatenate([d0, d1], axis=1)).astype(dtype)
        return _maybe_corrupt("balanced_bce_loss", [gp])

    return _record("balanced_bce_loss", (probs,), np.asarray(loss, dtype=dtype), backward)


# ---------------------------------------------------------------------------
# differentiation and optimization


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if tape.consumed:
        raise TapeError("backward already ran on this tape; re-run the forward pass first")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not any(r.output is loss for r in tape.records):
        raise TapeError("backward: loss was not produced by an operation recorded on this tape")
    tape.consumed = True

    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        if t.grad is None:
            t.grad = np.array(g)
        else:
            t.grad += g


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float, weight_decay: float) -> None:
    """Momentum SGD with L2 weight decay, then zero the gradients.

    ``v <- momentum * v + grad + weight_decay * value``; ``value <- value - lr * v``.
    """
    for p in params:
        if not p.learnable:
            continue
        dt = p.data.dtype
        p.momentum *= dt.type(momentum)
        p.momentum += p.grad
        if weight_decay:
            p.momentum += dt.type(weight_decay) * p.data
        p.data -= dt.type(lr) * p.momentum
        p.zero_grad()


@dataclass
class GradcheckReport:
    max_rel_error: list[float]
    checked: list[int]
    excluded: list[int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    indices: Sequence[Sequence[int] | None] | None = None,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Inputs are promoted to float64. Coordinates whose perturbation flips any
    relu sign or pooling argmax are excluded (the function is not
    differentiable across the kink). ``indices`` optionally restricts the
    flat coordinates checked per input. Failures are reported, not raised.
    """
    xs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = f(*xs)
    backward(out, tape)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    def evaluate():
        with Tape() as t:
            val = float(f(*xs).data)
        return val, t.patterns

    errors, checked, excluded = [], [], []
    for i, x in enumerate(xs):
        flat = x.data.reshape(-1)
        coords = range(flat.size) if indices is None or indices[i] is None else indices[i]
        worst, n_ok, n_skip = 0.0, 0, 0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + epsilon
            fp, pat_p = evaluate()
            flat[j] = orig - epsilon
            fm, pat_m = evaluate()
            flat[j] = orig
            if len(pat_p) != len(pat_m) or any(not np.array_equal(a, b) for a, b in zip(pat_p, pat_m)):
                n_skip += 1
                continue
            numeric = (fp - fm) / (2 * epsilon)
            worst = max(worst, relative_error(float(analytic[i].reshape(-1)[j]), numeric))
            n_ok += 1
        errors.append(worst)
        checked.append(n_ok)
        excluded.append(n_skip)
    return GradcheckReport(errors, checked, excluded, tolerance)
