"""Dense rank-4 tensors (batch, channel, height, width) and the numeric
kernels shared by the whole engine: convolution, its adjoint, pooling,
and the guarded elementwise operations the backward rules are built from.

All values are 32-bit floats in row-major, batch-outermost order. Tensors
are immutable; every operation returns a fresh tensor and never touches
its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Magnitude floor applied to any denominator, preserving its sign.
EPS_DEFAULT = 1e-6


class ShapeMismatchError(ValueError):
    """An operand's extents do not fit the operation's geometry."""


@dataclass(frozen=True)
class Tensor:
    """Immutable rank-4 float32 array, shape (batch, channel, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeMismatchError(
                f"tensor must have rank 4, got rank {arr.ndim}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @staticmethod
    def zeros(shape: tuple[int, int, int, int]) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float32))

    @staticmethod
    def full(shape: tuple[int, int, int, int], value: float) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=np.float32))


@dataclass(frozen=True)
class ConvGeometry:
    """Window geometry of one convolution: channels, kernel, stride, padding."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatchError(
                f"channel extents must be positive, got in={self.in_channels} "
                f"out={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ShapeMismatchError(
                f"kernel {self.kernel} and stride {self.stride} must be positive"
            )
        if min(self.padding) < 0:
            raise ShapeMismatchError(f"padding {self.padding} must be non-negative")

    def out_hw(self, in_hw: tuple[int, int]) -> tuple[int, int]:
        """Output spatial extents: floor((in + 2p - K) / s) + 1, each > 0."""
        out = []
        for axis, (n, k, s, p) in enumerate(
            zip(in_hw, self.kernel, self.stride, self.padding)
        ):
            e = (n + 2 * p - k) // s + 1
            if e < 1:
                raise ShapeMismatchError(
                    f"conv output extent {e} on axis {axis} "
                    f"(input {n}, kernel {k}, stride {s}, padding {p})"
                )
            out.append(e)
        return out[0], out[1]

    def min_in_hw(self, out_hw: tuple[int, int]) -> tuple[int, int]:
        """Smallest input extents producing the given output extents."""
        return tuple(
            (o - 1) * s + k - 2 * p
            for o, k, s, p in zip(out_hw, self.kernel, self.stride, self.padding)
        )

    def collapsed(self) -> "ConvGeometry":
        """Same window geometry with both channel extents collapsed to one."""
        return ConvGeometry(1, 1, self.kernel, self.stride, self.padding)


def _pad_hw(arr: np.ndarray, padding: tuple[int, int], value: float = 0.0) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(arr: np.ndarray, kernel, stride) -> np.ndarray:
    """Strided view (b, c, ho, wo, kh, kw) over a padded array."""
    view = np.lib.stride_tricks.sliding_window_view(arr, kernel, axis=(2, 3))
    return view[:, :, :: stride[0], :: stride[1], :, :]


def conv2d(
    x: Tensor,
    weights: Tensor,
    bias: np.ndarray | None,
    geom: ConvGeometry,
) -> Tensor:
    """Zero-padded 2-D convolution, weights shaped (out, in, kh, kw)."""
    n, m = geom.out_channels, geom.in_channels
    if weights.shape != (n, m, *geom.kernel):
        raise ShapeMismatchError(
            f"weights shape {weights.shape} != expected {(n, m, *geom.kernel)}"
        )
    if x.channels != m:
        raise ShapeMismatchError(
            f"input channel extent {x.channels} != conv in_channels {m}"
        )
    ho, wo = geom.out_hw(x.spatial)
    win = _windows(_pad_hw(x.data, geom.padding), geom.kernel, geom.stride)
    # (b, ho, wo, n) <- (b, m, ho, wo, kh, kw) x (n, m, kh, kw)
    out = np.tensordot(win, weights.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        b = np.asarray(bias, dtype=np.float32).reshape(-1)
        if b.shape[0] != n:
            raise ShapeMismatchError(
                f"bias extent {b.shape[0]} != out_channels {n}"
            )
        out = out + b[None, :, None, None]
    assert out.shape[2:] == (ho, wo)
    return Tensor(out)


def conv2d_transposed(
    x: Tensor,
    kernel: Tensor,
    geom: ConvGeometry,
    output_hw: tuple[int, int] | None = None,
) -> Tensor:
    """Adjoint of conv2d: scatters each output cell back over its window.

    `x` has the forward pass's output extents; the result has the forward
    input extents (`output_hw`, defaulting to the smallest consistent size).
    Satisfies <conv2d(v), x> == <v, conv2d_transposed(x)>.
    """
    n, m = geom.out_channels, geom.in_channels
    if kernel.shape != (n, m, *geom.kernel):
        raise ShapeMismatchError(
            f"kernel shape {kernel.shape} != expected {(n, m, *geom.kernel)}"
        )
    if x.channels != n:
        raise ShapeMismatchError(
            f"input channel extent {x.channels} != conv out_channels {n}"
        )
    hw = output_hw if output_hw is not None else geom.min_in_hw(x.spatial)
    if geom.out_hw(hw) != x.spatial:
        raise ShapeMismatchError(
            f"no forward pass from input {hw} reaches output {x.spatial} "
            f"under geometry {geom}"
        )
    b = x.shape[0]
    ho, wo = x.spatial
    kh, kw = geom.kernel
    sh, sw = geom.stride
    ph, pw = geom.padding
    # (b, ho, wo, m, kh, kw) <- (b, n, ho, wo) x (n, m, kh, kw)
    t = np.tensordot(x.data, kernel.data, axes=([1], [0]))
    padded = np.zeros((b, m, hw[0] + 2 * ph, hw[1] + 2 * pw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += (
                t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    out = padded[:, :, ph : ph + hw[0], pw : pw + hw[1]]
    return Tensor(out)


def _binary_operands(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    # Identical shapes, or a single-channel operand broadcast over channels.
    if a.shape == b.shape:
        return a.data, b.data
    sa, sb = a.shape, b.shape
    if (sa[0], sa[2], sa[3]) == (sb[0], sb[2], sb[3]) and 1 in (sa[1], sb[1]):
        return a.data, b.data
    raise ShapeMismatchError(f"operand shapes {sa} and {sb} do not match")


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = _binary_operands(a, b)
    return Tensor(x * y)


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    x, y = _binary_operands(a, b)
    return Tensor(x + y)


def guard_denominator(b: np.ndarray, eps: float = EPS_DEFAULT) -> np.ndarray:
    """b with its magnitude floored at eps, sign preserved (zero counts as +).

    Cells with |b| >= eps pass through untouched, so ratio rules reduce
    exactly to pass-through in their identity regimes.
    """
    guarded = np.where(b >= 0, np.maximum(b, eps), np.minimum(b, -eps))
    return guarded.astype(b.dtype, copy=False)


def div_with_eps(a: Tensor, b: Tensor, eps: float = EPS_DEFAULT) -> Tensor:
    """a / b with the denominator's magnitude floored away from zero."""
    x, y = _binary_operands(a, b)
    return Tensor(x / guard_denominator(y, eps))


def guard_hits(b: Tensor | np.ndarray, eps: float = EPS_DEFAULT) -> int:
    """Number of denominator cells where the eps guard dominates."""
    arr = b.data if isinstance(b, Tensor) else b
    return int(np.count_nonzero(np.abs(arr) < eps))


def sign_mask(a: Tensor) -> Tensor:
    """Elementwise sign: -1, 0, or +1."""
    return Tensor(np.sign(a.data))


def channel_sum(a: Tensor) -> Tensor:
    """Sum over the channel axis, keeping a single-channel tensor."""
    return Tensor(a.data.sum(axis=1, keepdims=True))


def tensor_abs(a: Tensor) -> Tensor:
    return Tensor(np.abs(a.data))


# ---------------------------------------------------------------------------
# Pooling. Max pooling pads with -inf so padded cells never win; average
# pooling pads with zero and divides by the full window size.
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel, stride, padding=(0, 0)) -> Tensor:
    geom = ConvGeometry(x.channels, x.channels, tuple(kernel), tuple(stride), tuple(padding))
    geom.out_hw(x.spatial)
    win = _windows(_pad_hw(x.data, geom.padding, -np.inf), geom.kernel, geom.stride)
    return Tensor(win.max(axis=(4, 5)))


def maxpool2d_backward(x_in: Tensor, g_out: Tensor, kernel, stride, padding=(0, 0)) -> Tensor:
    """Routes each output gradient to its window argmax.

    Ties break to the first cell in row-major window order.
    """
    geom = ConvGeometry(x_in.channels, x_in.channels, tuple(kernel), tuple(stride), tuple(padding))
    b, c = x_in.shape[0], x_in.channels
    ho, wo = geom.out_hw(x_in.spatial)
    if g_out.shape != (b, c, ho, wo):
        raise ShapeMismatchError(
            f"gradient shape {g_out.shape} != pooled shape {(b, c, ho, wo)}"
        )
    kh, kw = geom.kernel
    ph, pw = geom.padding
    win = _windows(_pad_hw(x_in.data, geom.padding, -np.inf), geom.kernel, geom.stride)
    flat = win.reshape(b, c, ho, wo, kh * kw)
    idx = flat.argmax(axis=4)  # first max in row-major window order
    hs = np.arange(ho)[None, None, :, None] * geom.stride[0] + idx // kw
    ws = np.arange(wo)[None, None, None, :] * geom.stride[1] + idx % kw
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    padded = np.zeros((b, c, x_in.shape[2] + 2 * ph, x_in.shape[3] + 2 * pw), dtype=np.float32)
    np.add.at(padded, (bi, ci, hs, ws), g_out.data)
    return Tensor(padded[:, :, ph : ph + x_in.shape[2], pw : pw + x_in.shape[3]])


def avgpool2d(x: Tensor, kernel, stride, padding=(0, 0)) -> Tensor:
    geom = ConvGeometry(x.channels, x.channels, tuple(kernel), tuple(stride), tuple(padding))
    geom.out_hw(x.spatial)
    win = _windows(_pad_hw(x.data, geom.padding), geom.kernel, geom.stride)
    return Tensor(win.mean(axis=(4, 5)))


def avgpool2d_scatter(z: Tensor, in_hw, kernel, stride, padding=(0, 0)) -> Tensor:
    """Adjoint of avgpool2d: each cell receives sum of covering z / window size."""
    geom = ConvGeometry(z.channels, z.channels, tuple(kernel), tuple(stride), tuple(padding))
    if geom.out_hw(in_hw) != z.spatial:
        raise ShapeMismatchError(
            f"no pooling from input {tuple(in_hw)} reaches output {z.spatial}"
        )
    kh, kw = geom.kernel
    ones = Tensor(np.ones((1, 1, kh, kw), dtype=np.float32))
    per_channel = []
    for c in range(z.channels):
        sl = Tensor(z.data[:, c : c + 1] / float(kh * kw))
        per_channel.append(
            conv2d_transposed(sl, ones, geom.collapsed(), output_hw=tuple(in_hw)).data
        )
    return Tensor(np.concatenate(per_channel, axis=1))


def _adaptive_bounds(n: int, out: int) -> list[tuple[int, int]]:
    # Even partitioning: [floor(i*n/out), ceil((i+1)*n/out))
    return [(i * n // out, -((i + 1) * n // -out)) for i in range(out)]


def adaptive_avgpool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    oh, ow = out_hw
    if oh < 1 or ow < 1 or oh > x.shape[2] or ow > x.shape[3]:
        raise ShapeMismatchError(
            f"adaptive pool target {out_hw} invalid for input {x.spatial}"
        )
    rows = _adaptive_bounds(x.shape[2], oh)
    cols = _adaptive_bounds(x.shape[3], ow)
    out = np.empty((x.shape[0], x.channels, oh, ow), dtype=np.float32)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return Tensor(out)


def adaptive_avgpool2d_scatter(z: Tensor, in_hw: tuple[int, int]) -> Tensor:
    rows = _adaptive_bounds(in_hw[0], z.shape[2])
    cols = _adaptive_bounds(in_hw[1], z.shape[3])
    out = np.zeros((z.shape[0], z.channels, in_hw[0], in_hw[1]), dtype=np.float32)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            area = (r1 - r0) * (c1 - c0)
            out[:, :, r0:r1, c0:c1] += z.data[:, :, i : i + 1, j : j + 1] / area
    return Tensor(out)


def global_avgpool(x: Tensor) -> Tensor:
    return Tensor(x.data.mean(axis=(2, 3), keepdims=True))


def global_avgpool_scatter(z: Tensor, in_hw: tuple[int, int]) -> Tensor:
    h, w = in_hw
    return Tensor(np.broadcast_to(z.data / (h * w), (z.shape[0], z.channels, h, w)))
