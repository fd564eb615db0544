"""Rank-4 tensor type and the primitive kernels every block builds on.

Layout is fixed at (batch, channels, height, width), row-major, 32-bit
floats. Kernels are pure functions: they never write through an input and
always allocate fresh outputs, so concurrent forward passes over shared
weights are safe.

Convolution and matrix multiply accumulate in 64-bit before casting back to
float32. That keeps the vectorized path and the loop-nest reference
implementation numerically aligned to well under the 1e-5 tolerance the
tests pin.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import meter
from .errors import ConfigError, ParseError, ShapeError

TNS_MAGIC = b"TNS1"


class Tensor:
    """Dense (n, C, H, W) float32 array, treated as immutable once built."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must have rank 4 (n, C, H, W), got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"every tensor dimension must be >= 1, got {tuple(arr.shape)}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor":
        return cls(np.zeros((n, c, h, w), dtype=np.float32))

    @classmethod
    def full(cls, n: int, c: int, h: int, w: int, value: float) -> "Tensor":
        return cls(np.full((n, c, h, w), value, dtype=np.float32))

    def __repr__(self) -> str:
        return f"Tensor{self.shape}"


def save_tns(t: Tensor, path) -> None:
    """Write a tensor as magic 'TNS1', four little-endian u32 dims, f32 payload."""
    with open(path, "wb") as fh:
        fh.write(TNS_MAGIC)
        fh.write(struct.pack("<4I", *t.shape))
        fh.write(t.data.astype("<f4").tobytes())


def load_tns(path) -> Tensor:
    """Read a tensor written by save_tns, validating magic and payload size."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != TNS_MAGIC:
        raise ParseError(f"{path}: not a .tns file (bad magic)")
    dims = struct.unpack("<4I", raw[4:20])
    expect = 20 + 4 * int(np.prod(dims))
    if len(raw) != expect:
        raise ParseError(
            f"{path}: payload is {len(raw) - 20} bytes, dims {dims} require {expect - 20}")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(dims)
    return Tensor(data.copy())


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self) -> None:
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                     "stride_h", "stride_w", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"conv spec field {name} must be >= 1, got {getattr(self, name)}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ConfigError(f"conv spec padding must be >= 0, got ({self.pad_h}, {self.pad_w})")
        if self.in_channels % self.groups:
            raise ConfigError(
                f"in_channels {self.in_channels} not divisible by groups {self.groups}")
        if self.out_channels % self.groups:
            raise ConfigError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Floor-mode output size; rejects configurations that produce nothing."""
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise ConfigError(
                f"conv output size ({oh}, {ow}) is empty for input ({h}, {w}), "
                f"kernel ({self.kernel_h}, {self.kernel_w}), stride "
                f"({self.stride_h}, {self.stride_w}), pad ({self.pad_h}, {self.pad_w})")
        return oh, ow

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel_h, self.kernel_w)


def _check_conv_args(x: Tensor, spec: ConvSpec, weight: Tensor,
                     bias: np.ndarray | None) -> None:
    if x.c != spec.in_channels:
        raise ShapeError(
            f"input has {x.c} channels, conv spec expects in_channels={spec.in_channels}")
    if weight.shape != spec.weight_shape():
        raise ShapeError(
            f"weight shape {weight.shape} does not match spec shape {spec.weight_shape()} "
            f"(out_channels, in_channels/groups, kernel_h, kernel_w)")
    if spec.has_bias != (bias is not None):
        raise ShapeError(
            f"spec.has_bias={spec.has_bias} but bias {'missing' if bias is None else 'given'}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"bias shape {bias.shape} must be ({spec.out_channels},) to match out_channels")


def _padded(x: Tensor, spec: ConvSpec) -> np.ndarray:
    if spec.pad_h == 0 and spec.pad_w == 0:
        return x.data
    return np.pad(x.data, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h),
                           (spec.pad_w, spec.pad_w)))


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor,
           bias: np.ndarray | None = None) -> Tensor:
    """Grouped 2-D convolution via a strided patch view and one matmul per group."""
    _check_conv_args(x, spec, weight, bias)
    n, cin = x.n, x.c
    oh, ow = spec.out_hw(x.h, x.w)
    kh, kw = spec.kernel_h, spec.kernel_w
    g = spec.groups
    cing = cin // g
    coutg = spec.out_channels // g

    xp = _padded(x, spec)
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, cin, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * spec.stride_h, sw * spec.stride_w),
        writeable=False,
    )
    wmat = weight.data.astype(np.float64).reshape(spec.out_channels, cing * kh * kw)
    out = np.empty((n, spec.out_channels, oh, ow), dtype=np.float32)
    for gi in range(g):
        cols = view[:, gi * cing:(gi + 1) * cing].astype(np.float64)
        cols = cols.reshape(n, cing * kh * kw, oh * ow)
        res = wmat[gi * coutg:(gi + 1) * coutg] @ cols
        out[:, gi * coutg:(gi + 1) * coutg] = res.reshape(n, coutg, oh, ow)
    if bias is not None:
        out += bias.astype(np.float32).reshape(1, -1, 1, 1)
    macs, flops = meter.conv_cost(n, spec.out_channels, cing, kh, kw, oh, ow,
                                  bias is not None)
    meter.record("conv2d", macs, flops)
    return Tensor(out)


def conv2d_naive(x: Tensor, spec: ConvSpec, weight: Tensor,
                 bias: np.ndarray | None = None) -> Tensor:
    """Direct loop-nest convolution, the reference the fast path is tested against.

    Deliberately unoptimized: plain Python loops, explicit zero padding,
    64-bit Python float accumulation. Multiply-accumulates are tallied as
    executed so instrumented runs report exactly what the loops did. Use
    small inputs only.
    """
    _check_conv_args(x, spec, weight, bias)
    n, cin = x.n, x.c
    oh, ow = spec.out_hw(x.h, x.w)
    kh, kw = spec.kernel_h, spec.kernel_w
    g = spec.groups
    cing = cin // g
    coutg = spec.out_channels // g

    xp = _padded(x, spec)
    wd = weight.data
    out = np.empty((n, spec.out_channels, oh, ow), dtype=np.float32)
    macs_done = 0
    for bi in range(n):
        for oc in range(spec.out_channels):
            gi = oc // coutg
            base = gi * cing
            for oy in range(oh):
                iy = oy * spec.stride_h
                for ox in range(ow):
                    ix = ox * spec.stride_w
                    acc = 0.0
                    for ic in range(cing):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += float(xp[bi, base + ic, iy + ky, ix + kx]) * \
                                    float(wd[oc, ic, ky, kx])
                    macs_done += cing * kh * kw
                    if bias is not None:
                        acc += float(bias[oc])
                    out[bi, oc, oy, ox] = acc
    flops = 2 * macs_done + (out.size if bias is not None else 0)
    meter.record("conv2d", macs_done, flops)
    return Tensor(out)


def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} operands must match, got {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    meter.record("add", 0, meter.elementwise_cost("add", a.numel))
    return Tensor(a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    meter.record("mul", 0, meter.elementwise_cost("mul", a.numel))
    return Tensor(a.data * b.data)


def relu(x: Tensor) -> Tensor:
    meter.record("relu", 0, meter.elementwise_cost("relu", x.numel))
    return Tensor(np.maximum(x.data, 0.0))


def sigmoid(x: Tensor) -> Tensor:
    meter.record("sigmoid", 0, meter.elementwise_cost("sigmoid", x.numel))
    return Tensor(_sigmoid64(x.data))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the default activation behind every conv block."""
    meter.record("silu", 0, meter.elementwise_cost("silu", x.numel))
    d64 = x.data.astype(np.float64)
    return Tensor(d64 * _sigmoid64(x.data))


def _sigmoid64(arr: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-arr.astype(np.float64)))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Integer-factor nearest-neighbor upsampling (pure data movement)."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return Tensor(data)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial sizes must agree."""
    if not parts:
        raise ShapeError("concat needs at least one input")
    first = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if (p.n, p.h, p.w) != (first.n, first.h, first.w):
            raise ShapeError(
                f"concat input {i} has (n, H, W) = {(p.n, p.h, p.w)}, "
                f"expected {(first.n, first.h, first.w)}")
    return Tensor(np.concatenate([p.data for p in parts], axis=1))


def maxpool2d(x: Tensor, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Max pooling with -inf padding so borders never dilute the maximum."""
    if kernel < 1 or stride < 1 or pad < 0:
        raise ConfigError(f"bad pool arguments kernel={kernel} stride={stride} pad={pad}")
    oh = (x.h + 2 * pad - kernel) // stride + 1
    ow = (x.w + 2 * pad - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"pool output size ({oh}, {ow}) is empty for input ({x.h}, {x.w})")
    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=-np.inf)
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(x.n, x.c, oh, ow, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    out = view.max(axis=(4, 5))
    meter.record("maxpool", 0, meter.maxpool_cost(out.size, kernel, kernel))
    return Tensor(out)


def permute(x: Tensor, order: tuple[int, int, int, int]) -> Tensor:
    """Reorder axes; a pure relabeling, made contiguous on the way out."""
    if sorted(order) != [0, 1, 2, 3]:
        raise ConfigError(f"permute order must rearrange (0, 1, 2, 3), got {order}")
    return Tensor(np.ascontiguousarray(np.transpose(x.data, order)))


def linear(mat: np.ndarray, weight: np.ndarray,
           bias: np.ndarray | None = None) -> np.ndarray:
    """rows x in_features against (out_features, in_features), f64 accumulation."""
    if mat.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {mat.shape} and {weight.shape}")
    if mat.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear in_features mismatch: input {mat.shape[1]} vs weight {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} must be ({weight.shape[0]},)")
    out = mat.astype(np.float64) @ weight.astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    macs, flops = meter.linear_cost(mat.shape[0], mat.shape[1], weight.shape[0],
                                    bias is not None)
    meter.record("linear", macs, flops)
    return out.astype(np.float32)
