"""Network building blocks: conv bricks, C3 family, ghost and cross variants,
global attention, pooling tail, and the detection head stub.

A block is built in two phases. Construction wires the structure from config
arguments alone, which is enough for shape inference, parameter manifests,
and symbolic cost counting. `load` then binds actual weights (folding the
norm affine into the convolution) so `forward` can run. Blocks never mutate
their inputs and hold no state beyond weights, so forwards are pure.

Normalization is represented as a folded per-channel affine: a `norm.scale`
multiplied into the conv weight at load time and a `norm.shift` applied as
the conv bias. A fresh model uses scale 1, shift 0, which is an identity
affine over the raw convolution.
"""
from __future__ import annotations

import numpy as np

from . import meter
from .errors import ConfigError, ShapeError, WeightError
from .tensor import (ConvSpec, Tensor, add, concat_channels, conv2d, linear,
                     maxpool2d, mul, permute, relu, sigmoid, silu,
                     upsample_nearest)

Shape = tuple[int, int, int, int]


def _pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, int) for x in v):
        return (int(v[0]), int(v[1]))
    raise ConfigError(f"argument {name} must be an int or a pair of ints, got {v!r}")


class _ArgReader:
    """Pulls typed values out of a config args dict, rejecting leftovers."""

    def __init__(self, kind: str, args: dict):
        self.kind = kind
        self.args = dict(args)

    def take(self, name: str, default=None, required: bool = False):
        if name in self.args:
            return self.args.pop(name)
        if required:
            raise ConfigError(f"{self.kind}: missing required argument '{name}'")
        return default

    def finish(self) -> None:
        if self.args:
            raise ConfigError(
                f"{self.kind}: unknown argument(s) {sorted(self.args)}")


class _Unit:
    """One convolution plus folded norm affine (or plain bias) plus activation."""

    def __init__(self, cin: int, cout: int, k=1, s=1, p=None, g: int = 1,
                 act: str | None = "silu", norm: bool = True):
        kh, kw = _pair(k, "kernel")
        sh, sw = _pair(s, "stride")
        if p is None:
            ph, pw = kh // 2, kw // 2
        else:
            ph, pw = _pair(p, "padding")
        if act not in (None, "silu", "relu"):
            raise ConfigError(f"unsupported activation {act!r}")
        self.act = act
        self.norm = norm
        self.spec = ConvSpec(cin, cout, kh, kw, sh, sw, ph, pw, groups=g,
                             has_bias=True)
        self.weight: Tensor | None = None
        self.bias: np.ndarray | None = None

    @property
    def cout(self) -> int:
        return self.spec.out_channels

    def param_specs(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        specs = [(f"{prefix}.conv.weight", self.spec.weight_shape())]
        if self.norm:
            specs.append((f"{prefix}.norm.scale", (self.cout,)))
            specs.append((f"{prefix}.norm.shift", (self.cout,)))
        else:
            specs.append((f"{prefix}.conv.bias", (self.cout,)))
        return specs

    def load(self, getw, prefix: str) -> None:
        w = np.asarray(getw(f"{prefix}.conv.weight"), dtype=np.float32)
        if self.norm:
            scale = np.asarray(getw(f"{prefix}.norm.scale"), dtype=np.float32)
            self.weight = Tensor(w * scale.reshape(-1, 1, 1, 1))
            self.bias = np.asarray(getw(f"{prefix}.norm.shift"), dtype=np.float32)
        else:
            self.weight = Tensor(w)
            self.bias = np.asarray(getw(f"{prefix}.conv.bias"), dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        if self.weight is None:
            raise WeightError("unit used before weights were loaded")
        y = conv2d(x, self.spec, self.weight, self.bias)
        if self.act == "silu":
            return silu(y)
        if self.act == "relu":
            return relu(y)
        return y

    def out_shape(self, shp: Shape) -> Shape:
        n, c, h, w = shp
        if c != self.spec.in_channels:
            raise ShapeError(
                f"unit expects {self.spec.in_channels} input channels, got {c}")
        oh, ow = self.spec.out_hw(h, w)
        return (n, self.cout, oh, ow)

    def cost(self, shp: Shape) -> tuple[int, int]:
        n, c, h, w = shp
        oh, ow = self.spec.out_hw(h, w)
        macs, flops = meter.conv_cost(
            n, self.cout, self.spec.in_channels // self.spec.groups,
            self.spec.kernel_h, self.spec.kernel_w, oh, ow, bias=True)
        if self.act is not None:
            flops += meter.elementwise_cost(self.act, n * self.cout * oh * ow)
        return macs, flops


class Block:
    """Interface shared by every layer kind."""

    KIND = ""
    MULTI_INPUT = False

    def __init__(self, in_channels: list[int], args: dict):
        raise NotImplementedError

    @property
    def out_channels(self) -> int:
        raise NotImplementedError

    def param_specs(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def load(self, getw, prefix: str) -> None:
        pass

    def forward(self, xs: list[Tensor]) -> Tensor:
        raise NotImplementedError

    def out_shape(self, shapes: list[Shape]) -> Shape:
        raise NotImplementedError

    def cost(self, shapes: list[Shape]) -> tuple[int, int]:
        """(macs, flops) for one forward at the given input shapes."""
        return (0, 0)

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_specs(""))


def _single(in_channels: list[int], kind: str) -> int:
    if len(in_channels) != 1:
        raise ConfigError(f"{kind} takes exactly one input, got {len(in_channels)}")
    return in_channels[0]


class ConvBNAct(Block):
    """Standard convolution brick: conv, folded norm, SiLU by default."""

    KIND = "ConvBNAct"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        k = rd.take("k", 1)
        s = rd.take("s", 1)
        p = rd.take("p", None)
        g = rd.take("g", 1)
        act = rd.take("act", "silu")
        rd.finish()
        self.unit = _Unit(cin, cout, k, s, p, g, act=act)

    @property
    def out_channels(self) -> int:
        return self.unit.cout

    def param_specs(self, prefix):
        return self.unit.param_specs(prefix)

    def load(self, getw, prefix):
        self.unit.load(getw, prefix)

    def forward(self, xs):
        return self.unit.forward(xs[0])

    def out_shape(self, shapes):
        return self.unit.out_shape(shapes[0])

    def cost(self, shapes):
        return self.unit.cost(shapes[0])


class Bottleneck(Block):
    """1x1 reduce then 3x3, with an additive shortcut when shapes allow."""

    KIND = "Bottleneck"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        shortcut = rd.take("shortcut", True)
        e = rd.take("e", 1.0)
        rd.finish()
        hidden = int(cout * e)
        if hidden < 1:
            raise ConfigError(f"Bottleneck hidden width {hidden} must be >= 1")
        self.cv1 = _Unit(cin, hidden, k=1)
        self.cv2 = _Unit(hidden, cout, k=3)
        self.add = bool(shortcut) and cin == cout

    @property
    def out_channels(self) -> int:
        return self.cv2.cout

    def param_specs(self, prefix):
        return self.cv1.param_specs(f"{prefix}.cv1") + self.cv2.param_specs(f"{prefix}.cv2")

    def load(self, getw, prefix):
        self.cv1.load(getw, f"{prefix}.cv1")
        self.cv2.load(getw, f"{prefix}.cv2")

    def forward(self, xs):
        y = self.cv2.forward(self.cv1.forward(xs[0]))
        return add(xs[0], y) if self.add else y

    def out_shape(self, shapes):
        return self.cv2.out_shape(self.cv1.out_shape(shapes[0]))

    def cost(self, shapes):
        mid = self.cv1.out_shape(shapes[0])
        m1, f1 = self.cv1.cost(shapes[0])
        m2, f2 = self.cv2.cost(mid)
        out = self.cv2.out_shape(mid)
        extra = meter.elementwise_cost("add", int(np.prod(out))) if self.add else 0
        return m1 + m2, f1 + f2 + extra


class CrossConv(Block):
    """Separable 1xk then kx1 pair replacing one square kxk convolution.

    The horizontal conv always runs at stride 1; any downsampling stride
    sits on the vertical conv.
    """

    KIND = "CrossConv"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        k = rd.take("k", 3)
        s = rd.take("s", 1)
        e = rd.take("e", 1.0)
        shortcut = rd.take("shortcut", False)
        rd.finish()
        hidden = int(cout * e)
        self.cv1 = _Unit(cin, hidden, k=(1, k), s=(1, 1), p=(0, k // 2))
        self.cv2 = _Unit(hidden, cout, k=(k, 1), s=(s, s), p=(k // 2, 0))
        self.add = bool(shortcut) and cin == cout and s == 1

    @property
    def out_channels(self) -> int:
        return self.cv2.cout

    def param_specs(self, prefix):
        return self.cv1.param_specs(f"{prefix}.cv1") + self.cv2.param_specs(f"{prefix}.cv2")

    def load(self, getw, prefix):
        self.cv1.load(getw, f"{prefix}.cv1")
        self.cv2.load(getw, f"{prefix}.cv2")

    def forward(self, xs):
        y = self.cv2.forward(self.cv1.forward(xs[0]))
        return add(xs[0], y) if self.add else y

    def out_shape(self, shapes):
        return self.cv2.out_shape(self.cv1.out_shape(shapes[0]))

    def cost(self, shapes):
        mid = self.cv1.out_shape(shapes[0])
        m1, f1 = self.cv1.cost(shapes[0])
        m2, f2 = self.cv2.cost(mid)
        out = self.cv2.out_shape(mid)
        extra = meter.elementwise_cost("add", int(np.prod(out))) if self.add else 0
        return m1 + m2, f1 + f2 + extra


class _CrossBottleneck(Block):
    """Bottleneck with its 3x3 conv swapped for a CrossConv pair."""

    KIND = "_CrossBottleneck"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        shortcut = rd.take("shortcut", True)
        rd.finish()
        self.cv1 = _Unit(cin, cout, k=1)
        self.cv2 = CrossConv([cout], {"out": cout, "k": 3, "s": 1})
        self.add = bool(shortcut) and cin == cout

    @property
    def out_channels(self) -> int:
        return self.cv2.out_channels

    def param_specs(self, prefix):
        return (self.cv1.param_specs(f"{prefix}.cv1")
                + self.cv2.param_specs(f"{prefix}.cv2"))

    def load(self, getw, prefix):
        self.cv1.load(getw, f"{prefix}.cv1")
        self.cv2.load(getw, f"{prefix}.cv2")

    def forward(self, xs):
        y = self.cv2.forward([self.cv1.forward(xs[0])])
        return add(xs[0], y) if self.add else y

    def out_shape(self, shapes):
        return self.cv2.out_shape([self.cv1.out_shape(shapes[0])])

    def cost(self, shapes):
        mid = self.cv1.out_shape(shapes[0])
        m1, f1 = self.cv1.cost(shapes[0])
        m2, f2 = self.cv2.cost([mid])
        out = self.cv2.out_shape([mid])
        extra = meter.elementwise_cost("add", int(np.prod(out))) if self.add else 0
        return m1 + m2, f1 + f2 + extra


class _C3Base(Block):
    """Two 1x1 branches, a stack of inner units on one of them, concat, 1x1 out."""

    KIND = "_C3Base"

    def _init_common(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        n = rd.take("n", 1)
        shortcut = rd.take("shortcut", True)
        e = rd.take("e", 0.5)
        rd.finish()
        if n < 1:
            raise ConfigError(f"{self.KIND}: repeat count must be >= 1, got {n}")
        hidden = int(cout * e)
        if hidden < 1:
            raise ConfigError(f"{self.KIND}: hidden width {hidden} must be >= 1")
        self.cv1 = _Unit(cin, hidden, k=1)
        self.cv2 = _Unit(cin, hidden, k=1)
        self.cv3 = _Unit(2 * hidden, cout, k=1)
        self.m = [self._inner(hidden, bool(shortcut)) for _ in range(n)]

    def _inner(self, hidden: int, shortcut: bool) -> Block:
        raise NotImplementedError

    @property
    def out_channels(self) -> int:
        return self.cv3.cout

    def param_specs(self, prefix):
        specs = self.cv1.param_specs(f"{prefix}.cv1")
        specs += self.cv2.param_specs(f"{prefix}.cv2")
        for i, blk in enumerate(self.m):
            specs += blk.param_specs(f"{prefix}.m{i}")
        specs += self.cv3.param_specs(f"{prefix}.cv3")
        return specs

    def load(self, getw, prefix):
        self.cv1.load(getw, f"{prefix}.cv1")
        self.cv2.load(getw, f"{prefix}.cv2")
        for i, blk in enumerate(self.m):
            blk.load(getw, f"{prefix}.m{i}")
        self.cv3.load(getw, f"{prefix}.cv3")

    def forward(self, xs):
        y1 = self.cv1.forward(xs[0])
        for blk in self.m:
            y1 = blk.forward([y1])
        y2 = self.cv2.forward(xs[0])
        return self.cv3.forward(concat_channels([y1, y2]))

    def out_shape(self, shapes):
        shp = self.cv1.out_shape(shapes[0])
        for blk in self.m:
            shp = blk.out_shape([shp])
        n, c, h, w = shp
        return self.cv3.out_shape((n, 2 * c, h, w))

    def cost(self, shapes):
        macs, flops = self.cv1.cost(shapes[0])
        shp = self.cv1.out_shape(shapes[0])
        for blk in self.m:
            m, f = blk.cost([shp])
            macs += m
            flops += f
            shp = blk.out_shape([shp])
        m, f = self.cv2.cost(shapes[0])
        macs += m
        flops += f
        n, c, h, w = shp
        m, f = self.cv3.cost((n, 2 * c, h, w))
        return macs + m, flops + f


class C3(_C3Base):
    KIND = "C3"

    def __init__(self, in_channels, args):
        self._init_common(in_channels, args)

    def _inner(self, hidden, shortcut):
        return Bottleneck([hidden], {"out": hidden, "shortcut": shortcut, "e": 1.0})


class C3CrossConv(_C3Base):
    """C3 whose bottlenecks use the separable cross pair in place of the 3x3."""

    KIND = "C3CrossConv"

    def __init__(self, in_channels, args):
        self._init_common(in_channels, args)

    def _inner(self, hidden, shortcut):
        return _CrossBottleneck([hidden], {"out": hidden, "shortcut": shortcut})


class GhostConv(Block):
    """Half the outputs from a primary conv, half from a cheap depthwise 5x5.

    The primary half occupies channels [0, out/2), the derived half the rest.
    """

    KIND = "GhostConv"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        k = rd.take("k", 1)
        s = rd.take("s", 1)
        act = rd.take("act", "silu")
        rd.finish()
        if cout % 2:
            raise ConfigError(f"GhostConv out channels must be even, got {cout}")
        half = cout // 2
        self.primary = _Unit(cin, half, k=k, s=s, act=act)
        self.cheap = _Unit(half, half, k=5, s=1, p=2, g=half, act=act)
        self._cout = cout

    @property
    def out_channels(self) -> int:
        return self._cout

    def param_specs(self, prefix):
        return (self.primary.param_specs(f"{prefix}.primary")
                + self.cheap.param_specs(f"{prefix}.cheap"))

    def load(self, getw, prefix):
        self.primary.load(getw, f"{prefix}.primary")
        self.cheap.load(getw, f"{prefix}.cheap")

    def forward(self, xs):
        y = self.primary.forward(xs[0])
        return concat_channels([y, self.cheap.forward(y)])

    def out_shape(self, shapes):
        n, c, h, w = self.primary.out_shape(shapes[0])
        return (n, self._cout, h, w)

    def cost(self, shapes):
        mid = self.primary.out_shape(shapes[0])
        m1, f1 = self.primary.cost(shapes[0])
        m2, f2 = self.cheap.cost(mid)
        return m1 + m2, f1 + f2


class GhostBottleneck(Block):
    """Ghost reduce, optional stride-2 depthwise, ghost expand, plus shortcut."""

    KIND = "GhostBottleneck"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        s = rd.take("s", 1)
        rd.finish()
        if s not in (1, 2):
            raise ConfigError(f"GhostBottleneck stride must be 1 or 2, got {s}")
        if s == 1 and cin != cout:
            raise ConfigError(
                f"GhostBottleneck at stride 1 needs in == out channels for the "
                f"identity shortcut, got {cin} vs {cout}")
        if cout % 4:
            raise ConfigError(
                f"GhostBottleneck out channels must be divisible by 4 (two nested "
                f"ghost halvings), got {cout}")
        hidden = cout // 2
        self.stride = s
        self.g1 = GhostConv([cin], {"out": hidden, "act": "silu"})
        self.dw = _Unit(hidden, hidden, k=3, s=2, g=hidden, act=None) if s == 2 else None
        self.g2 = GhostConv([hidden], {"out": cout, "act": None})
        if s == 2:
            self.sc_dw = _Unit(cin, cin, k=3, s=2, g=cin, act=None)
            self.sc_pw = _Unit(cin, cout, k=1, act=None)
        else:
            self.sc_dw = None
            self.sc_pw = None

    @property
    def out_channels(self) -> int:
        return self.g2.out_channels

    def param_specs(self, prefix):
        specs = self.g1.param_specs(f"{prefix}.g1")
        if self.dw is not None:
            specs += self.dw.param_specs(f"{prefix}.dw")
        specs += self.g2.param_specs(f"{prefix}.g2")
        if self.sc_dw is not None:
            specs += self.sc_dw.param_specs(f"{prefix}.sc_dw")
            specs += self.sc_pw.param_specs(f"{prefix}.sc_pw")
        return specs

    def load(self, getw, prefix):
        self.g1.load(getw, f"{prefix}.g1")
        if self.dw is not None:
            self.dw.load(getw, f"{prefix}.dw")
        self.g2.load(getw, f"{prefix}.g2")
        if self.sc_dw is not None:
            self.sc_dw.load(getw, f"{prefix}.sc_dw")
            self.sc_pw.load(getw, f"{prefix}.sc_pw")

    def forward(self, xs):
        x = xs[0]
        y = self.g1.forward([x])
        if self.dw is not None:
            y = self.dw.forward(y)
        y = self.g2.forward([y])
        if self.stride == 1:
            return add(x, y)
        short = self.sc_pw.forward(self.sc_dw.forward(x))
        return add(short, y)

    def out_shape(self, shapes):
        shp = self.g1.out_shape(shapes)
        if self.dw is not None:
            shp = self.dw.out_shape(shp)
        return self.g2.out_shape([shp])

    def cost(self, shapes):
        macs, flops = self.g1.cost(shapes)
        shp = self.g1.out_shape(shapes)
        if self.dw is not None:
            m, f = self.dw.cost(shp)
            macs += m
            flops += f
            shp = self.dw.out_shape(shp)
        m, f = self.g2.cost([shp])
        macs += m
        flops += f
        out = self.g2.out_shape([shp])
        if self.stride == 2:
            m, f = self.sc_dw.cost(shapes[0])
            macs += m
            flops += f
            mid = self.sc_dw.out_shape(shapes[0])
            m, f = self.sc_pw.cost(mid)
            macs += m
            flops += f
        flops += meter.elementwise_cost("add", int(np.prod(out)))
        return macs, flops


class C3Ghost(_C3Base):
    """C3 with ghost bottlenecks on the processed branch."""

    KIND = "C3Ghost"

    def __init__(self, in_channels, args):
        self._init_common(in_channels, args)

    def _inner(self, hidden, shortcut):
        return GhostBottleneck([hidden], {"out": hidden, "s": 1})


class GAM(Block):
    """Global attention: a channel gate from a per-position MLP, then a
    spatial gate from two 7x7 convolutions, with a residual add.

    The channel branch permutes to channels-last, runs the two-layer MLP at
    every spatial position, permutes back, and squashes to a sigmoid gate.
    The spatial branch convolves the gated tensor down to C/ratio channels
    and back up, grouped to keep its cost proportionate. Zero weights give
    0.5 gates everywhere, so the block output is 0.25x (or 1.25x with the
    residual) of its input, which the tests pin as an analytic case.
    """

    KIND = "GAM"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        ratio = rd.take("ratio", 4)
        residual = rd.take("residual", True)
        groups = rd.take("spatial_groups", ratio)
        rd.finish()
        if cin % ratio:
            raise ConfigError(f"GAM ratio {ratio} must divide channels {cin}")
        hidden = cin // ratio
        if groups < 1 or cin % groups or hidden % groups:
            raise ConfigError(
                f"GAM spatial_groups {groups} must divide both channels {cin} "
                f"and reduced channels {hidden}")
        self.cin = cin
        self.hidden = hidden
        self.residual = bool(residual)
        self.sconv1 = _Unit(cin, hidden, k=7, p=3, g=groups, act="relu", norm=False)
        self.sconv2 = _Unit(hidden, cin, k=7, p=3, g=groups, act=None, norm=False)
        self.fc1_w = None
        self.fc1_b = None
        self.fc2_w = None
        self.fc2_b = None

    @property
    def out_channels(self) -> int:
        return self.cin

    def param_specs(self, prefix):
        c, h = self.cin, self.hidden
        return [
            (f"{prefix}.fc1.weight", (h, c)),
            (f"{prefix}.fc1.bias", (h,)),
            (f"{prefix}.fc2.weight", (c, h)),
            (f"{prefix}.fc2.bias", (c,)),
        ] + self.sconv1.param_specs(f"{prefix}.sconv1") \
          + self.sconv2.param_specs(f"{prefix}.sconv2")

    def load(self, getw, prefix):
        self.fc1_w = np.asarray(getw(f"{prefix}.fc1.weight"), dtype=np.float32)
        self.fc1_b = np.asarray(getw(f"{prefix}.fc1.bias"), dtype=np.float32)
        self.fc2_w = np.asarray(getw(f"{prefix}.fc2.weight"), dtype=np.float32)
        self.fc2_b = np.asarray(getw(f"{prefix}.fc2.bias"), dtype=np.float32)
        self.sconv1.load(getw, f"{prefix}.sconv1")
        self.sconv2.load(getw, f"{prefix}.sconv2")

    def forward(self, xs):
        x = xs[0]
        n, c, h, w = x.shape
        if c != self.cin:
            raise ShapeError(f"GAM built for {self.cin} channels, got {c}")
        channels_last = permute(x, (0, 2, 3, 1))
        mat = channels_last.data.reshape(n * h * w, c)
        hid = linear(mat, self.fc1_w, self.fc1_b)
        hid = np.maximum(hid, 0.0)
        meter.record("relu", 0, meter.elementwise_cost("relu", hid.size))
        att = linear(hid, self.fc2_w, self.fc2_b)
        att_t = permute(Tensor(att.reshape(n, h, w, c)), (0, 3, 1, 2))
        channel_gate = sigmoid(att_t)
        gated = mul(x, channel_gate)
        s = self.sconv2.forward(self.sconv1.forward(gated))
        spatial_gate = sigmoid(s)
        out = mul(gated, spatial_gate)
        return add(x, out) if self.residual else out

    def out_shape(self, shapes):
        n, c, h, w = shapes[0]
        if c != self.cin:
            raise ShapeError(f"GAM built for {self.cin} channels, got {c}")
        return shapes[0]

    def cost(self, shapes):
        n, c, h, w = shapes[0]
        numel = n * c * h * w
        rows = n * h * w
        macs, flops = meter.linear_cost(rows, c, self.hidden, bias=True)
        flops += meter.elementwise_cost("relu", rows * self.hidden)
        m, f = meter.linear_cost(rows, self.hidden, c, bias=True)
        macs += m
        flops += f
        flops += meter.elementwise_cost("sigmoid", numel)
        flops += meter.elementwise_cost("mul", numel)
        m, f = self.sconv1.cost(shapes[0])
        macs += m
        flops += f
        mid = self.sconv1.out_shape(shapes[0])
        m, f = self.sconv2.cost(mid)
        macs += m
        flops += f
        flops += meter.elementwise_cost("sigmoid", numel)
        flops += meter.elementwise_cost("mul", numel)
        if self.residual:
            flops += meter.elementwise_cost("add", numel)
        return macs, flops


class SPPF(Block):
    """Spatial pyramid pooling (fast): three chained 5x5 max pools, fused."""

    KIND = "SPPF"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        cout = rd.take("out", required=True)
        k = rd.take("k", 5)
        rd.finish()
        if k % 2 == 0:
            raise ConfigError(f"SPPF pool kernel must be odd, got {k}")
        hidden = cin // 2
        if hidden < 1:
            raise ConfigError(f"SPPF needs >= 2 input channels, got {cin}")
        self.k = k
        self.cv1 = _Unit(cin, hidden, k=1)
        self.cv2 = _Unit(4 * hidden, cout, k=1)

    @property
    def out_channels(self) -> int:
        return self.cv2.cout

    def param_specs(self, prefix):
        return self.cv1.param_specs(f"{prefix}.cv1") + self.cv2.param_specs(f"{prefix}.cv2")

    def load(self, getw, prefix):
        self.cv1.load(getw, f"{prefix}.cv1")
        self.cv2.load(getw, f"{prefix}.cv2")

    def forward(self, xs):
        y0 = self.cv1.forward(xs[0])
        y1 = maxpool2d(y0, self.k, 1, self.k // 2)
        y2 = maxpool2d(y1, self.k, 1, self.k // 2)
        y3 = maxpool2d(y2, self.k, 1, self.k // 2)
        return self.cv2.forward(concat_channels([y0, y1, y2, y3]))

    def out_shape(self, shapes):
        n, c, h, w = self.cv1.out_shape(shapes[0])
        return self.cv2.out_shape((n, 4 * c, h, w))

    def cost(self, shapes):
        macs, flops = self.cv1.cost(shapes[0])
        n, c, h, w = self.cv1.out_shape(shapes[0])
        flops += 3 * meter.maxpool_cost(n * c * h * w, self.k, self.k)
        m, f = self.cv2.cost((n, 4 * c, h, w))
        return macs + m, flops + f


class Upsample(Block):
    """Nearest-neighbor upsampling by an integer factor."""

    KIND = "Upsample"

    def __init__(self, in_channels: list[int], args: dict):
        cin = _single(in_channels, self.KIND)
        rd = _ArgReader(self.KIND, args)
        self.factor = rd.take("factor", 2)
        rd.finish()
        if self.factor < 1:
            raise ConfigError(f"Upsample factor must be >= 1, got {self.factor}")
        self.cin = cin

    @property
    def out_channels(self) -> int:
        return self.cin

    def forward(self, xs):
        return upsample_nearest(xs[0], self.factor)

    def out_shape(self, shapes):
        n, c, h, w = shapes[0]
        return (n, c, h * self.factor, w * self.factor)


class Concat(Block):
    """Channel concatenation of every listed source layer."""

    KIND = "Concat"
    MULTI_INPUT = True

    def __init__(self, in_channels: list[int], args: dict):
        rd = _ArgReader(self.KIND, args)
        rd.finish()
        if len(in_channels) < 2:
            raise ConfigError(f"Concat needs >= 2 inputs, got {len(in_channels)}")
        self.cins = list(in_channels)

    @property
    def out_channels(self) -> int:
        return sum(self.cins)

    def forward(self, xs):
        return concat_channels(xs)

    def out_shape(self, shapes):
        n, c, h, w = shapes[0]
        for i, shp in enumerate(shapes[1:], start=1):
            if (shp[0], shp[2], shp[3]) != (n, h, w):
                raise ShapeError(
                    f"Concat input {i} has (n, H, W) = {(shp[0], shp[2], shp[3])}, "
                    f"expected {(n, h, w)}; sources must share spatial size")
        return (n, sum(s[1] for s in shapes), h, w)


class Detect(Block):
    """Per-scale 1x1 output convolutions emitting raw prediction maps.

    Each map carries 3 anchors x (4 box terms + objectness + nc class
    scores) channels. Decoding lives in the postprocessing module; this
    block stops at the raw maps.
    """

    KIND = "Detect"
    MULTI_INPUT = True

    def __init__(self, in_channels: list[int], args: dict):
        rd = _ArgReader(self.KIND, args)
        nc = rd.take("nc", required=True)
        rd.finish()
        if nc < 1:
            raise ConfigError(f"Detect needs >= 1 class, got {nc}")
        self.nc = nc
        self.per_scale = 3 * (5 + nc)
        self.units = [_Unit(cin, self.per_scale, k=1, act=None, norm=False)
                      for cin in in_channels]

    @property
    def out_channels(self) -> int:
        return self.per_scale

    def param_specs(self, prefix):
        specs = []
        for i, u in enumerate(self.units):
            specs += u.param_specs(f"{prefix}.m{i}")
        return specs

    def load(self, getw, prefix):
        for i, u in enumerate(self.units):
            u.load(getw, f"{prefix}.m{i}")

    def forward(self, xs) -> list[Tensor]:
        if len(xs) != len(self.units):
            raise ShapeError(
                f"Detect built for {len(self.units)} scales, got {len(xs)} inputs")
        return [u.forward(x) for u, x in zip(self.units, xs)]

    def out_shapes(self, shapes: list[Shape]) -> list[Shape]:
        return [u.out_shape(s) for u, s in zip(self.units, shapes)]

    def out_shape(self, shapes):
        raise ConfigError("Detect emits one map per scale; use out_shapes")

    def cost(self, shapes):
        macs = flops = 0
        for u, s in zip(self.units, shapes):
            m, f = u.cost(s)
            macs += m
            flops += f
        return macs, flops


BLOCKS: dict[str, type[Block]] = {
    cls.KIND: cls
    for cls in (ConvBNAct, Bottleneck, C3, CrossConv, C3CrossConv, GhostConv,
                GhostBottleneck, C3Ghost, GAM, SPPF, Upsample, Concat, Detect)
}

C3_FAMILY = ("C3", "C3Ghost", "C3CrossConv")
