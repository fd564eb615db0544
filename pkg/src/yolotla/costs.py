"""Symbolic cost analysis over the layer graph, plus closed-form estimates.

The analyzer walks a built model's shape-inference rules and sums each
block's declared cost; nothing is executed. The instrumented route
(count_empirical) runs the real forward pass under a CostMeter. Both
routes read the same per-operation price table (see yolotla.meter), so
they must agree exactly; the test suite and the acceptance gate check
that equality block by block and on truncated models.

Counting convention, stated wherever totals are reported: one
multiply-accumulate costs 2 FLOPs; a biased layer adds one addition per
output element; elementwise math is priced per element (sigmoid, ReLU,
add, mul at 1; SiLU at 2); max pooling pays one comparison per window
element beyond the first; concatenation, nearest upsampling, and
permutation are free.

The closed-form single-layer formulas at the bottom are deliberately
quarantined from the analyzer: they estimate one square or factored
convolution layer from its hyperparameters alone, count a MAC as a
single FLOP, and ignore channels-out, bias, and activation. They exist
to reproduce a published per-layer comparison (including its quirk: the
factored layer's FLOP estimate exceeds the square layer's even though
its parameter estimate is lower). Whole-model numbers never use them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import meter
from .errors import ConfigError
from .graph import INPUT_CHANNELS, Model
from .tensor import Tensor

CONVENTION = (
    "1 MAC = 2 FLOPs; +1 add per output element for biased layers; "
    "elementwise ops priced per element (silu 2; sigmoid, relu, add, mul 1); "
    "maxpool k*k-1 comparisons per output element; concat, nearest "
    "upsample, and permute are free.")


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    sources: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: int
    macs: int
    flops: int

    def to_dict(self) -> dict:
        return {"index": self.index, "kind": self.kind,
                "sources": list(self.sources),
                "out_shape": list(self.out_shape), "params": self.params,
                "macs": self.macs, "flops": self.flops}


@dataclass(frozen=True)
class CostReport:
    name: str
    input_shape: tuple[int, int, int, int]
    layers: tuple[LayerCost, ...]
    head: LayerCost | None
    total_params: int
    total_macs: int
    total_flops: int
    convention: str = CONVENTION

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def mparams(self) -> float:
        return self.total_params / 1e6

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [r.to_dict() for r in self.layers],
            "head": None if self.head is None else self.head.to_dict(),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "gflops": self.gflops,
            "convention": self.convention,
        }


def _check_truncate(model: Model, truncate) -> int:
    n = len(model.blocks)
    if truncate is None:
        return n
    if not 1 <= truncate <= n:
        raise ConfigError(
            f"truncate must be within 1..{n}, got {truncate}")
    return truncate


def analyze(model: Model, input_hw=(640, 640), truncate=None) -> CostReport:
    """Price every layer symbolically for the given input size."""
    n = _check_truncate(model, truncate)
    h, w = input_hw
    input_shape = (1, INPUT_CHANNELS, int(h), int(w))
    shapes: list[tuple[int, int, int, int]] = []
    rows: list[LayerCost] = []
    for spec, block in zip(model.config.layers[:n], model.blocks[:n]):
        ins = ([input_shape] if spec.index == 0
               else [shapes[s] for s in spec.sources])
        out = block.out_shape(ins)
        macs, flops = block.cost(ins)
        rows.append(LayerCost(spec.index, spec.kind, spec.sources, out,
                              block.param_count(), macs, flops))
        shapes.append(out)
    head = None
    if truncate is None:
        ins = [shapes[i] for i in model.detect_from]
        macs, flops = model.detect.cost(ins)
        out = model.detect.out_shapes(ins)[0]
        head = LayerCost(n, "Detect", tuple(model.detect_from), out,
                         model.detect.param_count(), macs, flops)
    all_rows = rows + ([head] if head else [])
    return CostReport(
        name=model.config.name, input_shape=input_shape, layers=tuple(rows),
        head=head,
        total_params=sum(r.params for r in all_rows),
        total_macs=sum(r.macs for r in all_rows),
        total_flops=sum(r.flops for r in all_rows))


def count_empirical(model: Model, input_hw=(640, 640), truncate=None):
    """Run the real forward pass under a meter; returns (macs, flops)."""
    n = _check_truncate(model, truncate)
    h, w = input_hw
    x = Tensor(np.zeros((1, INPUT_CHANNELS, int(h), int(w)), np.float32))
    with meter.CostMeter() as m:
        if truncate is None:
            model.forward(x)
        else:
            cache: dict[int, Tensor] = {}
            for spec, block in zip(model.config.layers[:n], model.blocks[:n]):
                ins = ([x] if spec.index == 0
                       else [cache[s] for s in spec.sources])
                cache[spec.index] = block.forward(ins)
    return m.macs, m.flops


# -- closed-form single-layer estimates (quarantined, see module docstring) --

def _formula_out(width, k, stride, pad) -> float:
    return (width - k + 2 * pad) / stride + 1


def closed_form_standard(width, k, channels, stride=1, pad=None):
    """Square k x k layer estimate: (flops, params) = (k²C·out², k²C)."""
    if pad is None:
        pad = k // 2
    out = _formula_out(width, k, stride, pad)
    flops = k * k * channels * out * out
    return flops, k * k * channels


def closed_form_cross(width, k, channels, stride=1, pad=None):
    """Factored 1xk + kx1 pair estimate: (flops, params) = (..., 2kC).

    The FLOP term multiplies the wider intermediate map (a 1xk layer
    leaves the height untouched) by the final map, which makes it larger
    than the square layer's estimate even though the parameter estimate
    is smaller. That asymmetry is preserved on purpose.
    """
    if pad is None:
        pad = k // 2
    mid = _formula_out(width, 1, stride, pad)
    out = _formula_out(width, k, stride, pad)
    flops = k * k * channels * mid * out
    return flops, 2 * k * channels
