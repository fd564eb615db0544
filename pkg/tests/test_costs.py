"""Analyzer totals, the dual counting routes, and the closed-form estimates.

The per-variant totals below were derived by hand from the layer tables
(unit-by-unit parameter sums, then MACs from output maps) before the
analyzer existed; they are pinned exactly so any structural drift in the
bundled configs or the block cost rules shows up as a diff here.
"""
import numpy as np
import pytest

from yolotla.costs import (CONVENTION, analyze, closed_form_cross,
                           closed_form_standard, count_empirical)
from yolotla.errors import ConfigError
from yolotla.graph import build_model, find_config

FROZEN_TOTALS = {
    # name: (params, MACs @640, FLOPs @640)
    "yolov5s": (7235389, 8216780800, 16516394800),
    "yolov5m": (21190557, 24436224000, 49028650800),
    "yolov5s-tiny": (7394684, 9971507200, 20056951600),
    "yolov5s-g1": (6072501, 6517683200, 13109956400),
    "yolov5s-g2": (5109925, 5538816000, 11149918000),
    "yolov5s-cc1": (6865277, 7666278400, 15422455600),
    "yolov5s-cc2": (6559229, 7351705600, 14796074800),
    "yolov5s-gam": (9544349, 10995507200, 22098423600),
    "yolo-tla-s": (9333532, 12199731200, 24545041200),
    "yolo-tla-m": (25153356, 32435712000, 65132766000),
}


@pytest.fixture(scope="module")
def models():
    return {name: build_model(find_config(name)) for name in FROZEN_TOTALS}


class TestFrozenTotals:

    @pytest.mark.parametrize("name", sorted(FROZEN_TOTALS))
    def test_totals_pinned(self, models, name):
        rep = analyze(models[name])
        assert (rep.total_params, rep.total_macs, rep.total_flops) == \
            FROZEN_TOTALS[name]

    def test_report_params_equal_model_params(self, models):
        for name, model in models.items():
            assert analyze(model).total_params == model.param_count()

    def test_hand_summed_backbone_parts(self, models):
        # spot values worked out on paper for the small baseline
        rows = {r.index: r for r in analyze(models["yolov5s"]).layers}
        assert rows[2].params == 18816     # first residual stage
        assert rows[4].params == 115712
        assert rows[6].params == 625152
        assert rows[8].params == 1182720
        assert rows[9].params == 656896    # pooling pyramid
        head = analyze(models["yolov5s"]).head
        assert head.params == 229245
        assert head.out_shape == (1, 255, 80, 80)

    def test_rows_sum_to_totals(self, models):
        rep = analyze(models["yolov5s-gam"])
        rows = list(rep.layers) + [rep.head]
        assert sum(r.params for r in rows) == rep.total_params
        assert sum(r.macs for r in rows) == rep.total_macs
        assert sum(r.flops for r in rows) == rep.total_flops

    def test_attention_additions_scale_with_width_squared(self, models):
        # the four attention gates dominate the s->m growth of that family
        base_s = analyze(models["yolov5s"]).total_params
        gam_s = analyze(models["yolov5s-gam"]).total_params
        added = gam_s - base_s
        assert added == 2308960

    def test_convention_is_stated(self, models):
        rep = analyze(models["yolov5s"])
        assert "2 FLOPs" in rep.convention
        assert rep.to_dict()["convention"] == CONVENTION


class TestDualRouteConsistency:
    """Symbolic totals must equal what the executed forward pass records."""

    @pytest.mark.parametrize("name", sorted(FROZEN_TOTALS))
    def test_full_model_at_reduced_input(self, models, name):
        rep = analyze(models[name], input_hw=(64, 64))
        macs, flops = count_empirical(models[name], input_hw=(64, 64))
        assert (macs, flops) == (rep.total_macs, rep.total_flops)

    def test_truncated_baseline(self, models):
        m = models["yolov5s"]
        rep = analyze(m, input_hw=(64, 64), truncate=4)
        assert rep.head is None
        macs, flops = count_empirical(m, input_hw=(64, 64), truncate=4)
        assert (macs, flops) == (rep.total_macs, rep.total_flops)

    def test_truncated_attention_backbone(self, models):
        m = models["yolo-tla-s"]
        rep = analyze(m, input_hw=(64, 64), truncate=14)
        macs, flops = count_empirical(m, input_hw=(64, 64), truncate=14)
        assert (macs, flops) == (rep.total_macs, rep.total_flops)

    def test_truncate_bounds_checked(self, models):
        with pytest.raises(ConfigError, match="truncate"):
            analyze(models["yolov5s"], truncate=0)
        with pytest.raises(ConfigError, match="truncate"):
            count_empirical(models["yolov5s"], truncate=99)


class TestClosedFormEstimates:

    def test_hand_case(self):
        flops, params = closed_form_standard(8, 3, 3, 1, 1)
        assert (flops, params) == (1728.0, 27)
        flops, params = closed_form_cross(8, 3, 3, 1, 1)
        assert (flops, params) == (2160.0, 18)

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_param_ratio_is_half_kernel(self, k):
        for channels in (3, 16, 64):
            _, p_std = closed_form_standard(32, k, channels)
            _, p_cross = closed_form_cross(32, k, channels)
            assert p_std / p_cross == k / 2

    def test_flop_estimate_discrepancy_preserved(self):
        # the factored layer's FLOP estimate EXCEEDS the square layer's
        # even though its parameter estimate is smaller; both facts hold
        for k in (3, 5, 7):
            f_std, p_std = closed_form_standard(32, k, 16)
            f_cross, p_cross = closed_form_cross(32, k, 16)
            assert f_cross > f_std
            assert p_cross < p_std

    def test_default_pad_preserves_size(self):
        flops, _ = closed_form_standard(16, 3, 4)
        assert flops == 9 * 4 * 16 * 16

    def test_estimates_disagree_with_analyzer_route(self, models):
        # the quarantine test: whole-model totals are not built from these
        rep = analyze(models["yolov5s"], input_hw=(64, 64))
        est = sum(closed_form_standard(64, 3, 16)[0] for _ in range(2))
        assert rep.total_flops != est


class TestMeasuredCrossBlockSaving:

    def test_cross_block_cheaper_than_square_conv(self):
        # empirical counterpart of the closed-form parameter claim
        from yolotla import meter
        from yolotla.blocks import BLOCKS
        from tests.test_blocks import make_block, rand_input
        cross, _ = make_block("CrossConv", [16], {"out": 16})
        square, _ = make_block("ConvBNAct", [16], {"out": 16, "k": 3})
        x = rand_input(1, 16, 16, 16)
        with meter.CostMeter() as mc:
            cross.forward([x])
        with meter.CostMeter() as ms:
            square.forward([x])
        assert cross.param_count() < square.param_count()
        assert mc.macs < ms.macs
