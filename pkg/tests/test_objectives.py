import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import fd_compare
from splatfield.deformation import HexPlaneConfig, HexPlaneField
from splatfield.objectives import (
    LossWeights,
    loss_color,
    loss_depth_binocular,
    loss_depth_monocular,
    loss_spatial_tv,
    loss_temporal_tv,
    total_loss,
)


def _rand(shape, seed, lo=0.0, hi=1.0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=dtype)


class TestLossColor:
    def test_equal_images_zero(self):
        img = _rand((8, 8, 3), 0)
        assert float(loss_color(img, img, torch.ones(8, 8))) == 0.0

    def test_single_pixel_single_channel(self):
        target = _rand((4, 4, 3), 1)
        pred = target.clone()
        pred[2, 1, 0] += 0.5
        got = float(loss_color(pred, target, torch.ones(4, 4)))
        assert math.isclose(got, 0.5 / (3 * 16), rel_tol=1e-12)

    def test_all_zero_mask_returns_zero(self):
        a, b = _rand((4, 4, 3), 2), _rand((4, 4, 3), 3)
        assert float(loss_color(a, b, torch.zeros(4, 4))) == 0.0

    def test_masked_out_pixels_ignored(self):
        target = _rand((4, 4, 3), 4)
        pred = target.clone()
        pred[0, 0] += 123.0
        mask = torch.ones(4, 4)
        mask[0, 0] = 0
        assert float(loss_color(pred, target, mask)) == 0.0


class TestLossDepthBinocular:
    def test_equal_depths_zero(self):
        d = _rand((8, 8), 5, lo=1.0, hi=3.0)
        assert float(loss_depth_binocular(d, d, torch.ones(8, 8))) == 0.0

    def test_single_pixel_reciprocal(self):
        target = torch.full((1, 1), 2.0, dtype=torch.float64)
        pred = torch.full((1, 1), 1.0, dtype=torch.float64)
        got = float(loss_depth_binocular(pred, target, torch.ones(1, 1)))
        assert math.isclose(got, 0.5, rel_tol=1e-5)

    def test_masked_out_disagreement_zero(self):
        target = torch.full((2, 2), 2.0)
        pred = target.clone()
        pred[0, 0] = 9.0
        mask = torch.ones(2, 2)
        mask[0, 0] = 0
        assert float(loss_depth_binocular(pred, target, mask)) == 0.0

    def test_zero_iff_masked_depths_agree(self):
        target = _rand((6, 6), 6, lo=1.0, hi=4.0)
        pred = target.clone()
        mask = (torch.arange(36).reshape(6, 6) % 3 == 0).to(torch.float64)
        assert float(loss_depth_binocular(pred, target, mask)) == 0.0
        pred2 = pred + 0.1 * mask.reshape(6, 6)
        assert float(loss_depth_binocular(pred2, target, mask)) > 0.0


class TestLossDepthMonocular:
    def test_identical_nonconstant_zero(self):
        d = _rand((8, 8), 7, lo=1.0, hi=3.0)
        got = float(loss_depth_monocular(d, d, torch.ones(8, 8)))
        assert abs(got) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
    def test_affine_invariance(self, a, b):
        d = _rand((8, 8), 8, lo=1.0, hi=3.0)
        target = _rand((8, 8), 9, lo=0.5, hi=4.0)
        mask = torch.ones(8, 8)
        l0 = float(loss_depth_monocular(d, target, mask))
        l1 = float(loss_depth_monocular(a * d + b, target, mask))
        assert abs(l0 - l1) < 1e-6

    def test_negated_gives_two(self):
        d = _rand((8, 8), 10, lo=1.0, hi=3.0)
        got = float(loss_depth_monocular(-d, d, torch.ones(8, 8)))
        assert abs(got - 2.0) < 1e-5

    def test_range_and_degenerate(self):
        d = _rand((8, 8), 11)
        const = torch.ones(8, 8, dtype=torch.float64)
        got = float(loss_depth_monocular(const, d, torch.ones(8, 8)))
        assert abs(got - 1.0) < 1e-6  # zero variance -> correlation undefined -> 1
        for seed in range(5):
            a = _rand((8, 8), 20 + seed)
            b = _rand((8, 8), 30 + seed)
            v = float(loss_depth_monocular(a, b, torch.ones(8, 8)))
            assert -1e-9 <= v <= 2.0 + 1e-9

    def test_mask_restricts_correlation(self):
        # Agreement on the masked set, garbage elsewhere: loss stays ~0.
        d = _rand((8, 8), 12, lo=1.0, hi=3.0)
        pred = d.clone()
        mask = torch.zeros(8, 8)
        mask[:4] = 1.0
        pred[4:] = 99.0
        assert abs(float(loss_depth_monocular(pred, d, mask))) < 1e-5


class TestSpatialTV:
    def test_constants_zero(self):
        c = torch.full((6, 6, 3), 0.4, dtype=torch.float64)
        d = torch.full((6, 6), 2.0, dtype=torch.float64)
        assert float(loss_spatial_tv(c, d)) == 0.0

    def test_two_pixel_hand_value(self):
        c = torch.tensor([[[0.0, 0.0, 0.0]], [[1.0, 1.0, 1.0]]], dtype=torch.float64)
        d = torch.full((2, 1), 2.0, dtype=torch.float64)
        got = float(loss_spatial_tv(c, d))
        assert math.isclose(got, 1.0, rel_tol=1e-9)  # one unit step per channel, mean 1

    def test_checkerboard_exceeds_constant(self):
        ij = torch.arange(8)
        checker = ((ij[:, None] + ij[None, :]) % 2).to(torch.float64)
        c_checker = checker.unsqueeze(-1).expand(8, 8, 3)
        c_const = torch.full((8, 8, 3), 0.5, dtype=torch.float64)
        d = torch.full((8, 8), 2.0, dtype=torch.float64)
        assert float(loss_spatial_tv(c_checker, d)) > float(loss_spatial_tv(c_const, d))


class TestTemporalTV:
    def _field(self, **kw):
        cfg = dict(spatial_resolution=1, time_resolution=2, channels=1, levels=1)
        cfg.update(kw)
        return HexPlaneField(HexPlaneConfig(**cfg))

    def test_time_constant_planes_zero(self):
        field = self._field()
        assert float(loss_temporal_tv(field).detach()) == 0.0

    def test_unit_step_single_column(self):
        field = self._field()
        with torch.no_grad():
            field.planes[0]["xt"][0, 0, 1] += 1.0
        assert math.isclose(float(loss_temporal_tv(field).detach()), 1.0, rel_tol=1e-6)

    def test_spatial_planes_never_contribute(self):
        field = self._field(spatial_resolution=4)
        with torch.no_grad():
            field.planes[0]["xy"].normal_(generator=torch.Generator().manual_seed(0))
        assert float(loss_temporal_tv(field).detach()) == 0.0


class TestTotalLoss:
    def test_zero_weights(self):
        w = LossWeights(color=0, depth=0, spatial_tv=0, temporal_tv=0)
        t, rep = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0),
                            torch.tensor(4.0), w)
        assert float(t) == 0.0 and rep.total == 0.0

    def test_single_term(self):
        w = LossWeights(color=1, depth=0, spatial_tv=0, temporal_tv=0)
        t, _ = total_loss(torch.tensor(0.7, dtype=torch.float64), torch.tensor(2.0),
                          torch.tensor(3.0), torch.tensor(4.0), w)
        assert float(t) == 0.7

    def test_weighted_arithmetic(self):
        w = LossWeights(color=1, depth=1, spatial_tv=0.01, temporal_tv=0.01)
        t, rep = total_loss(torch.tensor(0.1, dtype=torch.float64),
                            torch.tensor(0.2, dtype=torch.float64),
                            torch.tensor(1.0, dtype=torch.float64),
                            torch.tensor(2.0, dtype=torch.float64), w)
        assert math.isclose(float(t), 0.33, rel_tol=1e-9)
        assert math.isclose(rep.total, 0.33, rel_tol=1e-6)

    def test_linear_in_each_weight(self):
        terms = [torch.tensor(v, dtype=torch.float64) for v in (0.3, 0.5, 0.2, 0.9)]
        base = LossWeights(color=1, depth=1, spatial_tv=1, temporal_tv=1)
        doubled = LossWeights(color=2, depth=1, spatial_tv=1, temporal_tv=1)
        t0, _ = total_loss(*terms, base)
        t1, _ = total_loss(*terms, doubled)
        assert math.isclose(float(t1 - t0), 0.3, rel_tol=1e-12)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(color=-1)
        with pytest.raises(ValueError):
            LossWeights(depth_mode="stereo")


class TestLossGradients:
    def test_all_loss_gradients_match_fd(self):
        pred_c = _rand((8, 8, 3), 40).requires_grad_()
        targ_c = _rand((8, 8, 3), 41)
        pred_d = _rand((8, 8), 42, lo=1.0, hi=3.0).requires_grad_()
        targ_d = _rand((8, 8), 43, lo=1.0, hi=3.0)
        mask = (torch.arange(64).reshape(8, 8) % 4 != 0).to(torch.float64)
        w = LossWeights(color=1.0, depth=0.7, spatial_tv=0.05, temporal_tv=0.0)

        def make_loss():
            lc = loss_color(pred_c, targ_c, mask)
            ld = loss_depth_binocular(pred_d, targ_d, mask)
            ls = loss_spatial_tv(pred_c, pred_d)
            return w.color * lc + w.depth * ld + w.spatial_tv * ls

        err, _, _ = fd_compare(make_loss, [pred_c, pred_d])
        assert err < 1e-4

    def test_monocular_gradient_matches_fd(self):
        pred = _rand((8, 8), 44, lo=1.0, hi=2.0).requires_grad_()
        targ = _rand((8, 8), 45, lo=1.0, hi=4.0)
        mask = torch.ones(8, 8, dtype=torch.float64)

        def make_loss():
            return loss_depth_monocular(pred, targ, mask)

        err, _, _ = fd_compare(make_loss, [pred])
        assert err < 1e-4

    def test_temporal_tv_gradient_matches_fd(self):
        field = HexPlaneField(HexPlaneConfig(spatial_resolution=2, time_resolution=3,
                                             channels=2, levels=1)).double()
        with torch.no_grad():
            for p in field.time_planes():
                p.normal_(generator=torch.Generator().manual_seed(3))
        params = field.time_planes()

        def make_loss():
            return loss_temporal_tv(field)

        err, _, _ = fd_compare(make_loss, params)
        assert err < 1e-4
