import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from splatfield.core import (
    Camera,
    GaussianCloud,
    SH_C0,
    build_covariance,
    eval_sh,
    gaussian_weight,
    quaternion_multiply,
    quaternion_to_rotation,
    rgb_to_band0,
    sh_band_count,
)


def _q(w, x, y, z):
    return torch.tensor([w, x, y, z], dtype=torch.float64)


class TestBuildCovariance:
    def test_identity(self):
        cov = build_covariance(_q(1, 0, 0, 0), torch.zeros(3, dtype=torch.float64))
        assert torch.allclose(cov, torch.eye(3, dtype=torch.float64))

    def test_axis_scaling(self):
        log_s = torch.tensor([math.log(2.0), 0.0, 0.0], dtype=torch.float64)
        cov = build_covariance(_q(1, 0, 0, 0), log_s)
        assert torch.allclose(cov, torch.diag(torch.tensor([4.0, 1.0, 1.0], dtype=torch.float64)))

    def test_rotation_90deg_about_z(self):
        # Hand evaluation of R S S^T R^T: the x-elongation rotates onto y.
        half = math.pi / 4.0
        q = _q(math.cos(half), 0.0, 0.0, math.sin(half))
        log_s = torch.tensor([math.log(2.0), 0.0, 0.0], dtype=torch.float64)
        cov = build_covariance(q, log_s)
        expected = torch.diag(torch.tensor([1.0, 4.0, 1.0], dtype=torch.float64))
        assert torch.allclose(cov, expected, atol=1e-12)

    def test_batched_matches_single(self):
        g = torch.Generator().manual_seed(0)
        q = torch.randn(5, 4, generator=g, dtype=torch.float64)
        s = torch.randn(5, 3, generator=g, dtype=torch.float64) * 0.3
        batched = build_covariance(q, s)
        for i in range(5):
            assert torch.allclose(batched[i], build_covariance(q[i], s[i]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           st.lists(st.floats(-2, 1.5), min_size=3, max_size=3))
    def test_symmetric_positive_definite(self, q_raw, s_raw):
        q = torch.tensor(q_raw, dtype=torch.float64)
        if float(q.norm()) < 1e-3:
            q = _q(1, 0, 0, 0)
        cov = build_covariance(q, torch.tensor(s_raw, dtype=torch.float64))
        assert torch.allclose(cov, cov.T, atol=1e-12)
        eigs = torch.linalg.eigvalsh(cov)
        assert bool((eigs > 0).all())
        expected = torch.exp(2.0 * torch.tensor(sorted(s_raw), dtype=torch.float64))
        assert torch.allclose(torch.sort(eigs).values, expected, rtol=1e-8)

    def test_rotation_equivariance(self):
        g = torch.Generator().manual_seed(3)
        q1 = torch.nn.functional.normalize(torch.randn(4, generator=g, dtype=torch.float64), dim=0)
        q2 = torch.nn.functional.normalize(torch.randn(4, generator=g, dtype=torch.float64), dim=0)
        s = torch.randn(3, generator=g, dtype=torch.float64) * 0.5
        lhs = build_covariance(quaternion_multiply(q2, q1), s)
        R2 = quaternion_to_rotation(q2)
        rhs = R2 @ build_covariance(q1, s) @ R2.T
        assert torch.allclose(lhs, rhs, atol=1e-12)


class TestEvalSH:
    def test_degree0_constant_band(self):
        c = 1.3
        coeffs = torch.full((1, 3), c, dtype=torch.float64)
        out = eval_sh(coeffs, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), 0)
        assert torch.allclose(out, torch.full((3,), 0.2820948 * c + 0.5, dtype=torch.float64),
                              atol=1e-6)

    def test_degree0_pure_red(self):
        c = 0.5 / SH_C0
        coeffs = torch.tensor([[c, -c, -c]], dtype=torch.float64)
        out = eval_sh(coeffs, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), 0)
        assert torch.allclose(out, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), atol=1e-12)

    @pytest.mark.parametrize("degree", [0, 1, 2, 3])
    def test_zero_coeffs_midgray(self, degree):
        coeffs = torch.zeros(sh_band_count(degree), 3, dtype=torch.float64)
        d = torch.nn.functional.normalize(torch.tensor([0.3, -0.2, 0.9], dtype=torch.float64), dim=0)
        out = eval_sh(coeffs, d, degree)
        assert torch.allclose(out, torch.full((3,), 0.5, dtype=torch.float64))

    def test_degree0_view_independent(self):
        g = torch.Generator().manual_seed(7)
        coeffs = torch.randn(1, 3, generator=g, dtype=torch.float64)
        dirs = torch.nn.functional.normalize(torch.randn(10, 3, generator=g, dtype=torch.float64), dim=-1)
        outs = eval_sh(coeffs.expand(10, 1, 3), dirs, 0)
        assert torch.allclose(outs, outs[0].expand_as(outs))

    def test_band_mismatch_raises(self):
        with pytest.raises(ValueError):
            eval_sh(torch.zeros(4, 3), torch.tensor([0.0, 0.0, 1.0]), 0)

    def test_band0_inversion_roundtrip(self):
        rgb = torch.tensor([0.25, 0.5, 0.9], dtype=torch.float64)
        coeffs = rgb_to_band0(rgb).reshape(1, 3)
        out = eval_sh(coeffs, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), 0)
        assert torch.allclose(out, rgb, atol=1e-12)


class TestGaussianWeight:
    def test_center_is_one(self):
        cov = torch.tensor([[2.0, 0.3], [0.3, 1.5]], dtype=torch.float64)
        w = gaussian_weight(cov, torch.zeros(2, dtype=torch.float64))
        assert float(w) == 1.0

    def test_unit_isotropic(self):
        w = gaussian_weight(torch.eye(2, dtype=torch.float64),
                            torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert math.isclose(float(w), math.exp(-0.5), rel_tol=1e-12)

    def test_anisotropic_hand_value(self):
        cov = torch.diag(torch.tensor([4.0, 1.0], dtype=torch.float64))
        w = gaussian_weight(cov, torch.tensor([2.0, 0.0], dtype=torch.float64))
        assert math.isclose(float(w), math.exp(-0.5), rel_tol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.1, 4.0), st.floats(0.1, 4.0), st.floats(-0.9, 0.9),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_monotone_along_rays(self, a, c, rho, dx, dy):
        b = rho * math.sqrt(a * c)
        cov = torch.tensor([[a, b], [b, c]], dtype=torch.float64)
        d = torch.tensor([dx, dy], dtype=torch.float64)
        scales = torch.linspace(0, 3, 20, dtype=torch.float64)
        w = gaussian_weight(cov.expand(20, 2, 2), scales.unsqueeze(-1) * d)
        assert bool((w[1:] <= w[:-1] + 1e-15).all())


class TestGaussianCloud:
    def _cloud(self, n=3, degree=1):
        return GaussianCloud(
            positions=torch.zeros(n, 3),
            rotations=torch.tensor([[1.0, 0, 0, 0]]).expand(n, 4).clone(),
            log_scales=torch.zeros(n, 3),
            opacity_logits=torch.zeros(n, 1),
            sh_coeffs=torch.zeros(n, sh_band_count(degree), 3),
        )

    def test_shapes_validated(self):
        with pytest.raises(ValueError):
            GaussianCloud(positions=torch.zeros(0, 3), rotations=torch.zeros(0, 4),
                          log_scales=torch.zeros(0, 3), opacity_logits=torch.zeros(0, 1),
                          sh_coeffs=torch.zeros(0, 1, 3))
        with pytest.raises(ValueError):
            GaussianCloud(positions=torch.zeros(2, 3), rotations=torch.zeros(2, 4),
                          log_scales=torch.zeros(2, 3), opacity_logits=torch.zeros(2, 1),
                          sh_coeffs=torch.zeros(2, 5, 3))

    def test_activations(self):
        c = self._cloud()
        assert torch.allclose(c.scales, torch.ones(3, 3))
        assert torch.allclose(c.opacities, torch.full((3, 1), 0.5))
        assert c.sh_degree == 1

    def test_renormalize(self):
        c = self._cloud()
        with torch.no_grad():
            c.rotations *= 3.0
        c.renormalize_rotations_()
        assert torch.allclose(c.rotations.norm(dim=-1), torch.ones(3))


class TestCamera:
    def test_world_to_camera_inverts_T(self):
        g = torch.Generator().manual_seed(11)
        q = torch.nn.functional.normalize(torch.randn(4, generator=g, dtype=torch.float64), dim=0)
        T = torch.eye(4, dtype=torch.float64)
        T[:3, :3] = quaternion_to_rotation(q)
        T[:3, 3] = torch.randn(3, generator=g, dtype=torch.float64)
        cam = Camera(K=torch.tensor([[50.0, 0, 32], [0, 50.0, 24], [0, 0, 1]], dtype=torch.float64),
                     T=T, width=64, height=48)
        W = cam.world_to_camera()
        assert torch.allclose(W @ T, torch.eye(4, dtype=torch.float64), atol=1e-12)

    def test_invalid_cameras_rejected(self):
        K = torch.tensor([[50.0, 0, 32], [0, 50.0, 24], [0, 0, 1]])
        with pytest.raises(ValueError):
            Camera(K=K, T=torch.eye(4) * 2.0, width=64, height=48)
        bad_K = K.clone()
        bad_K[0, 0] = -1.0
        with pytest.raises(ValueError):
            Camera(K=bad_K, T=torch.eye(4), width=64, height=48)
        with pytest.raises(ValueError):
            Camera(K=K, T=torch.eye(4), width=64, height=48, near=5.0, far=1.0)
