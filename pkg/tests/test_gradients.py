import numpy as np
import pytest
import torch

from inrinvert.gradients import (
    GradientReport,
    LayerBlock,
    NumericalOverflowError,
    ParamLayout,
    ParamVector,
    evaluate_with_gradient,
    finite_difference_gradient,
)
from inrinvert.inr import INRSpec, finer_layer, init_finer, render_t
from inrinvert.inr import CoordinateGrid


def small_layout():
    return ParamLayout((LayerBlock(3, 2), LayerBlock(2, 3)))


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


class TestParamVector:
    def test_roundtrip_flatten_unflatten_identity(self, rng):
        layout = small_layout()
        values = rng.standard_normal(layout.total_size)
        pv = ParamVector(values.copy(), layout)
        rebuilt = ParamVector.from_blocks(
            [(np.asarray(w), np.asarray(b)) for w, b in pv.blocks()], layout)
        assert np.array_equal(rebuilt.values, pv.values)

    def test_length_must_match_layout(self):
        layout = small_layout()
        with pytest.raises(ValueError):
            ParamVector(np.zeros(layout.total_size + 1), layout)

    def test_split_shapes(self):
        layout = small_layout()
        pv = ParamVector(np.arange(layout.total_size, dtype=np.float64), layout)
        (w0, b0), (w1, b1) = pv.blocks()
        assert w0.shape == (3, 2) and b0.shape == (3,)
        assert w1.shape == (2, 3) and b1.shape == (2,)
        # slicing is layout-ordered: W then b per block
        assert w0[0, 0] == 0 and b0[0] == 6

    def test_gradient_report_requires_finite_loss(self):
        layout = small_layout()
        pv = ParamVector(np.zeros(layout.total_size), layout)
        with pytest.raises(ValueError):
            GradientReport(pv, float("nan"))


class TestEvaluateWithGradient:
    def test_quadratic_by_hand(self):
        layout = ParamLayout((LayerBlock(1, 1, has_bias=False),))
        pv = ParamVector(np.array([3.0]), layout)
        rep = evaluate_with_gradient(lambda x: (x * x).sum(), pv)
        assert rep.loss_value == pytest.approx(9.0)
        assert rep.gradient.values[0] == pytest.approx(6.0)

    def test_sin_at_origin(self):
        layout = ParamLayout((LayerBlock(1, 1, has_bias=False),))
        pv = ParamVector(np.array([0.0]), layout)
        rep = evaluate_with_gradient(lambda x: torch.sin(x).sum(), pv)
        assert rep.loss_value == pytest.approx(0.0)
        assert rep.gradient.values[0] == pytest.approx(1.0)

    def test_finer_layer_gradient_vs_central_differences(self, rng):
        # Analytic vs finite differences (h = 1e-5, 64-bit) on a random 4x4 layer.
        layout = ParamLayout((LayerBlock(4, 4),))
        z = torch.from_numpy(rng.standard_normal(4))

        def loss(flat):
            (w_b,) = layout.split(flat)
            out = finer_layer(z, w_b[0], w_b[1], 25.0)
            return (out * out).sum()

        for _ in range(5):
            pv = ParamVector(rng.uniform(-0.5, 0.5, layout.total_size), layout)
            rep = evaluate_with_gradient(loss, pv)
            fd = finite_difference_gradient(loss, pv, 1e-5)
            assert rel_err(rep.gradient.values, fd.values) < 1e-6

    def test_deterministic_bitwise(self, rng):
        layout = small_layout()
        pv = ParamVector(rng.standard_normal(layout.total_size), layout)

        def loss(x):
            return torch.sin(x).sum() + (x**3).sum()

        r1 = evaluate_with_gradient(loss, pv)
        r2 = evaluate_with_gradient(loss, pv)
        assert r1.loss_value == r2.loss_value
        assert np.array_equal(r1.gradient.values, r2.gradient.values)

    def test_gradient_linearity(self, rng):
        layout = small_layout()
        pv = ParamVector(rng.standard_normal(layout.total_size), layout)
        f = lambda x: (x**2).sum()
        g = lambda x: torch.sin(x).sum()
        gf = evaluate_with_gradient(f, pv).gradient.values
        gg = evaluate_with_gradient(g, pv).gradient.values
        gsum = evaluate_with_gradient(lambda x: f(x) + g(x), pv).gradient.values
        assert np.allclose(gsum, gf + gg, rtol=1e-12, atol=1e-12)

    def test_nonfinite_loss_raises(self):
        layout = ParamLayout((LayerBlock(1, 1, has_bias=False),))
        pv = ParamVector(np.array([0.0]), layout)
        with pytest.raises(NumericalOverflowError):
            evaluate_with_gradient(lambda x: (1.0 / x).sum(), pv)

    def test_abs_subgradient_at_zero_is_zero(self):
        layout = ParamLayout((LayerBlock(1, 1, has_bias=False),))
        pv = ParamVector(np.array([0.0]), layout)
        rep = evaluate_with_gradient(lambda x: x.abs().sum(), pv)
        assert rep.gradient.values[0] == 0.0


class TestFiniteDifference:
    def test_linear_loss_exact(self, rng):
        layout = small_layout()
        c = rng.standard_normal(layout.total_size)
        ct = torch.from_numpy(c)
        pv = ParamVector(rng.standard_normal(layout.total_size), layout)
        fd = finite_difference_gradient(lambda x: (ct * x).sum(), pv, 1e-4)
        assert np.allclose(fd.values, c, rtol=1e-9, atol=1e-9)

    def test_constant_loss_zero(self, rng):
        layout = small_layout()
        pv = ParamVector(rng.standard_normal(layout.total_size), layout)
        fd = finite_difference_gradient(lambda x: torch.tensor(4.2, dtype=torch.float64), pv, 1e-5)
        assert np.all(fd.values == 0)

    def test_step_must_be_positive(self):
        layout = small_layout()
        pv = ParamVector(np.zeros(layout.total_size), layout)
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda x: (x * x).sum(), pv, 0.0)

    def test_render_cosine_loss_self_consistency(self, rng):
        # FINER render + cosine-distance loss on an 8x8 grid: reverse mode
        # agrees with the finite-difference oracle in 64-bit.
        spec = INRSpec(hidden_width=6, hidden_layers=2)
        weights = init_finer(spec, 11, dtype=np.float64)
        coords = CoordinateGrid(8, 8).coords_t()
        target = rng.standard_normal((8, 8, 3))
        target /= np.linalg.norm(target)
        tt = torch.from_numpy(target)

        def loss(flat):
            img = render_t(flat, spec, coords, 8, 8)
            v = img / torch.linalg.vector_norm(img)
            return 1.0 - (v * tt).sum()

        rep = evaluate_with_gradient(loss, weights.params)
        fd = finite_difference_gradient(loss, weights.params, 1e-6)
        assert rel_err(rep.gradient.values, fd.values) < 1e-5
