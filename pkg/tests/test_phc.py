"""PHC/PHM layers: weight construction against hand Kronecker sums and the
Hamilton-product oracle, the parameter law, degeneration to real layers,
initialization schemes, differentiability in A and F."""

import numpy as np
import numpy.testing as npt
import pytest

from phcnet import autograd as ag
from phcnet import phc
from phcnet import tensor as T
from phcnet.errors import ConfigError, ShapeError


class TestBuildWeight:
    def test_n1_degenerates_to_single_filter(self):
        layer = phc.PHCConv2d(1, 3, 2, 3, padding=1, seed=0)
        layer.A.value[...] = 1.0
        npt.assert_array_equal(layer.build_weight().value, layer.F.value[0])

    def test_n2_hand_kronecker_sum(self):
        # A0=I, A1=[[0,-1],[1,0]], scalar filters a=2, b=3 -> [[2,-3],[3,2]]
        layer = phc.PHCConv2d(2, 2, 2, 1, seed=0)
        layer.A.value[...] = phc.complex_algebra()
        layer.F.value[0] = 2.0
        layer.F.value[1] = 3.0
        w = layer.build_weight().value[:, :, 0, 0]
        npt.assert_array_equal(w, [[2.0, -3.0], [3.0, 2.0]])

    def test_n4_equals_hamilton_block_matrix(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            f = rng.normal(size=(4, 2, 3, 3, 3))
            layer = phc.PHCConv2d(4, 12, 8, 3, seed=trial, dtype=np.float64)
            layer.A.value[...] = phc.quaternion_algebra()
            layer.F.value[...] = f
            built = layer.build_weight().value
            oracle = phc.hamilton_weight(f[0], f[1], f[2], f[3])
            npt.assert_array_equal(built, oracle)  # exact, binary64

    def test_linear_in_each_filter_bank(self):
        rng = np.random.default_rng(1)
        layer = phc.PHCConv2d(2, 4, 4, 3, seed=5)
        f0 = rng.normal(size=layer.F.shape).astype(np.float32)
        f1 = rng.normal(size=layer.F.shape).astype(np.float32)
        alpha, beta = 0.7, -1.9

        def weight_for(f):
            layer.F.value[...] = f
            return layer.build_weight().value

        combined = weight_for(alpha * f0 + beta * f1)
        separate = alpha * weight_for(f0) + beta * weight_for(f1)
        npt.assert_allclose(combined, separate, rtol=1e-6, atol=1e-6)

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            phc.PHCConv2d(2, 3, 4, 3)
        with pytest.raises(ConfigError):
            phc.PHCConv2d(4, 8, 6, 3)
        with pytest.raises(ConfigError):
            phc.PHMLinear(2, 5, 4)


class TestForward:
    def test_n1_matches_standard_conv(self):
        rng = np.random.default_rng(2)
        layer = phc.PHCConv2d(1, 3, 5, 3, stride=2, padding=1, seed=3)
        layer.A.value[...] = 1.0
        x = rng.normal(size=(2, 3, 9, 9)).astype(np.float32)
        out = layer(ag.constant(x)).value
        ref = T.conv2d(x, layer.F.value[0], layer.bias.value, stride=2, padding=1)
        assert np.abs(out - ref).max() < 1e-6

    def test_n4_matches_hamilton_conv(self):
        rng = np.random.default_rng(3)
        layer = phc.PHCConv2d(4, 8, 4, 3, padding=1, bias=False, seed=4)
        layer.A.value[...] = phc.quaternion_algebra()
        x = rng.normal(size=(2, 8, 6, 6)).astype(np.float32)
        out = layer(ag.constant(x)).value
        f = layer.F.value
        ref = phc.hamilton_conv(x, f[0], f[1], f[2], f[3], padding=1)
        scale = max(np.abs(ref).max(), 1.0)
        assert np.abs(out - ref).max() / scale < 1e-6

    def test_zero_input_gives_bias(self):
        layer = phc.PHCConv2d(2, 2, 4, 3, padding=1, seed=6)
        layer.bias.value[...] = np.arange(4.0)
        out = layer(ag.constant(np.zeros((1, 2, 5, 5), dtype=np.float32))).value
        npt.assert_allclose(out[0, :, 2, 2], np.arange(4.0), atol=1e-7)

    def test_phm_n1_is_dense(self):
        rng = np.random.default_rng(4)
        layer = phc.PHMLinear(1, 6, 3, seed=7)
        layer.A.value[...] = 1.0
        x = rng.normal(size=(4, 6)).astype(np.float32)
        out = layer(ag.constant(x)).value
        ref = x @ layer.F.value[0].T + layer.bias.value
        npt.assert_allclose(out, ref, rtol=1e-6, atol=1e-6)

    def test_phm_n2_hand_matrix_vector(self):
        layer = phc.PHMLinear(2, 2, 2, bias=False, seed=0)
        layer.A.value[...] = phc.complex_algebra()
        layer.F.value[0] = 2.0
        layer.F.value[1] = 3.0
        out = layer(ag.constant(np.array([[1.0, 0.0]], dtype=np.float32))).value
        npt.assert_allclose(out, [[2.0, 3.0]])  # first column of [[2,-3],[3,2]]

    def test_phm_zero_input_gives_bias(self):
        layer = phc.PHMLinear(2, 4, 4, seed=1)
        layer.bias.value[...] = [1.0, 2.0, 3.0, 4.0]
        out = layer(ag.constant(np.zeros((2, 4), dtype=np.float32))).value
        npt.assert_allclose(out, np.tile([1.0, 2.0, 3.0, 4.0], (2, 1)), atol=1e-7)


class TestHamiltonConv:
    def test_zero_imaginary_banks_block_diagonal(self):
        rng = np.random.default_rng(5)
        w0 = rng.normal(size=(2, 1, 3, 3))
        zero = np.zeros_like(w0)
        x = rng.normal(size=(1, 4, 5, 5))
        out = phc.hamilton_conv(x, w0, zero, zero, zero, padding=1)
        for comp in range(4):
            ref = T.conv2d(x[:, comp : comp + 1], w0, padding=1)
            npt.assert_allclose(out[:, 2 * comp : 2 * comp + 2], ref, atol=1e-6)

    def test_quaternion_identity_kernel(self):
        x = np.random.default_rng(6).normal(size=(2, 4, 4, 4))
        one = np.ones((1, 1, 1, 1))
        zero = np.zeros((1, 1, 1, 1))
        out = phc.hamilton_conv(x, one, zero, zero, zero)
        npt.assert_allclose(out, x, atol=1e-7)

    def test_dual_construction_agreement(self):
        rng = np.random.default_rng(7)
        banks = rng.normal(size=(4, 3, 2, 3, 3))
        weight = T.kron(phc.quaternion_algebra()[0], banks[0])
        for i in range(1, 4):
            weight = weight + T.kron(phc.quaternion_algebra()[i], banks[i])
        x = rng.normal(size=(2, 8, 6, 6))
        via_weight = T.conv2d(x, weight, padding=1)
        via_oracle = phc.hamilton_conv(x, *banks, padding=1)
        npt.assert_allclose(via_weight, via_oracle, rtol=1e-6, atol=1e-6)

    def test_channel_constraint(self):
        with pytest.raises(ShapeError):
            phc.hamilton_conv(np.ones((1, 6, 4, 4)), *np.ones((4, 1, 1, 3, 3)))


class TestParamCounting:
    def test_counting_oracle_n2(self):
        layer = phc.PHCConv2d(2, 64, 64, 3, bias=False)
        assert phc.param_count(layer) == 8 + 2 * (32 * 32 * 9) == 18440
        assert phc.real_equivalent_count(layer) == 36864
        assert abs(phc.param_ratio(layer) - 0.50022) < 1e-4

    def test_counting_oracle_n4(self):
        layer = phc.PHCConv2d(4, 64, 64, 3, bias=False)
        assert phc.param_count(layer) == 64 + 4 * (16 * 16 * 9) == 9280
        assert abs(phc.param_ratio(layer) - 0.2517) < 1e-3

    def test_n1_ratio_overhead_is_one_scalar(self):
        layer = phc.PHCConv2d(1, 8, 8, 3, bias=False)
        expected = 1.0 + 1.0 / (8 * 8 * 9)
        assert phc.param_ratio(layer) == pytest.approx(expected)

    @pytest.mark.parametrize("n,cin,cout,k", [(1, 4, 8, 1), (2, 4, 8, 3),
                                              (4, 8, 16, 5), (8, 8, 16, 3)])
    def test_closed_form_all_orders(self, n, cin, cout, k):
        layer = phc.PHCConv2d(n, cin, cout, k, bias=True,
                              scheme="random-algebra")
        expected = n**3 + cout * cin * k * k // n + cout
        assert phc.param_count(layer) == expected

    def test_phm_closed_form(self):
        layer = phc.PHMLinear(2, 8, 6, bias=True)
        assert phc.param_count(layer) == 8 + 8 * 6 // 2 + 6


class TestInit:
    def test_fixed_algebra_n4_is_quaternion(self):
        layer = phc.PHCConv2d(4, 4, 4, 3, scheme="fixed-algebra", seed=0)
        npt.assert_array_equal(layer.A.value, phc.quaternion_algebra())

    def test_fixed_algebra_n1(self):
        layer = phc.PHCConv2d(1, 1, 1, 3, scheme="fixed-algebra", seed=0)
        npt.assert_array_equal(layer.A.value, [[[1.0]]])

    def test_fixed_algebra_unsupported_n(self):
        with pytest.raises(ConfigError):
            phc.PHCConv2d(3, 3, 3, 3, scheme="fixed-algebra")

    def test_same_seed_bitwise_identical(self):
        a = phc.PHCConv2d(2, 4, 4, 3, scheme="random-algebra", seed=123)
        b = phc.PHCConv2d(2, 4, 4, 3, scheme="random-algebra", seed=123)
        npt.assert_array_equal(a.A.value, b.A.value)
        npt.assert_array_equal(a.F.value, b.F.value)

    def test_random_algebra_range(self):
        layer = phc.PHCConv2d(4, 4, 4, 3, scheme="random-algebra", seed=9)
        assert np.all(np.abs(layer.A.value) <= 0.25)

    def test_kaiming_bound(self):
        layer = phc.PHCConv2d(2, 8, 8, 3, seed=11)
        bound = np.sqrt(6.0 / (8 * 3 * 3))
        assert np.all(np.abs(layer.F.value) <= bound)
        assert np.abs(layer.F.value).max() > 0.5 * bound  # actually spread out

    def test_algebra_stays_trainable(self):
        layer = phc.PHCConv2d(2, 2, 2, 1, seed=0)
        assert layer.A.requires_grad


class TestDifferentiability:
    def test_grad_wrt_A_and_F(self):
        rng = np.random.default_rng(8)
        layer = phc.PHCConv2d(2, 4, 4, 3, padding=1, seed=13, dtype=np.float64)
        x = ag.constant(rng.normal(size=(2, 4, 5, 5)))

        def f():
            out = layer(x)
            return ag.nsum(ag.mul(out, out))

        report = ag.grad_check(f, dict(layer.named_parameters()), h=1e-6, tol=1e-5)
        assert report.passed, report.per_param

    def test_phm_grad(self):
        rng = np.random.default_rng(9)
        layer = phc.PHMLinear(2, 6, 4, seed=17, dtype=np.float64)
        x = ag.constant(rng.normal(size=(3, 6)))

        def f():
            out = layer(x)
            return ag.nsum(ag.mul(out, out))

        report = ag.grad_check(f, dict(layer.named_parameters()), h=1e-6, tol=1e-5)
        assert report.passed, report.per_param

    def test_degeneration_linear_identity(self):
        # n=1 forward equals conv2d with W = A000 * F0 for any A000
        rng = np.random.default_rng(10)
        layer = phc.PHCConv2d(1, 2, 3, 3, padding=1, bias=False, seed=19)
        layer.A.value[...] = -1.7
        x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
        out = layer(ag.constant(x)).value
        ref = T.conv2d(x, -1.7 * layer.F.value[0], padding=1)
        npt.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)
