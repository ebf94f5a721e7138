import math

import numpy as np
import pytest

from nlheat.operator import (
    BFunction,
    Jb_kernel,
    apply_frac_laplacian,
    apply_sb,
    apply_sb_compensated,
    check_lower_kernel_condition,
    check_positivity_condition,
    get_jump_quadrature,
    get_tail_integral,
    hat_b,
    jb_kernel,
    normalizing_constant,
    piecewise_power_symbol,
    preset,
    scale_b,
    tail_stats,
)
from nlheat.params import ModelParams
from nlheat.stable import get_profile

P15 = ModelParams(1, 1.5, 0.5)
P12 = ModelParams(1, 1.2, 0.6)

# frozen Fourier-side oracle: -(1/pi) int u^{1/2} e^{-u^{3/2}} cos(u x) du
SB_P0_ORACLE = {0.0: -0.21220659078919346, 0.5: -0.1827348610702528,
                1.5: -0.048975095070436604}
# frozen heat-equation oracle: -(1/pi) int u^{3/2} e^{-u^{3/2}} cos(0.7 u) du
FRACLAP_P0_AT_07 = -0.10506940214171456


class TestNormalizingConstant:
    def test_d1_gamma1_is_inv_pi(self):
        assert normalizing_constant(1, 1.0) == pytest.approx(1 / math.pi, rel=1e-12)

    @pytest.mark.parametrize("d,g", [(1, 0.5), (1, 1.2), (1, 1.9), (2, 0.6),
                                     (3, 1.5)])
    def test_closed_form_passes_identity_check(self, d, g):
        val = normalizing_constant(d, g)
        ref = (g * 2.0 ** (g - 1.0) * math.gamma((d + g) / 2.0)
               / (math.pi ** (d / 2.0) * math.gamma(1.0 - g / 2.0)))
        assert val == pytest.approx(ref, rel=1e-12)

    def test_multiplier_identity_at_sample_frequencies(self):
        # A * int (cos(xi z) - 1)|z|^{-1-g} dz == -|xi|^g at xi in {0.5,1,2},
        # evaluated through the exact piecewise-power representation
        for g in (0.5, 1.2):
            xi = np.array([0.5, 1.0, 2.0])
            sym = piecewise_power_symbol(xi, [(1.0, 0.0, 0.0, math.inf)], g)
            assert np.max(np.abs(sym + xi**g)) < 1e-6

    def test_graded_quadrature_multiplier_fallback(self):
        # the graded rule (used when the radial factor has no power form)
        # is percent-level at moderate frequencies
        quad = get_jump_quadrature(0.5)
        A = normalizing_constant(1, 0.5)
        xi = np.array([0.5, 1.0, 2.0])
        sym = quad.multiplier(xi, lambda w: np.ones_like(w), A, tail_amp=1.0)
        assert np.max(np.abs(sym / (-(xi**0.5)) - 1.0)) < 2e-2

    def test_gamma_out_of_range(self):
        with pytest.raises(ValueError):
            normalizing_constant(1, 2.0)


class TestTailIntegral:
    @pytest.mark.parametrize("g", [0.4, 0.6, 1.2, 1.7])
    def test_regimes_are_continuous(self, g):
        J = get_tail_integral(g)
        for seam in (6.0, 40.0):
            lo = float(J(np.array([seam * (1 - 1e-9)]))[0])
            hi = float(J(np.array([seam * (1 + 1e-9)]))[0])
            # any jump beyond the local slope * 2 delta is a regime mismatch
            slope = 2.0 * seam ** (-1.0 - g)
            assert abs(lo - hi) < slope * 4e-9 * seam + 1e-9 * abs(hi)

    def test_large_argument_asymptote(self):
        J = get_tail_integral(0.6)
        z = 3000.0
        assert float(J(np.array([z]))[0]) == pytest.approx(-z**-0.6 / 0.6, rel=1e-2)

    def test_exact_symbol_constant_kernel(self):
        b = preset("constant:1", P12)
        xi = np.array([1e-3, 0.3, 1.0, 30.0, 500.0])
        sym = piecewise_power_symbol(xi, b.pieces, 0.6)
        assert np.max(np.abs(sym / (-np.abs(xi) ** 0.6) - 1.0)) < 1e-12


class TestApplySb:
    def test_constant_function_annihilated(self):
        b = preset("constant:1", P15)
        val = apply_sb(b, P15, lambda y: np.ones_like(np.asarray(y, dtype=float)), 0.3)
        assert abs(val) < 1e-10

    @pytest.mark.parametrize("x", [0.0, 0.5, 1.5])
    def test_matches_fourier_oracle_on_p0(self, x):
        prof = get_profile(1.5)
        b = preset("constant:1", P15)
        val = apply_sb(b, P15, lambda y: prof.p0(1.0, y), x)
        assert val == pytest.approx(SB_P0_ORACLE[x], rel=1e-6)

    def test_b_one_reduces_to_frac_laplacian(self):
        prof = get_profile(1.5)
        f = lambda y: prof.p0(1.0, y)
        b = preset("constant:1", P15)
        v1 = apply_sb(b, P15, f, 0.7)
        v2 = apply_frac_laplacian(0.5, P15, f, 0.7)
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_heat_equation_oracle(self):
        # gamma = alpha: operator application equals the time derivative
        prof = get_profile(1.5)
        f = lambda y: prof.p0(1.0, y)
        got = apply_frac_laplacian(1.5, P15, f, 0.7)
        assert got == pytest.approx(FRACLAP_P0_AT_07, rel=1e-6)
        eps = 1e-5
        dt = (prof.p0(1.0 + eps, 0.7) - prof.p0(1.0 - eps, 0.7)) / (2 * eps)
        assert got == pytest.approx(dt, rel=1e-4)

    def test_linearity(self):
        prof = get_profile(1.5)
        f1 = lambda y: prof.p0(1.0, y)
        f2 = lambda y: prof.p0(2.0, y)
        b = preset("constant:1", P15)
        lhs = apply_sb(b, P15, lambda y: 2.0 * f1(y) + 3.0 * f2(y), 0.4)
        rhs = 2.0 * apply_sb(b, P15, f1, 0.4) + 3.0 * apply_sb(b, P15, f2, 0.4)
        assert lhs == pytest.approx(rhs, rel=1e-12)
        b2 = preset("constant:2", P15)
        assert apply_sb(b2, P15, f1, 0.4) == pytest.approx(
            2.0 * apply_sb(b, P15, f1, 0.4), rel=1e-12)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 3.0])
    def test_truncation_radius_immaterial(self, lam):
        # the compensated form with any radius equals the symmetrized form
        prof = get_profile(1.5)
        f = lambda y: prof.p0(1.0, y)
        gf = lambda y: (prof.p0(1.0, np.abs(y) + 1e-6)
                        - prof.p0(1.0, np.abs(y) - 1e-6)) / 2e-6 * np.sign(y)
        b = preset("constant:1", P15)
        sym = apply_sb(b, P15, f, 0.7)
        comp = apply_sb_compensated(b, P15, f, gf, 0.7, lam)
        assert comp == pytest.approx(sym, rel=1e-8)

    def test_mass_conservation_of_generator(self):
        # integral over x of the generator applied to p0 vanishes
        prof = get_profile(1.5)
        f = lambda y: prof.p0(0.5, y)
        xs = np.linspace(-30.0, 30.0, 601)
        vals = np.array([apply_frac_laplacian(1.5, P15, f, x) for x in xs])
        assert abs(np.trapezoid(vals, xs)) < 5e-3

    def test_d2_constant_annihilated(self):
        p2 = ModelParams(2, 1.3, 0.6)
        b = preset("constant:1", p2)
        val = apply_sb(b, p2, lambda y: np.ones(np.asarray(y).shape[:-1]
                                                if np.asarray(y).ndim > 1 else ()),
                       [0.1, -0.2])
        assert abs(val) < 1e-9


class TestJumpKernels:
    def test_pure_stable_kernel(self):
        b0 = preset("constant:0", P15)
        z = np.array([0.5, 2.0])
        got = jb_kernel(b0, P15, 0.0, z)
        A = normalizing_constant(1, 1.5)
        assert got == pytest.approx(A * np.abs(z) ** -2.5, rel=1e-12)

    def test_constant_b_substitution(self):
        b1 = preset("constant:1", P15)
        got = jb_kernel(b1, P15, 0.0, 1.0)
        ref = normalizing_constant(1, 1.5) + normalizing_constant(1, 0.5)
        assert got == pytest.approx(ref, rel=1e-12)

    def test_critical_negative_annihilates(self):
        bc = preset("critical-negative:0.5", P15)
        z = np.array([0.6, 1.0, 4.0, 50.0])
        assert np.max(np.abs(jb_kernel(bc, P15, 0.0, z))) < 1e-12

    def test_Jb_shift(self):
        b1 = preset("constant:1", P15)
        assert Jb_kernel(b1, P15, 1.0, 3.0) == pytest.approx(
            jb_kernel(b1, P15, 1.0, 2.0))

    def test_singularity_rejected(self):
        with pytest.raises(ValueError):
            jb_kernel(preset("constant:0", P15), P15, 0.0, np.array([0.0]))


class TestConditions:
    Z = np.geomspace(0.05, 200.0, 80)

    def test_zero_coefficient_holds(self):
        rep = check_positivity_condition(preset("constant:0", P15), P15, [0.0], self.Z)
        assert rep.holds and rep.worst_violation == pytest.approx(1.0)

    def test_minus_one_violates_at_large_z(self):
        rep = check_positivity_condition(preset("constant:-1", P15), P15, [0.0], self.Z)
        assert not rep.holds
        assert abs(rep.arg_worst[1]) == pytest.approx(self.Z[-1])

    def test_boundary_case_margin_zero(self):
        bc = preset("critical-negative:0.01", P15)
        rep = check_positivity_condition(bc, P15, [0.0], self.Z)
        assert rep.holds
        assert rep.worst_violation == pytest.approx(0.0, abs=1e-10)

    def test_lower_kernel_zero_b_M1(self):
        assert check_lower_kernel_condition(preset("constant:0", P15), P15, 1.0,
                                            [0.0], self.Z)

    def test_lower_kernel_small_compact_b(self):
        b = preset("truncated:0.05,0,1", P15)
        assert check_lower_kernel_condition(b, P15, 2.0, [0.0], self.Z)

    def test_lower_kernel_constant_one_fails(self):
        assert not check_lower_kernel_condition(preset("constant:1", P15), P15,
                                                100.0, [0.0], self.Z)


class TestCoefficientTransforms:
    def test_scale_constant(self):
        b = preset("constant:2", P15)
        s = scale_b(b, 2.0, P15)
        assert s(0.3, 1.0) == pytest.approx(2.0 * 2.0 ** (0.5 / 1.5 - 1.0))
        assert s.sup_norm == pytest.approx(b.sup_norm * 2.0 ** (0.5 / 1.5 - 1.0))

    def test_scale_preserves_pieces_semantics(self):
        b = preset("truncated:1,0,1", P12)
        s = scale_b(b, 2.0, P12)
        # support boundary moves to lam^{1/alpha}
        edge = 2.0 ** (1.0 / 1.2)
        assert s(0.0, edge * 0.99) != 0.0
        assert s(0.0, edge * 1.01) == 0.0
        assert s.pieces[0][3] == pytest.approx(edge)

    def test_tail_stats_constant(self):
        ts = tail_stats(preset("constant:1", P15), 1.0, n_samples=2000)
        assert ts.m_lower == pytest.approx(1.0) and ts.M_upper == pytest.approx(1.0)
        assert ts.m_plus == pytest.approx(1.0) and ts.M_plus == pytest.approx(1.0)

    def test_hat_of_minus_one(self):
        bh = hat_b(preset("constant:-1", P15), 1.0)
        assert bh(0.0, 0.5) == pytest.approx(-1.0)
        assert bh(0.0, 2.0) == pytest.approx(0.0)
        assert bh.phi(0.5) == pytest.approx(-1.0)
        assert bh.phi(2.0) == pytest.approx(0.0)

    def test_symmetrization_warns(self):
        with pytest.warns(UserWarning):
            BFunction(fn=lambda x, z: np.asarray(z, dtype=float), sup_norm=10.0,
                      b_id="odd")

    def test_sde_preset_sigma(self):
        b = preset("sde:1/(1+x**2)", P12)
        assert b.x_dependent and b.sigma_nonneg
        assert b.sigma(0.0) == pytest.approx(1.0)
        assert b(2.0, 5.0) == pytest.approx((1.0 / 5.0) ** 0.6)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset("nope:1", P15)
