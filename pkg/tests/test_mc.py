import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from nlheat.mc import (
    OccupationMonitor,
    SimConfig,
    compare_density,
    empirical_density,
    exit_probability,
    levy_monitor,
    levy_system_check,
    meyer_augment,
    sample_stable_increment,
    simulate_sde,
)
from nlheat.operator import normalizing_constant, preset
from nlheat.params import ModelParams
from nlheat.stable import eval_p0, eval_pa

P12 = ModelParams(1, 1.2, 0.6)
N_FAST = 20_000


def rng(seed=0):
    return np.random.default_rng(np.random.Philox(seed))


class TestStableSampling:
    def test_cauchy_quartiles(self):
        x = sample_stable_increment(1.0, 1.0, rng(1), 100_000)
        p = np.mean(np.abs(x) <= 1.0)
        assert p == pytest.approx(0.5, abs=3 * 0.5 / math.sqrt(100_000))
        assert np.median(x) == pytest.approx(0.0, abs=0.02)

    @pytest.mark.parametrize("alpha", [0.7, 1.2, 1.5, 1.9])
    def test_empirical_characteristic_function(self, alpha):
        n = 200_000
        x = sample_stable_increment(alpha, 1.0, rng(2), n)
        for xi in (0.5, 1.0, 2.0):
            ecf = np.mean(np.cos(xi * x))
            se = np.std(np.cos(xi * x)) / math.sqrt(n)
            assert abs(ecf - math.exp(-xi**alpha)) < 3.5 * se

    def test_time_scaling_law(self):
        a = 1.2
        x2 = sample_stable_increment(a, 2.0, rng(3), 50_000)
        x1 = 2.0 ** (1.0 / a) * sample_stable_increment(a, 1.0, rng(4), 50_000)
        assert ks_2samp(x2, x1).pvalue > 0.05

    def test_isotropic_d2(self):
        v = sample_stable_increment(1.3, 1.0, rng(5), 150_000, d=2)
        assert v.shape == (150_000, 2)
        ecf = np.mean(np.cos(v[:, 0]))
        assert ecf == pytest.approx(math.exp(-1.0), abs=0.01)
        # isotropy: same law along a rotated frame
        w = (v[:, 0] + v[:, 1]) / math.sqrt(2.0)
        assert np.mean(np.cos(w)) == pytest.approx(math.exp(-1.0), abs=0.01)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            sample_stable_increment(2.0, 1.0, rng())
        with pytest.raises(ValueError):
            sample_stable_increment(1.0, 0.0, rng())


class TestSimulate:
    def test_pure_stable_density(self):
        cfg = SimConfig(n_paths=N_FAST, dt=2e-3, horizon=0.5, seed=7,
                        save_times=(0.5,), log_jumps=False)
        ens = simulate_sde(None, P12, cfg)
        bins = np.linspace(-8.0, 8.0, 61)
        hist = empirical_density(ens, 0.5, bins)
        comp = compare_density(hist, lambda y: eval_p0(P12, 0.5, np.abs(y)))
        assert comp.max_z < 4.0
        assert comp.tv_distance < 0.05

    def test_unit_coefficient_density(self):
        cfg = SimConfig(n_paths=N_FAST, dt=2e-3, horizon=0.5, seed=8,
                        save_times=(0.5,), log_jumps=False)
        ens = simulate_sde(lambda x: np.ones_like(x), P12, cfg)
        hist = empirical_density(ens, 0.5, np.linspace(-8, 8, 61))
        comp = compare_density(hist, lambda y: eval_pa(P12, 1.0, 0.5, np.abs(y)))
        assert comp.max_z < 4.0

    def test_constant_power_weight(self):
        # c = a^{1/beta} realizes weight a
        a = 0.5
        c = a ** (1.0 / 0.6)
        cfg = SimConfig(n_paths=N_FAST, dt=2e-3, horizon=0.5, seed=9,
                        save_times=(0.5,), log_jumps=False)
        ens = simulate_sde(lambda x, c=c: c * np.ones_like(x), P12, cfg)
        hist = empirical_density(ens, 0.5, np.linspace(-8, 8, 61))
        comp = compare_density(hist, lambda y: eval_pa(P12, a, 0.5, np.abs(y)))
        assert comp.max_z < 4.0

    def test_determinism(self):
        cfg = SimConfig(n_paths=500, dt=1e-2, horizon=0.2, seed=42,
                        save_times=(0.2,))
        e1 = simulate_sde(None, P12, cfg)
        e2 = simulate_sde(None, P12, cfg)
        assert np.array_equal(e1.final, e2.final)
        assert np.array_equal(e1.jump_log["t"], e2.jump_log["t"])

    def test_self_comparison_zero_z(self):
        cfg = SimConfig(n_paths=2000, dt=1e-2, horizon=0.2, seed=1,
                        save_times=(0.2,), log_jumps=False)
        ens = simulate_sde(None, P12, cfg)
        bins = np.linspace(-6, 6, 25)
        hist = empirical_density(ens, 0.2, bins)

        def self_kernel(y):  # piecewise-constant density equal to the histogram
            y = np.asarray(y)
            idx = np.clip(np.searchsorted(bins, y) - 1, 0, len(bins) - 2)
            widths = np.diff(bins)
            return hist["p"][idx] / widths[idx]

        comp = compare_density(hist, self_kernel)
        assert comp.max_z < 1e-8  # bin integrals reproduce the histogram

    def test_occupation_monitor(self):
        mon = OccupationMonitor("half_line", lambda x: (x > 0).astype(float))
        cfg = SimConfig(n_paths=4000, dt=1e-2, horizon=0.5, seed=3,
                        log_jumps=False)
        ens = simulate_sde(None, P12, cfg, monitors=[mon])
        # symmetric process from 0: expected time above 0 is half the horizon
        assert np.mean(ens.occupation["half_line"]) == pytest.approx(0.25,
                                                                     abs=0.02)


class TestLevySystem:
    def test_pure_stable_counts(self):
        b0 = preset("constant:0", P12)
        mon = levy_monitor(b0, P12, (-1.0, 0.0), (2.0, 3.0))
        cfg = SimConfig(n_paths=40_000, dt=2e-3, horizon=1.0, seed=11)
        ens = simulate_sde(None, P12, cfg, monitors=[mon])
        res = levy_system_check(ens, b0, P12, (-1.0, 0.0), (2.0, 3.0), 1.0)
        assert abs(res["z_score"]) < 3.0

    def test_far_region_consistent(self):
        b0 = preset("constant:0", P12)
        region_b = (10.0, 11.0)
        mon = levy_monitor(b0, P12, (-1.0, 0.0), region_b)
        cfg = SimConfig(n_paths=40_000, dt=2e-3, horizon=1.0, seed=12)
        ens = simulate_sde(None, P12, cfg, monitors=[mon])
        res = levy_system_check(ens, b0, P12, (-1.0, 0.0), region_b, 1.0)
        assert res["predicted_mean"] < 0.01
        assert abs(res["z_score"]) < 3.5

    def test_insufficient_statistics_raises(self):
        b0 = preset("constant:0", P12)
        region_b = (40.0, 41.0)
        mon = levy_monitor(b0, P12, (-1.0, 0.0), region_b, x_table_halfwidth=60)
        cfg = SimConfig(n_paths=500, dt=1e-2, horizon=0.2, seed=13)
        ens = simulate_sde(None, P12, cfg, monitors=[mon])
        with pytest.raises(ValueError):
            levy_system_check(ens, b0, P12, (-1.0, 0.0), region_b, 0.2)

    def test_overlapping_regions_rejected(self):
        b0 = preset("constant:0", P12)
        cfg = SimConfig(n_paths=100, dt=1e-2, horizon=0.1, seed=1)
        ens = simulate_sde(None, P12, cfg)
        with pytest.raises(ValueError):
            levy_system_check(ens, b0, P12, (-1.0, 0.5), (0.0, 1.0), 0.1)


class TestMeyer:
    def test_intensity_matches_closed_form(self):
        b0 = preset("constant:0", P12)
        bhat = preset("truncated:0,1,1", P12)
        cfg = SimConfig(n_paths=N_FAST, dt=2e-3, horizon=0.25, seed=21,
                        save_times=(0.25,))
        ens = meyer_augment(b0, bhat, 1.0, P12, cfg)
        Ab = normalizing_constant(1, 0.6)
        exact = 2.0 * Ab / 0.6 * 0.25  # intensity * horizon
        assert np.mean(ens.meyer_intensity_integral) == pytest.approx(exact,
                                                                      rel=1e-3)
        se = np.std(ens.meyer_counts) / math.sqrt(cfg.n_paths)
        assert np.mean(ens.meyer_counts) == pytest.approx(exact, abs=3.5 * se)

    def test_identity_augmentation_adds_nothing(self):
        b0 = preset("constant:0", P12)
        cfg = SimConfig(n_paths=2000, dt=5e-3, horizon=0.25, seed=22,
                        save_times=(0.25,))
        ens = meyer_augment(b0, b0, 1.0, P12, cfg)
        assert np.sum(ens.meyer_counts) == 0
        cfg2 = SimConfig(n_paths=2000, dt=5e-3, horizon=0.25, seed=23,
                         save_times=(0.25,), log_jumps=False)
        plain = simulate_sde(None, P12, cfg2)
        assert ks_2samp(ens.at(0.25), plain.at(0.25)).pvalue > 0.05

    def test_rejects_negative_difference(self):
        b1 = preset("constant:1", P12)
        b0 = preset("constant:0", P12)
        cfg = SimConfig(n_paths=100, dt=1e-2, horizon=0.1, seed=24)
        with pytest.raises(ValueError):
            meyer_augment(b1, b0, 1.0, P12, cfg)

    def test_rejects_difference_inside_radius(self):
        b0 = preset("constant:0", P12)
        bhat = preset("constant:1", P12)  # differs for |z| <= lam too
        cfg = SimConfig(n_paths=100, dt=1e-2, horizon=0.1, seed=25)
        with pytest.raises(ValueError):
            meyer_augment(b0, bhat, 1.0, P12, cfg)

    def test_jump_log_tags_meyer(self):
        b0 = preset("constant:0", P12)
        bhat = preset("truncated:0,1,1", P12)
        cfg = SimConfig(n_paths=3000, dt=5e-3, horizon=0.25, seed=26,
                        save_times=(0.25,))
        ens = meyer_augment(b0, bhat, 1.0, P12, cfg)
        from nlheat.mc import TAG_MEYER

        tags = ens.jump_log["tag"]
        assert np.sum(tags == TAG_MEYER) == np.sum(ens.meyer_counts)
        meyer_sizes = np.abs(ens.jump_log["x_to"] - ens.jump_log["x_from"])[
            tags == TAG_MEYER]
        assert np.min(meyer_sizes) >= 1.0  # supported beyond lam


class TestExitProbability:
    def test_probability_increases_with_time(self):
        cfg = SimConfig(n_paths=4000, dt=2e-3, horizon=1.0, seed=31)
        res_early = exit_probability(None, P12, cfg, 0.0, 1.0, 0.05)
        res_late = exit_probability(None, P12, cfg, 0.0, 1.0, 0.8)
        assert res_early["p_exit"] < res_late["p_exit"]

    def test_small_time_limit(self):
        cfg = SimConfig(n_paths=4000, dt=1e-3, horizon=0.2, seed=32)
        res = exit_probability(None, P12, cfg, 0.0, 1.0, 2e-3)
        assert res["p_exit"] < 0.05

    def test_radius_scaling_of_exit_time(self):
        # doubling r scales the half-exit time like r^alpha
        cfg = SimConfig(n_paths=6000, dt=2e-3, horizon=4.0, seed=33)
        r1 = exit_probability(None, P12, cfg, 0.0, 1.0, 1.0)
        r2 = exit_probability(None, P12, cfg, 0.0, 2.0, 1.0)
        assert r2["kappa_hat"] == pytest.approx(r1["kappa_hat"], rel=0.2)
        p_at_scaled = exit_probability(None, P12, cfg, 0.0, 2.0,
                                       r1["kappa_hat"] * 2.0**1.2)
        assert p_at_scaled["p_exit"] <= 0.5 + 0.03

    def test_dt_warning_flag(self):
        cfg = SimConfig(n_paths=200, dt=0.05, horizon=0.5, seed=34)
        res = exit_probability(None, P12, cfg, 0.0, 0.5, 0.2)
        assert res["dt_warning"]
