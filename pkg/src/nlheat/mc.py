"""Jump-SDE simulation, jump-adding augmentation, and path statistics.

Paths follow the Euler scheme X_{k+1} = X_k + dY_k + c(X_k) dZ_k with exact
stable increments over each step (Chambers-Mallows-Stuck), so for constant c
the time-t law is exact.  All randomness comes from one counter-based Philox
stream per run: identical (seed, config) reproduce ensembles bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .operator import BFunction, Jb_kernel, get_jump_quadrature, normalizing_constant
from .params import ModelParams

__all__ = [
    "SimConfig",
    "PathEnsemble",
    "sample_stable_increment",
    "simulate_sde",
    "meyer_augment",
    "levy_system_check",
    "exit_probability",
    "empirical_density",
    "compare_density",
    "DensityComparison",
]


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    dt: float = 1e-3
    horizon: float = 1.0
    seed: int = 0
    domain_cap: float = 1e6
    save_times: tuple = ()
    jump_log_factor: float = 10.0  # log increments above factor * dt^{1/alpha}
    log_jumps: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not 0 < self.dt <= self.horizon:
            raise ValueError("need 0 < dt <= horizon")

    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class PathEnsemble:
    """Skeleton positions at the save times plus jump bookkeeping."""

    config: SimConfig
    params: ModelParams
    times: np.ndarray                  # saved skeleton times
    positions: dict                    # time -> (n_paths,) positions
    final: np.ndarray
    jump_log: dict                     # arrays: t, path, x_from, x_to, tag
    exited: np.ndarray                 # |X| exceeded domain_cap at some step
    occupation: dict = field(default_factory=dict)  # per-path functionals
    meyer_counts: Optional[np.ndarray] = None
    meyer_intensity_integral: Optional[np.ndarray] = None

    def at(self, t: float) -> np.ndarray:
        for s, pos in self.positions.items():
            if abs(s - t) < 1e-12:
                return pos
        raise KeyError(f"time {t} was not saved; configure save_times")

    def summary(self) -> dict:
        out = {
            "n_paths": self.config.n_paths,
            "dt": self.config.dt,
            "horizon": self.config.horizon,
            "seed": self.config.seed,
            "final_mean": float(np.mean(self.final)),
            "final_median": float(np.median(self.final)),
            "n_logged_jumps": int(self.jump_log["t"].size),
            "n_exited": int(np.sum(self.exited)),
        }
        if self.meyer_counts is not None:
            out["meyer_jumps_mean"] = float(np.mean(self.meyer_counts))
            out["meyer_intensity_mean"] = float(np.mean(self.meyer_intensity_integral))
        return out


TAG_ALPHA, TAG_BETA, TAG_MEYER = 0, 1, 2


def sample_stable_increment(alpha: float, t_scale: float, rng: np.random.Generator,
                            size=None, d: int = 1) -> np.ndarray:
    """Increment with characteristic function exp(-t |xi|^alpha).

    d = 1 uses the symmetric Chambers-Mallows-Stuck transform; d >= 2 draws
    an isotropic vector by subordinating a Gaussian with a positive
    (alpha/2)-stable time change.
    """
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0,2)")
    if t_scale <= 0:
        raise ValueError("t_scale must be positive")
    if d == 1:
        u = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size)
        if abs(alpha - 1.0) < 1e-12:
            x = np.tan(u)
        else:
            e = rng.standard_exponential(size)
            x = (np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)
                 * (np.cos((1.0 - alpha) * u) / e) ** ((1.0 - alpha) / alpha))
        return t_scale ** (1.0 / alpha) * x
    s = t_scale ** (2.0 / alpha) * _positive_stable(alpha / 2.0, rng, size)
    shp = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    g = rng.standard_normal(shp + (d,))
    return np.sqrt(2.0 * np.asarray(s))[..., None] * g


def _positive_stable(a: float, rng: np.random.Generator, size) -> np.ndarray:
    """One-sided a-stable with Laplace transform exp(-u^a) (Kanter).

    S = (A(U)/E)^{(1-a)/a},  A(u) = sin(a u) sin((1-a) u)^{(1-a)/a} wedge...
    written out: sin(a u)^{a/(1-a)} sin((1-a) u) / sin(u)^{1/(1-a)}.
    """
    u = rng.uniform(0.0, math.pi, size)
    e = rng.standard_exponential(size)
    A = (np.sin(a * u) ** (a / (1.0 - a)) * np.sin((1.0 - a) * u)
         / np.sin(u) ** (1.0 / (1.0 - a)))
    return (A / e) ** ((1.0 - a) / a)


@dataclass
class OccupationMonitor:
    """Accumulates dt * g(X_k) along each path (mergeable per-path sums)."""

    name: str
    g: Callable

    def make_state(self, n_paths):
        return np.zeros(n_paths)


def _run_paths(params: ModelParams, config: SimConfig, c_fn: Optional[Callable],
               x0: float = 0.0, monitors=(), meyer=None, rng=None):
    """Shared Euler loop used by the simulators.

    meyer, when given, is a dict with keys lam, intensity (callable),
    intensity_bound, sample_jump (callable rng,x,count -> displacements).
    """
    al, be = params.alpha, params.beta
    rng = rng or np.random.default_rng(np.random.Philox(config.seed))
    n = config.n_paths
    steps = config.n_steps()
    dt = config.dt
    X = np.full(n, float(x0))
    exited = np.zeros(n, dtype=bool)
    thr = config.jump_log_factor * dt ** (1.0 / al)
    log_t, log_p, log_from, log_to, log_tag = [], [], [], [], []
    save_set = {round(t / dt): t for t in config.save_times}
    positions = {}
    occ = {m.name: m.make_state(n) for m in monitors}
    meyer_counts = np.zeros(n) if meyer else None
    meyer_int = np.zeros(n) if meyer else None

    for k in range(1, steps + 1):
        X_prev = X
        dY = sample_stable_increment(al, dt, rng, n)
        if c_fn is None:
            dX = dY
            dZc = np.zeros(n)
        else:
            dZ = sample_stable_increment(be, dt, rng, n)
            dZc = np.asarray(c_fn(X_prev), dtype=float) * dZ
            dX = dY + dZc
        X = X_prev + dX

        if meyer is not None:
            lam_bound = meyer["intensity_bound"]
            fire = rng.uniform(0.0, 1.0, n) < -np.expm1(-lam_bound * dt)
            jx = np.asarray(meyer["intensity"](X), dtype=float)
            accept = fire & (rng.uniform(0.0, 1.0, n) * lam_bound < jx)
            idx = np.nonzero(accept)[0]
            if idx.size:
                disp = meyer["sample_jump"](rng, X[idx])
                before = X[idx]
                X = X.copy()
                X[idx] = before + disp
                meyer_counts[idx] += 1
                if config.log_jumps:
                    log_t.append(np.full(idx.size, k * dt))
                    log_p.append(idx)
                    log_from.append(before)
                    log_to.append(X[idx])
                    log_tag.append(np.full(idx.size, TAG_MEYER, dtype=np.int8))
            meyer_int += jx * dt

        if config.log_jumps:
            big_a = np.abs(dY) > thr
            big_b = np.abs(dZc) > thr
            for mask, tag in ((big_a, TAG_ALPHA), (big_b, TAG_BETA)):
                idx = np.nonzero(mask)[0]
                if idx.size:
                    log_t.append(np.full(idx.size, k * dt))
                    log_p.append(idx)
                    log_from.append(X_prev[idx])
                    log_to.append(X_prev[idx] + dX[idx])
                    log_tag.append(np.full(idx.size, tag, dtype=np.int8))

        for m in monitors:
            occ[m.name] += dt * m.g(X_prev)
        exited |= np.abs(X) > config.domain_cap
        if k in save_set:
            positions[save_set[k]] = X.copy()

    def cat(parts, dtype=float):
        return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype=dtype)

    log = {
        "t": cat(log_t),
        "path": cat(log_p, np.int64),
        "x_from": cat(log_from),
        "x_to": cat(log_to),
        "tag": cat(log_tag, np.int8),
    }
    return PathEnsemble(
        config=config, params=params,
        times=np.asarray(sorted(positions)), positions=positions, final=X,
        jump_log=log, exited=exited, occupation=occ,
        meyer_counts=meyer_counts, meyer_intensity_integral=meyer_int,
    )


def simulate_sde(c_fn: Optional[Callable], params: ModelParams, config: SimConfig,
                 x0: float = 0.0, monitors=()) -> PathEnsemble:
    """Euler paths of dX = dY + c(X-) dZ started at x0 (c_fn None => c == 0)."""
    return _run_paths(params, config, c_fn, x0=x0, monitors=monitors)


def meyer_augment(b: BFunction, b_hat: BFunction, lam: float, params: ModelParams,
                  config: SimConfig, c_base: Optional[Callable] = None,
                  x0: float = 0.0, monitors=()) -> PathEnsemble:
    """Add jumps to the base process so its generator coefficient becomes b_hat.

    The difference kernel (b_hat - b) must be nonnegative and supported on
    jump sizes |z| > lam, which keeps the added intensity bounded; jumps
    arrive by thinning a Poisson clock at the intensity bound and are tagged
    "meyer" in the log.
    """
    from .operator import JumpQuadrature

    quad = JumpQuadrature(params.beta, r_min=lam, r_max=1e4)  # aligned at lam
    A = normalizing_constant(1, params.beta)

    def diff(x, w):
        return np.asarray(b_hat(x, w), dtype=float) - np.asarray(b(x, w), dtype=float)

    probe_w = np.concatenate([quad.nodes[::7], [lam * 1.01, 10 * lam, 100 * lam]])
    probe_x = np.linspace(-20, 20, 41)
    dvals = diff(probe_x[:, None], probe_w[None, :])
    if np.min(dvals) < -1e-10:
        raise ValueError("b_hat < b somewhere: added intensity would be negative")
    inner = np.linspace(0.05 * lam, 0.999 * lam, 64)
    if np.max(np.abs(diff(probe_x[:, None], inner[None, :]))) > 1e-10:
        raise ValueError("b_hat - b must vanish for |z| <= lam")
    sup_diff = float(np.max(dvals))

    def intensity(x):
        x = np.asarray(x, dtype=float)
        core = (diff(x[:, None], quad.nodes[None, :]) * quad.meas[None, :]).sum(axis=1)
        tails = np.asarray(b_hat.tail_amplitude(x), dtype=float) - np.asarray(
            b.tail_amplitude(x), dtype=float)
        return 2.0 * A * (core + tails * quad.tail_mass())

    bound = float(np.max(intensity(probe_x))) * 1.05 + 1e-12

    def sample_jump(rng, xs):
        m = xs.size
        out = np.empty(m)
        todo = np.arange(m)
        while todo.size:
            w = lam * rng.uniform(0.0, 1.0, todo.size) ** (-1.0 / params.beta)
            s = rng.choice([-1.0, 1.0], todo.size)
            acc = rng.uniform(0.0, 1.0, todo.size) * sup_diff <= diff(xs[todo], w * s)
            out[todo[acc]] = (w * s)[acc]
            todo = todo[~acc]
        return out

    meyer = {
        "lam": lam,
        "intensity": intensity,
        "intensity_bound": bound,
        "sample_jump": sample_jump,
    }
    return _run_paths(params, config, c_base, x0=x0, monitors=monitors, meyer=meyer)


def levy_system_check(ensemble: PathEnsemble, b: BFunction, params: ModelParams,
                      region_a: tuple, region_b: tuple, horizon: float) -> dict:
    """Jump-count balance: mean #(A -> B jumps) vs E int 1_A(X) I_B(X) dt.

    The predicted side must have been accumulated during simulation via an
    OccupationMonitor named levy:<a>:<b>; build one with
    ``levy_monitor(b, params, region_a, region_b)``.
    """
    a_lo, a_hi = region_a
    b_lo, b_hi = region_b
    if not (a_hi < b_lo or b_hi < a_lo):
        raise ValueError("regions must be disjoint with positive separation")
    name = _levy_name(region_a, region_b)
    if name not in ensemble.occupation:
        raise ValueError(f"ensemble lacks occupation monitor {name!r}")
    n = ensemble.config.n_paths
    log = ensemble.jump_log
    mask = (
        (log["t"] <= horizon)
        & (log["x_from"] >= a_lo) & (log["x_from"] <= a_hi)
        & (log["x_to"] >= b_lo) & (log["x_to"] <= b_hi)
    )
    counts = np.bincount(log["path"][mask], minlength=n).astype(float)
    predicted = ensemble.occupation[name]
    diff = counts - predicted
    mean_diff = float(np.mean(diff))
    se = float(np.std(diff, ddof=1) / math.sqrt(n))
    expected = float(np.mean(predicted))
    if expected * n < 10:
        raise ValueError(
            f"fewer than 10 expected events ({expected * n:.1f}); widen the "
            "regions or raise the horizon"
        )
    return {
        "empirical_mean": float(np.mean(counts)),
        "predicted_mean": expected,
        "z_score": mean_diff / se if se > 0 else float("inf"),
        "n_events": int(counts.sum()),
    }


def _levy_name(region_a, region_b):
    return f"levy:{region_a[0]:g},{region_a[1]:g}:{region_b[0]:g},{region_b[1]:g}"


def levy_monitor(b: BFunction, params: ModelParams, region_a: tuple,
                 region_b: tuple, x_table_halfwidth: float = 50.0) -> OccupationMonitor:
    """Monitor accumulating dt 1_A(X) int_B J^b(X,u) du along paths."""
    a_lo, a_hi = region_a
    xs = np.linspace(-x_table_halfwidth, x_table_halfwidth, 4001)
    gl_x, gl_w = np.polynomial.legendre.leggauss(24)
    mid = 0.5 * (region_b[0] + region_b[1])
    half = 0.5 * (region_b[1] - region_b[0])
    us = mid + half * gl_x
    table = np.array([
        float(np.sum(half * gl_w * Jb_kernel(b, params, x, us))) for x in xs
    ])

    def g(x):
        inside = (x >= a_lo) & (x <= a_hi)
        return np.where(inside, np.interp(x, xs, table), 0.0)

    return OccupationMonitor(name=_levy_name(region_a, region_b), g=g)


def exit_probability(c_fn: Optional[Callable], params: ModelParams,
                     config: SimConfig, x0: float, r: float, t: float) -> dict:
    """Empirical P(exit B(x0, r) by time t) plus the exit-time half-quantile.

    Also reports kappa_hat = median exit time / r^alpha, the largest scale
    constant with exit probability <= 1/2, and warns when dt is too coarse
    to resolve it.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    rng = np.random.default_rng(np.random.Philox(config.seed))
    n = config.n_paths
    steps = config.n_steps()
    dt = config.dt
    X = np.full(n, float(x0))
    first_exit = np.full(n, np.inf)
    alive = np.ones(n, dtype=bool)
    for k in range(1, steps + 1):
        dY = sample_stable_increment(params.alpha, dt, rng, n)
        if c_fn is None:
            X = X + dY
        else:
            dZ = sample_stable_increment(params.beta, dt, rng, n)
            X = X + dY + np.asarray(c_fn(X), dtype=float) * dZ
        newly = alive & (np.abs(X - x0) > r)
        first_exit[newly] = k * dt
        alive &= ~newly
    p_t = float(np.mean(first_exit <= t))
    med = float(np.median(first_exit))
    kappa_hat = med / r**params.alpha if math.isfinite(med) else float("inf")
    out = {
        "p_exit": p_t,
        "se": math.sqrt(max(p_t * (1 - p_t), 1e-12) / n),
        "median_exit_time": med,
        "kappa_hat": kappa_hat,
        "dt_warning": config.dt > 0.01 * kappa_hat * r**params.alpha,
    }
    return out


@dataclass
class DensityComparison:
    max_z: float
    tv_distance: float
    bin_z: np.ndarray
    overflow_empirical: float
    overflow_predicted: float


def empirical_density(ensemble: PathEnsemble, t: float, bins: np.ndarray):
    """Histogram of X_t as bin probabilities with binomial standard errors."""
    x = ensemble.at(t)
    n = x.size
    counts, _ = np.histogram(x, bins=bins)
    p = counts / n
    se = np.sqrt(np.maximum(p * (1 - p), 1e-12) / n)
    inside = (x >= bins[0]) & (x <= bins[-1])
    return {"bins": bins, "p": p, "se": se, "n": n,
            "overflow": float(np.mean(~inside))}


def compare_density(hist: dict, kernel: Callable) -> DensityComparison:
    """Binned comparison of an empirical histogram against a density map.

    The kernel is integrated over each bin with Gauss-Legendre; mass outside
    the binned range enters as a single overflow cell so heavy tails are not
    silently dropped.
    """
    bins = hist["bins"]
    gl_x, gl_w = np.polynomial.legendre.leggauss(6)
    mids = 0.5 * (bins[1:] + bins[:-1])
    half = 0.5 * (bins[1:] - bins[:-1])
    pts = mids[:, None] + half[:, None] * gl_x[None, :]
    vals = np.asarray(kernel(pts.ravel()), dtype=float).reshape(pts.shape)
    P = np.sum(vals * (half[:, None] * gl_w[None, :]), axis=1)
    over_pred = max(0.0, 1.0 - float(P.sum()))
    n = hist["n"]
    se = np.sqrt(np.maximum(P * (1 - P), 1e-12) / n)
    z = (hist["p"] - P) / se
    tv = 0.5 * (np.abs(hist["p"] - P).sum() + abs(hist["overflow"] - over_pred))
    return DensityComparison(
        max_z=float(np.max(np.abs(z))),
        tv_distance=float(tv),
        bin_z=z,
        overflow_empirical=hist["overflow"],
        overflow_predicted=over_pred,
    )
