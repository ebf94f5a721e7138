"""Space-time discretization and sampled kernel containers."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .meta import json_header, write_json
from .params import ModelParams


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Output times plus the uniform spatial lattice the series runs on.

    The spatial axis is a periodic ring of ``n_pad`` points at spacing ``h``;
    the physical window is [-half_width, half_width].  ``panels`` master
    times graded by exponent ``grading`` (default alpha/(alpha-beta), the
    exponent that equidistributes the endpoint singularity of the time
    convolution) are merged with the requested ``times``.
    """

    times: tuple
    half_width: float = 9.6
    h: float = 0.015
    n_pad: int = 4096
    panels: int = 32
    grading: Optional[float] = None

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if not ts or any(t <= 0 for t in ts) or list(ts) != sorted(ts):
            raise ValueError("times must be ascending and positive")
        object.__setattr__(self, "times", ts)
        if self.half_width <= 0 or self.h <= 0:
            raise ValueError("half_width and h must be positive")
        if self.n_pad * self.h < 4.0 * self.half_width:
            raise ValueError("ring too small: need n_pad*h >= 4*half_width")

    # -- spatial axis ------------------------------------------------------

    def ring_coords(self) -> np.ndarray:
        """Signed coordinates of the ring in FFT layout."""
        return np.fft.fftfreq(self.n_pad, 1.0 / (self.n_pad * self.h))

    def window_indices(self) -> np.ndarray:
        """Ring indices of the physical window, sorted by coordinate."""
        v = self.ring_coords()
        idx = np.where(np.abs(v) <= self.half_width + 1e-12)[0]
        return idx[np.argsort(v[idx])]

    @property
    def x_nodes(self) -> np.ndarray:
        return self.ring_coords()[self.window_indices()]

    @property
    def y_nodes(self) -> np.ndarray:
        return self.x_nodes

    def frequencies(self) -> np.ndarray:
        return 2.0 * math.pi * np.fft.rfftfreq(self.n_pad, d=self.h)

    # -- time ladder -------------------------------------------------------

    def master_times(self, params: ModelParams) -> np.ndarray:
        """Graded ladder (tau_0 = 0 included) merged with requested times."""
        p = self.grading if self.grading is not None else params.scaling_exponent
        t_max = self.times[-1]
        ladder = t_max * (np.arange(self.panels + 1) / self.panels) ** p
        merged = np.union1d(np.round(ladder, 14), np.round(self.times, 14))
        return np.concatenate(([0.0], merged[merged > 0]))

    def grid_hash(self) -> str:
        text = repr((self.times, self.half_width, self.h, self.n_pad,
                     self.panels, self.grading))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def power_tail_mass(coords: np.ndarray, row: np.ndarray, alpha: float, beta: float,
                    fit_lo: float, fit_hi: float,
                    integrate_from: float = None) -> float:
    """Mass of the kernel beyond |v| = integrate_from from a two-power fit.

    Fits row ~ c_a |v|^{-1-alpha} + c_b |v|^{-1-beta} on fit_lo <= |v| <=
    fit_hi (both signs pooled) and integrates the fit beyond integrate_from
    (default fit_hi).  The heavy beta tail makes plain windowed sums miss
    O(1e-1) of the mass, so every mass diagnostic goes through this.
    """
    sel = (np.abs(coords) >= fit_lo) & (np.abs(coords) <= fit_hi)
    v = np.abs(coords[sel])
    rhs = row[sel]
    basis = np.stack([v ** (-1.0 - alpha), v ** (-1.0 - beta)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, rhs, rcond=None)
    ca, cb = coef
    v0 = fit_hi if integrate_from is None else integrate_from
    return float(2.0 * (ca * v0**-alpha / alpha + cb * v0**-beta / beta))


@dataclass
class KernelField:
    """Sampled kernel values on the grid.

    ``mode`` is "profile" for translation-invariant coefficients (values
    indexed by (time, offset) over the full ring) or "dense" (time, x, ring-y
    with x restricted to the physical window).  All master times are kept so
    downstream operators can re-integrate in time.
    """

    grid: SpaceTimeGrid
    params: ModelParams
    b_id: str
    term_index: object  # int or "SUM"
    mode: str
    master_times: np.ndarray  # without the zero slot
    values: np.ndarray  # profile: (nt, n_pad); dense: (nt, nwin, n_pad)

    def __post_init__(self):
        if self.mode not in ("profile", "dense"):
            raise ValueError(f"bad mode {self.mode!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("kernel field contains non-finite entries")

    def time_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.master_times - t)))
        if abs(self.master_times[idx] - t) > 1e-10 * max(1.0, t):
            raise KeyError(f"time {t} is not on the master ladder")
        return idx

    def row(self, t: float, x: float) -> np.ndarray:
        """q(t, x, y) over the sorted window y-nodes."""
        m = self.time_index(t)
        win = self.grid.window_indices()
        if self.mode == "profile":
            offsets = x - self.grid.ring_coords()[win]
            return self.interp_profile(m, offsets)
        xi = self._x_index(x)
        return np.asarray(self.values[m, xi, win], dtype=float)

    def _x_index(self, x: float) -> int:
        nodes = self.grid.x_nodes
        i = int(np.argmin(np.abs(nodes - x)))
        if abs(nodes[i] - x) > 1e-9:
            raise KeyError(f"x={x} is not a grid node")
        return i

    def interp_profile(self, m: int, offsets: np.ndarray) -> np.ndarray:
        """Profile row values at arbitrary offsets (linear interpolation)."""
        v = self.grid.ring_coords()
        order = np.argsort(v)
        return np.interp(offsets, v[order], self.values[m][order])

    def at(self, t: float, x: float, y: float) -> float:
        m = self.time_index(t)
        if self.mode == "profile":
            return float(self.interp_profile(m, np.asarray([x - y]))[0])
        xi = self._x_index(x)
        yi = self._x_index(y)
        win = self.grid.window_indices()
        return float(self.values[m, xi, win[yi]])

    def window_block(self, t: float) -> np.ndarray:
        """(x, y) window block at time t (dense layout in both modes)."""
        win = self.grid.window_indices()
        m = self.time_index(t)
        if self.mode == "dense":
            return np.asarray(self.values[m][:, win], dtype=float)
        v = self.grid.ring_coords()
        xs = v[win]
        return np.stack([self.interp_profile(m, x - xs) for x in xs])

    def mass(self, t: float, x: float = 0.0) -> float:
        """int q(t, x, y) dy: ring-window sum plus a fitted power tail."""
        m = self.time_index(t)
        v = self.grid.ring_coords()
        if self.mode == "profile":
            row = self.values[m]
        else:
            row = np.asarray(self.values[m, self._x_index(x)], dtype=float)
            v = v - x
        half = 0.5 * self.grid.n_pad * self.grid.h
        v_hi = 0.85 * half
        core = float(np.sum(row[np.abs(v) <= v_hi]) * self.grid.h)
        tail = power_tail_mass(v, row, self.params.alpha, self.params.beta,
                               0.55 * half, v_hi)
        return core + tail

    def sup(self, t: Optional[float] = None) -> float:
        if t is None:
            return float(np.max(np.abs(self.values)))
        return float(np.max(np.abs(self.values[self.time_index(t)])))

    def min_value(self) -> float:
        return float(np.min(self.values))

    # -- serialization -----------------------------------------------------

    def write_csv(self, path, times=None, x_nodes=None, y_nodes=None,
                  max_rows: int = 2_000_000, extra_header: Optional[dict] = None):
        """Columnar (t, x, y, value) CSV plus a JSON sidecar header."""
        times = list(times if times is not None else self.grid.times)
        xs = np.asarray(x_nodes if x_nodes is not None else self.grid.x_nodes[::8])
        ys = np.asarray(y_nodes if y_nodes is not None else self.grid.y_nodes[::8])
        if len(times) * xs.size * ys.size > max_rows:
            raise ValueError("requested CSV exceeds max_rows; subsample nodes")
        path = str(path)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "x", "y", "value"])
            for t in times:
                m = self.time_index(t)
                for x in xs:
                    if self.mode == "profile":
                        vals = self.interp_profile(m, x - ys)
                    else:
                        ring = np.asarray(self.values[m, self._x_index(x)])
                        order = np.argsort(self.grid.ring_coords())
                        vals = np.interp(ys, self.grid.ring_coords()[order], ring[order])
                    for y, val in zip(ys, vals):
                        wr.writerow([f"{t:.12g}", f"{x:.12g}", f"{y:.12g}",
                                     f"{val:.12e}"])
        head = json_header(
            kind="kernel_field",
            params={"d": self.params.d, "alpha": self.params.alpha,
                    "beta": self.params.beta},
            b_id=self.b_id,
            term_index=self.term_index,
            mode=self.mode,
            grid={"times": list(self.grid.times), "half_width": self.grid.half_width,
                  "h": self.grid.h, "n_pad": self.grid.n_pad,
                  "panels": self.grid.panels, "hash": self.grid.grid_hash()},
        )
        if extra_header:
            head.update(extra_header)
        write_json(path + ".json", head)


@dataclass
class SeriesReport:
    """Convergence and self-consistency diagnostics of a summed series."""

    b_id: str
    n_terms: int
    term_norms: list  # sup over space at the last requested time, per term
    ratio: float
    truncation_bound: float
    horizon_estimate: float
    sup_q: float
    min_q: float
    mass_defect: dict = field(default_factory=dict)
    term_mass: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ratio < 1.0 and len(self.term_norms) >= 2:
            implied = self.term_norms[-1] * self.ratio / (1.0 - self.ratio)
            if not self.truncation_bound >= 0.99 * implied - 1e-300:
                raise ValueError("truncation bound inconsistent with term decay")

    def to_dict(self) -> dict:
        return json_header(
            kind="series_report",
            b_id=self.b_id,
            n_terms=self.n_terms,
            term_norms=list(map(float, self.term_norms)),
            ratio=self.ratio,
            truncation_bound=self.truncation_bound,
            horizon_estimate=self.horizon_estimate,
            sup_q=self.sup_q,
            min_q=self.min_q,
            mass_defect=self.mass_defect,
            term_mass=self.term_mass,
            residuals=self.residuals,
            notes=self.notes,
        )

    def write_json(self, path):
        write_json(path, self.to_dict())
