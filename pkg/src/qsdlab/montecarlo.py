"""Killed-path Monte Carlo for unit-diffusion models.

Vectorized Euler-Maruyama with three death mechanisms: crossing a finite
endpoint (with an optional Brownian-bridge correction for intra-step hits),
an integrated-killing clock checked against per-particle Exp(1) thresholds,
and a blow-up guard.  Two operating modes:

* plain (`resample=False`): dead particles stay dead; death times feed the
  survival-curve fit;
* resampling (`resample=True`): a particle that dies is instantly respawned
  at the position of a uniformly chosen survivor, so the ensemble tracks the
  conditioned-on-survival law with every particle alive (O(1/n) bias).

All random draws go through one counter-based generator keyed from the
config seed, and every step draws normals for the full ensemble, so runs
are bit-reproducible for a given (model, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import DiffusionModel
from .numerics import QsdlabError

__all__ = ["SimConfig", "EnsembleResult", "SurvivalCurve", "DichotomyVerdict",
           "run_ensemble", "survival_curve", "histogram_masses",
           "tv_distance", "dichotomy_probe"]


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n: int
    t_max: float
    seed: int = 20260814
    bridge: bool = True
    resample: bool = False
    blow_up: float = 1e12

    def __post_init__(self):
        if not self.dt > 0:
            raise QsdlabError(f"dt must be positive, got {self.dt}")
        if self.n < 2:
            raise QsdlabError(f"need at least 2 particles, got {self.n}")
        if self.t_max < self.dt:
            raise QsdlabError("t_max shorter than one step")

    def to_json(self):
        return {"dt": self.dt, "n": self.n, "t_max": self.t_max,
                "seed": self.seed, "bridge": self.bridge,
                "resample": self.resample, "blow_up": self.blow_up}


@dataclass
class EnsembleResult:
    model_name: str
    config: SimConfig
    times: np.ndarray                 # recorded times
    n_alive: np.ndarray               # live count at each recorded time
    snapshots: list                   # live positions (copies) per record
    final_positions: np.ndarray       # live positions at t_max
    death_times: np.ndarray           # +inf for survivors; respawns excluded
    n_absorbed: int = 0
    n_killed: int = 0
    n_blown: int = 0

    @property
    def n_survivors(self) -> int:
        return int(len(self.final_positions))

    def to_json(self):
        return {"model": self.model_name, "config": self.config.to_json(),
                "n_survivors": self.n_survivors,
                "n_absorbed": self.n_absorbed, "n_killed": self.n_killed,
                "n_blown": self.n_blown,
                "recorded_times": [float(t) for t in self.times],
                "n_alive": [int(c) for c in self.n_alive]}


def run_ensemble(model: DiffusionModel, x0, config: SimConfig,
                 record_times: Optional[Sequence[float]] = None,
                 keep_snapshots: bool = True) -> EnsembleResult:
    """Simulate n killed/absorbed paths of dX = mu dt + dW up to t_max."""
    if not model.unit_diffusion:
        raise QsdlabError("run_ensemble needs sigma == 1; reduce first")
    l, r = model.domain
    fin_l, fin_r = math.isfinite(l), math.isfinite(r)
    n, dt = config.n, config.dt
    sqrt_dt = math.sqrt(dt)
    rng = _rng(config.seed)
    kappa = model.killing

    x = np.full(n, float(x0)) if np.ndim(x0) == 0 else np.asarray(x0, float).copy()
    if len(x) != n:
        raise QsdlabError(f"x0 has {len(x)} entries for n = {n}")
    if (fin_l and np.any(x <= l)) or (fin_r and np.any(x >= r)):
        raise QsdlabError("initial positions must be interior")
    alive = np.ones(n, dtype=bool)
    death = np.full(n, np.inf)
    clock = np.zeros(n)
    thresh = rng.standard_exponential(n) if kappa is not None else None
    kap_x = np.asarray(kappa(x), float) if kappa is not None else None
    n_absorbed = n_killed = n_blown = 0

    n_steps = int(round(config.t_max / dt))
    if record_times is None:
        record_times = []
    rec_steps = sorted({min(max(int(round(t / dt)), 1), n_steps)
                        for t in record_times})
    times, counts, snaps = [], [], []
    rec_ptr = 0
    use_bridge = config.bridge and (fin_l or fin_r)

    for s in range(1, n_steps + 1):
        z = rng.standard_normal(n)
        u_bridge = rng.random(n) if use_bridge else None
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        xa = x[idx]
        prop = xa + np.asarray(model.drift(xa), float) * dt + sqrt_dt * z[idx]

        hit = np.zeros(len(idx), dtype=bool)
        if fin_l:
            hit |= prop <= l
            if use_bridge:
                safe = ~hit
                p_hit = np.zeros(len(idx))
                p_hit[safe] = np.exp(-2.0 * (xa[safe] - l) * (prop[safe] - l) / dt)
                hit |= u_bridge[idx] < p_hit
        if fin_r:
            hit_r = prop >= r
            if use_bridge:
                safe = ~hit & ~hit_r
                p_hit = np.zeros(len(idx))
                p_hit[safe] = np.exp(-2.0 * (r - xa[safe]) * (r - prop[safe]) / dt)
                hit_r |= u_bridge[idx] < p_hit
            hit |= hit_r

        if kappa is not None:
            prop_in = prop
            if fin_l or fin_r:
                lo_c = l + 1e-12 * (1.0 + abs(l)) if fin_l else -np.inf
                hi_c = r - 1e-12 * (1.0 + abs(r)) if fin_r else np.inf
                prop_in = np.clip(prop, lo_c, hi_c)
            kap_new = np.asarray(kappa(prop_in), float)
            clock[idx] += 0.5 * dt * (kap_x[idx] + kap_new)
            kap_x[idx] = kap_new
            killed = (clock[idx] > thresh[idx]) & ~hit
        else:
            killed = np.zeros(len(idx), dtype=bool)

        blown = (np.abs(prop) > config.blow_up) & ~hit & ~killed
        dead = hit | killed | blown
        n_absorbed += int(np.sum(hit))
        n_killed += int(np.sum(killed))
        n_blown += int(np.sum(blown))

        if config.resample:
            live_local = ~dead
            n_dead = int(np.sum(dead))
            if n_dead:
                if not np.any(live_local):
                    raise QsdlabError(
                        f"entire ensemble died in one step at t = {s * dt:.4g}; "
                        "dt too coarse for this killing rate")
                donors = rng.integers(0, int(np.sum(live_local)), size=n_dead)
                prop[dead] = prop[live_local][donors]
                if kappa is not None:
                    # exponential thresholds are memoryless: reset the clock
                    # and redraw, which leaves the residual law unchanged
                    clock[idx[dead]] = 0.0
                    thresh[idx[dead]] = rng.standard_exponential(n_dead)
                    kap_x[idx[dead]] = kap_x[idx[live_local]][donors]
            x[idx] = prop
        else:
            if np.any(dead):
                death[idx[dead]] = s * dt
                alive[idx[dead]] = False
                prop[dead] = model.x_ref        # park the dead
            x[idx] = prop

        while rec_ptr < len(rec_steps) and rec_steps[rec_ptr] == s:
            times.append(s * dt)
            counts.append(int(np.sum(alive)))
            snaps.append(x[alive].copy() if keep_snapshots else None)
            rec_ptr += 1

    return EnsembleResult(model_name=model.name, config=config,
                          times=np.asarray(times),
                          n_alive=np.asarray(counts, dtype=int),
                          snapshots=snaps, final_positions=x[alive].copy(),
                          death_times=death, n_absorbed=n_absorbed,
                          n_killed=n_killed, n_blown=n_blown)


# ---------------------------------------------------------------------------
# survival-curve fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalCurve:
    times: np.ndarray
    counts: np.ndarray
    rate: float                  # fitted decay rate (-slope of log survival)
    intercept: float
    r_squared: float
    rate_ci: tuple               # bootstrap percentile interval
    n_boot: int
    fit_window: tuple

    def to_json(self):
        return {"rate": self.rate, "intercept": self.intercept,
                "r_squared": self.r_squared,
                "rate_ci": [float(self.rate_ci[0]), float(self.rate_ci[1])],
                "n_boot": self.n_boot,
                "fit_window": [float(self.fit_window[0]),
                               float(self.fit_window[1])]}


def _counts_at(sorted_death: np.ndarray, t_grid: np.ndarray, n: int) -> np.ndarray:
    return n - np.searchsorted(sorted_death, t_grid, side="right")


def _fit_rate(t: np.ndarray, frac: np.ndarray) -> tuple:
    y = np.log(frac)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return -float(slope), float(intercept), r2


def survival_curve(result: EnsembleResult, fit_start_frac: float = 0.5,
                   min_survivors: int = 100, n_boot: int = 200,
                   n_grid: int = 200, boot_seed: int = 7) -> SurvivalCurve:
    """Fit log P(T > t) = -rate * t + c on the late part of the run.

    The window keeps times past `fit_start_frac * t_max` while at least
    `min_survivors` particles remain; the rate uncertainty is a percentile
    bootstrap over particles (needs a plain, non-resampled run)."""
    if result.config.resample:
        raise QsdlabError("survival_curve needs a plain run (resample=False)")
    n = result.config.n
    sorted_death = np.sort(result.death_times)
    t_grid = np.linspace(0.0, result.config.t_max, n_grid + 1)[1:]
    counts = _counts_at(sorted_death, t_grid, n)

    sel = (t_grid >= fit_start_frac * result.config.t_max) & (counts >= min_survivors)
    if np.sum(sel) < 4:
        raise QsdlabError(
            f"survival fit window too small ({int(np.sum(sel))} points with "
            f">= {min_survivors} survivors past t = "
            f"{fit_start_frac * result.config.t_max:.3g})")
    tw, cw = t_grid[sel], counts[sel]
    rate, intercept, r2 = _fit_rate(tw, cw / n)

    rng = _rng(result.config.seed + boot_seed)
    rates = np.empty(n_boot)
    for b in range(n_boot):
        resampled = np.sort(result.death_times[rng.integers(0, n, size=n)])
        cb = _counts_at(resampled, tw, n)
        good = cb > 0
        if np.sum(good) < 4:
            rates[b] = np.nan
            continue
        rates[b] = _fit_rate(tw[good], cb[good] / n)[0]
    rates = rates[np.isfinite(rates)]
    if len(rates) < n_boot // 2:
        raise QsdlabError("bootstrap collapsed; too few survivors for a rate CI")
    ci = (float(np.percentile(rates, 2.5)), float(np.percentile(rates, 97.5)))
    return SurvivalCurve(times=tw, counts=cw, rate=rate, intercept=intercept,
                         r_squared=r2, rate_ci=ci, n_boot=n_boot,
                         fit_window=(float(tw[0]), float(tw[-1])))


# ---------------------------------------------------------------------------
# conditioned laws and total variation
# ---------------------------------------------------------------------------

def histogram_masses(positions: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Fraction of the sample in each bin (out-of-range mass is dropped,
    so the masses need not sum to 1)."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) == 0:
        raise QsdlabError("no positions to bin (everything died?)")
    h, _ = np.histogram(positions, bins=np.asarray(edges, dtype=float))
    return h / len(positions)


def tv_distance(p, q, include_remainder: bool = True) -> float:
    """Total variation between two sub-probability vectors on the same bins;
    with `include_remainder` the out-of-bin masses 1-sum(p), 1-sum(q) are
    compared too."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise QsdlabError(f"bin mismatch: {p.shape} vs {q.shape}")
    tv = float(np.sum(np.abs(p - q)))
    if include_remainder:
        tv += abs((1.0 - p.sum()) - (1.0 - q.sum()))
    return 0.5 * tv


# ---------------------------------------------------------------------------
# long-time dichotomy probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DichotomyVerdict:
    verdict: str                 # "Converges" | "Escapes" | "Undecided"
    times: np.ndarray
    in_window: np.ndarray        # fraction of the ensemble inside the window
    tv_steps: np.ndarray         # TV between consecutive rung histograms
    window: tuple

    def to_json(self):
        return {"verdict": self.verdict,
                "times": [float(t) for t in self.times],
                "in_window": [float(v) for v in self.in_window],
                "tv_steps": [float(v) for v in self.tv_steps],
                "window": [float(self.window[0]), float(self.window[1])]}


def dichotomy_probe(model: DiffusionModel, x0, config: SimConfig,
                    n_rungs: int = 5, n_bins: int = 24,
                    tv_tol: float = 0.02, escape_tol: float = 0.01
                    ) -> DichotomyVerdict:
    """Doubling-ladder test of the long-time alternative for the conditioned
    law: it either settles (quasistationarity) or drifts off to infinity.

    One resampled run records the conditioned ensemble at t_max / 2^j; the
    histograms over a window fitted to the first rung either stabilize in
    total variation ("Converges"), or the in-window mass decays monotonically
    to nearly zero ("Escapes"); anything else is "Undecided"."""
    cfg = SimConfig(dt=config.dt, n=config.n, t_max=config.t_max,
                    seed=config.seed, bridge=config.bridge, resample=True,
                    blow_up=config.blow_up)
    rungs = [config.t_max / 2 ** j for j in range(n_rungs - 1, 0, -1)]
    rungs.append(config.t_max)
    res = run_ensemble(model, x0, cfg, record_times=rungs)
    if len(res.times) != len(rungs):
        raise QsdlabError("probe lost its recording rungs; shorten dt")

    first = res.snapshots[0]
    l, r = model.domain
    lo = float(l) if math.isfinite(l) else float(np.quantile(first, 0.005)) - 5.0
    hi = max(2.0 * float(np.quantile(first, 0.995)), float(np.median(first)) + 8.0)
    if math.isfinite(r):
        hi = min(hi, float(r))
    if not hi > lo:
        raise QsdlabError(f"degenerate probe window ({lo}, {hi})")
    edges = np.linspace(lo, hi, n_bins + 1)

    masses = [histogram_masses(s, edges) for s in res.snapshots]
    in_window = np.array([float(m.sum()) for m in masses])
    tvs = np.array([tv_distance(a, b) for a, b in zip(masses, masses[1:])])

    if in_window[-1] < escape_tol and np.all(np.diff(in_window) <= 1e-3):
        verdict = "Escapes"
    elif len(tvs) >= 2 and np.all(tvs[-2:] < tv_tol) and in_window[-1] > 0.5:
        verdict = "Converges"
    else:
        verdict = "Undecided"
    return DichotomyVerdict(verdict=verdict, times=res.times,
                            in_window=in_window, tv_steps=tvs,
                            window=(float(edges[0]), float(edges[-1])))
