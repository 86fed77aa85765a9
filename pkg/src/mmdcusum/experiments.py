"""ARL / ADD sweeps over thresholds and offsets, with fits and reports.

One replication produces one statistic sequence.  Because the sequence
does not depend on the offset or the threshold, every (offset, threshold)
cell of a replication is read off that single sequence; this is the same
as running the detector separately per cell on the same stream and makes
threshold sweeps share their random numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from .cusum import CusumState, update_statistic
from .errors import AnalysisError, ConfigurationError
from .mmd import BIASED, ReferenceSet, block_statistics
from .procsim import ChangedSource, ChangeScenario, Source
from .seeding import derive_int

ARL = "ARL"
ADD = "ADD"
CHUNK_BLOCKS = 16


@dataclass
class ExperimentConfig:
    thresholds: List[float]
    offsets: List[float]
    r: int
    source: Source
    run_cap: int
    scenario: Optional[ChangeScenario] = None
    M: Optional[int] = None
    replications: int = 50
    statistic_kind: str = BIASED
    seed: int = 0
    name: str = "experiment"

    def __post_init__(self) -> None:
        self.thresholds = [float(b) for b in self.thresholds]
        self.offsets = [float(d) for d in self.offsets]
        if self.M is None:
            self.M = int(self.r)
        if not self.thresholds or any(b <= 0 for b in self.thresholds):
            raise ConfigurationError("thresholds must be a non-empty list of positive values")
        if any(b2 <= b1 for b1, b2 in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigurationError("thresholds must be strictly ascending")
        if not self.offsets or any(d < 0 for d in self.offsets):
            raise ConfigurationError("offsets must be a non-empty list of non-negative values")
        if self.replications < 2:
            raise ConfigurationError("replications must be >= 2")
        if self.M < self.r:
            raise ConfigurationError("M must be >= r")
        if self.run_cap < self.M:
            raise ConfigurationError("run_cap must be at least M samples")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "thresholds": self.thresholds,
            "offsets": self.offsets,
            "r": self.r,
            "M": self.M,
            "replications": self.replications,
            "run_cap": self.run_cap,
            "statistic_kind": self.statistic_kind,
            "seed": self.seed,
            "source": self.source.to_dict(),
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
        }


@dataclass
class SweepResult:
    metric: str
    offsets: List[float]
    thresholds: List[float]
    times: np.ndarray  # (offset, threshold, replication); censored runs hold run_cap
    censored_mask: np.ndarray
    run_cap: int
    statistic_kind: str = BIASED
    meta: dict = field(default_factory=dict)

    @property
    def replications(self) -> int:
        return int(self.times.shape[2])

    @property
    def means(self) -> np.ndarray:
        return self.times.mean(axis=2)

    @property
    def stderr(self) -> np.ndarray:
        return self.times.std(axis=2, ddof=1) / math.sqrt(self.replications)

    @property
    def censored(self) -> np.ndarray:
        return self.censored_mask.sum(axis=2)

    def cells(self) -> list:
        out = []
        means, errs, cens = self.means, self.stderr, self.censored
        for i, d in enumerate(self.offsets):
            for j, b in enumerate(self.thresholds):
                out.append({
                    "delta": d, "b": b, "mean": float(means[i, j]), "stderr": float(errs[i, j]),
                    "censored": int(cens[i, j]), "replications": self.replications,
                })
        return out


class _MultiStopper:
    """Tracks the CUSUM for several offsets and records first crossings of several thresholds."""

    def __init__(self, offsets: Sequence[float], thresholds: Sequence[float], r: int, M: int):
        self.offsets = list(offsets)
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.r, self.M = r, M
        self.states = [CusumState() for _ in self.offsets]
        self.times = np.full((len(self.offsets), len(self.thresholds)), -1, dtype=np.int64)
        self.pending = [list(range(len(self.thresholds))) for _ in self.offsets]

    @property
    def done(self) -> bool:
        return not any(self.pending)

    def feed(self, statistic: float) -> None:
        for i, delta in enumerate(self.offsets):
            state = self.states[i]
            update_statistic(state, statistic - delta)
            if state.t * self.r < self.M or not self.pending[i]:
                continue
            keep = []
            for j in self.pending[i]:
                if state.s_hat > self.thresholds[j]:
                    self.times[i, j] = state.t * self.r
                else:
                    keep.append(j)
            self.pending[i] = keep


def replicate(source: Source, seed: int, ref: ReferenceSet, r: int, M: int, offsets: Sequence[float],
              thresholds: Sequence[float], run_cap: int, statistic_kind: str = BIASED) -> np.ndarray:
    """Stopping times of one replication for all (offset, threshold) cells; -1 if censored."""
    stopper = _MultiStopper(offsets, thresholds, r, M)
    max_blocks = run_cap // r
    blocks = 0
    buf = np.empty((0, ref.dim))
    for chunk in source.chunks(seed):
        buf = np.concatenate([buf, chunk]) if buf.shape[0] else chunk
        while buf.shape[0] >= CHUNK_BLOCKS * r or (buf.shape[0] >= r and blocks + buf.shape[0] // r >= max_blocks):
            n_take = min(buf.shape[0] // r, CHUNK_BLOCKS, max_blocks - blocks)
            stats = block_statistics(buf[: n_take * r], ref, r, statistic_kind)
            buf = buf[n_take * r:]
            for stat in stats:
                stopper.feed(float(stat))
                blocks += 1
                if stopper.done or blocks >= max_blocks:
                    return stopper.times
    return stopper.times  # pragma: no cover - sources are endless


def replication_seeds(seed: int, reps: int) -> List[int]:
    """Per-replication seeds; they depend only on the sweep seed, so paired sweeps share them."""
    return [derive_int(seed, "replication", k) for k in range(reps)]


def _replicate_args(args: tuple) -> np.ndarray:
    return replicate(*args)


def run_sweep(config: ExperimentConfig, ref: ReferenceSet, metric: str, workers: int = 1) -> SweepResult:
    source: Source = config.source
    if config.scenario is not None:
        source = ChangedSource(config.source, config.scenario)
    reps = config.replications
    seeds = replication_seeds(config.seed, reps)
    args = [
        (source, seeds[k], ref, config.r, config.M,
         config.offsets, config.thresholds, config.run_cap, config.statistic_kind)
        for k in range(reps)
    ]
    if workers > 1:
        # Results are placed by replication index, so the worker count never changes them.
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_rep = list(pool.map(_replicate_args, args))
    else:
        per_rep = [replicate(*a) for a in args]
    times = np.stack(per_rep, axis=2) if per_rep else np.empty((len(config.offsets), len(config.thresholds), 0),
                                                               dtype=np.int64)
    mask = times < 0
    times = np.where(mask, config.run_cap, times)
    meta = {"config": config.to_dict(), "kernel": ref.kernel.to_dict(), "h": ref.h, "replication_seeds": seeds}
    return SweepResult(metric, config.offsets, config.thresholds, times, mask, config.run_cap,
                       config.statistic_kind, meta)


def run_arl(config: ExperimentConfig, ref: ReferenceSet, workers: int = 1) -> SweepResult:
    if config.scenario is not None:
        raise ConfigurationError("ARL sweeps run on null streams; scenario must be None")
    return run_sweep(config, ref, ARL, workers)


def run_add(config: ExperimentConfig, ref: ReferenceSet, workers: int = 1) -> SweepResult:
    if config.scenario is None:
        raise ConfigurationError("ADD sweeps need a change scenario")
    if config.scenario.tau != 0:
        raise ConfigurationError("ADD sweeps plant the change at tau = 0")
    return run_sweep(config, ref, ADD, workers)


# ---------------------------------------------------------------------------
# Fits and trend checks


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    degenerate: bool = False


def fit_line(x: Sequence[float], y: Sequence[float]) -> LineFit:
    """Ordinary least squares; a constant response gives ``r_squared = 0`` flagged degenerate."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.size < 3 or xa.size != ya.size:
        raise AnalysisError("a line fit needs at least 3 points")
    xm, ym = xa.mean(), ya.mean()
    sxx = float(np.sum((xa - xm) ** 2))
    if sxx == 0:
        raise AnalysisError("all x values coincide")
    slope = float(np.sum((xa - xm) * (ya - ym)) / sxx)
    intercept = float(ym - slope * xm)
    syy = float(np.sum((ya - ym) ** 2))
    if syy == 0:
        return LineFit(slope, intercept, 0.0, int(xa.size), degenerate=True)
    resid = float(np.sum((ya - (intercept + slope * xa)) ** 2))
    return LineFit(slope, intercept, 1.0 - resid / syy, int(xa.size))


def fit_scaling(result: SweepResult, transform: str = "identity") -> Dict[float, LineFit]:
    """Per-offset OLS of (transformed) mean stopping time on the threshold.

    Cells with any censored run are lower bounds and are left out.
    """
    if transform not in ("identity", "log10"):
        raise AnalysisError(f"unknown transform {transform!r}")
    fits = {}
    means, cens = result.means, result.censored
    b = np.asarray(result.thresholds)
    for i, delta in enumerate(result.offsets):
        keep = cens[i] == 0
        if keep.sum() < 3:
            raise AnalysisError(f"offset {delta}: fewer than 3 uncensored cells")
        y = means[i, keep]
        if transform == "log10":
            y = np.log10(y)
        fits[delta] = fit_line(b[keep], y)
    return fits


def isotonic_residuals(means: Sequence[float], stderr: Sequence[float]) -> np.ndarray:
    """``|mean - isotonic fit| / stderr`` for a nondecreasing fit weighted by 1/se^2."""
    y = np.asarray(means, dtype=float)
    se = np.maximum(np.asarray(stderr, dtype=float), 1e-12)
    fitted = isotonic_regression(y, weights=1.0 / se**2, increasing=True).x
    return np.abs(y - fitted) / se


# ---------------------------------------------------------------------------
# Pilots


def null_statistic_mean(source: Source, ref: ReferenceSet, r: int, seed: int, streams: int = 8,
                        samples: int = 20000, statistic_kind: str = BIASED) -> float:
    """Mean block statistic over independent null streams (pilot for choosing offsets)."""
    vals = [
        block_statistics(source.sample(derive_int(seed, "null-pilot", k), samples), ref, r, statistic_kind)
        for k in range(streams)
    ]
    return float(np.mean(np.concatenate(vals)))


def pilot_range(config: ExperimentConfig, ref: ReferenceSet, pilot_reps: int = 20,
                candidates: Optional[Sequence[float]] = None, floor_factor: float = 5.0,
                max_censored: float = 0.2) -> tuple:
    """Usable threshold range ``(low, high)`` found by a pilot sweep.

    ``low`` is the first candidate whose mean stopping time reaches
    ``floor_factor * M`` and ``high`` is the last candidate that censors
    fewer than ``max_censored`` of the pilot runs, for every offset.
    """
    cand = np.geomspace(0.01, 100.0, 81) if candidates is None else np.asarray(candidates, dtype=float)
    pilot = ExperimentConfig(
        thresholds=list(cand), offsets=config.offsets, r=config.r, source=config.source,
        run_cap=config.run_cap, scenario=config.scenario, M=config.M, replications=pilot_reps,
        statistic_kind=config.statistic_kind, seed=derive_int(config.seed, "pilot"), name="pilot",
    )
    res = run_sweep(pilot, ref, ADD if config.scenario is not None else ARL)
    lo_ok = np.all(res.means >= floor_factor * config.M, axis=0)
    hi_ok = np.all(res.censored / pilot_reps < max_censored, axis=0)
    if not lo_ok.any() or not hi_ok.any():
        raise AnalysisError("pilot sweep found no usable threshold range")
    lo = float(cand[int(np.argmax(lo_ok))])
    hi = float(cand[len(cand) - 1 - int(np.argmax(hi_ok[::-1]))])
    return lo, hi


def threshold_grid(ranges: Sequence[tuple], n_thresholds: int = 8) -> List[float]:
    """Log-spaced grid over the intersection of pilot ranges (one per paired sweep)."""
    lo = max(r[0] for r in ranges)
    hi = min(r[1] for r in ranges)
    if hi <= lo:
        raise AnalysisError(f"pilot range collapsed (low {lo:.4g} >= high {hi:.4g}); raise run_cap")
    return [float(v) for v in np.geomspace(lo, hi, n_thresholds)]


def pilot_thresholds(config: ExperimentConfig, ref: ReferenceSet, n_thresholds: int = 8, **kwargs) -> List[float]:
    """Default grid: 8 log-spaced thresholds over the pilot range."""
    return threshold_grid([pilot_range(config, ref, **kwargs)], n_thresholds)


# ---------------------------------------------------------------------------
# Output


def _fmt(x: float) -> str:
    return repr(float(x))


def results_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "statistic", "delta", "b", "mean_stopping_time", "stderr", "censored", "replications"])
    for cell in result.cells():
        w.writerow([result.metric, result.statistic_kind, _fmt(cell["delta"]), _fmt(cell["b"]),
                    _fmt(cell["mean"]), _fmt(cell["stderr"]), cell["censored"], cell["replications"]])
    return buf.getvalue()


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def svg_plot(result: SweepResult, log_y: Optional[bool] = None) -> str:
    """Self-contained line plot: threshold on x, metric on y, one polyline per offset."""
    if log_y is None:
        log_y = result.metric == ARL
    W, H, L, R, T, B = 640, 420, 70, 150, 40, 50
    xs = np.asarray(result.thresholds, dtype=float)
    ys = result.means
    if log_y:
        ys = np.log10(ys)
    ylabel = f"log10({result.metric})" if log_y else result.metric
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">'
        f'{result.metric} vs threshold</text>',
    ]
    if xs.size and ys.size:
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(np.min(ys)), float(np.max(ys))
        if x1 == x0:
            x1 = x0 + 1.0
        if y1 == y0:
            y1 = y0 + 1.0
        px = lambda v: L + (v - x0) / (x1 - x0) * (W - L - R)  # noqa: E731
        py = lambda v: H - B - (v - y0) / (y1 - y0) * (H - T - B)  # noqa: E731
        parts.append(f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>')
        parts.append(f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>')
        for v in np.linspace(x0, x1, 5):
            parts.append(f'<text x="{px(v):.1f}" y="{H - B + 16}" text-anchor="middle" font-family="sans-serif" '
                         f'font-size="11">{v:.3g}</text>')
        for v in np.linspace(y0, y1, 5):
            parts.append(f'<text x="{L - 6}" y="{py(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                         f'font-size="11">{v:.3g}</text>')
        parts.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="12">threshold b</text>')
        parts.append(f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="12" transform="rotate(-90 16 {(T + H - B) / 2:.1f})">{ylabel}</text>')
        for i, delta in enumerate(result.offsets):
            color = _PALETTE[i % len(_PALETTE)]
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys[i]))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
            ly = T + 16 * i + 10
            parts.append(f'<line x1="{W - R + 12}" y1="{ly}" x2="{W - R + 32}" y2="{ly}" stroke="{color}" '
                         f'stroke-width="2"/>')
            parts.append(f'<text x="{W - R + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                         f'delta={delta:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_json(result: SweepResult, fits: Optional[Dict[float, LineFit]] = None) -> str:
    payload = {
        "metric": result.metric,
        "statistic": result.statistic_kind,
        "run_cap": result.run_cap,
        "replications": result.replications,
        "cells": result.cells(),
        "fits": {
            _fmt(d): {"slope": f.slope, "intercept": f.intercept, "r_squared": f.r_squared,
                      "n_points": f.n_points, "degenerate": f.degenerate}
            for d, f in (fits or {}).items()
        },
        "meta": result.meta,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_outputs(result: SweepResult, out_dir, name: str,
                 fits: Optional[Dict[float, LineFit]] = None) -> Dict[str, Path]:
    """Write ``<name>.csv``, ``<name>.svg`` and ``<name>.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{name}.csv", "svg": out / f"{name}.svg", "json": out / f"{name}.json"}
    paths["csv"].write_text(results_csv(result), encoding="utf-8")
    paths["svg"].write_text(svg_plot(result), encoding="utf-8")
    paths["json"].write_text(summary_json(result, fits), encoding="utf-8")
    return paths


def empty_result(metric: str = ARL) -> SweepResult:
    return SweepResult(metric, [], [], np.zeros((0, 0, 2), dtype=np.int64), np.zeros((0, 0, 2), dtype=bool), 0)
