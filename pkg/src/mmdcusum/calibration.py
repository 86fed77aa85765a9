"""Data-driven choice of the CUSUM offset.

The null level of the block statistic is estimated from the reference
itself: contiguous length-``r`` segments are held out and compared with
the remaining reference, which keeps the dependence structure intact.
The offset is then the smallest grid value whose simulated average run
length reaches the target.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, List, Sequence

import numpy as np

from .cusum import DetectorConfig, detector_init, run_to_stop
from .errors import CalibrationError
from .kernels import gram_sum, row_sums
from .mmd import ReferenceSet
from .seeding import derive_int, derive_rng

MIN_SPLITS = 30
CENSOR_FACTOR = 100
NULL_QUANTILE = 95.0


def _held_out_mmd(ref: ReferenceSet, start: int, r: int) -> float:
    """Biased MMD between ``ref[start:start+r]`` and the rest of the reference."""
    X = ref.samples
    seg = X[start:start + r]
    kern = ref.kernel
    seg_all = row_sums(kern, seg, X)  # sum_j k(seg_i, X_j)
    seg_seg = gram_sum(kern, seg, seg)
    cross_all = math.fsum(seg_all)
    rest_n = ref.h - r
    # sum over rest x rest = total - 2 * seg x all + seg x seg
    rest_rest = ref.gram_total - 2.0 * cross_all + seg_seg
    seg_rest = cross_all - seg_seg
    val = seg_seg / (r * r) + rest_rest / (rest_n * rest_n) - 2.0 * seg_rest / (r * rest_n)
    return math.sqrt(max(0.0, val))


def null_mmd_samples(ref: ReferenceSet, r: int, n_splits: int, seed: int) -> np.ndarray:
    if ref.h < 3 * r:
        raise CalibrationError(f"reference of size {ref.h} is too small for r={r} (need h >= 3r)")
    if n_splits < MIN_SPLITS:
        raise CalibrationError(f"n_splits must be >= {MIN_SPLITS}, got {n_splits}")
    rng = derive_rng(seed, "null-level")
    starts = rng.integers(0, ref.h - r + 1, size=n_splits)
    return np.array([_held_out_mmd(ref, int(s), r) for s in starts])


def estimate_null_level(ref: ReferenceSet, r: int, n_splits: int = 200, seed: int = 0) -> float:
    """95th percentile of held-out segment MMDs: a proxy for ``C(r, h) + delta``."""
    return float(np.percentile(null_mmd_samples(ref, r, n_splits, seed), NULL_QUANTILE))


@dataclass
class CalibrationReport:
    c_estimate: float
    delta_grid: List[float]
    arl_estimates: List[float]
    arl_stderr: List[float]
    censored: List[int]
    chosen_delta: float
    target_arl: float
    replications: int
    run_cap: int
    seed: int
    r: int
    M: int
    b: float
    floor_enforced: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_rows(self) -> list:
        return [
            (d, a, s, c)
            for d, a, s, c in zip(self.delta_grid, self.arl_estimates, self.arl_stderr, self.censored)
        ]


def calibrate_delta(ref: ReferenceSet, source: Callable[[int], Iterable], config: DetectorConfig,
                    target_arl: float, grid: Sequence[float], reps: int, seed: int,
                    n_splits: int = 200, enforce_floor: bool = True) -> CalibrationReport:
    """Smallest offset on ``grid`` whose simulated ARL reaches ``target_arl``.

    ``source(seed)`` must return a fresh null stream.  Each run is censored
    at ``100 * target_arl`` samples and then counts at the cap, so the ARL
    estimate is a lower bound whenever runs are censored.  With
    ``enforce_floor`` (the default) every grid value must be at least the
    estimated null level.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise CalibrationError("empty delta grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise CalibrationError("delta grid must be strictly ascending")
    if reps < 10:
        raise CalibrationError(f"reps must be >= 10, got {reps}")
    detector_init(config, ref)
    c_est = estimate_null_level(ref, config.r, n_splits, seed)
    if enforce_floor and grid[0] < c_est:
        raise CalibrationError(
            f"delta grid starts at {grid[0]:.6g}, below the estimated null level {c_est:.6g}"
        )
    cap = int(math.ceil(CENSOR_FACTOR * target_arl))
    cap = max(cap, config.M)
    means, errs, censored = [], [], []
    for i, delta in enumerate(grid):
        cfg = config.with_(delta=delta)
        times = np.empty(reps)
        n_cens = 0
        for j in range(reps):
            stream = source(derive_int(seed, "calibration", i, j))
            rep = run_to_stop(stream, cfg, ref, max_samples=cap, trace=False)
            if rep.alarmed:
                times[j] = rep.T
            else:
                times[j] = cap
                n_cens += 1
        means.append(float(times.mean()))
        errs.append(float(times.std(ddof=1) / math.sqrt(reps)))
        censored.append(n_cens)
    ok = [d for d, a in zip(grid, means) if a >= target_arl]
    if not ok:
        raise CalibrationError(
            f"no delta on the grid reaches ARL {target_arl}; best achieved {max(means):.6g}"
        )
    return CalibrationReport(
        c_estimate=c_est, delta_grid=grid, arl_estimates=means, arl_stderr=errs, censored=censored,
        chosen_delta=ok[0], target_arl=float(target_arl), replications=reps, run_cap=cap, seed=seed,
        r=config.r, M=config.M, b=config.b, floor_enforced=enforce_floor,
    )
