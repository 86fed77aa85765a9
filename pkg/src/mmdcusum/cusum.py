"""MMD-CUSUM detector: O(1)-memory recursion and the gated stopping rule.

Samples are buffered into non-overlapping blocks of size ``r``.  Each full
block yields an increment ``statistic(block, reference) - delta``; the
detector tracks the running partial sum ``s`` and its running minimum
(floored at the initial value 0), and ``s_hat = s - s_min`` equals the
largest suffix sum of the increments clamped at 0.  An alarm fires at the
first completed block ``t`` with ``s_hat > b`` and ``t * r >= M``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .kernels import Kernel
from .mmd import BIASED, STATISTIC_KINDS, UNBIASED, ReferenceSet, block_statistics

# Slack on the [-delta, 2*sqrt(k_bar) - delta] increment check.
_BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class DetectorConfig:
    r: int
    delta: float
    b: float
    M: Optional[int] = None
    kernel: Optional[Kernel] = None
    statistic_kind: str = BIASED
    h: Optional[int] = None

    def __post_init__(self) -> None:
        if int(self.r) != self.r or self.r < 1:
            raise ConfigurationError(f"block size r must be a positive integer, got {self.r!r}")
        if self.M is None:
            object.__setattr__(self, "M", int(self.r))
        if int(self.M) != self.M or self.M < self.r:
            raise ConfigurationError(f"minimum sample count M={self.M!r} must be an integer >= r={self.r}")
        if not math.isfinite(self.b) or self.b <= 0:
            raise ConfigurationError(f"threshold b must be positive, got {self.b!r}")
        if not math.isfinite(self.delta) or self.delta < 0:
            raise ConfigurationError(f"offset delta must be >= 0, got {self.delta!r}")
        if self.statistic_kind not in STATISTIC_KINDS:
            raise ConfigurationError(f"statistic_kind must be one of {STATISTIC_KINDS}")
        if self.statistic_kind == UNBIASED and self.r < 2:
            raise ConfigurationError("the unbiased statistic needs r >= 2")

    def with_(self, **changes) -> "DetectorConfig":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return DetectorConfig(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel"] = self.kernel.to_dict() if self.kernel is not None else None
        return out


@dataclass
class CusumState:
    t: int = 0
    s: float = 0.0
    s_min: float = 0.0
    s_hat: float = 0.0
    buffer: List[np.ndarray] = field(default_factory=list)
    consumed: int = 0
    # Kahan compensation for s.
    carry: float = 0.0


@dataclass(frozen=True)
class BlockRecord:
    t: int
    increment: float
    s: float
    s_hat: float
    alarmed: bool


@dataclass
class StoppingReport:
    alarmed: bool
    T: Optional[int]
    trace: List[BlockRecord]
    config: dict
    seed: Optional[int] = None
    blocks: int = 0

    def summary(self) -> dict:
        return {
            "alarmed": self.alarmed,
            "T": self.T,
            "blocks": self.blocks,
            "config": self.config,
            "seed": self.seed,
        }


def update_statistic(state: CusumState, increment: float) -> CusumState:
    """One step of the recursion; mutates and returns ``state``."""
    y = increment - state.carry
    s_new = state.s + y
    state.carry = (s_new - state.s) - y
    state.s = s_new
    state.s_min = min(state.s_min, s_new)
    state.s_hat = s_new - state.s_min
    state.t += 1
    return state


def brute_force_stat(increments: Sequence[float]) -> float:
    """``max(0, max_n sum_{k=n}^{t} increments[k])`` by direct double loop."""
    best = 0.0
    t = len(increments)
    for n in range(t):
        best = max(best, math.fsum(increments[n:t]))
    return best


def detector_init(config: DetectorConfig, ref: ReferenceSet) -> CusumState:
    if config.kernel is not None and config.kernel != ref.kernel:
        raise ConfigurationError(
            f"detector kernel {config.kernel.to_dict()} does not match reference kernel {ref.kernel.to_dict()}"
        )
    if config.h is not None and config.h != ref.h:
        raise ConfigurationError(f"config h={config.h} but reference holds {ref.h} samples")
    return CusumState()


def _block_increment(block: np.ndarray, config: DetectorConfig, ref: ReferenceSet) -> float:
    stat = float(block_statistics(block, ref, config.r, config.statistic_kind)[0])
    inc = stat - config.delta
    if config.statistic_kind == BIASED:
        upper = 2.0 * math.sqrt(ref.kernel.sup_bound) - config.delta
        if not (-config.delta - _BOUND_SLACK <= inc <= upper + _BOUND_SLACK):
            raise AssertionError(f"increment {inc} outside [{-config.delta}, {upper}]")
    return inc


def _finish_block(state: CusumState, increment: float, config: DetectorConfig) -> BlockRecord:
    update_statistic(state, increment)
    state.consumed += config.r
    alarmed = state.s_hat > config.b and state.consumed >= config.M
    return BlockRecord(state.t, increment, state.s, state.s_hat, alarmed)


def push_sample(state: CusumState, x, config: DetectorConfig, ref: ReferenceSet) -> Optional[BlockRecord]:
    """Buffer one observation; returns a record when it completes a block."""
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    if xv.shape[0] != ref.dim:
        raise InputError(f"sample dimension {xv.shape[0]} does not match reference dimension {ref.dim}")
    state.buffer.append(xv)
    if len(state.buffer) < config.r:
        return None
    block = np.vstack(state.buffer)
    state.buffer.clear()
    return _finish_block(state, _block_increment(block, config, ref), config)


def push_block(state: CusumState, block, config: DetectorConfig, ref: ReferenceSet) -> BlockRecord:
    """Feed a full block of ``r`` observations at once (buffer must be empty)."""
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if ref.dim == 1 else arr.reshape(1, -1)
    if arr.ndim == 2 and arr.shape[1] != ref.dim:
        raise InputError(f"sample dimension {arr.shape[1]} does not match reference dimension {ref.dim}")
    if arr.shape != (config.r, ref.dim):
        raise InputError(f"block of shape {arr.shape}, expected {(config.r, ref.dim)}")
    if state.buffer:
        raise InputError("push_block with a partially filled buffer")
    return _finish_block(state, _block_increment(arr, config, ref), config)


def first_alarm(increments: Iterable[float], b: float, r: int, M: int) -> Optional[int]:
    """Stopping sample index for a precomputed increment sequence, or None."""
    state = CusumState()
    for inc in increments:
        update_statistic(state, inc)
        if state.s_hat > b and state.t * r >= M:
            return state.t * r
    return None


def stopping_times(statistics: Sequence[float], deltas: Sequence[float], thresholds: Sequence[float],
                   r: int, M: int) -> np.ndarray:
    """Stopping indices for every (delta, b) pair from one statistic sequence.

    The statistic sequence does not depend on delta or b, so one pass per
    delta gives the stopping time for every threshold; ``-1`` marks a run
    that never alarms within the sequence.  Results equal running
    :func:`run_to_stop` separately for each pair on the same stream.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    out = np.full((len(deltas), len(thresholds)), -1, dtype=np.int64)
    for i, delta in enumerate(deltas):
        state = CusumState()
        pending = list(range(len(thresholds)))
        for stat in statistics:
            update_statistic(state, float(stat) - delta)
            if state.t * r < M:
                continue
            still = []
            for j in pending:
                if state.s_hat > thresholds[j]:
                    out[i, j] = state.t * r
                else:
                    still.append(j)
            pending = still
            if not pending:
                break
    return out


def run_to_stop(stream: Iterable, config: DetectorConfig, ref: ReferenceSet, max_samples: int,
                trace: bool = True, seed: Optional[int] = None) -> StoppingReport:
    """Consume ``stream`` until the stopping rule fires or ``max_samples`` are read.

    A run that exhausts the stream or the sample budget is reported with
    ``alarmed=False`` and ``T=None`` (censored).
    """
    state = detector_init(config, ref)
    records: List[BlockRecord] = []
    it = iter(stream)
    budget = int(max_samples)
    alarmed = False
    while budget >= config.r:
        chunk = list(itertools.islice(it, config.r))
        if len(chunk) < config.r:
            break
        budget -= config.r
        rec = push_block(state, np.asarray(chunk, dtype=np.float64).reshape(config.r, -1), config, ref)
        if trace:
            records.append(rec)
        if rec.alarmed:
            alarmed = True
            break
    return StoppingReport(
        alarmed=alarmed,
        T=state.t * config.r if alarmed else None,
        trace=records,
        config=config.to_dict(),
        seed=seed,
        blocks=state.t,
    )
