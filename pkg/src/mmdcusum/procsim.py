"""Mixing-process generators with planted change points.

Three families are provided: the 4-D linear state-space model observed
through a fixed matrix (Gaussian or box-truncated Gaussian noise), finite
state Markov chains, and i.i.d. Gaussian streams.  Every source exposes
``chunks(seed)`` (an endless iterator of sample arrays) and
``stream(seed, n)`` (row by row); output is a pure function of the seed.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InputError
from .seeding import derive_int, derive_rng

BENCH_A = np.array([
    [0.96, 0.99, -0.88, 0.56],
    [0.0, 0.98, 0.75, -0.65],
    [0.0, 0.0, 0.97, 0.95],
    [0.0, 0.0, 0.0, 0.94],
])
# Printed as 4x4 with two zero rows although declared 2x4 in the text.
BENCH_C = np.array([
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0],
])
DEFAULT_BURN_IN = 1000
DEFAULT_N2_VARIANCE = 0.01
MAX_REJECTION_ATTEMPTS = 10**6
CHUNK = 1024
_JITTER = 1e-12


def _matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def _cov(value, dim: int, name: str) -> np.ndarray:
    """Scalar -> scalar * I; vector -> diag; matrix as given."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(dim)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (dim, dim):
        raise ConfigurationError(f"{name} must be {dim}x{dim}, got {arr.shape}")
    if not np.allclose(arr, arr.T, atol=1e-12):
        raise ConfigurationError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(arr).min() < -1e-10:
        raise ConfigurationError(f"{name} is not positive semidefinite")
    return arr


def _mean(value, dim: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ConfigurationError(f"{name} must have length {dim}, got shape {arr.shape}")
    return arr


def cholesky_factor(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; semidefinite inputs get a 1e-12 diagonal jitter."""
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(cov + _JITTER * np.eye(cov.shape[0]))


def _box(value, dim: int) -> Optional[np.ndarray]:
    if value is None:
        return None
    arr = np.array(value, dtype=np.float64)
    if arr.shape == (2,):
        arr = np.tile(arr, (dim, 1))
    if arr.shape != (dim, 2) or np.any(arr[:, 0] >= arr[:, 1]):
        raise ConfigurationError(f"truncation box must be (lo, hi) or {dim} rows of (lo, hi) with lo < hi")
    return arr


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _gaussian_batch(rng: np.random.Generator, mean: np.ndarray, L: np.ndarray, n: int) -> np.ndarray:
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + z @ L.T


def _truncated_batch(rng: np.random.Generator, mean: np.ndarray, L: np.ndarray, box: np.ndarray,
                     n: int) -> np.ndarray:
    """``n`` rejection-sampled draws, accepted in draw order."""
    out = np.empty((n, mean.shape[0]))
    filled = 0
    attempts = 0
    while filled < n:
        cand = _gaussian_batch(rng, mean, L, max(2 * (n - filled), 16))
        ok = np.all((cand >= box[:, 0]) & (cand <= box[:, 1]), axis=1)
        acc = cand[ok]
        attempts += cand.shape[0]
        if acc.shape[0] == 0 and attempts >= MAX_REJECTION_ATTEMPTS:
            raise ConfigurationError(
                f"truncated Gaussian: no draw accepted in {attempts} attempts; box and covariance are incompatible"
            )
        if acc.shape[0]:
            attempts = 0
        take = min(acc.shape[0], n - filled)
        out[filled:filled + take] = acc[:take]
        filled += take
    return out


def truncated_gaussian_draw(mean, cov, box, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mean, cov) conditioned on lying inside ``box``."""
    m = np.atleast_1d(np.array(mean, dtype=np.float64))
    L = cholesky_factor(_cov(cov, m.shape[0], "cov"))
    bx = _box(box, m.shape[0])
    for _ in range(MAX_REJECTION_ATTEMPTS):
        x = m + L @ rng.standard_normal(m.shape[0])
        if np.all((x >= bx[:, 0]) & (x <= bx[:, 1])):
            return x
    raise ConfigurationError(
        f"truncated Gaussian: no draw accepted in {MAX_REJECTION_ATTEMPTS} attempts; box and covariance are incompatible"
    )


class Source:
    """Base for seeded sample sources."""

    dim: int
    name: str = "source"

    def chunks(self, seed: int) -> Iterator[np.ndarray]:
        raise NotImplementedError

    def stream(self, seed: int, n: Optional[int] = None) -> Iterator[np.ndarray]:
        rows = itertools.chain.from_iterable(self.chunks(seed))
        return rows if n is None else itertools.islice(rows, n)

    def sample(self, seed: int, n: int) -> np.ndarray:
        """The first ``n`` samples as an array (same values as :meth:`stream`)."""
        parts, have = [], 0
        for chunk in self.chunks(seed):
            parts.append(chunk)
            have += chunk.shape[0]
            if have >= n:
                break
        out = np.concatenate(parts)[:n]
        return out

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(eq=False)
class LinearSystemConfig(Source):
    """``Z_{i+1} = A Z_i + W_i``, ``Y_{i+1} = C Z_{i+1} + V_i`` with ``Z_0 = 0``.

    ``W ~ N1`` and ``V ~ N2``; with a truncation box both noises are
    rejection-sampled into the box.  The first ``burn_in`` observations are
    discarded.
    """

    A: np.ndarray = field(default_factory=lambda: BENCH_A.copy())
    C: np.ndarray = field(default_factory=lambda: BENCH_C.copy())
    n1_mean: np.ndarray = 0.0
    n1_cov: np.ndarray = 0.1
    n2_mean: np.ndarray = 0.0
    n2_cov: np.ndarray = DEFAULT_N2_VARIANCE
    truncation_box: Optional[np.ndarray] = None
    burn_in: int = DEFAULT_BURN_IN
    name: str = "linear-system"

    def __post_init__(self) -> None:
        self.A = _matrix(self.A, "A")
        self.C = _matrix(self.C, "C")
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ConfigurationError("A must be square")
        if self.C.shape[1] != n:
            raise ConfigurationError(f"C must have {n} columns")
        p = self.C.shape[0]
        self.n1_mean = _mean(self.n1_mean, n, "n1_mean")
        self.n1_cov = _cov(self.n1_cov, n, "n1_cov")
        self.n2_mean = _mean(self.n2_mean, p, "n2_mean")
        self.n2_cov = _cov(self.n2_cov, p, "n2_cov")
        self.truncation_box = _box(self.truncation_box, n)
        if self.truncation_box is not None and p != n:
            raise ConfigurationError("a truncation box needs state and observation noise of equal dimension")
        if int(self.burn_in) != self.burn_in or self.burn_in < 0:
            raise ConfigurationError("burn_in must be a non-negative integer")
        rho = spectral_radius(self.A)
        if rho >= 1.0 - 1e-8:
            raise ConfigurationError(f"A is not stable (spectral radius {rho:.6g})")

    @property
    def dim(self) -> int:
        return int(self.C.shape[0])

    def replace(self, **changes) -> "LinearSystemConfig":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return LinearSystemConfig(**values)

    def _noise(self, rng: np.random.Generator, mean: np.ndarray, L: np.ndarray, n: int) -> np.ndarray:
        if self.truncation_box is None:
            return _gaussian_batch(rng, mean, L, n)
        return _truncated_batch(rng, mean, L, self.truncation_box, n)

    def chunks(self, seed: int) -> Iterator[np.ndarray]:
        rng = derive_rng(seed, self.name)
        L1 = cholesky_factor(self.n1_cov)
        L2 = cholesky_factor(self.n2_cov)
        A, C = self.A, self.C
        z = np.zeros(A.shape[0])
        skip = int(self.burn_in)
        while True:
            W = self._noise(rng, self.n1_mean, L1, CHUNK)
            V = self._noise(rng, self.n2_mean, L2, CHUNK)
            Z = np.empty((CHUNK, A.shape[0]))
            for i in range(CHUNK):
                z = A @ z + W[i]
                Z[i] = z
            Y = Z @ C.T + V
            if skip:
                drop = min(skip, CHUNK)
                skip -= drop
                Y = Y[drop:]
            if Y.shape[0]:
                yield Y

    def states(self, seed: int, n: int) -> np.ndarray:
        """Hidden states ``Z`` aligned with the observations of :meth:`sample`."""
        rng = derive_rng(seed, self.name)
        L1 = cholesky_factor(self.n1_cov)
        L2 = cholesky_factor(self.n2_cov)
        total = n + int(self.burn_in)
        out = np.empty((0, self.A.shape[0]))
        z = np.zeros(self.A.shape[0])
        while out.shape[0] < total:
            W = self._noise(rng, self.n1_mean, L1, CHUNK)
            self._noise(rng, self.n2_mean, L2, CHUNK)
            Z = np.empty((CHUNK, self.A.shape[0]))
            for i in range(CHUNK):
                z = self.A @ z + W[i]
                Z[i] = z
            out = np.concatenate([out, Z])
        return out[int(self.burn_in):total]

    def to_dict(self) -> dict:
        return {
            "kind": "linear-system",
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "n1_mean": self.n1_mean.tolist(),
            "n1_cov": self.n1_cov.tolist(),
            "n2_mean": self.n2_mean.tolist(),
            "n2_cov": self.n2_cov.tolist(),
            "truncation_box": None if self.truncation_box is None else self.truncation_box.tolist(),
            "burn_in": int(self.burn_in),
        }


def linear_system_stream(config: LinearSystemConfig, n: Optional[int], seed: int) -> Iterator[np.ndarray]:
    if n is not None and n < 1:
        raise InputError("n must be >= 1")
    return config.stream(seed, n)


@dataclass(eq=False)
class IIDGaussianConfig(Source):
    mean: np.ndarray = 0.0
    cov: np.ndarray = 1.0
    d: int = 1
    truncation_box: Optional[np.ndarray] = None
    name: str = "iid-gaussian"

    def __post_init__(self) -> None:
        self.mean = _mean(self.mean, self.d, "mean")
        self.cov = _cov(self.cov, self.d, "cov")
        self.truncation_box = _box(self.truncation_box, self.d)

    @property
    def dim(self) -> int:
        return int(self.d)

    def replace(self, **changes) -> "IIDGaussianConfig":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return IIDGaussianConfig(**values)

    def chunks(self, seed: int) -> Iterator[np.ndarray]:
        rng = derive_rng(seed, self.name)
        L = cholesky_factor(self.cov)
        while True:
            if self.truncation_box is None:
                yield _gaussian_batch(rng, self.mean, L, CHUNK)
            else:
                yield _truncated_batch(rng, self.mean, L, self.truncation_box, CHUNK)

    def to_dict(self) -> dict:
        return {
            "kind": "iid-gaussian",
            "d": int(self.d),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "truncation_box": None if self.truncation_box is None else self.truncation_box.tolist(),
        }


def check_stochastic(P) -> np.ndarray:
    arr = np.array(P, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise InputError(f"transition matrix must be square, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InputError("transition matrix has negative or non-finite entries")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-12):
        raise InputError("transition matrix rows must sum to 1 within 1e-12")
    return arr


def _check_distribution(init, k: int) -> np.ndarray:
    arr = np.array(init, dtype=np.float64)
    if arr.shape != (k,) or np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-12:
        raise InputError(f"initial distribution must be a probability vector of length {k}")
    return arr


def _cumulative(P: np.ndarray) -> list:
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    return [list(row) for row in cum]


def finite_markov_stream(P, init, n: int, seed: int) -> np.ndarray:
    """``n`` states of the chain started from ``init``."""
    Pa = check_stochastic(P)
    pi0 = _check_distribution(init, Pa.shape[0])
    rng = derive_rng(seed, "markov-chain")
    u = rng.random(n)
    cum = _cumulative(Pa)
    cum0 = list(np.cumsum(pi0))
    cum0[-1] = 1.0
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    state = bisect.bisect_right(cum0, u[0])
    out[0] = state
    for i in range(1, n):
        state = bisect.bisect_right(cum[state], u[i])
        out[i] = state
    return out


def markov_paths(P, init, n: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """``reps`` independent paths of length ``n`` simulated side by side."""
    Pa = check_stochastic(P)
    pi0 = _check_distribution(init, Pa.shape[0])
    cum = np.cumsum(Pa, axis=1)
    cum[:, -1] = 1.0
    cum0 = np.cumsum(pi0)
    cum0[-1] = 1.0
    out = np.empty((reps, n), dtype=np.int64)
    state = np.searchsorted(cum0, rng.random(reps), side="right")
    out[:, 0] = state
    for i in range(1, n):
        u = rng.random(reps)
        state = (u[:, None] >= cum[state]).sum(axis=1)
        out[:, i] = state
    return out


@dataclass(eq=False)
class MarkovChainConfig(Source):
    """Finite chain whose states are emitted as 1-D values ``values[state]``."""

    P: np.ndarray = field(default_factory=lambda: np.array([[0.5, 0.5], [0.5, 0.5]]))
    init: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    name: str = "markov-chain"

    def __post_init__(self) -> None:
        self.P = check_stochastic(self.P)
        k = self.P.shape[0]
        if self.init is None:
            from .mixing import stationary_distribution
            self.init = stationary_distribution(self.P)
        self.init = _check_distribution(self.init, k)
        self.values = np.arange(k, dtype=np.float64) if self.values is None else np.array(self.values, float)

    @property
    def dim(self) -> int:
        return 1

    def chunks(self, seed: int) -> Iterator[np.ndarray]:
        # One long path generated lazily in pieces of CHUNK steps.
        rng = derive_rng(seed, self.name)
        cum = _cumulative(self.P)
        cum0 = list(np.cumsum(self.init))
        cum0[-1] = 1.0
        state = None
        while True:
            u = rng.random(CHUNK)
            out = np.empty(CHUNK, dtype=np.int64)
            for i in range(CHUNK):
                state = bisect.bisect_right(cum0 if state is None else cum[state], u[i])
                out[i] = state
            yield self.values[out].reshape(-1, 1)

    def to_dict(self) -> dict:
        return {"kind": "markov-chain", "P": self.P.tolist(), "init": self.init.tolist(),
                "values": self.values.tolist()}


@dataclass(eq=False)
class ChangeScenario:
    """Planted change at sample index ``tau`` to an independent post-change source."""

    tau: int
    post: Source

    def __post_init__(self) -> None:
        if int(self.tau) != self.tau or self.tau < 0:
            raise ConfigurationError("tau must be a non-negative integer")

    def validate_against(self, pre: Source) -> None:
        if pre.to_dict() == self.post.to_dict():
            raise ConfigurationError("pre- and post-change configurations are identical")
        if pre.dim != self.post.dim:
            raise ConfigurationError("pre- and post-change sources differ in dimension")

    def to_dict(self) -> dict:
        return {"tau": int(self.tau), "post": self.post.to_dict()}


@dataclass(eq=False)
class ChangedSource(Source):
    pre: Source
    scenario: ChangeScenario
    name: str = "changed"

    def __post_init__(self) -> None:
        self.scenario.validate_against(self.pre)

    @property
    def dim(self) -> int:
        return self.pre.dim

    def chunks(self, seed: int) -> Iterator[np.ndarray]:
        remaining = int(self.scenario.tau)
        if remaining:
            for chunk in self.pre.chunks(derive_int(seed, "pre-change")):
                take = chunk[:remaining]
                remaining -= take.shape[0]
                yield take
                if remaining == 0:
                    break
        yield from self.scenario.post.chunks(derive_int(seed, "post-change"))

    def to_dict(self) -> dict:
        return {"kind": "changed", "pre": self.pre.to_dict(), "scenario": self.scenario.to_dict()}


def with_change(generator: Source, scenario: ChangeScenario, seed: int,
                n: Optional[int] = None) -> Iterator[np.ndarray]:
    return ChangedSource(generator, scenario).stream(seed, n)


def lyapunov_covariance(A: np.ndarray, Q: np.ndarray, tol: float = 1e-12, max_iter: int = 10**6) -> np.ndarray:
    """Stationary covariance solving ``S = A S A^T + Q`` by doubling iteration."""
    S = Q.copy()
    Ak = A.copy()
    for _ in range(max_iter):
        S_next = S + Ak @ S @ Ak.T
        Ak = Ak @ Ak
        if np.max(np.abs(S_next - S)) <= tol * max(1.0, np.max(np.abs(S_next))):
            return S_next
        S = S_next
    raise ConfigurationError("Lyapunov iteration did not converge")


BENCH_MEAN_SHIFT = 0.01
BENCH_NULL_VARIANCE = 0.1
BENCH_POST_VARIANCE = 0.5
BENCH_BOX: Tuple[float, float] = (-1.0, 1.0)


def benchmark_system(truncated: bool = False, **overrides) -> LinearSystemConfig:
    """The pre-change linear system with N1 = N(0, 0.1 I)."""
    kw = dict(n1_cov=BENCH_NULL_VARIANCE, truncation_box=BENCH_BOX if truncated else None)
    kw.update(overrides)
    return LinearSystemConfig(**kw)


def benchmark_scenarios(pre: LinearSystemConfig) -> dict:
    """Mean-shift and variance-change scenarios at tau = 0."""
    n = pre.A.shape[0]
    return {
        "mean-shift": ChangeScenario(0, pre.replace(n1_mean=np.full(n, BENCH_MEAN_SHIFT))),
        "variance-change": ChangeScenario(0, pre.replace(n1_cov=BENCH_POST_VARIANCE)),
    }
