"""Mixing coefficients, kernel mixing sums and Hoeffding-type tail bounds.

For a stationary finite Markov chain the past and future sigma-algebras in
the alpha/beta/phi definitions collapse onto the boundary coordinates, so
the coefficients reduce to finite computations on ``P^n`` and the
stationary law ``pi``:

* ``phi(n)  = max_x TV(P^n(x, .), pi)``
* ``beta(n) = sum_x pi(x) TV(P^n(x, .), pi)``
* ``alpha(n) = max_{A, B} |P(X_0 in A, X_n in B) - pi(A) pi(B)|``
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import AnalysisError, InputError, SizeError
from .kernels import Kernel, as_samples
from .procsim import check_stochastic, markov_paths
from .seeding import derive_rng

MAX_ALPHA_STATES = 10
KINDS = ("alpha", "beta", "phi")


@dataclass
class MixingProfile:
    kind: str
    coefficients: np.ndarray  # index i holds lag n = i + 1
    params: dict = field(default_factory=dict)
    note: str = ""

    def at(self, n: int) -> float:
        return float(self.coefficients[n - 1])


def stationary_distribution(P) -> np.ndarray:
    """Solve ``pi P = pi`` with ``sum(pi) = 1`` exactly (least squares on the stacked system)."""
    Pa = check_stochastic(P)
    k = Pa.shape[0]
    lhs = np.vstack([Pa.T - np.eye(k), np.ones((1, k))])
    rhs = np.zeros(k + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def check_ergodic(P) -> np.ndarray:
    """Raise unless ``P`` is irreducible and aperiodic (primitive)."""
    Pa = check_stochastic(P)
    k = Pa.shape[0]
    # Wielandt: a primitive k x k matrix has P^m > 0 for m = (k-1)^2 + 1.
    pattern = (Pa > 0).astype(np.int64)
    power = pattern.copy()
    for _ in range((k - 1) ** 2):
        power = np.minimum(power @ pattern, 1)
    if not np.all(power > 0):
        raise InputError("transition matrix is reducible or periodic")
    return Pa


def _tv_rows(Pn: np.ndarray, pi: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(Pn - pi[None, :]).sum(axis=1)


def _alpha_at(Pn: np.ndarray, pi: np.ndarray, subsets: np.ndarray) -> float:
    # For fixed B the best A collects the states where g_B(x) has one sign,
    # g_B(x) = pi(x) (P^n(x, B) - pi(B)); the sum of g_B over all x is 0.
    joint_dev = pi[:, None] * (Pn - pi[None, :])  # [x, y]
    g = joint_dev @ subsets.T  # [x, B]
    return float(np.max(np.clip(g, 0.0, None).sum(axis=0)))


def _all_subsets(k: int) -> np.ndarray:
    return np.array(list(itertools.product([0.0, 1.0], repeat=k)))


def markov_mixing_coeffs(P, n_max: int, include_alpha: bool = True) -> Dict[str, MixingProfile]:
    """Exact alpha/beta/phi coefficients for lags ``1..n_max``.

    Alpha is computed by enumeration over event pairs and is limited to
    chains with at most 10 states; for larger chains it is replaced by the
    upper bound ``beta(n) / 2`` with a note on the profile.
    """
    Pa = check_ergodic(P)
    k = Pa.shape[0]
    if n_max < 1:
        raise InputError("n_max must be >= 1")
    pi = stationary_distribution(Pa)
    exact_alpha = include_alpha and k <= MAX_ALPHA_STATES
    subsets = _all_subsets(k) if exact_alpha else None
    phi = np.empty(n_max)
    beta = np.empty(n_max)
    alpha = np.empty(n_max)
    Pn = np.eye(k)
    for i in range(n_max):
        Pn = Pn @ Pa
        tv = _tv_rows(Pn, pi)
        phi[i] = tv.max()
        beta[i] = float(pi @ tv)
        alpha[i] = _alpha_at(Pn, pi, subsets) if exact_alpha else beta[i] / 2.0
    note = "" if exact_alpha else f"alpha replaced by beta/2 upper bound ({k} states > {MAX_ALPHA_STATES})"
    profiles = {
        "phi": MixingProfile("phi", phi, {"Phi": phi_sum(Pa)}),
        "beta": MixingProfile("beta", beta),
        "alpha": MixingProfile("alpha", alpha, note=note),
    }
    return profiles


def alpha_exact(P, n: int) -> float:
    """Single-lag exact alpha; raises :class:`SizeError` above 10 states."""
    Pa = check_ergodic(P)
    if Pa.shape[0] > MAX_ALPHA_STATES:
        raise SizeError(f"exact alpha enumeration is limited to {MAX_ALPHA_STATES} states")
    pi = stationary_distribution(Pa)
    return _alpha_at(np.linalg.matrix_power(Pa, n), pi, _all_subsets(Pa.shape[0]))


def phi_coefficient(P, n: int) -> float:
    Pa = check_stochastic(P)
    pi = stationary_distribution(Pa)
    return float(_tv_rows(np.linalg.matrix_power(Pa, n), pi).max())


def phi_sum(P, tol: float = 1e-13, max_terms: int = 10**5) -> float:
    """``Phi = sum_{n >= 0} phi(n)``, partial sums until the terms drop below ``tol``."""
    Pa = check_stochastic(P)
    pi = stationary_distribution(Pa)
    Pn = np.eye(Pa.shape[0])
    terms = []
    for _ in range(max_terms):
        term = float(_tv_rows(Pn, pi).max())
        terms.append(term)
        if term <= tol:
            return math.fsum(terms)
        Pn = Pn @ Pa
    raise AnalysisError("phi coefficients are not summable within the term budget")


# ---------------------------------------------------------------------------
# Kernel mixing coefficient


def exact_kernel_mixing(P, values: Sequence[float], kernel: Kernel, n_max: int) -> np.ndarray:
    """Exact ``rho_k(n)`` for ``n = 0..n_max`` of a stationary chain emitting ``values[state]``.

    ``rho_k(n) = |sum_{x,y} pi(x) (P^n(x, y) - pi(y)) k(v_x, v_y)|``.
    """
    Pa = check_stochastic(P)
    pi = stationary_distribution(Pa)
    vals = as_samples(values, "values")
    K = kernel.matrix(vals, vals)
    out = np.empty(n_max + 1)
    Pn = np.eye(Pa.shape[0])
    for n in range(n_max + 1):
        out[n] = abs(float(np.sum(pi[:, None] * (Pn - pi[None, :]) * K)))
        Pn = Pn @ Pa
    return out


def kernel_mixing_coefficients(stream, kernel: Kernel, n_max: int) -> np.ndarray:
    """Empirical ``rho_k(n)`` for ``n = 0..n_max`` from one stationary path.

    ``E k(X_i, X_{i+n})`` is averaged along the path; the centering term
    ``E k(X, X')`` is estimated from well-separated pairs (lags between a
    quarter and a half of the path length).
    """
    X = as_samples(stream, "stream")
    N = X.shape[0]
    if n_max < 0 or N < 10 * max(n_max, 1):
        raise InputError(f"stream of length {N} too short for n_max={n_max} (need >= 10 * n_max)")
    far_lags = np.unique(np.linspace(N // 4, N // 2, 8).astype(int))
    far = [kernel.paired(X[:-L], X[L:]).mean() for L in far_lags if 0 < L < N]
    centre = float(np.mean(far))
    rho = np.empty(n_max + 1)
    for n in range(n_max + 1):
        lagged = kernel.paired(X[: N - n], X[n:]).mean()
        rho[n] = abs(float(lagged) - centre)
    return rho


def kernel_mixing_sum(stream, kernel: Kernel, n_max: int) -> float:
    """Estimated ``Sigma_mu = sum_{n=0}^{n_max} rho_k(n)``."""
    return float(np.sum(kernel_mixing_coefficients(stream, kernel, n_max)))


# ---------------------------------------------------------------------------
# Tail bounds


def n_hat(n: int, c: float, gamma: float) -> int:
    """Effective sample size ``floor(n / ceil((10 n / c)^(1 / (gamma + 1))))``."""
    if n < 1 or c <= 0 or gamma <= 0:
        raise InputError("n_hat needs n >= 1 and c, gamma > 0")
    blocks = math.ceil((10.0 * n / c) ** (1.0 / (gamma + 1.0)))
    return n // blocks


def phi_hoeffding_bound(n: int, epsilon: float, sp_f: float, Phi: float) -> float:
    if n < 1 or epsilon < 0 or sp_f <= 0 or Phi < 0:
        raise InputError("phi bound needs n >= 1, epsilon >= 0, sp_f > 0, Phi >= 0")
    return min(1.0, math.exp(-2.0 * n * epsilon**2 / ((2.0 * Phi + 1.0) ** 2 * sp_f**2)))


def _check_exp_params(epsilon: float, sp_f: float, c: float, gamma: float) -> None:
    if not 0 < epsilon < sp_f:
        raise InputError(f"epsilon must lie in (0, sp_f) = (0, {sp_f}), got {epsilon}")
    if c <= 0 or gamma <= 0:
        raise InputError("c and gamma must be positive")


def beta_hoeffding_bound(n: int, epsilon: float, sp_f: float, beta_bar: float, c: float, gamma: float) -> float:
    _check_exp_params(epsilon, sp_f, c, gamma)
    if beta_bar < 0:
        raise InputError("beta_bar must be >= 0")
    m = n_hat(n, c, gamma)
    return min(1.0, (1.0 + beta_bar / math.e**2) * math.exp(-2.0 * m * epsilon**2 / sp_f**2))


def alpha_hoeffding_bound(n: int, epsilon: float, sp_f: float, alpha_bar: float, c: float, gamma: float) -> float:
    _check_exp_params(epsilon, sp_f, c, gamma)
    if alpha_bar < 0:
        raise InputError("alpha_bar must be >= 0")
    m = n_hat(n, c, gamma)
    return min(1.0, (1.0 + 4.0 * math.exp(-2.0) * alpha_bar) * math.exp(-2.0 * m * epsilon**2 / sp_f**2))


# Coefficients at or below this level are treated as exact zeros (round-off).
ZERO_FLOOR = 1e-14
_GAMMA_GRID = np.round(np.arange(0.25, 3.0001, 0.05), 10)


def fit_exponential_envelope(coefficients: Sequence[float]) -> tuple[float, float, float]:
    """``(bar, c, gamma)`` with ``coef(n) <= bar * exp(-c n^gamma)`` for every lag ``n >= 1``.

    Least squares on ``log coef(n)`` over a grid of ``gamma``; the prefactor
    is then inflated so the envelope dominates every computed point.  An
    identically zero sequence gives ``bar = 0`` (with ``c = gamma = 1``).
    """
    coef = np.asarray(coefficients, dtype=float)
    n = np.arange(1, coef.size + 1, dtype=float)
    keep = coef > ZERO_FLOOR
    if not np.any(keep):
        return 0.0, 1.0, 1.0
    if keep.sum() < 2:
        # A single informative lag: any decay rate works; use gamma = 1.
        idx = int(np.argmax(keep))
        c = 1.0
        return float(coef[idx] * math.exp(c * n[idx])), c, 1.0
    y = np.log(coef[keep])
    best = None
    for gamma in _GAMMA_GRID:
        xg = n[keep] ** gamma
        design = np.column_stack([np.ones_like(xg), -xg])
        (log_bar, c), *_ = np.linalg.lstsq(design, y, rcond=None)
        if c <= 0:
            continue
        resid = float(np.sum((design @ np.array([log_bar, c]) - y) ** 2))
        if best is None or resid < best[0]:
            best = (resid, float(c), float(gamma))
    if best is None:
        raise AnalysisError("coefficients are not exponentially decaying; no envelope fits")
    _, c, gamma = best
    bar = float(np.max(coef[keep] * np.exp(c * n[keep] ** gamma)))
    return bar, c, gamma


# ---------------------------------------------------------------------------
# Monte Carlo domination checks


@dataclass
class TailBoundReport:
    kind: str
    n: int
    epsilon_grid: np.ndarray
    empirical_tail: np.ndarray
    stderr: np.ndarray
    theoretical_bound: np.ndarray
    reps: int
    params: dict = field(default_factory=dict)

    @property
    def dominated(self) -> np.ndarray:
        return self.empirical_tail - 3.0 * self.stderr <= self.theoretical_bound

    @property
    def all_dominated(self) -> bool:
        return bool(np.all(self.dominated))

    def rows(self) -> list:
        return [
            (float(e), float(p), float(s), float(b), bool(d))
            for e, p, s, b, d in zip(self.epsilon_grid, self.empirical_tail, self.stderr,
                                     self.theoretical_bound, self.dominated)
        ]


def empirical_tail(P, f: Sequence[float], n: int, epsilon_grid: Sequence[float], reps: int,
                   seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Frequency of ``S_n - n E_pi f >= n eps`` over stationary-start paths."""
    Pa = check_stochastic(P)
    pi = stationary_distribution(Pa)
    fv = np.asarray(f, dtype=float)
    mean_f = float(pi @ fv)
    rng = derive_rng(seed, "tail-paths", n)
    dev = np.empty(reps)
    batch = 2000
    for start in range(0, reps, batch):
        m = min(batch, reps - start)
        paths = markov_paths(Pa, pi, n, m, rng)
        dev[start:start + m] = fv[paths].mean(axis=1) - mean_f
    eps = np.asarray(epsilon_grid, dtype=float)
    # Small tolerance so that exact lattice hits are not lost to round-off.
    freq = np.array([(dev >= e - 1e-12).mean() for e in eps])
    stderr = np.sqrt(freq * (1.0 - freq) / reps)
    return freq, stderr


def verify_bound(P, f: Sequence[float], kind: str, epsilon_grid: Sequence[float], n: int, reps: int,
                 seed: int, n_max: int = 200, override: Optional[dict] = None) -> TailBoundReport:
    """Compare empirical tails with the phi/beta/alpha bound built from exact coefficients.

    ``override`` replaces computed bound parameters (``Phi`` or
    ``bar``/``c``/``gamma``), e.g. for negative controls.
    """
    if kind not in KINDS:
        raise InputError(f"kind must be one of {KINDS}")
    Pa = check_ergodic(P)
    fv = np.asarray(f, dtype=float)
    if fv.shape != (Pa.shape[0],):
        raise InputError("f must assign one value per state")
    sp_f = float(fv.max() - fv.min())
    if sp_f <= 0:
        raise InputError("f must have positive span")
    eps = np.asarray(sorted(epsilon_grid), dtype=float)
    profiles = markov_mixing_coeffs(Pa, n_max, include_alpha=(kind == "alpha"))
    if kind == "phi":
        params = {"Phi": phi_sum(Pa)}
    else:
        bar, c, gamma = fit_exponential_envelope(profiles[kind].coefficients)
        params = {"bar": bar, "c": c, "gamma": gamma, "n_hat": n_hat(n, c, gamma)}
    params.update(override or {})
    if kind == "phi":
        bound = [phi_hoeffding_bound(n, e, sp_f, params["Phi"]) for e in eps]
    else:
        if kind == "beta":
            fn: Callable = beta_hoeffding_bound
        else:
            fn = alpha_hoeffding_bound
        bound = [fn(n, e, sp_f, params["bar"], params["c"], params["gamma"]) for e in eps]
    freq, stderr = empirical_tail(Pa, fv, n, eps, reps, seed)
    params["sp_f"] = sp_f
    return TailBoundReport(kind, n, eps, freq, stderr, np.asarray(bound), reps, params)
