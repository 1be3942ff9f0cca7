"""
Policy weights for sample reuse.

A weight vector nu puts a distribution over the last M policies (index 0 is the
current policy). This module holds the arithmetic around it: effective sample
size, the clip-range mapping, the uniform-weight improvement factors, and the
two convex programs that pick nu optimally, plus a brute-force grid oracle used
to check them.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

SNAP_TOL = 1e-12
SUM_TOL = 1e-9
GRID_MAX_POLICIES = 5
GRID_MAX_STEP = 1e-2
GRID_MAX_POINTS = 5_000_000

PROGRAMS = ("essopt", "tvopt", "uniform")


class WeightsError(ValueError):
    """Invalid or infeasible policy-weight request."""


class GridBudgetError(WeightsError):
    """Grid oracle asked to enumerate more points than it is allowed to."""


@dataclass(frozen=True, eq=False)
class PolicyWeights:
    nu: np.ndarray

    def __post_init__(self):
        nu = np.array(self.nu, dtype=np.float64).reshape(-1)
        if nu.size == 0:
            raise WeightsError("policy weights must have at least one entry")
        if not np.all(np.isfinite(nu)):
            raise WeightsError(f"policy weights must be finite, got {nu}")
        if np.any(nu < 0):
            raise WeightsError(f"policy weights must be nonnegative, got {nu}")
        if abs(nu.sum() - 1.0) > SUM_TOL:
            raise WeightsError(f"policy weights must sum to 1, got sum {nu.sum():.12g}")
        nu.setflags(write=False)
        object.__setattr__(self, "nu", nu)

    @property
    def M(self) -> int:
        return int(self.nu.size)

    @property
    def expected_age_plus_one(self) -> float:
        return float(np.dot(self.nu, np.arange(1, self.M + 1)))

    @property
    def ess_per_n(self) -> float:
        return float(1.0 / np.dot(self.nu, self.nu))

    @property
    def effective_m(self) -> int:
        nonzero = np.flatnonzero(self.nu > 0)
        return int(nonzero[-1]) + 1

    def trimmed(self) -> "PolicyWeights":
        """Drop trailing zero weights."""
        return PolicyWeights(self.nu[: self.effective_m].copy())

    def truncated(self, j: int) -> "PolicyWeights":
        """Keep the newest j entries and renormalize (used while the replay window fills)."""
        if j < 1:
            raise WeightsError(f"cannot truncate policy weights to {j} entries")
        head = self.nu[: min(j, self.M)]
        total = head.sum()
        if total <= 0:
            raise WeightsError(f"no weight on the newest {j} policies: {self.nu}")
        return PolicyWeights(head / total)

    def to_dict(self) -> dict:
        return {
            "nu": [float(v) for v in self.nu],
            "M": self.M,
            "effective_M": self.effective_m,
            "expected_age_plus_one": self.expected_age_plus_one,
            "ess_per_n": self.ess_per_n,
        }


def _as_nu(nu) -> np.ndarray:
    if isinstance(nu, PolicyWeights):
        return nu.nu
    return PolicyWeights(nu).nu


def uniform_weights(M: int) -> PolicyWeights:
    if M < 1:
        raise WeightsError(f"M must be >= 1, got {M}")
    return PolicyWeights(np.full(M, 1.0 / M))


def effective_sample_size(nu, n: int) -> float:
    """ESS = n / sum(nu_i^2)."""
    nu = _as_nu(nu)
    return float(n / np.dot(nu, nu))


def epsilon_mapping(nu, eps_ppo: float) -> float:
    """Clip parameter that keeps the worst-case performance loss of PPO with eps_ppo."""
    if eps_ppo <= 0:
        raise WeightsError(f"eps_ppo must be positive, got {eps_ppo}")
    nu = _as_nu(nu)
    return float(eps_ppo / np.dot(nu, np.arange(1, nu.size + 1)))


def _check_b(B) -> int:
    if int(B) != B or B < 1:
        raise WeightsError(f"B must be a positive integer, got {B}")
    return int(B)


def tv_factor_uniform(B: int) -> float:
    """Growth of the per-update TV change with uniform weights over M = B policies."""
    B = _check_b(B)
    return 2 * B / (B + 1)


def ess_factor_uniform(B: int) -> float:
    """Growth of the effective sample size with uniform weights over M = 2B - 1 policies."""
    B = _check_b(B)
    return (2 * B - 1) / B


def _finalize(nu: np.ndarray, M_bar: int) -> PolicyWeights:
    nu = np.where(nu < SNAP_TOL, 0.0, nu)
    nu = nu / nu.sum()
    padded = np.zeros(M_bar)
    padded[: nu.size] = nu
    return PolicyWeights(padded)


def _linear_family(m: int, b: float) -> np.ndarray:
    """nu_i = 1/m - b (i - mean index) over the first m policies."""
    idx = np.arange(m, dtype=np.float64)
    return 1.0 / m - b * (idx - (m - 1) / 2.0)


def solve_tvopt(B: int, M_bar: int) -> PolicyWeights:
    """
    Minimize E[i+1] subject to sum(nu^2) <= 1/B on the simplex of size M_bar.

    The stationary points are linear in the index on a prefix support of size m,
    with the norm constraint binding, so every admissible m is scanned and the
    best nonnegative candidate kept.
    """
    B = _check_b(B)
    if M_bar < B:
        raise WeightsError(f"tvopt infeasible: M_bar={M_bar} < B={B}")

    best, best_obj = None, math.inf
    for m in range(B, M_bar + 1):
        if m == 1:
            cand = np.ones(1)
        else:
            spread = m * (m * m - 1) / 12.0
            b = math.sqrt(max(1.0 / B - 1.0 / m, 0.0) / spread)
            cand = _linear_family(m, b)
        if cand.min() < -SNAP_TOL:
            continue
        obj = float(np.dot(cand, np.arange(1, m + 1)))
        if obj < best_obj - 1e-12:
            best, best_obj = cand, obj

    if best is None:
        logger.warning(f"tvopt scan found no candidate for B={B}, M_bar={M_bar}; using SLSQP")
        return solve_numerically("tvopt", B, M_bar)
    return _finalize(best, M_bar)


def solve_essopt(B: int, M_bar: int) -> PolicyWeights:
    """
    Minimize sum(nu^2) subject to E[i+1] = B on the simplex of size M_bar.

    Same structure as solve_tvopt with the linear constraint binding instead of
    the norm. Ties between support sizes go to the smaller support.
    """
    B = _check_b(B)
    if M_bar < 2 * B - 1:
        raise WeightsError(f"essopt requires M_bar >= 2B-1, got M_bar={M_bar}, B={B}")

    best, best_obj = None, math.inf
    for m in range(1, M_bar + 1):
        if m == 1:
            if B != 1:
                continue
            cand = np.ones(1)
        else:
            spread = m * (m * m - 1) / 12.0
            b = ((m + 1) / 2.0 - B) / spread
            cand = _linear_family(m, b)
        if cand.min() < -SNAP_TOL:
            continue
        obj = float(np.dot(cand, cand))
        if obj < best_obj - 1e-12:
            best, best_obj = cand, obj

    if best is None:
        logger.warning(f"essopt scan found no candidate for B={B}, M_bar={M_bar}; using SLSQP")
        return solve_numerically("essopt", B, M_bar)
    return _finalize(best, M_bar)


def solve_numerically(program: str, B: int, M_bar: int) -> PolicyWeights:
    """General-purpose SLSQP solve of either program, used as a fallback and cross-check."""
    B = _check_b(B)
    ages = np.arange(1, M_bar + 1, dtype=np.float64)
    constraints = [{"type": "eq", "fun": lambda x: x.sum() - 1.0, "jac": lambda x: np.ones_like(x)}]
    if program == "tvopt":
        fun = lambda x: float(np.dot(x, ages))
        jac = lambda x: ages
        constraints.append({"type": "ineq", "fun": lambda x: 1.0 / B - np.dot(x, x), "jac": lambda x: -2 * x})
    elif program == "essopt":
        fun = lambda x: float(np.dot(x, x))
        jac = lambda x: 2 * x
        constraints.append({"type": "eq", "fun": lambda x: np.dot(x, ages) - B, "jac": lambda x: ages})
    else:
        raise WeightsError(f"unknown weight program {program!r}")

    x0 = np.full(M_bar, 1.0 / M_bar)
    result = minimize(fun, x0, jac=jac, method="SLSQP", bounds=[(0.0, 1.0)] * M_bar,
                      constraints=constraints, options={"ftol": 1e-14, "maxiter": 500})
    if not result.success:
        raise WeightsError(f"SLSQP failed for {program} B={B} M_bar={M_bar}: {result.message}")
    return _finalize(np.clip(result.x, 0.0, None), M_bar)


@lru_cache(maxsize=None)
def _compositions(total: int, parts: int) -> np.ndarray:
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    blocks = []
    for first in range(total + 1):
        rest = _compositions(total - first, parts - 1)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.vstack(blocks)


def grid_oracle(program: str, B: int, M_bar: int, step: float):
    """
    Exhaustive search of either program over the simplex discretized at `step`.

    Feasibility is checked in integer arithmetic on the grid counts, so points
    exactly on the constraint are kept. Returns (PolicyWeights, objective).
    """
    B = _check_b(B)
    if program not in ("essopt", "tvopt"):
        raise WeightsError(f"grid oracle supports essopt/tvopt, got {program!r}")
    if step > GRID_MAX_STEP or step <= 0:
        raise WeightsError(f"grid step must be in (0, {GRID_MAX_STEP}], got {step}")
    if M_bar > GRID_MAX_POLICIES or M_bar < 1:
        raise GridBudgetError(f"grid oracle supports 1 <= M_bar <= {GRID_MAX_POLICIES}, got {M_bar}")
    K = int(round(1.0 / step))
    if abs(K * step - 1.0) > 1e-9:
        raise WeightsError(f"grid step must divide 1, got {step}")
    n_points = math.comb(K + M_bar - 1, M_bar - 1)
    if n_points > GRID_MAX_POINTS:
        raise GridBudgetError(f"grid of {n_points} points exceeds budget {GRID_MAX_POINTS}")

    counts = _compositions(K, M_bar)
    ages = np.arange(1, M_bar + 1, dtype=np.int64)
    age_sum = counts @ ages
    sq_sum = np.einsum("ij,ij->i", counts, counts)
    if program == "tvopt":
        feasible = B * sq_sum <= K * K
        objective = age_sum / K
    else:
        feasible = age_sum == B * K
        objective = sq_sum / (K * K)
    if not feasible.any():
        raise WeightsError(f"no feasible grid point for {program} B={B} M_bar={M_bar} step={step}")

    idx = np.flatnonzero(feasible)
    best = idx[np.argmin(objective[idx])]
    logger.debug(f"grid oracle {program}: {n_points} points, {idx.size} feasible")
    return PolicyWeights(counts[best] / K), float(objective[best])


def program_objective(program: str, nu) -> float:
    nu = _as_nu(nu)
    if program == "tvopt":
        return float(np.dot(nu, np.arange(1, nu.size + 1)))
    if program == "essopt":
        return float(np.dot(nu, nu))
    raise WeightsError(f"unknown weight program {program!r}")


def resolve_weights(program: str, B: int, M_bar: int) -> PolicyWeights:
    """Weights used for training: the program's solution with trailing zeros removed."""
    B = _check_b(B)
    if program == "essopt":
        weights = solve_essopt(B, M_bar)
    elif program == "tvopt":
        weights = solve_tvopt(B, M_bar)
    elif program == "uniform":
        if M_bar < 2 * B - 1:
            raise WeightsError(f"uniform weights need M_bar >= 2B-1, got M_bar={M_bar}, B={B}")
        weights = uniform_weights(2 * B - 1)
    else:
        raise WeightsError(f"unknown weight program {program!r}; expected one of {PROGRAMS}")
    weights = weights.trimmed()
    logger.info(f"resolved {program} weights for B={B}: nu={np.round(weights.nu, 6).tolist()}")
    return weights
