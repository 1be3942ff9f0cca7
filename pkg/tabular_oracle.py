"""
Exact dynamic programming on small finite MDPs.

Everything here is closed-form linear algebra on dense matrices, used as ground
truth for the policy-improvement bounds, the ratio-form TV identities and the
advantage estimators. Inputs are validated on construction; all functions are
pure.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
SOLVE_TOL = 1e-9
IDENTITY_TOL = 1e-12


class OracleError(ValueError):
    """Malformed tabular input or a numerically failed solve."""


class SupportViolation(OracleError):
    """A policy puts mass on an action that the reference policy never takes."""


def _check_rows(probs: np.ndarray, what: str):
    if np.any(probs < 0):
        raise OracleError(f"{what} has negative entries")
    sums = probs.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > PROB_TOL:
        raise OracleError(f"{what} rows must sum to 1, worst sum {sums.flat[np.argmax(np.abs(sums - 1.0))]:.15g}")


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray      # r[s, a]
    rho0: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        r = np.array(self.reward, dtype=np.float64)
        rho0 = np.array(self.rho0, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise OracleError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise OracleError(f"reward shape {r.shape} does not match transition {P.shape}")
        if rho0.shape != (P.shape[0],):
            raise OracleError(f"rho0 shape {rho0.shape} does not match {P.shape[0]} states")
        if not np.all(np.isfinite(r)):
            raise OracleError("reward must be finite")
        _check_rows(P, "transition")
        _check_rows(rho0, "rho0")
        if not 0.0 <= self.gamma < 1.0:
            raise OracleError(f"gamma must be in [0, 1), got {self.gamma}")
        for arr in (P, r, rho0):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise OracleError(f"policy must be a (S, A) matrix, got shape {probs.shape}")
        _check_rows(probs, "policy")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True, eq=False)
class OracleReport:
    J: float
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    d_pi: np.ndarray


@dataclass
class CertResult:
    name: str
    lhs: float
    rhs: float
    slack: float
    holds: bool
    parts: Dict[str, "CertResult"] = field(default_factory=dict)
    details: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "holds": self.holds}
        if self.parts:
            doc["parts"] = {k: v.to_json() for k, v in self.parts.items()}
        if self.details:
            doc["details"] = dict(self.details)
        return doc


def _inequality(name, lhs, rhs, tol=SOLVE_TOL, details=None) -> CertResult:
    slack = float(lhs - rhs)
    return CertResult(name, float(lhs), float(rhs), slack, slack >= -tol, details=details or {})


def _equality(name, lhs, rhs, tol, details=None) -> CertResult:
    slack = -abs(float(lhs - rhs))
    return CertResult(name, float(lhs), float(rhs), slack, slack > -tol, details=details or {})


def _combine(name, parts: Dict[str, CertResult]) -> CertResult:
    worst = min(parts.values(), key=lambda p: p.slack)
    return CertResult(name, worst.lhs, worst.rhs, worst.slack,
                      all(p.holds for p in parts.values()), parts=parts)


def _check_shapes(mdp: TabularMDP, *policies: TabularPolicy):
    for pi in policies:
        if pi.probs.shape != (mdp.num_states, mdp.num_actions):
            raise OracleError(f"policy shape {pi.probs.shape} does not match MDP "
                              f"({mdp.num_states}, {mdp.num_actions})")


def check_support(pi: TabularPolicy, pi_ref: TabularPolicy):
    """Raise SupportViolation unless pi(a|s) > 0 implies pi_ref(a|s) > 0."""
    bad = (pi.probs > 0) & (pi_ref.probs <= 0)
    if bad.any():
        s, a = np.argwhere(bad)[0]
        raise SupportViolation(f"policy has mass {pi.probs[s, a]:.3g} at (s={s}, a={a}) "
                               f"outside the reference support")


# -- exact solves -------------------------------------------------------------

def solve_policy(mdp: TabularMDP, pi: TabularPolicy) -> OracleReport:
    """J, V, Q, A and the discounted visitation distribution of pi, by direct LU solves."""
    _check_shapes(mdp, pi)
    P_pi = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi.probs, mdp.reward)
    system = np.eye(mdp.num_states) - mdp.gamma * P_pi
    lu = lu_factor(system)

    V = lu_solve(lu, r_pi)
    d_pi = (1.0 - mdp.gamma) * lu_solve(lu, mdp.rho0, trans=1)

    residual = np.max(np.abs(V - (r_pi + mdp.gamma * P_pi @ V)))
    d_residual = abs(d_pi.sum() - 1.0)
    if residual > SOLVE_TOL or d_residual > SOLVE_TOL:
        raise OracleError(f"linear solve residual too large: bellman={residual:.3e}, "
                          f"visitation={d_residual:.3e}")

    Q = mdp.reward + mdp.gamma * mdp.transition @ V
    A = Q - V[:, None]
    J = float(mdp.rho0 @ V)
    return OracleReport(J=J, V=V, Q=Q, A=A, d_pi=d_pi)


def evaluate_policy_iterative(mdp: TabularMDP, pi: TabularPolicy, tol: float = 1e-12,
                              max_iter: int = 100_000) -> np.ndarray:
    """Successive Bellman sweeps until the sup-norm change drops below tol."""
    _check_shapes(mdp, pi)
    P_pi = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi.probs, mdp.reward)
    V = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        V_new = r_pi + mdp.gamma * P_pi @ V
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    raise OracleError(f"policy evaluation did not converge in {max_iter} sweeps")


def tv_per_state(pi_a: TabularPolicy, pi_b: TabularPolicy) -> np.ndarray:
    return 0.5 * np.abs(pi_a.probs - pi_b.probs).sum(axis=1)


def tv_state(pi_a: TabularPolicy, pi_b: TabularPolicy, d) -> float:
    """E_{s~d}[TV(pi_a, pi_b)(s)]."""
    d = np.asarray(d, dtype=np.float64)
    if pi_a.probs.shape != pi_b.probs.shape or d.shape != (pi_a.probs.shape[0],):
        raise OracleError(f"shape mismatch: {pi_a.probs.shape}, {pi_b.probs.shape}, {d.shape}")
    return float(d @ tv_per_state(pi_a, pi_b))


def _penalty_constant(report_k: OracleReport, pi: TabularPolicy) -> float:
    return float(np.max(np.abs(np.einsum("sa,sa->s", pi.probs, report_k.A))))


def penalty_constant(mdp: TabularMDP, pi: TabularPolicy, pi_k: TabularPolicy) -> float:
    """C = max_s |E_{a~pi}[A^{pi_k}(s, a)]|."""
    _check_shapes(mdp, pi, pi_k)
    return _penalty_constant(solve_policy(mdp, pi_k), pi)


def _ratio(pi: TabularPolicy, pi_ref: TabularPolicy) -> np.ndarray:
    return np.divide(pi.probs, pi_ref.probs, out=np.zeros_like(pi.probs), where=pi_ref.probs > 0)


# -- bounds -------------------------------------------------------------------

def _reference_terms(mdp, report_k, pi, pi_ref, report_ref):
    """Surrogate and TV expectation of the bound taken under a reference policy."""
    weighted = report_ref.d_pi[:, None] * pi_ref.probs * _ratio(pi, pi_ref) * report_k.A
    surrogate = weighted.sum() / (1.0 - mdp.gamma)
    tv = tv_state(pi, pi_ref, report_ref.d_pi)
    return surrogate, tv


def _mixture_bound(mdp, pi_k, priors, nu, pi, name):
    report_k = solve_policy(mdp, pi_k)
    J_pi = solve_policy(mdp, pi).J
    C = _penalty_constant(report_k, pi)
    coef = 2.0 * mdp.gamma * C / (1.0 - mdp.gamma) ** 2

    surrogate, expected_tv = 0.0, 0.0
    for weight, prior in zip(nu, priors):
        report_ref = report_k if prior is pi_k else solve_policy(mdp, prior)
        surr_i, tv_i = _reference_terms(mdp, report_k, pi, prior, report_ref)
        surrogate += weight * surr_i
        expected_tv += weight * tv_i
    penalty = coef * expected_tv
    lhs = J_pi - report_k.J
    return _inequality(name, lhs, surrogate - penalty,
                       details={"surrogate": float(surrogate), "penalty": float(penalty), "C": C,
                                "expected_tv": float(expected_tv)})


def _check_nu(nu, M: int) -> np.ndarray:
    nu = np.asarray(nu, dtype=np.float64).reshape(-1)
    if nu.size != M:
        raise OracleError(f"nu has {nu.size} entries for {M} prior policies")
    if np.any(nu < 0) or abs(nu.sum() - 1.0) > SOLVE_TOL:
        raise OracleError(f"nu must be a distribution, got {nu}")
    return nu


def verify_lb_standard(mdp: TabularMDP, pi_k: TabularPolicy, pi: TabularPolicy) -> CertResult:
    """Both sides of the single-policy improvement lower bound, exactly."""
    _check_shapes(mdp, pi_k, pi)
    check_support(pi, pi_k)
    return _mixture_bound(mdp, pi_k, [pi_k], np.ones(1), pi, "lb_standard")


def verify_lb_generalized(mdp: TabularMDP, prior_policies: Sequence[TabularPolicy], nu,
                          pi: TabularPolicy) -> CertResult:
    """Both sides of the lower bound mixed over prior policies; prior_policies[0] is pi_k."""
    if not prior_policies:
        raise OracleError("at least one prior policy is required")
    nu = _check_nu(nu, len(prior_policies))
    _check_shapes(mdp, pi, *prior_policies)
    pi_k = prior_policies[0]
    for prior in prior_policies:
        check_support(pi, prior)
        check_support(pi_k, prior)
    result = _mixture_bound(mdp, pi_k, list(prior_policies), nu, pi, "lb_generalized")
    return result


def verify_triangle_decomposition(mdp: TabularMDP, prior_policies: Sequence[TabularPolicy], nu,
                                  pi: TabularPolicy) -> CertResult:
    """Mixture TV penalty against its split into a current-policy term plus consecutive prior TVs."""
    nu = _check_nu(nu, len(prior_policies))
    _check_shapes(mdp, pi, *prior_policies)
    pi_k = prior_policies[0]
    M = len(prior_policies)
    visits = [solve_policy(mdp, prior).d_pi for prior in prior_policies]

    lhs = sum(nu[i] * tv_state(pi, prior_policies[i], visits[i]) for i in range(M))
    current = sum(nu[i] * tv_state(pi, pi_k, visits[i]) for i in range(M))
    correction = 0.0
    for j in range(1, M):
        for i in range(j, M):
            correction += nu[i] * tv_state(prior_policies[j - 1], prior_policies[j], visits[i])
    rhs = current + correction
    slack = float(rhs - lhs)
    return CertResult("triangle_decomposition", float(lhs), float(rhs), slack, slack >= -SOLVE_TOL,
                      details={"current_term": float(current), "correction": float(correction)})


def verify_appendix_lemmas(mdp: TabularMDP, pi_k: TabularPolicy, pi: TabularPolicy,
                           pi_ref: TabularPolicy) -> CertResult:
    """
    Certify the three supporting results of the generalized bound:

    performance_difference  J(pi) - J(pi_k) equals the d^pi expectation of A^{pi_k}
    visitation_tv           TV(d^pi, d^ref) <= gamma/(1-gamma) E_{d^ref}[TV(pi, pi_ref)]
    reference_bound         the lower bound with expectations under pi_ref
    """
    _check_shapes(mdp, pi_k, pi, pi_ref)
    check_support(pi, pi_ref)
    report_k = solve_policy(mdp, pi_k)
    report_pi = solve_policy(mdp, pi)
    report_ref = report_k if pi_ref is pi_k else solve_policy(mdp, pi_ref)
    gamma = mdp.gamma

    expected_adv = np.einsum("s,sa,sa->", report_pi.d_pi, pi.probs, report_k.A) / (1.0 - gamma)
    perf_diff = _equality("performance_difference", report_pi.J - report_k.J, expected_adv, SOLVE_TOL)

    visitation_gap = 0.5 * np.abs(report_pi.d_pi - report_ref.d_pi).sum()
    policy_tv = tv_state(pi, pi_ref, report_ref.d_pi)
    visitation = _inequality("visitation_tv", gamma / (1.0 - gamma) * policy_tv, visitation_gap)

    C = _penalty_constant(report_k, pi)
    surrogate, tv = _reference_terms(mdp, report_k, pi, pi_ref, report_ref)
    penalty = 2.0 * gamma * C / (1.0 - gamma) ** 2 * tv
    reference = _inequality("reference_bound", report_pi.J - report_k.J, surrogate - penalty,
                            details={"surrogate": float(surrogate), "penalty": float(penalty)})

    return _combine("appendix_lemmas", {
        "performance_difference": perf_diff,
        "visitation_tv": visitation,
        "reference_bound": reference,
    })


def verify_tv_ratio_identities(mdp: TabularMDP, prior_policies: Sequence[TabularPolicy], nu,
                               pi: TabularPolicy) -> CertResult:
    """Expected TV written as a half mean absolute ratio deviation, for pi_k and for the mixture."""
    nu = _check_nu(nu, len(prior_policies))
    _check_shapes(mdp, pi, *prior_policies)
    pi_k = prior_policies[0]
    for prior in prior_policies:
        check_support(pi, prior)
        check_support(pi_k, prior)
    visits = [solve_policy(mdp, prior).d_pi for prior in prior_policies]

    single_lhs = tv_state(pi, pi_k, visits[0])
    single_rhs = 0.5 * np.einsum("s,sa,sa->", visits[0], pi_k.probs, np.abs(_ratio(pi, pi_k) - 1.0))

    multi_lhs, multi_rhs = 0.0, 0.0
    for weight, prior, d in zip(nu, prior_policies, visits):
        multi_lhs += weight * tv_state(pi, pi_k, d)
        deviation = np.abs(_ratio(pi, prior) - _ratio(pi_k, prior))
        multi_rhs += weight * 0.5 * np.einsum("s,sa,sa->", d, prior.probs, deviation)

    return _combine("tv_ratio_identities", {
        "current_policy": _equality("current_policy", single_lhs, single_rhs, IDENTITY_TOL),
        "policy_mixture": _equality("policy_mixture", multi_lhs, multi_rhs, IDENTITY_TOL),
    })


# -- instance generation ------------------------------------------------------

def _random_simplex_rows(rng: np.random.Generator, shape) -> np.ndarray:
    raw = rng.uniform(0.05, 1.0, size=shape)
    return raw / raw.sum(axis=-1, keepdims=True)


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int,
               gamma: Optional[float] = None) -> TabularMDP:
    if gamma is None:
        gamma = rng.uniform(0.5, 0.9)
    return TabularMDP(
        transition=_random_simplex_rows(rng, (num_states, num_actions, num_states)),
        reward=rng.uniform(-1.0, 1.0, size=(num_states, num_actions)),
        rho0=_random_simplex_rows(rng, (num_states,)),
        gamma=gamma,
    )


def random_policy(rng: np.random.Generator, num_states: int, num_actions: int) -> TabularPolicy:
    return TabularPolicy(_random_simplex_rows(rng, (num_states, num_actions)))


def mix_policies(pi_a: TabularPolicy, pi_b: TabularPolicy, t: float) -> TabularPolicy:
    """(1 - t) pi_a + t pi_b."""
    return TabularPolicy((1.0 - t) * pi_a.probs + t * pi_b.probs)


@dataclass(frozen=True, eq=False)
class OracleInstance:
    mdp: TabularMDP
    priors: List[TabularPolicy]
    nu: np.ndarray
    pi: TabularPolicy


def random_instance(rng: np.random.Generator, max_states: int = 6, max_actions: int = 4,
                    max_policies: int = 4) -> OracleInstance:
    """A random MDP with M strictly positive prior policies, a candidate policy and weights."""
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    M = int(rng.integers(1, max_policies + 1))
    mdp = random_mdp(rng, S, A)
    priors = [random_policy(rng, S, A) for _ in range(M)]
    nu = rng.uniform(0.05, 1.0, size=M)
    return OracleInstance(mdp=mdp, priors=priors, nu=nu / nu.sum(), pi=random_policy(rng, S, A))


# -- sampling -----------------------------------------------------------------

def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((u >= cumulative).sum(axis=1), probs.shape[1] - 1)


def simulate_chains(mdp: TabularMDP, pi: TabularPolicy, n_chains: int, horizon: int,
                    rng: np.random.Generator, start_states=None) -> Dict[str, np.ndarray]:
    """
    Roll n_chains independent trajectories of length horizon in lockstep.

    Returns arrays of shape (n_chains, horizon) for states, actions, rewards and
    next_states. Starting states are drawn from rho0 unless given.
    """
    if start_states is None:
        state = _sample_rows(rng, np.broadcast_to(mdp.rho0, (n_chains, mdp.num_states)))
    else:
        state = np.broadcast_to(np.asarray(start_states, dtype=np.int64), (n_chains,)).copy()

    out = {key: np.zeros((n_chains, horizon), dtype=np.int64) for key in ("states", "actions", "next_states")}
    out["rewards"] = np.zeros((n_chains, horizon))
    for t in range(horizon):
        action = _sample_rows(rng, pi.probs[state])
        nxt = _sample_rows(rng, mdp.transition[state, action])
        out["states"][:, t] = state
        out["actions"][:, t] = action
        out["rewards"][:, t] = mdp.reward[state, action]
        out["next_states"][:, t] = nxt
        state = nxt
    return out


# -- JSON ---------------------------------------------------------------------

def mdp_to_json(mdp: TabularMDP) -> dict:
    return {
        "gamma": mdp.gamma,
        "rho0": mdp.rho0.tolist(),
        "reward": mdp.reward.tolist(),
        "transition": mdp.transition.tolist(),
    }


def mdp_from_json(doc: dict) -> TabularMDP:
    missing = {"gamma", "rho0", "reward", "transition"} - set(doc)
    if missing:
        raise OracleError(f"MDP document missing keys: {sorted(missing)}")
    return TabularMDP(transition=doc["transition"], reward=doc["reward"], rho0=doc["rho0"], gamma=doc["gamma"])
