"""Exact tabular checks of the expectile value and advantage-operator results.

Everything here works on :class:`~adac.envs.tabular.TabularMdp` instances
with exact enumeration (no sampling, no function approximation), so each
result can be checked against an independent computation.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .advantage import quantile
from .envs.tabular import TabularMdp, make_random_mdp

TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
TAU_NEAR_ONE = 0.999


class ConvergenceError(RuntimeError):
    pass


# --- expectiles ------------------------------------------------------------

def _expectile_rows(x: np.ndarray, p: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise tau-expectile of finite distributions (atoms x, weights p).

    The first-order condition g(y) = sum p |tau - 1(x < y)| (x - y) is
    piecewise linear and strictly decreasing, so the root is located between
    consecutive sorted atoms and solved on that linear piece.
    """
    order = np.argsort(x, axis=1, kind="stable")
    xs = np.take_along_axis(x, order, axis=1)
    ps = np.take_along_axis(p, order, axis=1)
    px = ps * xs
    # below[k]: mass/first moment of atoms strictly left of position k
    cp = np.cumsum(ps, axis=1)
    cpx = np.cumsum(px, axis=1)
    tot_p = cp[:, -1:]
    tot_px = cpx[:, -1:]
    lo_p = cp - ps
    lo_px = cpx - px
    # g at atom y=xs[k]: atoms at or above count with tau, below with 1 - tau
    g = tau * ((tot_px - lo_px) - (tot_p - lo_p) * xs) + (1 - tau) * (lo_px - lo_p * xs)
    # largest k with g(xs[k]) >= 0 (zero-weight atoms are pinned to the row max)
    k = np.sum(g >= 0, axis=1) - 1
    k = np.clip(k, 0, xs.shape[1] - 1)
    rows = np.arange(xs.shape[0])
    # on (xs[k], xs[k+1]] atoms <= k are below y
    below_p = cp[rows, k]
    below_px = cpx[rows, k]
    above_p = tot_p[:, 0] - below_p
    above_px = tot_px[:, 0] - below_px
    denom = tau * above_p + (1 - tau) * below_p
    y = (tau * above_px + (1 - tau) * below_px) / denom
    lo = xs[rows, k]
    hi = np.where(k + 1 < xs.shape[1], xs[rows, np.minimum(k + 1, xs.shape[1] - 1)], lo)
    return np.clip(y, lo, np.maximum(lo, hi))


def exact_expectile(values, probs, tau: float, method: str = "piecewise",
                    tol: float = 1e-12) -> float:
    """tau-expectile of the finite distribution sum_i probs[i] * delta(values[i]).

    ``method="bisection"`` bisects g on [min x, max x] down to ``tol``;
    ``"piecewise"`` (default) solves g's linear piece directly.
    """
    x = np.asarray(values, dtype=float).ravel()
    p = np.asarray(probs, dtype=float).ravel()
    if x.size == 0 or x.shape != p.shape:
        raise ValueError("values and probs must be non-empty and of equal length")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be non-negative and sum to 1")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    keep = p > 0
    x, p = x[keep], p[keep]
    if method == "piecewise":
        return float(_expectile_rows(x[None], p[None], tau)[0])
    if method != "bisection":
        raise ValueError(f"unknown method {method!r}")

    def g(y):
        w = np.where(x < y, 1.0 - tau, tau)
        return float(np.sum(p * w * (x - y)))

    lo, hi = float(x.min()), float(x.max())
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --- operators -------------------------------------------------------------

@dataclass
class _Atoms:
    """Per-state joint atoms of (behavior action, next state)."""

    reward: np.ndarray   # (S, K)
    nxt: np.ndarray      # (S, K) int
    prob: np.ndarray     # (S, K)


def _atoms(mdp: TabularMdp) -> _Atoms:
    S, A = mdp.state_count, mdp.action_count
    joint = mdp.behavior[:, :, None] * mdp.transition
    K = int(max(1, (joint > 0).reshape(S, -1).sum(axis=1).max()))
    rew = np.zeros((S, K))
    nxt = np.zeros((S, K), dtype=int)
    prob = np.zeros((S, K))
    for s in range(S):
        a_idx, n_idx = np.nonzero(joint[s] > 0)
        n = a_idx.size
        rew[s, :n] = mdp.reward[s, a_idx]
        nxt[s, :n] = n_idx
        prob[s, :n] = joint[s, a_idx, n_idx]
        if n < K:
            # zero-weight padding copies a real atom so it never widens the bracket
            rew[s, n:] = rew[s, 0]
            nxt[s, n:] = nxt[s, 0]
    prob /= prob.sum(axis=1, keepdims=True)
    return _Atoms(rew, nxt, prob)


def expectile_bellman(mdp: TabularMdp, V, tau: float, _atoms_cache: _Atoms | None = None) -> np.ndarray:
    """Apply the tau-expectile Bellman operator once."""
    at = _atoms(mdp) if _atoms_cache is None else _atoms_cache
    V = np.asarray(V, dtype=float)
    return _expectile_rows(at.reward + mdp.gamma * V[at.nxt], at.prob, tau)


def fixed_point_v_tau(mdp: TabularMdp, tau: float, tol: float = 1e-10,
                      max_iter: int = 10**6, return_iterations: bool = False):
    """V_tau by iterating the expectile Bellman operator from zero."""
    at = _atoms(mdp)
    V = np.zeros(mdp.state_count)
    for it in range(1, max_iter + 1):
        V_new = _expectile_rows(at.reward + mdp.gamma * V[at.nxt], at.prob, tau)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta < tol:
            return (V, it) if return_iterations else V
    raise ConvergenceError(f"expectile value iteration exceeded {max_iter} sweeps")


def expectile_regression_solve(mdp: TabularMdp, tau: float, max_iter: int = 200) -> np.ndarray:
    """Stationary point of the expectile TD regression for a one-hot linear V.

    Solves sum_i p_i w_i (r_i + gamma V(s'_i) - V(s)) = 0 for every state,
    with w_i = |tau - 1(residual < 0)|, by re-solving the linear system for
    the current sign pattern until the pattern stops changing.
    """
    at = _atoms(mdp)
    S, K = at.prob.shape
    rows = np.repeat(np.arange(S), K).reshape(S, K)
    V = np.zeros(S)
    signs = None
    for _ in range(max_iter):
        u = at.reward + mdp.gamma * V[at.nxt] - V[:, None]
        new_signs = u >= 0
        if signs is not None:
            # a zero residual contributes nothing whatever its weight; keep the old side
            tie = np.abs(u) <= 1e-12 * (1.0 + np.abs(V).max())
            new_signs = np.where(tie, signs, new_signs)
            if np.array_equal(new_signs, signs):
                return V
        signs = new_signs
        w = at.prob * np.where(signs, tau, 1.0 - tau)
        M = np.zeros((S, S))
        np.add.at(M, (rows, rows), w)
        np.add.at(M, (rows, at.nxt), -mdp.gamma * w)
        c = np.sum(w * at.reward, axis=1)
        V = np.linalg.solve(M, c)
    raise ConvergenceError("expectile regression sign pattern did not settle")


def dataset_optimal_v(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 10**6) -> np.ndarray:
    """Value iteration of max over behavior-supported actions."""
    return _max_value_iteration(mdp, mdp.support, tol, max_iter)


def optimal_v(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 10**6) -> np.ndarray:
    """Classical optimal value (max over every action)."""
    return _max_value_iteration(mdp, np.ones_like(mdp.support), tol, max_iter)


def _max_value_iteration(mdp, allowed, tol, max_iter):
    V = np.zeros(mdp.state_count)
    for _ in range(max_iter):
        q = mdp.reward + mdp.gamma * mdp.transition @ V
        V_new = np.where(allowed, q, -np.inf).max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    raise ConvergenceError("value iteration did not converge")


def behavior_value(mdp: TabularMdp) -> np.ndarray:
    """Exact evaluation of the behavior policy by a linear solve."""
    S = mdp.state_count
    P_mu = np.einsum("sa,sat->st", mdp.behavior, mdp.transition)
    r_mu = np.sum(mdp.behavior * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(S) - mdp.gamma * P_mu, r_mu)


def advantage_bellman_apply(mdp: TabularMdp, Q, policy, A, lam: float) -> np.ndarray:
    """r(s,a) + gamma E_{s'} E_{a'~policy} [Q(s',a') + lam A(s',a')]."""
    Q = np.asarray(Q, dtype=float)
    policy = np.asarray(policy, dtype=float)
    if np.any(np.abs(policy.sum(axis=1) - 1) > 1e-9):
        raise ValueError("policy rows must sum to 1")
    boot = np.sum(policy * (Q + lam * np.asarray(A, dtype=float)), axis=1)
    return mdp.reward + mdp.gamma * mdp.transition @ boot


def advantage_fixed_point(mdp: TabularMdp, policy, A, lam: float) -> np.ndarray:
    """Unique fixed point of :func:`advantage_bellman_apply`, by a linear solve."""
    S, Act = mdp.reward.shape
    policy = np.asarray(policy, dtype=float)
    # P_pi[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')
    P_pi = (mdp.transition[:, :, :, None] * policy[None, None]).reshape(S * Act, S * Act)
    bonus = lam * np.sum(policy * np.asarray(A, dtype=float), axis=1)
    rhs = (mdp.reward + mdp.gamma * mdp.transition @ bonus).ravel()
    q = np.linalg.solve(np.eye(S * Act) - mdp.gamma * P_pi, rhs)
    return q.reshape(S, Act)


def tabular_advantage(mdp: TabularMdp, V, kappa: float) -> np.ndarray:
    """Next-state value of each action minus the kappa-quantile over behavior actions."""
    nv = mdp.transition @ np.asarray(V, dtype=float)
    thr = np.array([quantile(nv[s, mdp.support[s]], kappa) for s in range(mdp.state_count)])
    return nv - thr[:, None]


# --- certification ---------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    description: str
    tolerance: float
    gating: bool = True
    trials: int = 0
    violations: int = 0
    worst: float = 0.0          # largest measured quantity (error or gap / bound ratio)
    failing: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def record(self, value: float, ok: bool, mdp: TabularMdp | None = None, **context):
        self.trials += 1
        self.worst = max(self.worst, float(value))
        if not ok:
            self.violations += 1
            if mdp is not None and len(self.failing) < 5:
                self.failing.append({"mdp": json.loads(mdp.to_json()), **context})


@dataclass
class CertificateReport:
    checks: dict
    trial_count: int
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values() if c.gating)

    def table(self) -> str:
        lines = [f"{'check':<5} {'trials':>7} {'viol':>5} {'worst':>12} {'tol':>10}  result  description"]
        for c in self.checks.values():
            lines.append(
                f"{c.name:<5} {c.trials:>7} {c.violations:>5} {c.worst:>12.3e} {c.tolerance:>10.1e}  "
                f"{('PASS' if c.passed else 'FAIL') if c.gating else 'info':<6}  {c.description}"
            )
        lines.append(f"{self.trial_count} MDPs in {self.seconds:.1f}s: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "trial_count": self.trial_count,
            "seconds": self.seconds,
            "passed": self.passed,
            "checks": {
                k: {
                    "description": c.description, "tolerance": c.tolerance, "trials": c.trials,
                    "violations": c.violations, "worst": c.worst, "passed": c.passed,
                    "gating": c.gating,
                }
                for k, c in self.checks.items()
            },
        }

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "certificate.json"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2))
        for c in self.checks.values():
            for i, fail in enumerate(c.failing):
                p = out_dir / f"failing_{c.name}_{i}.json"
                p.write_text(json.dumps(fail))
                paths.append(p)
        return paths


def certify_propositions(trial_count: int = 200, rng: np.random.Generator | None = None,
                         max_states: int = 10, max_actions: int = 4,
                         gammas=(0.8, 0.9, 0.95), lambdas=(0.0, 0.5, 1.0, 2.0),
                         kappa: float = 0.75, q_pairs: int = 100) -> CertificateReport:
    """Run every tabular certificate over ``trial_count`` random MDPs.

    Even-numbered trials use deterministic dynamics, odd ones stochastic.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    t0 = time.perf_counter()
    checks = {
        "P1": CheckResult("P1", "regression minimizer == expectile fixed point", 1e-3),
        "P2a": CheckResult("P2a", "V_tau non-decreasing in tau", 1e-9),
        "P2b": CheckResult("P2b", "deterministic: |V_0.999 - V*_mu| small", 1e-2),
        "P2c": CheckResult("P2c", "stochastic: V_0.999 >= V*_mu (limit statement)", 1e-9,
                           gating=False),
        "P2e": CheckResult("P2e", "deterministic: gap shrinks >= 5x from tau 0.999 to 0.9999", 0.2),
        "P2d": CheckResult("P2d", "|V_tau| <= R_max / (1 - gamma)", 1e-9),
        "P3": CheckResult("P3", "advantage operator is gamma-contractive", 1e-12),
        "P4": CheckResult("P4", "|Q^A - Q| <= 2 lam R_max / (1 - gamma)^2 (ratio)", 1.0),
    }
    for trial in range(trial_count):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, max_actions + 1))
        gamma = float(gammas[trial % len(gammas)])
        deterministic = trial % 2 == 0
        coverage = float(rng.uniform(0.25, 1.0))
        mdp = make_random_mdp(S, A, coverage, deterministic, rng, gamma=gamma)
        bound_v = mdp.r_max / (1 - gamma)

        values = {}
        for tau in TAU_GRID + (TAU_NEAR_ONE,):
            values[tau] = fixed_point_v_tau(mdp, tau)

        for tau in (0.5, 0.7, 0.9):
            err = float(np.max(np.abs(expectile_regression_solve(mdp, tau) - values[tau])))
            checks["P1"].record(err, err <= 1e-3, mdp, tau=tau)

        taus = TAU_GRID + (TAU_NEAR_ONE,)
        drops = [float(np.max(values[a] - values[b])) for a, b in zip(taus[:-1], taus[1:])]
        worst_drop = max(0.0, max(drops))
        checks["P2a"].record(worst_drop, worst_drop <= 1e-9, mdp)

        v_star = dataset_optimal_v(mdp)
        v_hi = values[TAU_NEAR_ONE]
        if deterministic:
            err = float(np.max(np.abs(v_hi - v_star)))
            checks["P2b"].record(err, err <= 1e-2, mdp)
            closer = float(np.max(np.abs(fixed_point_v_tau(mdp, 0.9999) - v_star)))
            ratio = closer / err if err > 1e-12 else 0.0
            checks["P2e"].record(ratio, ratio <= 0.2, mdp)
        else:
            short = float(np.max(v_star - v_hi))
            checks["P2c"].record(max(short, 0.0), short <= 1e-9, mdp)

        excess = max(float(np.max(np.abs(v))) - bound_v for v in values.values())
        checks["P2d"].record(max(excess, 0.0), excess <= 1e-9, mdp)

        policy = rng.dirichlet(np.ones(A), size=S)
        adv = tabular_advantage(mdp, v_hi, kappa)
        lam = float(lambdas[trial % len(lambdas)])
        worst_ratio = 0.0
        ok = True
        for _ in range(q_pairs):
            q1 = rng.normal(scale=bound_v, size=(S, A))
            q2 = rng.normal(scale=bound_v, size=(S, A))
            lhs = np.max(np.abs(advantage_bellman_apply(mdp, q1, policy, adv, lam)
                                - advantage_bellman_apply(mdp, q2, policy, adv, lam)))
            rhs = gamma * np.max(np.abs(q1 - q2))
            worst_ratio = max(worst_ratio, lhs / rhs)
            ok &= lhs <= rhs * (1 + 1e-12)
        checks["P3"].record(worst_ratio, ok, mdp, lam=lam)

        q_adv = advantage_fixed_point(mdp, policy, adv, lam)
        q_std = advantage_fixed_point(mdp, policy, adv, 0.0)
        gap = float(np.max(np.abs(q_adv - q_std)))
        bound = 2 * lam * mdp.r_max / (1 - gamma) ** 2
        if lam == 0.0:
            checks["P4"].record(0.0 if gap == 0.0 else np.inf, gap == 0.0, mdp, lam=lam)
        else:
            checks["P4"].record(gap / bound, gap <= bound, mdp, lam=lam)

    return CertificateReport(checks, trial_count, time.perf_counter() - t0)
