"""Exact numeric checks of the learned-reward theory on enumerable MDPs.

Covers: the discriminator saddle point (D = 1/2 when f = log pi), constant-
offset reward recovery under deterministic dynamics, the decomposability
condition that underlies it, contraction of the approximate-reward option
Bellman operator, and the resulting convergence inequality.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .discriminator import _sigmoid
from .mdp import TabularMDP
from .options import TabularOptionSet, option_values


# -- decomposability -----------------------------------------------------------


def check_decomposability(mdp: TabularMDP):
    """Whether every pair of states is transitively one-step linked.

    Two states are one-step linked when some predecessor state reaches both
    in a single step (through different actions or transition noise). Returns
    (flag, witness_pairs) with one witness per disconnected component pair.
    """
    S = mdp.n_states
    parent = list(range(S))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj

    for s in range(S):
        support = np.flatnonzero(mdp.transition[s].sum(axis=0) > 0.0)
        for t in support[1:]:
            union(int(support[0]), int(t))
    roots = sorted({find(s) for s in range(S)})
    if len(roots) == 1:
        return True, []
    witnesses = [(roots[0], r) for r in roots[1:]]
    return False, witnesses


# -- reward recovery -----------------------------------------------------------


@dataclass
class RecoveryReport:
    offsets: np.ndarray  # per-option offset estimate c_hat_w
    residual: float  # max_s |g_w(s) - r*(s) - c_hat_w| over weighted states
    correlations: np.ndarray  # per-option Pearson correlation(g_w, r*)
    min_correlation: float
    deterministic: bool
    decomposable: bool

    def __post_init__(self):
        if self.residual < 0.0:
            raise ValueError("residual must be >= 0")
        if np.any(np.abs(self.correlations) > 1.0 + 1e-12):
            raise ValueError("correlation outside [-1, 1]")

    @property
    def recovered(self) -> bool:
        return self.min_correlation >= 0.9


def _pearson(a: np.ndarray, b: np.ndarray, weight: np.ndarray) -> float:
    w = weight / weight.sum()
    am = a - w @ a
    bm = b - w @ b
    va = w @ (am * am)
    vb = w @ (bm * bm)
    if va <= 0.0 or vb <= 0.0:
        return 0.0
    return float((w @ (am * bm)) / np.sqrt(va * vb))


def is_deterministic(mdp: TabularMDP) -> bool:
    return bool((mdp.transition.max(axis=2) > 1.0 - 1e-12).all())


def reward_recovery(
    mdp: TabularMDP,
    g_tables: np.ndarray,
    r_star: np.ndarray,
    occupancy: np.ndarray | None = None,
) -> RecoveryReport:
    """Does each learned state reward match the true one up to a constant?

    g_tables: [n_options, S] learned per-option state rewards.
    r_star:   [S] true state reward.
    occupancy: state weights (e.g. expert visitation); default uniform over
    non-terminal states. The offset is the weighted mean gap, the residual
    the weighted sup of what remains after removing it.
    """
    if occupancy is None:
        occupancy = (~mdp.terminal).astype(float)
    if occupancy.sum() <= 0.0:
        raise ValueError("occupancy has no mass")
    mask = occupancy > 0.0
    w = occupancy / occupancy.sum()
    W = g_tables.shape[0]
    offsets = np.zeros(W)
    correlations = np.zeros(W)
    residual = 0.0
    for k in range(W):
        gap = g_tables[k] - r_star
        offsets[k] = w @ gap
        residual = max(residual, float(np.abs(gap[mask] - offsets[k]).max()))
        correlations[k] = _pearson(g_tables[k][mask], r_star[mask], w[mask])
    decomposable, _ = check_decomposability(mdp)
    return RecoveryReport(
        offsets=offsets,
        residual=residual,
        correlations=correlations,
        min_correlation=float(correlations.min()),
        deterministic=is_deterministic(mdp),
        decomposable=decomposable,
    )


# -- contraction of the option Bellman operator --------------------------------


def option_bellman_update(
    mdp: TabularMDP, opts: TabularOptionSet, g: np.ndarray, q: np.ndarray
) -> np.ndarray:
    """One application of the greedy option Bellman operator with rewards g.

    g: [S, n_options, A] per-step rewards; q: [S, n_options]. On arrival the
    option either continues or terminates into the best available option.
    Continuation from terminal states contributes nothing.
    """
    cont = (~mdp.terminal).astype(float)
    u = q.max(axis=1)
    future = cont[:, None] * (opts.beta.T * u[:, None] + (1.0 - opts.beta.T) * q)
    q_swa = g + mdp.gamma * np.einsum("sat,tw->swa", mdp.transition, future)
    return np.einsum("wsa,swa->sw", opts.pi, q_swa)


def solve_option_optimality(
    mdp: TabularMDP, opts: TabularOptionSet, g: np.ndarray, tol: float = 1e-10
) -> np.ndarray:
    """Fixed point of the greedy operator by value iteration to residual < tol."""
    if mdp.gamma >= 1.0:
        raise ValueError("requires gamma < 1")
    q = np.zeros((mdp.n_states, opts.n_options))
    max_iters = 10_000_000
    for _ in range(max_iters):
        q_new = option_bellman_update(mdp, opts, g, q)
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    raise RuntimeError("option value iteration did not converge")


@dataclass
class ContractionReport:
    errors: np.ndarray  # sup-norm ||Q_t - Q*|| per iteration
    fitted_factor: float  # empirical factor after removing the offset slack
    max_c: float  # max_w sup |g_w - r*|
    bound_holds: bool  # err_{t+1} <= gamma * err_t + max_c at every step
    first_violation: int | None
    limit_bound: float  # max_c / (1 - gamma)
    gamma: float

    @property
    def limit_ok(self) -> bool:
        """Final error within the geometric envelope gamma^T err_0 + limit bound."""
        envelope = self.gamma ** (len(self.errors) - 1) * self.errors[0] + self.limit_bound
        return bool(self.errors[-1] <= envelope + 1e-9)


def contraction_test(
    mdp: TabularMDP,
    opts: TabularOptionSet,
    g: np.ndarray,
    n_iters: int = 50,
    tol: float = 1e-9,
) -> ContractionReport:
    """Iterate the approximate-reward operator from Q0 = 0 against exact Q*.

    Verifies err_{t+1} <= gamma * err_t + max_c at every step and fits the
    empirical contraction factor max_t (err_{t+1} - max_c)+ / err_t.
    """
    r_true = np.repeat(mdp.reward[:, None, :], opts.n_options, axis=1)
    q_star = solve_option_optimality(mdp, opts, r_true)
    max_c = float(np.abs(g - r_true).max())
    q = np.zeros_like(q_star)
    errors = [float(np.abs(q - q_star).max())]
    first_violation = None
    fitted = 0.0
    for t in range(n_iters):
        q = option_bellman_update(mdp, opts, g, q)
        err = float(np.abs(q - q_star).max())
        prev = errors[-1]
        if err > mdp.gamma * prev + max_c + tol and first_violation is None:
            first_violation = t
        if prev > 1e-12:
            fitted = max(fitted, max(err - max_c, 0.0) / prev)
        errors.append(err)
    return ContractionReport(
        errors=np.array(errors),
        fitted_factor=fitted,
        max_c=max_c,
        bound_holds=first_violation is None,
        first_violation=first_violation,
        limit_bound=max_c / (1.0 - mdp.gamma) if mdp.gamma < 1.0 else np.inf,
        gamma=mdp.gamma,
    )


def theorem_bound_violation(
    mdp: TabularMDP, opts: TabularOptionSet, g: np.ndarray, q: np.ndarray
) -> float:
    """Max over (s, w) of |T_g q - Q*| minus the bound max_c * (eps + max_c) * gamma.

    q is an approximate option value within eps of Q* in sup norm (typically
    the contraction-test tail). A non-positive result means the inequality
    holds everywhere.
    """
    r_true = np.repeat(mdp.reward[:, None, :], opts.n_options, axis=1)
    q_star = solve_option_optimality(mdp, opts, r_true)
    max_c = float(np.abs(g - r_true).max())
    eps = float(np.abs(q - q_star).max())
    lhs = np.abs(option_bellman_update(mdp, opts, g, q) - q_star)
    bound = max_c * (eps + max_c) * mdp.gamma
    return float(lhs.max() - bound)


# -- discriminator saddle point -------------------------------------------------


@dataclass
class SaddlePointReport:
    max_d_deviation: float  # sup |D - 1/2| with f plugged in
    reward_deviation: float  # sup |f - log pi| (extracted reward at the saddle)
    advantage_correlation: float  # corr(f, exact option advantage)


def saddle_point_check(
    mdp: TabularMDP, opts: TabularOptionSet, f_tables: np.ndarray | None = None
) -> SaddlePointReport:
    """At f = log pi the discriminator outputs exactly 1/2 and zero reward.

    f_tables: [n_options, S, A] discriminator logits; defaults to the
    analytic optimum log pi_w(a|s). Also reports how f correlates with the
    exact option advantage computed from the true rewards.
    """
    log_pi = np.log(np.maximum(opts.pi, 1e-300))
    if f_tables is None:
        f_tables = log_pi
    d = _sigmoid(f_tables - log_pi)
    r_hat = np.repeat(mdp.reward[:, None, :], opts.n_options, axis=1)
    values = option_values(mdp, opts, r_hat)
    adv = np.transpose(values.adv, (2, 0, 1))  # [w, s, a]
    live = ~mdp.terminal
    corr = _pearson(
        f_tables[:, live, :].ravel(),
        adv[:, live, :].ravel(),
        np.ones(f_tables[:, live, :].size),
    )
    return SaddlePointReport(
        max_d_deviation=float(np.abs(d - 0.5).max()),
        reward_deviation=float(np.abs(f_tables - log_pi).max()),
        advantage_correlation=corr,
    )


# -- suite runner ----------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    status: str  # "pass" | "fail" | "recorded"
    value: float
    detail: str = ""


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def report_to_json(report) -> str:
    return json.dumps(_to_jsonable(asdict(report)), indent=2)


def write_summary_csv(path, results: list) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema_version=1\n")
        writer = csv.DictWriter(fh, fieldnames=["name", "status", "value", "detail"])
        writer.writeheader()
        for r in results:
            writer.writerow(asdict(r))


def run_verification_suite(out_dir=None, negate_recovery_reward: bool = False) -> list:
    """The shipped verification instances; returns a list of CheckResult.

    negate_recovery_reward plants g = -r* to demonstrate the recovery-failure
    path (used by the CLI's failure-injection flag).
    """
    from pathlib import Path

    from .grids import GridSpec, build_lava_crossing, compile_grid
    from .options import random_tabular_options

    results: list = []
    rng = np.random.default_rng(7)

    # small random-but-connected MDP for the operator checks
    S, A, W = 6, 3, 3
    P = rng.dirichlet(np.ones(S), size=(S, A)) * 0.9
    P += 0.1 / S  # every state reaches every state: decomposable by construction
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(size=(S, A))
    mdp = TabularMDP(
        transition=P,
        reward=R,
        gamma=0.9,
        terminal=np.zeros(S, dtype=bool),
        initial_dist=np.full(S, 1.0 / S),
    )
    mdp.validate()
    opts = random_tabular_options(W, S, A, rng)

    flag, _ = check_decomposability(mdp)
    results.append(
        CheckResult("decomposability_connected", "pass" if flag else "fail", float(flag))
    )

    # two isolated self-loop components must be flagged with a witness
    P2 = np.zeros((2, 1, 2))
    P2[0, 0, 0] = 1.0
    P2[1, 0, 1] = 1.0
    mdp2 = TabularMDP(
        transition=P2,
        reward=np.zeros((2, 1)),
        gamma=0.9,
        terminal=np.zeros(2, dtype=bool),
        initial_dist=np.array([0.5, 0.5]),
    )
    flag2, witnesses = check_decomposability(mdp2)
    ok = (not flag2) and len(witnesses) == 1
    results.append(
        CheckResult("decomposability_disconnected", "pass" if ok else "fail", float(not flag2))
    )

    # saddle point: analytic plug-in gives D = 1/2 exactly
    sp = saddle_point_check(mdp, opts)
    results.append(
        CheckResult(
            "saddle_point_half",
            "pass" if sp.max_d_deviation == 0.0 else "fail",
            sp.max_d_deviation,
        )
    )

    # contraction with exact and offset rewards
    r_true = np.repeat(mdp.reward[:, None, :], W, axis=1)
    for label, g in (("exact", r_true.copy()), ("offset", r_true + 0.5)):
        rep = contraction_test(mdp, opts, g, n_iters=60)
        ok = rep.bound_holds and rep.fitted_factor <= mdp.gamma + 1e-6 and rep.limit_ok
        results.append(
            CheckResult(f"contraction_{label}", "pass" if ok else "fail", rep.fitted_factor)
        )

    # convergence inequality at the planted optimum
    q_star = solve_option_optimality(mdp, opts, r_true)
    viol = theorem_bound_violation(mdp, opts, r_true, q_star)
    results.append(
        CheckResult("bound_exact", "pass" if viol <= 1e-9 else "fail", viol)
    )
    rep = contraction_test(mdp, opts, r_true + 0.3, n_iters=60)
    q_tail = solve_option_optimality(mdp, opts, r_true + 0.3)
    viol_offset = theorem_bound_violation(mdp, opts, r_true + 0.3, q_tail)
    results.append(CheckResult("bound_offset", "recorded", viol_offset))

    # gamma = 0 degenerates the bound; record only
    mdp0 = TabularMDP(
        transition=P,
        reward=R,
        gamma=0.0,
        terminal=np.zeros(S, dtype=bool),
        initial_dist=np.full(S, 1.0 / S),
    )
    rep0 = contraction_test(mdp0, opts, r_true + 0.2, n_iters=3)
    results.append(
        CheckResult("contraction_gamma_zero", "recorded", float(rep0.errors[-1]))
    )

    # planted constant-offset recovery on a deterministic chain
    chainS = 6
    Pc = np.zeros((chainS, 2, chainS))
    for s in range(chainS):
        Pc[s, 0, min(s + 1, chainS - 1)] = 1.0
        Pc[s, 1, max(s - 1, 0)] = 1.0
    r_state = rng.uniform(size=chainS)
    mdpc = TabularMDP(
        transition=Pc,
        reward=np.repeat(r_state[:, None], 2, axis=1),
        gamma=0.9,
        terminal=np.zeros(chainS, dtype=bool),
        initial_dist=np.full(chainS, 1.0 / chainS),
    )
    sign = -1.0 if negate_recovery_reward else 1.0
    g_tables = sign * np.stack([r_state + 0.7, r_state + 0.7])
    rec = reward_recovery(mdpc, g_tables, r_state)
    rec_ok = rec.recovered and rec.residual < 1e-9 if not negate_recovery_reward else rec.recovered
    results.append(
        CheckResult("recovery_planted_offset", "pass" if rec_ok else "fail", rec.min_correlation)
    )

    # grid decomposability with slip noise, recorded only
    spec = build_lava_crossing("middle", 8)
    spec = GridSpec(
        width=spec.width,
        height=spec.height,
        walls=spec.walls,
        lava=spec.lava,
        goal=spec.goal,
        start=spec.start,
        n_max=spec.n_max,
        slip_prob=0.1,
        name=spec.name,
    )
    gmdp = compile_grid(spec)
    gflag, _ = check_decomposability(gmdp)
    results.append(CheckResult("decomposability_grid_slip", "recorded", float(gflag)))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out / "verification_summary.csv", results)
        (out / "verification.json").write_text(
            json.dumps([_to_jsonable(asdict(r)) for r in results], indent=2)
        )
    return results
