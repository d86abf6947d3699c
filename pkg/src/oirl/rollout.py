"""Trajectory collection, expert demonstration generation, and storage."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .mdp import TabularMDP, epsilon_soft_matrix, value_iteration
from .options import composite_action

TRAJECTORY_SCHEMA_VERSION = 1


@dataclass
class StepRecord:
    s: int
    n: int  # steps taken before this action
    a: int
    w: int
    s_next: int
    n_next: int
    r_env: float
    beta_sampled: bool  # a termination was sampled on arrival at s
    selected: bool  # the option was (re)selected at this step
    logp_a: float
    logp_w: float  # nan when the option was carried over
    done: bool
    truncated: bool


@dataclass
class OptionTrajectory:
    steps: list
    seed: int | None = None

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def episode_return(self) -> float:
        return sum(st.r_env for st in self.steps)


class MDPEnv:
    """Episode runner over a raw TabularMDP (used by oracle tests)."""

    def __init__(self, mdp: TabularMDP, max_steps: int = 200):
        self.mdp = mdp
        self.max_steps = max_steps
        self.n_actions = mdp.n_actions
        self.n_states = mdp.n_states
        self.obs_dim = mdp.n_states
        self._s = int(np.argmax(mdp.initial_dist))
        self._n = 0

    def observe(self, s: int | None = None, n: int | None = None) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self._s if s is None else s] = 1.0
        return obs

    @property
    def state(self):
        return (self._s, self._n)

    def set_state(self, s: int, n: int) -> None:
        self._s, self._n = s, n

    def reset(self, rng: np.random.Generator | None = None) -> int:
        if rng is None:
            self._s = int(np.argmax(self.mdp.initial_dist))
        else:
            self._s = int(rng.choice(self.n_states, p=self.mdp.initial_dist))
        self._n = 0
        return self._s

    def step(self, a: int, rng: np.random.Generator):
        s = self._s
        s_next = int(rng.choice(self.n_states, p=self.mdp.transition[s, a]))
        r = float(self.mdp.reward[s, a])
        self._s = s_next
        self._n += 1
        done = bool(self.mdp.terminal[s_next])
        truncated = not done and self._n >= self.max_steps
        return s_next, r, done or truncated, truncated


def collect(env, opts, n_steps: int, rng: np.random.Generator, featurize=None):
    """Roll whole episodes under the option policy until >= n_steps steps.

    featurize(s, n) maps the env state to the policy input; defaults to the
    raw state index (tabular option sets).
    """
    if featurize is None:
        featurize = lambda s, n: s
    trajectories = []
    total = 0
    while total < n_steps:
        s = env.reset(rng)
        n = 0
        w = None
        steps = []
        while True:
            x = featurize(s, n)
            a, w, terminated, info = composite_action(opts, x, w, rng)
            s_next, r, done, truncated = env.step(a, rng)
            n_next = n + 1
            steps.append(
                StepRecord(
                    s=s,
                    n=n,
                    a=a,
                    w=w,
                    s_next=s_next,
                    n_next=n_next,
                    r_env=r,
                    beta_sampled=info["terminated"],
                    selected=info["selected"],
                    logp_a=info["logp_a"],
                    logp_w=info["logp_w"],
                    done=done,
                    truncated=truncated,
                )
            )
            s, n = s_next, n_next
            if done:
                break
        trajectories.append(OptionTrajectory(steps=steps))
        total += len(steps)
    return trajectories


# -- expert demonstrations ----------------------------------------------------


@dataclass
class ExpertPolicy:
    """Epsilon-softened greedy policy from an exact Q*."""

    q_star: np.ndarray
    pi: np.ndarray  # [S, A]
    epsilon: float
    residual: float

    def action_probs(self, s: int) -> np.ndarray:
        return self.pi[s]

    def sample(self, s: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.pi.shape[1], p=self.pi[s]))


def make_expert_tabular(mdp: TabularMDP, epsilon: float = 0.01, tol: float = 1e-10) -> ExpertPolicy:
    """Exact value-iteration expert with a small epsilon softening."""
    q_star, residual = value_iteration(mdp, tol=tol)
    return ExpertPolicy(
        q_star=q_star, pi=epsilon_soft_matrix(q_star, epsilon), epsilon=epsilon, residual=residual
    )


def make_expert_soft(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 200_000) -> ExpertPolicy:
    """Entropy-regularized optimal expert: pi(a|s) = exp(Q_soft - V_soft).

    Soft value iteration with V(s) = log sum_a exp(Q(s, a)); the resulting
    policy is the exact maximum-entropy optimum, the regime in which the
    adversarial reward extraction is exact.
    """
    P, R, gamma = mdp.transition, mdp.reward, mdp.gamma
    cont = (~mdp.terminal).astype(float)
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = np.inf
    for _ in range(max_iter):
        m = Q.max(axis=1)
        V = (m + np.log(np.exp(Q - m[:, None]).sum(axis=1))) * cont
        Q_new = R + gamma * P @ V
        residual = np.abs(Q_new - Q).max()
        Q = Q_new
        if residual < tol:
            break
    m = Q.max(axis=1)
    V = m + np.log(np.exp(Q - m[:, None]).sum(axis=1))
    pi = np.exp(Q - V[:, None])
    pi /= pi.sum(axis=1, keepdims=True)
    return ExpertPolicy(q_star=Q, pi=pi, epsilon=0.0, residual=residual)


@dataclass
class DemoStep:
    s: int
    n: int
    a: int
    s_next: int
    n_next: int
    done: bool


@dataclass
class DemoSet:
    """Expert state-action trajectories; no option labels."""

    trajectories: list
    env_hash: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("DemoSet must be nonempty")

    def all_steps(self) -> list:
        return [st for tr in self.trajectories for st in tr]


def env_fingerprint(env) -> str:
    if hasattr(env, "spec"):
        return hashlib.sha256(env.spec.to_json().encode()).hexdigest()[:16]
    payload = env.mdp.transition.tobytes() + env.mdp.reward.tobytes()
    return hashlib.sha256(payload).hexdigest()[:16]


def sample_demos(expert: ExpertPolicy, env, n_traj: int, rng: np.random.Generator) -> DemoSet:
    """Roll n_traj complete expert episodes."""
    if n_traj <= 0:
        raise ValueError("n_traj must be positive")
    trajectories = []
    successes = 0
    for _ in range(n_traj):
        s = env.reset(rng)
        n = 0
        steps = []
        while True:
            a = expert.sample(s, rng)
            s_next, r, done, truncated = env.step(a, rng)
            steps.append(DemoStep(s=s, n=n, a=a, s_next=s_next, n_next=n + 1, done=done))
            s, n = s_next, n + 1
            if done:
                successes += r > 0.0
                break
        trajectories.append(steps)
    if successes < 0.5 * n_traj:
        warnings.warn(
            f"expert reached the goal in only {successes}/{n_traj} episodes", RuntimeWarning
        )
    return DemoSet(
        trajectories=trajectories,
        env_hash=env_fingerprint(env),
        provenance={"generator": "tabular_value_iteration", "epsilon": expert.epsilon},
    )


# -- demo-fitted densities ----------------------------------------------------


@dataclass
class DensityEstimate:
    """Per-option categorical action model p_hat_w(a|s), Laplace-smoothed."""

    table: np.ndarray  # [n_options, S, A]
    visited: np.ndarray  # bool [S]

    def prob(self, w: int, s: int, a: int) -> float:
        return float(self.table[w, s, a])


def fit_density(
    demos: DemoSet,
    n_options: int,
    opts,
    n_states: int,
    n_actions: int,
    featurize=None,
    smoothing: float = 0.1,
    responsibilities: np.ndarray | None = None,
) -> DensityEstimate:
    """Weighted-count MLE of per-option action conditionals on the demos.

    Counts are weighted by per-step option responsibilities; by default the
    one-step posterior master(w|s) pi_w(a|s) (no temporal smoothing). States
    never visited fall back to uniform.
    """
    if featurize is None:
        featurize = lambda s, n: s
    steps = demos.all_steps()
    counts = np.zeros((n_options, n_states, n_actions))
    if responsibilities is None:
        responsibilities = np.zeros((len(steps), n_options))
        for t, st in enumerate(steps):
            x = featurize(st.s, st.n)
            master = opts.master_probs(x)
            lik = np.array([opts.intra_probs(w, x)[st.a] for w in range(n_options)])
            post = master * lik
            total = post.sum()
            responsibilities[t] = post / total if total > 0 else np.full(n_options, 1.0 / n_options)
    for t, st in enumerate(steps):
        counts[:, st.s, st.a] += responsibilities[t]
    visited = counts.sum(axis=(0, 2)) > 0
    table = counts + smoothing
    table /= table.sum(axis=2, keepdims=True)
    table[:, ~visited, :] = 1.0 / n_actions
    return DensityEstimate(table=table, visited=visited)


class MixturePolicy:
    """Importance-sampling proposal: half policy, half demo density."""

    def __init__(self, opts, density: DensityEstimate, featurize=None):
        self.opts = opts
        self.density = density
        self.featurize = featurize if featurize is not None else (lambda s, n: s)

    def prob(self, w: int, s: int, n: int, a: int) -> float:
        x = self.featurize(s, n)
        return 0.5 * float(self.opts.intra_probs(w, x)[a]) + 0.5 * self.density.prob(w, s, a)

    def probs(self, w: int, s: int, n: int) -> np.ndarray:
        x = self.featurize(s, n)
        return 0.5 * np.asarray(self.opts.intra_probs(w, x)) + 0.5 * self.density.table[w, s]

    def sample(self, w: int, s: int, n: int, rng: np.random.Generator) -> int:
        p = self.probs(w, s, n)
        return int(rng.choice(len(p), p=p))


def mixture_policy(opts, density: DensityEstimate, featurize=None) -> MixturePolicy:
    return MixturePolicy(opts, density, featurize)


# -- serialization -------------------------------------------------------------


class TrajectoryParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def write_trajectories(path, trajectories: list) -> None:
    """JSONL: one step per line; an episode-boundary record after each episode."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": TRAJECTORY_SCHEMA_VERSION}) + "\n")
        for tr in trajectories:
            for st in tr.steps:
                fh.write(json.dumps(asdict(st)) + "\n")
            fh.write(json.dumps({"episode_end": True, "seed": tr.seed}) + "\n")


def read_trajectories(path) -> list:
    trajectories = []
    steps = []
    with open(path) as fh:
        lines = fh.readlines()
    if not lines:
        warnings.warn(f"{path}: empty trajectory file", RuntimeWarning)
        return []
    for i, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrajectoryParseError(i, str(exc)) from exc
        if "schema_version" in rec:
            continue
        if rec.get("episode_end"):
            trajectories.append(OptionTrajectory(steps=steps, seed=rec.get("seed")))
            steps = []
            continue
        try:
            steps.append(StepRecord(**rec))
        except TypeError as exc:
            raise TrajectoryParseError(i, f"bad step record: {exc}") from exc
    if steps:
        raise TrajectoryParseError(len(lines), "file ends inside an episode")
    return trajectories


def write_demos(path, demos: DemoSet) -> None:
    with open(path, "w") as fh:
        header = {
            "schema_version": TRAJECTORY_SCHEMA_VERSION,
            "env_hash": demos.env_hash,
            "provenance": demos.provenance,
        }
        fh.write(json.dumps(header) + "\n")
        for tr in demos.trajectories:
            for st in tr:
                fh.write(json.dumps(asdict(st)) + "\n")
            fh.write(json.dumps({"episode_end": True}) + "\n")


def read_demos(path) -> DemoSet:
    with open(path) as fh:
        lines = fh.readlines()
    if not lines:
        raise TrajectoryParseError(0, "empty demo file")
    header = json.loads(lines[0])
    trajectories = []
    steps = []
    for i, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrajectoryParseError(i, str(exc)) from exc
        if rec.get("episode_end"):
            trajectories.append(steps)
            steps = []
            continue
        steps.append(DemoStep(**rec))
    if steps:
        raise TrajectoryParseError(len(lines), "file ends inside an episode")
    return DemoSet(
        trajectories=trajectories,
        env_hash=header.get("env_hash", ""),
        provenance=header.get("provenance", {}),
    )
