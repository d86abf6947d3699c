"""Per-option adversarial discriminators and reward extraction.

Each option owns a reward head g_w; a single shaping/value head is shared
across options. The discriminator probability is the odds ratio
D = exp(f) / (exp(f) + pi), evaluated in log-space, and the extracted
reward is log D - log(1 - D) = f - log pi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import FeedForwardNet

EXPERT, NOVICE = "expert", "novice"


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class RecursiveLossConfig:
    depth: int = 1
    gamma: float = 0.99
    n_continuation: int = 1
    n_termination: int = 1

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


class OptionDiscriminator:
    """Reward heads g_w plus shared shaping head h (the V_Omega estimate).

    mode "state_only": g_w consumes the state feature alone, so the
    extracted reward cannot depend on the action except through s'.
    mode "state_action": g_w consumes state feature + one-hot action.
    """

    def __init__(
        self,
        n_options: int,
        obs_dim: int,
        n_actions: int,
        gamma: float,
        rng: np.random.Generator,
        mode: str = "state_only",
        hidden: tuple = (150, 150, 150),
    ):
        if mode not in ("state_only", "state_action"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.gamma = gamma
        self.n_options = n_options
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        g_in = obs_dim if mode == "state_only" else obs_dim + n_actions
        self.g = [
            FeedForwardNet([g_in, *hidden, 1], rng, activation="relu") for _ in range(n_options)
        ]
        self.h = FeedForwardNet([obs_dim, *hidden, 1], rng, activation="relu")

    def _g_input(self, xs: np.ndarray, actions) -> np.ndarray:
        if self.mode == "state_only":
            return xs
        onehot = np.zeros((xs.shape[0], self.n_actions))
        onehot[np.arange(xs.shape[0]), actions] = 1.0
        return np.concatenate([xs, onehot], axis=1)

    def f_batch(self, w: int, xs: np.ndarray, actions, xsp: np.ndarray, term_sp: np.ndarray):
        """f = g_w(s[,a]) + gamma * h(s') - h(s); h(terminal) is pinned to 0.

        Returns (f values [N], caches) so the caller can backprop.
        """
        xs = np.atleast_2d(xs)
        xsp = np.atleast_2d(xsp)
        term_sp = np.asarray(term_sp, dtype=bool)
        g_out, g_cache = self.g[w].forward_cache(self._g_input(xs, actions))
        h_s, h_s_cache = self.h.forward_cache(xs)
        h_sp, h_sp_cache = self.h.forward_cache(xsp)
        f = g_out[:, 0] + self.gamma * h_sp[:, 0] * (~term_sp) - h_s[:, 0]
        return f, (g_cache, h_s_cache, h_sp_cache, term_sp)

    def f_backward(self, w: int, caches, df: np.ndarray):
        """Accumulate parameter gradients for upstream df/df_i. Returns (g_grads, h_grads)."""
        g_cache, h_s_cache, h_sp_cache, term_sp = caches
        col = df[:, None]
        g_grads, _ = self.g[w].backward(g_cache, col)
        h_grads_s, _ = self.h.backward(h_s_cache, -col)
        h_grads_sp, _ = self.h.backward(h_sp_cache, self.gamma * col * (~term_sp)[:, None])
        FeedForwardNet.add_grads(h_grads_s, h_grads_sp)
        return g_grads, h_grads_s


def f_value(disc: OptionDiscriminator, xs, a, xsp, w: int, terminal_sp: bool = False) -> float:
    """Scalar convenience wrapper around f_batch."""
    f, _ = disc.f_batch(
        w, np.atleast_2d(xs), np.array([a]), np.atleast_2d(xsp), np.array([terminal_sp])
    )
    return float(f[0])


def d_prob(pi_density: float, f: float) -> float:
    """D = exp(f) / (exp(f) + pi), computed in log-space; never exactly 0 or 1."""
    if not 0.0 < pi_density <= 1.0:
        raise ValueError("policy density must be in (0, 1]")
    return float(_sigmoid(np.asarray(f - np.log(pi_density))))


def extract_reward(f, log_pi):
    """log D - log(1 - D) reduces algebraically to f - log pi."""
    return f - log_pi


@dataclass
class DiscBatch:
    """Sample batch for one option's discriminator."""

    xs: np.ndarray  # [N, obs_dim]
    actions: np.ndarray  # [N] ints
    xsp: np.ndarray  # [N, obs_dim]
    term_sp: np.ndarray  # [N] bool
    log_pi: np.ndarray  # [N] log pi_w(a|s)
    weight: np.ndarray = None  # per-sample weights, default uniform

    def __post_init__(self):
        if self.weight is None:
            self.weight = np.ones(len(self.actions))
        if len(self.actions) == 0:
            raise ValueError("empty discriminator batch")


def step_loss(disc: OptionDiscriminator, batch_expert: DiscBatch, batch_novice: DiscBatch, w: int):
    """One-step cross-entropy -E_D[log D] - E_pi[log(1-D)] with gradients.

    Returns (loss, g_grads, h_grads). Per-sample weights are normalized
    within each side so the two expectations keep equal footing.
    """
    loss = 0.0
    g_acc = disc.g[w].zero_grads()
    h_acc = disc.h.zero_grads()
    for batch, side in ((batch_expert, EXPERT), (batch_novice, NOVICE)):
        f, caches = disc.f_batch(w, batch.xs, batch.actions, batch.xsp, batch.term_sp)
        z = f - batch.log_pi
        wt = batch.weight / batch.weight.sum()
        if side == EXPERT:
            loss += float(wt @ _softplus(-z))  # -log D
            df = -wt * (1.0 - _sigmoid(z))
        else:
            loss += float(wt @ _softplus(z))  # -log(1 - D)
            df = wt * _sigmoid(z)
        g_grads, h_grads = disc.f_backward(w, caches, df)
        FeedForwardNet.add_grads(g_acc, g_grads)
        FeedForwardNet.add_grads(h_acc, h_grads)
    return loss, g_acc, h_acc


@dataclass
class LossTerm:
    """One weighted one-sided cross-entropy term of the recursive expansion."""

    w: int
    xs: np.ndarray
    a: int
    xsp: np.ndarray
    term_sp: bool
    log_pi: float
    coeff: float
    source: str


@dataclass
class RecSample:
    """A sampled transition to expand recursively; source labels the side."""

    s: int
    n: int
    a: int
    s_next: int
    n_next: int
    w: int
    source: str
    term_next: bool


def recursive_terms(
    sample: RecSample,
    opts,
    env,
    cfg: RecursiveLossConfig,
    rng: np.random.Generator,
    featurize,
    metrics: dict | None = None,
) -> list:
    """Expand Algorithm-style branch simulation into weighted loss terms.

    At each level: sample a fresh option and action for the termination
    branch and a continuation action for the current option, observe both
    next states from the environment, and weight the sub-losses by
    gamma * beta and gamma * (1 - beta). Environments without set_state
    degrade to depth 0 (counted in metrics).
    """
    terms: list = []
    can_branch = hasattr(env, "set_state")
    if not can_branch and cfg.depth > 0 and metrics is not None:
        metrics["branch_fallbacks"] = metrics.get("branch_fallbacks", 0) + 1

    def expand(s, n, a, s_next, n_next, term_next, w, coeff, depth):
        x = featurize(s, n)
        xsp = featurize(s_next, n_next)
        log_pi = float(np.log(np.asarray(opts.intra_probs(w, x))[a]))
        terms.append(
            LossTerm(
                w=w,
                xs=x,
                a=a,
                xsp=xsp,
                term_sp=term_next,
                log_pi=log_pi,
                coeff=coeff,
                source=sample.source,
            )
        )
        if depth <= 0 or term_next or not can_branch:
            return
        xn = featurize(s_next, n_next)
        beta = opts.termination(w, xn)
        master = np.asarray(opts.master_probs(xn))
        w_new = int(rng.choice(len(master), p=master))
        p1 = np.asarray(opts.intra_probs(w_new, xn))
        a1 = int(rng.choice(len(p1), p=p1))
        p2 = np.asarray(opts.intra_probs(w, xn))
        a2 = int(rng.choice(len(p2), p=p2))
        env.set_state(s_next, n_next)
        s1, _, done1, _ = env.step(a1, rng)
        env.set_state(s_next, n_next)
        s2, _, done2, _ = env.step(a2, rng)
        if beta > 0.0:
            expand(s_next, n_next, a1, s1, n_next + 1, done1, w_new, coeff * cfg.gamma * beta, depth - 1)
        if beta < 1.0:
            expand(
                s_next, n_next, a2, s2, n_next + 1, done2, w, coeff * cfg.gamma * (1.0 - beta), depth - 1
            )

    expand(
        sample.s,
        sample.n,
        sample.a,
        sample.s_next,
        sample.n_next,
        sample.term_next,
        sample.w,
        1.0,
        cfg.depth,
    )
    return terms


def loss_from_terms(disc: OptionDiscriminator, terms: list):
    """Evaluate sum(coeff * one-sided cross-entropy) over terms, with gradients.

    Returns (loss, g_grads dict keyed by option, h_grads).
    """
    loss = 0.0
    g_acc: dict = {}
    h_acc = disc.h.zero_grads()
    by_option: dict = {}
    for t in terms:
        by_option.setdefault(t.w, []).append(t)
    for w, group in by_option.items():
        xs = np.stack([t.xs for t in group])
        xsp = np.stack([t.xsp for t in group])
        actions = np.array([t.a for t in group])
        term_sp = np.array([t.term_sp for t in group])
        log_pi = np.array([t.log_pi for t in group])
        coeff = np.array([t.coeff for t in group])
        expert_side = np.array([t.source == EXPERT for t in group])
        f, caches = disc.f_batch(w, xs, actions, xsp, term_sp)
        z = f - log_pi
        sig = _sigmoid(z)
        side_loss = np.where(expert_side, _softplus(-z), _softplus(z))
        loss += float(coeff @ side_loss)
        df = coeff * np.where(expert_side, -(1.0 - sig), sig)
        g_grads, h_grads = disc.f_backward(w, caches, df)
        if w in g_acc:
            FeedForwardNet.add_grads(g_acc[w], g_grads)
        else:
            g_acc[w] = g_grads
        FeedForwardNet.add_grads(h_acc, h_grads)
    return loss, g_acc, h_acc


def recursive_loss(
    disc: OptionDiscriminator,
    sample: RecSample,
    opts,
    env,
    cfg: RecursiveLossConfig,
    rng: np.random.Generator,
    featurize,
    metrics: dict | None = None,
):
    """Recursive loss for one sampled step. Returns (loss, g_grads, h_grads)."""
    terms = recursive_terms(sample, opts, env, cfg, rng, featurize, metrics=metrics)
    return loss_from_terms(disc, terms)


def expected_loss_tables(mdp, opts, step_loss_table: np.ndarray, zero_terminal: bool = True):
    """Exact recursive-loss family tables L(s,a,w), L(s,w), L_Omega(s,a), L_Omega(s).

    step_loss_table: [S, n_options, A] one-step loss terms. Mirrors the
    discounted-return solver with the loss as per-step term; test-only.
    """
    from .options import solve_option_recursion

    return solve_option_recursion(mdp, opts, step_loss_table, zero_terminal=zero_terminal)


def discriminator_save(disc: OptionDiscriminator, path) -> None:
    import json
    from pathlib import Path

    path = Path(path)
    arrays = {f"g_{w}": net.get_flat() for w, net in enumerate(disc.g)}
    arrays["h"] = disc.h.get_flat()
    np.savez(path.with_suffix(".npz"), **arrays)
    sidecar = {
        "format_version": 1,
        "n_options": disc.n_options,
        "obs_dim": disc.obs_dim,
        "n_actions": disc.n_actions,
        "gamma": disc.gamma,
        "mode": disc.mode,
        "g_sizes": disc.g[0].sizes,
        "h_sizes": disc.h.sizes,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def discriminator_load(path) -> OptionDiscriminator:
    import json
    from pathlib import Path

    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    disc = OptionDiscriminator(
        n_options=sidecar["n_options"],
        obs_dim=sidecar["obs_dim"],
        n_actions=sidecar["n_actions"],
        gamma=sidecar["gamma"],
        rng=np.random.default_rng(0),
        mode=sidecar["mode"],
        hidden=tuple(sidecar["g_sizes"][1:-1]),
    )
    data = np.load(path.with_suffix(".npz"))
    for w in range(disc.n_options):
        disc.g[w].set_flat(data[f"g_{w}"])
    disc.h.set_flat(data["h"])
    return disc
