"""Options runtime: option sets, transition kernels, and return recursions.

Two interchangeable policy representations:
  * TabularOptionSet — dense probability tables, used by the exact oracles.
  * NeuralOptionSet  — softmax/sigmoid networks over observation features,
    used by the learning pipeline.

Both expose master_probs / intra_probs / termination, so trajectory
collection and the recursive discriminator loss are representation-blind.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import TabularMDP
from .nets import FeedForwardNet, log_softmax, softmax

PROB_TOL = 1e-6


@dataclass
class TabularOptionSet:
    """Dense option tables.

    pi:     [n_options, S, A]  intra-option action probabilities
    beta:   [n_options, S]     termination probabilities
    master: [S, n_options]     policy over options
    initiation: bool [n_options, S], default all-true
    """

    pi: np.ndarray
    beta: np.ndarray
    master: np.ndarray
    initiation: np.ndarray = None

    def __post_init__(self):
        if self.initiation is None:
            self.initiation = np.ones(self.beta.shape, dtype=bool)

    @property
    def n_options(self) -> int:
        return self.pi.shape[0]

    def validate(self) -> None:
        if not np.allclose(self.pi.sum(axis=2), 1.0, atol=PROB_TOL):
            raise ValueError("intra-option policies do not sum to 1")
        if not np.allclose(self.master.sum(axis=1), 1.0, atol=PROB_TOL):
            raise ValueError("master policy does not sum to 1")
        if self.beta.min() < -PROB_TOL or self.beta.max() > 1.0 + PROB_TOL:
            raise ValueError("termination values outside [0, 1]")
        masked = self.master.T * (~self.initiation)
        if masked.max() > PROB_TOL:
            raise ValueError("master assigns mass to an option outside its initiation set")

    # policy interface (x is a state index)
    def master_probs(self, x) -> np.ndarray:
        return self.master[x]

    def intra_probs(self, w: int, x) -> np.ndarray:
        return self.pi[w, x]

    def termination(self, w: int, x) -> float:
        return float(self.beta[w, x])

    def composite_probs(self, x) -> np.ndarray:
        """pi_Theta(a|s) = sum_w master(w|s) pi_w(a|s)."""
        return self.master[x] @ self.pi[:, x, :]


def random_tabular_options(
    n_options: int, n_states: int, n_actions: int, rng: np.random.Generator
) -> TabularOptionSet:
    """Dirichlet-random option tables, handy for randomized oracle tests."""
    pi = rng.dirichlet(np.ones(n_actions), size=(n_options, n_states))
    master = rng.dirichlet(np.ones(n_options), size=n_states)
    beta = rng.uniform(size=(n_options, n_states))
    return TabularOptionSet(pi=pi, beta=beta, master=master)


class CompositePolicy:
    """Flattened one-step view of an option set: pi(a|s) mixing over options."""

    def __init__(self, opts):
        self.opts = opts

    def probs(self, x) -> np.ndarray:
        master = self.opts.master_probs(x)
        return sum(p * self.opts.intra_probs(w, x) for w, p in enumerate(master))


# -- exact kernels -----------------------------------------------------------


def option_kernel(mdp: TabularMDP, opts: TabularOptionSet, s: int, w: int) -> np.ndarray:
    """P(s', w' | s, w) as an [S, n_options] array."""
    p_next = opts.pi[w, s] @ mdp.transition[s]  # [S]
    return _augment_with_options(opts, p_next, w)


def option_kernel_given_action(
    mdp: TabularMDP, opts: TabularOptionSet, s: int, w: int, a: int
) -> np.ndarray:
    """P(s', w' | s, w, a) as an [S, n_options] array."""
    return _augment_with_options(opts, mdp.transition[s, a], w)


def option_kernel_given_state(mdp: TabularMDP, opts: TabularOptionSet, s: int) -> np.ndarray:
    """P(s', w' | s) marginalized over w ~ master(.|s)."""
    out = np.zeros((mdp.n_states, opts.n_options))
    for w, p_w in enumerate(opts.master[s]):
        if p_w > 0.0:
            out += p_w * option_kernel(mdp, opts, s, w)
    return out


def _augment_with_options(opts: TabularOptionSet, p_next: np.ndarray, w: int) -> np.ndarray:
    beta_next = opts.beta[w]  # beta_w(s') over s'
    out = p_next[:, None] * beta_next[:, None] * opts.master
    out[:, w] += p_next * (1.0 - beta_next)
    return out


# -- exact recursive returns -------------------------------------------------


@dataclass
class OptionReturnTables:
    """The four-variant discounted return family."""

    r_swa: np.ndarray  # R(s, w, a)
    r_sw: np.ndarray  # R(s, w)
    r_omega_sa: np.ndarray  # R_Omega(s, a)
    r_omega_s: np.ndarray  # R_Omega(s)


def solve_option_recursion(
    mdp: TabularMDP,
    opts: TabularOptionSet,
    per_step: np.ndarray,
    zero_terminal: bool = True,
) -> OptionReturnTables:
    """Exact linear solve of the option return recursion.

    per_step: [S, n_options, A] one-step terms r_hat_w(s, a).
    The recursion is
        R(s,w,a) = r(s,w,a) + gamma * sum_s' P(s'|s,a)
                   [beta_w(s') R_Omega(s') + (1-beta_w(s')) R(s',w)],
    solved over the unknowns R(s, w). With zero_terminal, continuation from
    terminal successor states contributes nothing (episodic convention).
    """
    if mdp.gamma >= 1.0:
        raise ValueError("recursion requires gamma < 1")
    S, W, A = per_step.shape
    P, gamma = mdp.transition, mdp.gamma
    cont = np.ones(S) if not zero_terminal else (~mdp.terminal).astype(float)

    # chain under each option: Ppi[w, s, s'] = sum_a pi[w,s,a] P[s,a,s']
    Ppi = np.einsum("wsa,sat->wst", opts.pi, P)
    # M[(s,w),(s',w')] coefficient matrix of the continuation terms
    n = S * W
    M = np.zeros((n, n))
    for w in range(W):
        beta_w = opts.beta[w]  # beta_w(s')
        kernel = Ppi[w] * cont[None, :]  # [s, s']
        # termination branch: beta_w(s') master(s', w')
        term = kernel * beta_w[None, :]  # [s, s']
        for wp in range(W):
            M[w::W, wp::W] += term * opts.master[:, wp][None, :]
        # continuation branch keeps w
        M[w::W, w::W] += kernel * (1.0 - beta_w)[None, :]
    b = np.einsum("wsa,swa->sw", opts.pi, per_step).reshape(n)
    x = np.linalg.solve(np.eye(n) - gamma * M, b)
    r_sw = x.reshape(S, W)
    residual = np.abs((np.eye(n) - gamma * M) @ x - b).max()
    if residual > 1e-8:
        raise RuntimeError(f"option recursion solve residual {residual}")

    r_omega_s = np.einsum("sw,sw->s", opts.master, r_sw)
    # one-action unrolling for R(s, w, a); continuation value seen from s'
    cont_from = cont[:, None] * (
        opts.beta.T * r_omega_s[:, None] + (1.0 - opts.beta.T) * r_sw
    )  # [s', w]
    r_swa = per_step + gamma * np.einsum("sat,tw->swa", P, cont_from)
    r_omega_sa = np.einsum("sw,swa->sa", opts.master, r_swa)
    return OptionReturnTables(r_swa=r_swa, r_sw=r_sw, r_omega_sa=r_omega_sa, r_omega_s=r_omega_s)


def discounted_option_return(
    mdp: TabularMDP, opts: TabularOptionSet, r_hat: np.ndarray, zero_terminal: bool = True
) -> OptionReturnTables:
    """Exact discounted option returns for reward tables r_hat [S, W, A]."""
    return solve_option_recursion(mdp, opts, r_hat, zero_terminal=zero_terminal)


@dataclass
class OptionValueTables:
    q_sw: np.ndarray  # Q(s, w)
    v_omega: np.ndarray  # V_Omega(s)
    q_saw: np.ndarray  # Q(s, a, w) one-action unrolling
    adv: np.ndarray  # A(s, a, w) = Q(s, a, w) - V_Omega(s)


def option_values(
    mdp: TabularMDP, opts: TabularOptionSet, r_hat: np.ndarray, zero_terminal: bool = True
) -> OptionValueTables:
    """Option-value fixed point; structurally the same recursion as the returns."""
    tables = solve_option_recursion(mdp, opts, r_hat, zero_terminal=zero_terminal)
    q_saw = np.transpose(tables.r_swa, (0, 2, 1))  # [s, a, w]
    adv = q_saw - tables.r_omega_s[:, None, None]
    return OptionValueTables(
        q_sw=tables.r_sw, v_omega=tables.r_omega_s, q_saw=q_saw, adv=adv
    )


# -- sampling ----------------------------------------------------------------


def composite_action(opts, x, current_w, rng: np.random.Generator):
    """One step of the call-and-return option execution model.

    x is whatever the option set consumes (state index or feature vector);
    current_w None means no active option (episode start). Returns
    (action, next_option, terminated_flag, info) where info carries the
    log-probabilities needed for PPO ratios.
    """
    terminated = False
    beta_val = np.nan
    if current_w is None:
        selected = True
    else:
        beta_val = opts.termination(current_w, x)
        terminated = bool(rng.random() < beta_val)
        selected = terminated
    if selected:
        master = opts.master_probs(x)
        w_next = int(rng.choice(len(master), p=master))
        logp_w = float(np.log(master[w_next]))
    else:
        w_next = current_w
        logp_w = np.nan
    probs = opts.intra_probs(w_next, x)
    a = int(rng.choice(len(probs), p=probs))
    info = {
        "logp_a": float(np.log(probs[a])),
        "logp_w": logp_w,
        "selected": selected,
        "beta": beta_val,
        "terminated": terminated,
    }
    return a, w_next, terminated, info


# -- learned representation ---------------------------------------------------


class NeuralOptionSet:
    """Option set backed by small MLPs over observation features.

    Per-option policy nets (softmax over actions), per-option termination
    nets (scalar logit -> sigmoid), and one master net (softmax over
    options). Initiation masks default to everything.
    """

    def __init__(
        self,
        n_options: int,
        obs_dim: int,
        n_actions: int,
        rng: np.random.Generator,
        hidden: tuple = (64, 64),
        activation: str = "tanh",
    ):
        self.n_options = n_options
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.policy_nets = [
            FeedForwardNet(
                [obs_dim, *hidden, n_actions], rng, activation=activation, out_gain=0.01
            )
            for _ in range(n_options)
        ]
        self.termination_nets = [
            FeedForwardNet([obs_dim, *hidden, 1], rng, activation=activation, out_gain=0.01)
            for _ in range(n_options)
        ]
        self.master_net = FeedForwardNet(
            [obs_dim, *hidden, n_options], rng, activation=activation, out_gain=0.01
        )

    def master_probs(self, x) -> np.ndarray:
        return softmax(self.master_net.forward(x))

    def master_log_probs(self, x) -> np.ndarray:
        return log_softmax(self.master_net.forward(x))

    def intra_probs(self, w: int, x) -> np.ndarray:
        return softmax(self.policy_nets[w].forward(x))

    def intra_log_probs(self, w: int, x) -> np.ndarray:
        return log_softmax(self.policy_nets[w].forward(x))

    def termination(self, w: int, x) -> float:
        z = self.termination_nets[w].forward(x)
        return float(1.0 / (1.0 + np.exp(-z[..., 0])))

    def termination_batch(self, w: int, xs: np.ndarray) -> np.ndarray:
        z = self.termination_nets[w].forward(xs)
        return 1.0 / (1.0 + np.exp(-z[:, 0]))

    # -- checkpointing ---------------------------------------------------------

    def save(self, path) -> None:
        """Versioned binary checkpoint with a JSON sidecar."""
        path = Path(path)
        arrays = {}
        for w, net in enumerate(self.policy_nets):
            arrays[f"policy_{w}"] = net.get_flat()
        for w, net in enumerate(self.termination_nets):
            arrays[f"termination_{w}"] = net.get_flat()
        arrays["master"] = self.master_net.get_flat()
        np.savez(path.with_suffix(".npz"), **arrays)
        sidecar = {
            "format_version": 1,
            "n_options": self.n_options,
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "policy_sizes": self.policy_nets[0].sizes,
            "termination_sizes": self.termination_nets[0].sizes,
            "master_sizes": self.master_net.sizes,
            "activation": self.policy_nets[0].activation,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @staticmethod
    def load(path) -> "NeuralOptionSet":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        hidden = tuple(sidecar["policy_sizes"][1:-1])
        opts = NeuralOptionSet(
            n_options=sidecar["n_options"],
            obs_dim=sidecar["obs_dim"],
            n_actions=sidecar["n_actions"],
            rng=np.random.default_rng(0),
            hidden=hidden,
            activation=sidecar["activation"],
        )
        data = np.load(path.with_suffix(".npz"))
        for w in range(opts.n_options):
            opts.policy_nets[w].set_flat(data[f"policy_{w}"])
            opts.termination_nets[w].set_flat(data[f"termination_{w}"])
        opts.master_net.set_flat(data["master"])
        return opts
