"""Tabular MDPs and exact dynamic-programming solvers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-9


class ContractViolation(RuntimeError):
    """An operation was called outside its stated precondition."""


@dataclass
class TabularMDP:
    """Enumerable MDP with dense transition kernel.

    transition: [n_states, n_actions, n_states], row-stochastic.
    reward:     [n_states, n_actions], values in [0, r_max].
    terminal:   boolean mask; terminal states must be absorbing.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: np.ndarray
    initial_dist: np.ndarray
    r_max: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self) -> None:
        P, R = self.transition, self.reward
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must be [S, A, S], got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"reward shape {R.shape} != {P.shape[:2]}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        row_sums = P.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=ROW_SUM_TOL):
            bad = np.unravel_index(np.argmax(np.abs(row_sums - 1.0)), row_sums.shape)
            raise ValueError(f"transition row {bad} sums to {row_sums[bad]}")
        if R.min() < -1e-12 or R.max() > self.r_max + 1e-12:
            raise ValueError("reward outside [0, r_max]")
        for s in np.flatnonzero(self.terminal):
            if not np.allclose(P[s, :, s], 1.0, atol=ROW_SUM_TOL):
                raise ValueError(f"terminal state {s} is not absorbing")
        if not np.isclose(self.initial_dist.sum(), 1.0, atol=ROW_SUM_TOL):
            raise ValueError("initial_dist does not sum to 1")


def env_step(mdp: TabularMDP, s: int, a: int, rng: np.random.Generator):
    """Sample one transition. Returns (s_next, reward, done)."""
    if mdp.terminal[s]:
        raise ContractViolation(f"env_step called from terminal state {s}")
    s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
    return s_next, float(mdp.reward[s, a]), bool(mdp.terminal[s_next])


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 200_000):
    """Solve for Q* by value iteration. Terminal states are pinned to 0 future value.

    Returns (Q, residual) with residual the final Bellman update sup-norm.
    """
    P, R, gamma = mdp.transition, mdp.reward, mdp.gamma
    cont = (~mdp.terminal).astype(float)
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = np.inf
    for _ in range(max_iter):
        V = Q.max(axis=1) * cont
        Q_new = R + gamma * P @ V
        residual = np.abs(Q_new - Q).max()
        Q = Q_new
        if residual < tol:
            break
    return Q, residual


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    """Deterministic policy from Q; ties broken toward the lowest action index."""
    return Q.argmax(axis=1)


def epsilon_soft_matrix(Q: np.ndarray, epsilon: float) -> np.ndarray:
    """Stochastic policy matrix [S, A]: greedy with probability 1 - epsilon."""
    n_states, n_actions = Q.shape
    pi = np.full((n_states, n_actions), epsilon / n_actions)
    pi[np.arange(n_states), Q.argmax(axis=1)] += 1.0 - epsilon
    return pi


def policy_transition_matrix(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """State-to-state chain [S, S] induced by policy matrix pi [S, A]."""
    return np.einsum("sa,sat->st", pi, mdp.transition)


def stationary_occupancy(chain: np.ndarray, initial: np.ndarray, n_steps: int) -> np.ndarray:
    """Average state-visitation over n_steps of the chain, starting from initial."""
    dist = initial.copy()
    total = np.zeros_like(dist)
    for _ in range(n_steps):
        total += dist
        dist = dist @ chain
    return total / n_steps
