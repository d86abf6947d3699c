"""Gridworld specs, compilation to tabular MDPs, and the episode runner.

Sparse goal reward: an episode that enters the goal after n steps earns
1 - 0.9 * n / n_max as a single terminal reward; lava and timeout end the
episode with zero return. The compiled tabular form can optionally augment
the state with the step count so the terminal reward stays Markov; the
learning pipeline instead consumes the raw cell plus a normalized step
fraction feature.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .mdp import TabularMDP

# Action index -> (dx, dy). y grows downward; "top" of a chamber is y - 1.
ACTIONS = ((0, -1), (0, 1), (-1, 0), (1, 0))
ACTION_NAMES = ("up", "down", "left", "right")

Cell = tuple[int, int]


class InvalidSpec(ValueError):
    """Grid construction parameters violate a structural rule."""


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    walls: frozenset
    lava: frozenset
    goal: Cell
    start: Cell
    n_max: int
    slip_prob: float = 0.0
    name: str = "grid"

    def validate(self) -> None:
        if self.start in self.walls or self.start in self.lava:
            raise InvalidSpec("start cell is blocked")
        if self.goal in self.walls:
            raise InvalidSpec("goal cell is a wall")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise InvalidSpec("slip_prob outside [0, 1]")
        d = shortest_path_length(self)
        if d is not None and self.n_max < d:
            raise InvalidSpec(f"n_max {self.n_max} < shortest path {d}")

    def free_cells(self) -> list:
        """All non-wall cells in row-major order (includes lava and goal)."""
        return [
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if (x, y) not in self.walls
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "width": self.width,
                "height": self.height,
                "walls": sorted(self.walls),
                "lava": sorted(self.lava),
                "goal": list(self.goal),
                "start": list(self.start),
                "n_max": self.n_max,
                "slip_prob": self.slip_prob,
                "name": self.name,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "GridSpec":
        d = json.loads(text)
        return GridSpec(
            width=d["width"],
            height=d["height"],
            walls=frozenset(tuple(c) for c in d["walls"]),
            lava=frozenset(tuple(c) for c in d["lava"]),
            goal=tuple(d["goal"]),
            start=tuple(d["start"]),
            n_max=d["n_max"],
            slip_prob=d["slip_prob"],
            name=d.get("name", "grid"),
        )


@dataclass(frozen=True)
class TransferPair:
    train_env: GridSpec
    test_env: GridSpec
    name: str

    def validate(self) -> None:
        a, b = self.train_env, self.test_env
        if (a.width, a.height, a.n_max) != (b.width, b.height, b.n_max):
            raise InvalidSpec("transfer pair members differ in size or budget")


def _next_cell(spec: GridSpec, cell: Cell, action: int) -> Cell:
    dx, dy = ACTIONS[action]
    nx, ny = cell[0] + dx, cell[1] + dy
    if not (0 <= nx < spec.width and 0 <= ny < spec.height):
        return cell
    if (nx, ny) in spec.walls:
        return cell
    return (nx, ny)


def _move_dist(spec: GridSpec, cell: Cell, action: int) -> dict:
    """Distribution over next cells under slip_prob action noise."""
    n_a = len(ACTIONS)
    probs: dict = {}
    for eff in range(n_a):
        p = spec.slip_prob / n_a + (1.0 - spec.slip_prob) * (eff == action)
        if p == 0.0:
            continue
        nxt = _next_cell(spec, cell, eff)
        probs[nxt] = probs.get(nxt, 0.0) + p
    return probs


def shortest_path_length(spec: GridSpec):
    """BFS steps from start to goal avoiding walls and lava; None if unreachable."""
    seen = {spec.start}
    frontier = deque([(spec.start, 0)])
    while frontier:
        cell, d = frontier.popleft()
        if cell == spec.goal:
            return d
        for a in range(len(ACTIONS)):
            nxt = _next_cell(spec, cell, a)
            if nxt in seen or nxt in spec.lava:
                continue
            seen.add(nxt)
            frontier.append((nxt, d + 1))
    return None


def build_lava_crossing(side: str, size: int) -> GridSpec:
    """Open room split by one lava row with a single opening.

    side "middle" puts the opening at the center column, "right" at the last
    column. Start is the top-left corner, goal the bottom-right corner.
    """
    if size < 5:
        raise InvalidSpec(f"lava crossing needs size >= 5, got {size}")
    if side not in ("middle", "right"):
        raise InvalidSpec(f"unknown side {side!r}")
    row = size // 2
    opening = size // 2 if side == "middle" else size - 1
    lava = frozenset((x, row) for x in range(size) if x != opening)
    return GridSpec(
        width=size,
        height=size,
        walls=frozenset(),
        lava=lava,
        goal=(size - 1, size - 1),
        start=(0, 0),
        n_max=4 * size,
        name=f"lava_crossing_{side}_{size}",
    )


def build_flower_maze(blockade: str, size: int) -> GridSpec:
    """Central goal chamber whose single entrance sits on the named side.

    The chamber is the 3x3 block around the center; its ring is walled
    except for one entrance cell. The two variants differ only in the two
    entrance cells (one opened, the other closed).
    """
    if size < 7:
        raise InvalidSpec(f"flower maze needs size >= 7, got {size}")
    if blockade not in ("right", "top"):
        raise InvalidSpec(f"unknown blockade {blockade!r}")
    c = size // 2
    ring = {
        (c + dx, c + dy)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        if (dx, dy) != (0, 0)
    }
    entrance = (c + 1, c) if blockade == "right" else (c, c - 1)
    walls = frozenset(ring - {entrance})
    return GridSpec(
        width=size,
        height=size,
        walls=walls,
        lava=frozenset(),
        goal=(c, c),
        start=(0, 0),
        n_max=4 * size,
        name=f"flower_maze_{blockade}_{size}",
    )


def lava_crossing_pair(size: int = 8) -> TransferPair:
    return TransferPair(
        train_env=build_lava_crossing("middle", size),
        test_env=build_lava_crossing("right", size),
        name=f"lava_crossing_m_to_r_{size}",
    )


def flower_maze_pair(size: int = 7) -> TransferPair:
    return TransferPair(
        train_env=build_flower_maze("right", size),
        test_env=build_flower_maze("top", size),
        name=f"flower_maze_r_to_t_{size}",
    )


def compile_grid(spec: GridSpec, time_augmented: bool = False) -> TabularMDP:
    """Compile a grid into a tabular MDP.

    Plain encoding: one state per free cell; lava and goal are absorbing.
    The reward table carries the goal-entry probability, so exact solvers
    see the sparse objective but not the step-count decay (the episode
    runner realizes the decay; see GridEnv).

    Time-augmented encoding: states are (cell, steps-taken) pairs plus two
    sinks, and the goal-entry reward is exactly 1 - 0.9 * n / n_max. Exact
    but larger; intended for desk-scale verification instances.
    """
    spec.validate()
    reachable = shortest_path_length(spec) is not None
    if time_augmented:
        mdp = _compile_time_augmented(spec)
    else:
        mdp = _compile_plain(spec)
    mdp.meta["spec"] = spec
    mdp.meta["goal_unreachable"] = not reachable
    mdp.validate()
    return mdp


def _compile_plain(spec: GridSpec) -> TabularMDP:
    cells = spec.free_cells()
    index = {c: i for i, c in enumerate(cells)}
    n_s, n_a = len(cells), len(ACTIONS)
    P = np.zeros((n_s, n_a, n_s))
    R = np.zeros((n_s, n_a))
    terminal = np.zeros(n_s, dtype=bool)
    for c in cells:
        if c in spec.lava or c == spec.goal:
            terminal[index[c]] = True
    for c in cells:
        s = index[c]
        if terminal[s]:
            P[s, :, s] = 1.0
            continue
        for a in range(n_a):
            for nxt, p in _move_dist(spec, c, a).items():
                P[s, a, index[nxt]] += p
                if nxt == spec.goal:
                    R[s, a] += p
    initial = np.zeros(n_s)
    initial[index[spec.start]] = 1.0
    return TabularMDP(
        transition=P,
        reward=R,
        gamma=0.99,
        terminal=terminal,
        initial_dist=initial,
        meta={"cells": cells, "cell_index": index, "encoding": "plain"},
    )


def _compile_time_augmented(spec: GridSpec) -> TabularMDP:
    live = [c for c in spec.free_cells() if c not in spec.lava and c != spec.goal]
    n_max = spec.n_max
    index = {}
    states = []
    for c in live:
        for n in range(n_max):
            index[(c, n)] = len(states)
            states.append((c, n))
    goal_sink = len(states)
    dead_sink = goal_sink + 1
    n_s, n_a = dead_sink + 1, len(ACTIONS)
    P = np.zeros((n_s, n_a, n_s))
    R = np.zeros((n_s, n_a))
    terminal = np.zeros(n_s, dtype=bool)
    terminal[goal_sink] = terminal[dead_sink] = True
    P[goal_sink, :, goal_sink] = 1.0
    P[dead_sink, :, dead_sink] = 1.0
    for (c, n), s in index.items():
        for a in range(n_a):
            for nxt, p in _move_dist(spec, c, a).items():
                if nxt == spec.goal:
                    P[s, a, goal_sink] += p
                    R[s, a] += p * (1.0 - 0.9 * (n + 1) / n_max)
                elif nxt in spec.lava or n + 1 >= n_max:
                    P[s, a, dead_sink] += p
                else:
                    P[s, a, index[(nxt, n + 1)]] += p
    initial = np.zeros(n_s)
    initial[index[(spec.start, 0)]] = 1.0
    return TabularMDP(
        transition=P,
        reward=R,
        gamma=0.99,
        terminal=terminal,
        initial_dist=initial,
        meta={
            "states": states,
            "state_index": index,
            "goal_sink": goal_sink,
            "dead_sink": dead_sink,
            "encoding": "time_augmented",
        },
    )


def export_mdp_json(mdp: TabularMDP, path) -> None:
    """Diagnostic dump of the compiled kernel for external inspection."""
    payload = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "terminal": mdp.terminal.astype(int).tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
        "goal_unreachable": bool(mdp.meta.get("goal_unreachable", False)),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


class GridEnv:
    """Episode runner over the plain cell encoding.

    State is (cell index, steps taken); observations are a one-hot cell
    vector with the normalized step fraction appended. Entering the goal
    after n steps pays 1 - 0.9 * n / n_max; lava and timeout pay 0.
    """

    def __init__(self, spec: GridSpec):
        spec.validate()
        self.spec = spec
        self.mdp = compile_grid(spec, time_augmented=False)
        self.cells = self.mdp.meta["cells"]
        self.cell_index = self.mdp.meta["cell_index"]
        self.n_actions = len(ACTIONS)
        self.n_states = len(self.cells)
        self.obs_dim = len(self.cells) + 1
        self._s = self.cell_index[spec.start]
        self._n = 0

    @property
    def state(self):
        return (self._s, self._n)

    def set_state(self, s: int, n: int) -> None:
        self._s, self._n = s, n

    def reset(self, rng: np.random.Generator | None = None) -> int:
        self._s = self.cell_index[self.spec.start]
        self._n = 0
        return self._s

    def observe(self, s: int | None = None, n: int | None = None) -> np.ndarray:
        s = self._s if s is None else s
        n = self._n if n is None else n
        obs = np.zeros(self.obs_dim)
        obs[s] = 1.0
        obs[-1] = n / self.spec.n_max
        return obs

    def step(self, a: int, rng: np.random.Generator):
        """Returns (s_next, reward, done, truncated)."""
        cell = self.cells[self._s]
        dist = _move_dist(self.spec, cell, a)
        nxt_cells = list(dist)
        nxt = nxt_cells[rng.choice(len(nxt_cells), p=np.array([dist[c] for c in nxt_cells]))]
        self._n += 1
        self._s = self.cell_index[nxt]
        if nxt == self.spec.goal:
            return self._s, 1.0 - 0.9 * self._n / self.spec.n_max, True, False
        if nxt in self.spec.lava:
            return self._s, 0.0, True, False
        if self._n >= self.spec.n_max:
            return self._s, 0.0, True, True
        return self._s, 0.0, False, False

    def clone(self) -> "GridEnv":
        env = GridEnv(self.spec)
        env.set_state(self._s, self._n)
        return env
