import numpy as np
import pytest

from oirl.grids import GridEnv, build_lava_crossing
from oirl.options import random_tabular_options
from oirl.rollout import (
    MDPEnv,
    TrajectoryParseError,
    collect,
    env_fingerprint,
    fit_density,
    make_expert_tabular,
    mixture_policy,
    read_demos,
    read_trajectories,
    sample_demos,
    write_demos,
    write_trajectories,
)

from test_options import random_mdp


def test_collect_whole_episodes_and_step_budget():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, S=4, A=2, terminal=np.array([False, False, False, True]))
    env = MDPEnv(mdp, max_steps=30)
    opts = random_tabular_options(2, 4, 2, rng)
    trajs = collect(env, opts, 100, rng)
    total = sum(t.length for t in trajs)
    assert total >= 100
    for t in trajs:
        assert t.steps[-1].done
        assert all(not st.done for st in t.steps[:-1])
        # chained transitions
        for a, b in zip(t.steps, t.steps[1:]):
            assert a.s_next == b.s and a.n_next == b.n


def test_collect_records_selection_bookkeeping():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng, S=4, A=2, terminal=np.array([False, False, False, True]))
    env = MDPEnv(mdp, max_steps=30)
    opts = random_tabular_options(2, 4, 2, rng)
    trajs = collect(env, opts, 50, rng)
    for t in trajs:
        assert t.steps[0].selected  # episode start always selects
        for st in t.steps:
            if st.selected:
                assert np.isfinite(st.logp_w)
            else:
                assert np.isnan(st.logp_w)


def test_expert_solves_grid():
    env = GridEnv(build_lava_crossing("middle", 6))
    expert = make_expert_tabular(env.mdp)
    assert expert.residual < 1e-10
    rng = np.random.default_rng(2)
    demos = sample_demos(expert, env, 20, rng)
    # near-greedy expert reaches the goal almost always
    goal_idx = env.cell_index[env.spec.goal]
    successes = sum(tr[-1].s_next == goal_idx for tr in demos.trajectories)
    assert successes >= 18
    assert demos.env_hash == env_fingerprint(env)


def test_sample_demos_rejects_nonpositive_count():
    env = GridEnv(build_lava_crossing("middle", 6))
    expert = make_expert_tabular(env.mdp)
    with pytest.raises(ValueError):
        sample_demos(expert, env, 0, np.random.default_rng(0))


def test_sample_demos_warns_on_failing_expert():
    env = GridEnv(build_lava_crossing("middle", 6))
    expert = make_expert_tabular(env.mdp, epsilon=1.0)  # uniform random "expert"
    with pytest.warns(RuntimeWarning):
        sample_demos(expert, env, 10, np.random.default_rng(0))


def test_fit_density_normalizes_and_smooths():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, S=4, A=3, terminal=np.array([False, False, False, True]))
    env = MDPEnv(mdp, max_steps=20)
    expert = make_expert_tabular(mdp)
    demos = sample_demos(expert, env, 10, rng)
    opts = random_tabular_options(2, 4, 3, rng)
    density = fit_density(demos, 2, opts, n_states=4, n_actions=3)
    assert np.allclose(density.table.sum(axis=2), 1.0)
    assert density.table.min() > 0.0  # smoothing keeps everything off zero
    # unvisited states fall back to uniform
    for s in np.flatnonzero(~density.visited):
        assert np.allclose(density.table[:, s], 1.0 / 3.0)


def test_mixture_policy_is_half_and_half():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng, S=4, A=3, terminal=np.array([False, False, False, True]))
    env = MDPEnv(mdp, max_steps=20)
    expert = make_expert_tabular(mdp)
    demos = sample_demos(expert, env, 10, rng)
    opts = random_tabular_options(2, 4, 3, rng)
    density = fit_density(demos, 2, opts, n_states=4, n_actions=3)
    mix = mixture_policy(opts, density)
    p = mix.probs(0, 1, 0)
    assert np.allclose(p, 0.5 * opts.pi[0, 1] + 0.5 * density.table[0, 1])
    assert p.sum() == pytest.approx(1.0)


def test_degenerate_mixture_gives_constant_weights():
    # when the fitted density equals the policy, pi / mu == 1 everywhere
    rng = np.random.default_rng(5)
    opts = random_tabular_options(2, 4, 3, rng)

    class Identical:
        table = opts.pi.copy()

        def prob(self, w, s, a):
            return float(self.table[w, s, a])

    mix = mixture_policy(opts, Identical())
    for s in range(4):
        for a in range(3):
            ratio = opts.pi[0, s, a] / mix.prob(0, s, 0, a)
            assert ratio == pytest.approx(1.0)


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    mdp = random_mdp(rng, S=4, A=2, terminal=np.array([False, False, False, True]))
    env = MDPEnv(mdp, max_steps=30)
    opts = random_tabular_options(2, 4, 2, rng)
    trajs = collect(env, opts, 40, rng)
    path = tmp_path / "trajs.jsonl"
    write_trajectories(path, trajs)
    loaded = read_trajectories(path)
    assert len(loaded) == len(trajs)
    for a, b in zip(trajs, loaded):
        assert [st.s for st in a.steps] == [st.s for st in b.steps]
        assert [st.logp_a for st in a.steps] == [st.logp_a for st in b.steps]


def test_trajectory_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"schema_version": 1}\nnot json\n')
    with pytest.raises(TrajectoryParseError) as exc:
        read_trajectories(path)
    assert exc.value.line_no == 2


def test_truncated_trajectory_file_rejected(tmp_path):
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng, S=4, A=2, terminal=np.array([False, False, False, True]))
    env = MDPEnv(mdp, max_steps=30)
    opts = random_tabular_options(2, 4, 2, rng)
    trajs = collect(env, opts, 20, rng)
    path = tmp_path / "trunc.jsonl"
    write_trajectories(path, trajs)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop the final episode marker
    with pytest.raises(TrajectoryParseError):
        read_trajectories(path)


def test_empty_trajectory_file_warns(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.warns(RuntimeWarning):
        assert read_trajectories(path) == []


def test_demo_round_trip(tmp_path):
    env = GridEnv(build_lava_crossing("middle", 6))
    expert = make_expert_tabular(env.mdp)
    demos = sample_demos(expert, env, 5, np.random.default_rng(8))
    path = tmp_path / "demos.jsonl"
    write_demos(path, demos)
    loaded = read_demos(path)
    assert loaded.env_hash == demos.env_hash
    assert len(loaded.trajectories) == 5
    assert loaded.trajectories[0][0].s == demos.trajectories[0][0].s
