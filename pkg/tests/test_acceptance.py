"""End-to-end acceptance suite.

Each test finishes with a single [PASS]/[FAIL] verdict line carrying the
measured numbers. The later tests run full adversarial training and take
tens of minutes combined; run them last so the fast checks report first.
"""

import numpy as np
import pytest

from oirl.config import RunConfig, build_env_spec
from oirl.discriminator import d_prob, extract_reward, expected_loss_tables, loss_from_terms, recursive_terms, step_loss
from oirl.grids import GridEnv, flower_maze_pair, lava_crossing_pair
from oirl.mdp import TabularMDP
from oirl.nets import FeedForwardNet, finite_difference_grad
from oirl.options import (
    discounted_option_return,
    option_kernel,
    option_kernel_given_action,
    option_kernel_given_state,
    random_tabular_options,
)
from oirl.ppoc import (
    PPOCConfig,
    compute_gae,
    master_surrogate_loss,
    policy_surrogate_loss,
    termination_loss,
)
from oirl.rollout import MDPEnv, make_expert_soft, make_expert_tabular, sample_demos
from oirl.trainer import Trainer, evaluate_policy, train
from oirl.verify import (
    check_decomposability,
    contraction_test,
    reward_recovery,
    solve_option_optimality,
    theorem_bound_violation,
)

from test_discriminator import make_disc, recursive_fixture
from test_options import mc_option_return, random_mdp
from test_ppoc import gae_oracle, make_batch, rel_err
from test_ppoc import setup as ppoc_setup
from test_verify import two_component_mdp, uniform_kernel_mdp


def _verdict(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(f"\n{line}", flush=True)
    assert ok, line


# -- 1. exact algebraic identities ----------------------------------------------


def test_exact_identities():
    worst_norm = worst_variant = worst_family = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng)
        opts = random_tabular_options(3, mdp.n_states, mdp.n_actions, rng)
        for s in range(mdp.n_states):
            for w in range(opts.n_options):
                k = option_kernel(mdp, opts, s, w)
                worst_norm = max(worst_norm, abs(k.sum() - 1.0))
                combined = sum(
                    opts.pi[w, s, a] * option_kernel_given_action(mdp, opts, s, w, a)
                    for a in range(mdp.n_actions)
                )
                worst_variant = max(worst_variant, float(np.abs(combined - k).max()))
            marginal = sum(
                opts.master[s, w] * option_kernel(mdp, opts, s, w)
                for w in range(opts.n_options)
            )
            worst_variant = max(
                worst_variant,
                float(np.abs(marginal - option_kernel_given_state(mdp, opts, s)).max()),
            )
        r_hat = rng.uniform(size=(mdp.n_states, 3, mdp.n_actions))
        tables = discounted_option_return(mdp, opts, r_hat)
        fam = np.abs(
            np.einsum("sw,swa->sa", opts.master, tables.r_swa) - tables.r_omega_sa
        ).max()
        worst_family = max(worst_family, float(fam))

    rng = np.random.default_rng(99)
    worst_reward = 0.0
    half_exact = True
    for _ in range(200):
        f = float(rng.uniform(-20, 20))
        pi = float(rng.uniform(1e-6, 1.0))
        log_pi = float(np.log(pi))
        worst_reward = max(worst_reward, abs(extract_reward(f, log_pi) - (f - log_pi)))
        half_exact &= d_prob(pi, log_pi) == 0.5

    ok = (
        worst_norm < 1e-9
        and worst_variant < 1e-12
        and worst_family < 1e-10
        and worst_reward < 1e-9
        and half_exact
    )
    _verdict(
        "exact-identities",
        ok,
        f"kernel_norm={worst_norm:.2e} kernel_variants={worst_variant:.2e} "
        f"return_family={worst_family:.2e} reward_identity={worst_reward:.2e} "
        f"d_half_exact={half_exact}",
    )


# -- 2. analytic gradients vs central finite differences -------------------------


def _fd_error(loss_of, theta0, analytic, rng, n_coords=120):
    coords = rng.choice(theta0.size, size=min(n_coords, theta0.size), replace=False)
    assert coords.size >= 100, "gradient check needs at least 100 coordinates"
    fd = finite_difference_grad(loss_of, theta0.copy(), coords)
    return float(rel_err(analytic[coords], fd).max())


def _step_loss_fd_error():
    rng = np.random.default_rng(4)
    disc = make_disc(rng)
    n = 6
    from oirl.discriminator import DiscBatch

    mk = lambda: DiscBatch(
        xs=rng.normal(size=(n, 4)),
        actions=rng.integers(0, 3, size=n),
        xsp=rng.normal(size=(n, 4)),
        term_sp=rng.random(n) < 0.3,
        log_pi=np.log(rng.uniform(0.05, 0.9, size=n)),
        weight=rng.uniform(0.5, 2.0, size=n),
    )
    be, bn = mk(), mk()
    _, g_grads, h_grads = step_loss(disc, be, bn, 0)
    analytic = np.concatenate(
        [FeedForwardNet.flatten_grads(g_grads), FeedForwardNet.flatten_grads(h_grads)]
    )
    n_g = disc.g[0].get_flat().size
    theta0 = np.concatenate([disc.g[0].get_flat(), disc.h.get_flat()])

    def loss_of(theta):
        disc.g[0].set_flat(theta[:n_g])
        disc.h.set_flat(theta[n_g:])
        loss, _, _ = step_loss(disc, be, bn, 0)
        return loss

    return _fd_error(loss_of, theta0, analytic, rng)


def _recursive_loss_fd_error():
    rng, mdp, env, opts, disc, cfg, sample = recursive_fixture(seed=6)
    terms = recursive_terms(sample, opts, env, cfg, rng, env.observe)
    _, g_grads, h_grads = loss_from_terms(disc, terms)
    full_g = [
        FeedForwardNet.flatten_grads(g_grads.get(w, disc.g[w].zero_grads()))
        for w in range(disc.n_options)
    ]
    analytic = np.concatenate(full_g + [FeedForwardNet.flatten_grads(h_grads)])
    sizes = [disc.g[w].get_flat().size for w in range(disc.n_options)]
    theta0 = np.concatenate(
        [disc.g[w].get_flat() for w in range(disc.n_options)] + [disc.h.get_flat()]
    )

    def loss_of(theta):
        pos = 0
        for w in range(disc.n_options):
            disc.g[w].set_flat(theta[pos : pos + sizes[w]])
            pos += sizes[w]
        disc.h.set_flat(theta[pos:])
        loss, _, _ = loss_from_terms(disc, terms)
        return loss

    return _fd_error(loss_of, theta0, analytic, rng)


def test_loss_gradients_match_finite_differences():
    errors = {}
    errors["step_loss"] = _step_loss_fd_error()
    errors["recursive_loss"] = _recursive_loss_fd_error()

    rng, opts, agent, batch = make_batch(seed=1)
    cfg = agent.cfg
    sel = batch.options == 0
    net = opts.policy_nets[0]
    obs, actions = batch.obs[sel], batch.actions[sel]
    adv, old = batch.advantages[sel], batch.old_logp_a[sel]
    _, grads = policy_surrogate_loss(net, obs, actions, adv, old, cfg)

    def policy_loss_of(theta):
        net.set_flat(theta)
        loss, _ = policy_surrogate_loss(net, obs, actions, adv, old, cfg)
        return loss

    errors["ppo_surrogate"] = _fd_error(
        policy_loss_of, net.get_flat().copy(), FeedForwardNet.flatten_grads(grads), rng
    )

    rng, opts, agent, batch = make_batch(seed=3)
    tnet = opts.termination_nets[0]
    obs_next = batch.next_obs[:30]
    option_adv = rng.normal(size=30)
    _, grads = termination_loss(tnet, obs_next, option_adv, 0.1)

    def term_loss_of(theta):
        tnet.set_flat(theta)
        loss, _ = termination_loss(tnet, obs_next, option_adv, 0.1)
        return loss

    errors["termination"] = _fd_error(
        term_loss_of, tnet.get_flat().copy(), FeedForwardNet.flatten_grads(grads), rng
    )

    rng, opts, agent, batch = make_batch(seed=4)
    mnet = opts.master_net
    sel = batch.selection_mask
    obs, options = batch.obs[sel], batch.options[sel]
    adv = rng.normal(size=sel.sum())
    old = batch.old_logp_w[sel]
    _, grads = master_surrogate_loss(mnet, obs, options, adv, old, agent.cfg)

    def master_loss_of(theta):
        mnet.set_flat(theta)
        loss, _ = master_surrogate_loss(mnet, obs, options, adv, old, agent.cfg)
        return loss

    errors["master"] = _fd_error(
        master_loss_of, mnet.get_flat().copy(), FeedForwardNet.flatten_grads(grads), rng
    )

    worst = max(errors.values())
    detail = " ".join(f"{k}={v:.2e}" for k, v in errors.items())
    _verdict("gradient-checks", worst < 1e-4, detail)


# -- 3. solver outputs vs independent oracles ------------------------------------


def test_solvers_match_independent_oracles():
    rng = np.random.default_rng(9)
    terminal = np.array([False, False, False, False, True])
    mdp = random_mdp(rng, S=5, A=2, gamma=0.9, terminal=terminal)
    opts = random_tabular_options(2, 5, 2, rng)
    r_hat = rng.uniform(size=(5, 2, 2))
    r_hat[terminal] = 0.0
    tables = discounted_option_return(mdp, opts, r_hat)
    worst_z = 0.0
    for s0, w0 in ((0, 0), (2, 1)):
        mean, se = mc_option_return(mdp, opts, r_hat, s0, w0, rng)
        worst_z = max(worst_z, abs(tables.r_sw[s0, w0] - mean) / se)

    rng = np.random.default_rng(8)
    terminal = np.array([False, False, False, True])
    mdp = random_mdp(rng, S=4, A=2, terminal=terminal)
    opts = random_tabular_options(2, 4, 2, rng)
    step_table = rng.uniform(size=(4, 2, 2))
    step_table[terminal] = 0.0
    loss_tables = expected_loss_tables(mdp, opts, step_table)
    for s0, w0 in ((0, 0), (1, 1)):
        mean, se = mc_option_return(mdp, opts, step_table, s0, w0, rng)
        worst_z = max(worst_z, abs(loss_tables.r_sw[s0, w0] - mean) / se)

    rng, env, opts, agent, trajs = ppoc_setup()
    cfg = agent.cfg
    batch = compute_gae(trajs, agent.q_values, cfg.gamma, cfg.gae_lambda, env.observe)
    worst_gae = 0.0
    pos = 0
    for traj in trajs:
        oracle = gae_oracle(traj, agent.q_values, cfg.gamma, cfg.gae_lambda, env.observe)
        got = batch.advantages[pos : pos + traj.length]
        worst_gae = max(worst_gae, float(np.abs(got - oracle).max()))
        pos += traj.length

    ok = worst_z <= 3.0 and worst_gae < 1e-10
    _verdict(
        "oracle-equivalence",
        ok,
        f"max_monte_carlo_z={worst_z:.2f} (limit 3) gae_vs_quadratic={worst_gae:.2e}",
    )


# -- 4. contraction / optimality-bound / decomposability checks ------------------


def test_contraction_bound_and_decomposability():
    all_bounds_hold = True
    max_violation = -np.inf
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        gamma = float(rng.uniform(0.5, 0.95))
        mdp = random_mdp(rng, S=5, A=2, gamma=gamma)
        opts = random_tabular_options(2, 5, 2, rng)
        r_true = np.repeat(mdp.reward[:, None, :], 2, axis=1)
        offsets = rng.uniform(0.0, 1.0, size=2)
        rep = contraction_test(mdp, opts, r_true + offsets[None, :, None], n_iters=40)
        all_bounds_hold &= rep.bound_holds
        q_star = solve_option_optimality(mdp, opts, r_true)
        max_violation = max(
            max_violation, theorem_bound_violation(mdp, opts, r_true, q_star)
        )

    linked_ok, linked_wit = check_decomposability(uniform_kernel_mdp())
    split_ok, split_wit = check_decomposability(two_component_mdp())
    verdicts_ok = linked_ok and not linked_wit and not split_ok and len(split_wit) == 1

    ok = all_bounds_hold and max_violation <= 1e-9 and verdicts_ok
    _verdict(
        "contraction-and-bounds",
        ok,
        f"per_step_bound_holds_20_instances={all_bounds_hold} "
        f"planted_bound_violation={max_violation:.2e} decomposability_verdicts={verdicts_ok}",
    )


# -- 5. state-only reward recovery on a deterministic gridworld ------------------


def grid_state_reward_mdp(width=4, height=2, gamma=0.9, seed=0):
    """Deterministic continuing gridworld with a random state-only reward."""
    rng = np.random.default_rng(seed)
    S = width * height
    idx = lambda x, y: y * width + x
    P = np.zeros((S, 4, S))
    moves = ((0, -1), (0, 1), (-1, 0), (1, 0))
    for y in range(height):
        for x in range(width):
            s = idx(x, y)
            for a, (dx, dy) in enumerate(moves):
                nx = min(max(x + dx, 0), width - 1)
                ny = min(max(y + dy, 0), height - 1)
                P[s, a, idx(nx, ny)] = 1.0
    r_state = rng.uniform(0.1, 1.0, size=S)
    mdp = TabularMDP(
        transition=P,
        reward=np.repeat(r_state[:, None], 4, axis=1),
        gamma=gamma,
        terminal=np.zeros(S, dtype=bool),
        initial_dist=np.full(S, 1.0 / S),
    )
    mdp.validate()
    return mdp, r_state


def test_reward_recovery_state_only():
    mdp, r_state = grid_state_reward_mdp()
    env = MDPEnv(mdp, max_steps=32)
    branch_env = MDPEnv(mdp, max_steps=32)
    expert = make_expert_soft(mdp)
    demos = sample_demos(expert, env, 40, np.random.default_rng(0))
    cfg = RunConfig(
        n_options=2,
        iterations=400,
        steps_per_iter=256,
        expert_batch=128,
        policy_hidden=(32,),
        disc_hidden=(32, 32),
        ppoc=PPOCConfig(gamma=mdp.gamma),
    )
    trainer = Trainer(cfg, demos, seed=0, env=env, branch_env=branch_env)
    for _ in range(cfg.iterations):
        trainer.run_iteration()

    g_tables = np.stack(
        [
            np.atleast_2d(trainer.disc.g[w].forward(np.eye(mdp.n_states)))[:, 0]
            for w in range(cfg.n_options)
        ]
    )
    occupancy = np.zeros(mdp.n_states)
    for traj in demos.trajectories:
        for step in traj:
            occupancy[step.s] += 1
    rep = reward_recovery(mdp, g_tables, r_state, occupancy=occupancy)

    ok = rep.min_correlation >= 0.9
    _verdict(
        "reward-recovery",
        ok,
        f"per_option_correlations={np.round(rep.correlations, 3).tolist()} "
        f"(threshold 0.9) offsets={np.round(rep.offsets, 3).tolist()} "
        f"residual_after_offset={rep.residual:.3f}",
    )


# -- 7. self-imitation keeps the discriminator at chance -------------------------


def test_self_imitation_neutrality():
    cfg = RunConfig(
        env_name="lava_crossing_middle",
        env_size=8,
        n_options=4,
        iterations=150,
        steps_per_iter=256,
        expert_batch=128,
        self_imitation=True,
    )
    trainer = Trainer(cfg, None, seed=0)
    rows = [trainer.run_iteration() for _ in range(cfg.iterations)]
    tail = rows[-len(rows) // 5 :]
    acc = float(np.mean([r["disc_accuracy"] for r in tail]))
    rew = float(np.mean([r["mean_extracted_reward"] for r in tail]))
    ok = abs(acc - 0.5) < 0.1 and abs(rew) < 0.2
    _verdict(
        "self-imitation-neutrality",
        ok,
        f"|accuracy-0.5|={abs(acc - 0.5):.3f} (limit 0.1) "
        f"|mean_extracted_reward|={abs(rew):.3f} (limit 0.2) over final 20%",
    )


# -- 8. bit-identical reruns ------------------------------------------------------


def test_identical_configs_reproduce_bit_identical_metrics(tmp_path):
    cfg = RunConfig(
        env_name="lava_crossing_middle",
        env_size=5,
        n_options=2,
        iterations=3,
        n_demos=8,
        steps_per_iter=64,
        expert_batch=32,
        policy_hidden=(16,),
        disc_hidden=(16, 16),
    )
    env = GridEnv(build_env_spec(cfg.env_name, cfg.env_size))
    expert = make_expert_tabular(env.mdp)
    demos = sample_demos(expert, env, cfg.n_demos, np.random.default_rng(0))
    dirs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        train(cfg, demos, seed=0, out_dir=out)
        dirs.append(out)
    bytes_a = (dirs[0] / "metrics.csv").read_bytes()
    bytes_b = (dirs[1] / "metrics.csv").read_bytes()
    ok = bytes_a == bytes_b
    _verdict(
        "reproducibility",
        ok,
        f"metrics.csv byte-identical across reruns: {ok} ({len(bytes_a)} bytes)",
    )


# -- 6. transfer direction on perturbed grids (slowest; runs last) ---------------

TRANSFER_ITERATIONS = 200
TRANSFER_SEEDS = 10


def _train_and_transfer(env_name, env_size, pair, n_options, seed):
    cfg = RunConfig(
        env_name=env_name,
        env_size=env_size,
        n_options=n_options,
        iterations=TRANSFER_ITERATIONS,
    )
    train_env = GridEnv(pair.train_env)
    expert = make_expert_tabular(train_env.mdp)
    demos = sample_demos(expert, train_env, cfg.n_demos, np.random.default_rng(seed))
    trainer = Trainer(cfg, demos, seed=seed)
    for _ in range(cfg.iterations):
        trainer.run_iteration()
    test_env = GridEnv(pair.test_env)
    train_ret, _ = evaluate_policy(
        trainer.opts, trainer.env, cfg.eval_episodes, np.random.default_rng(10_000 + seed)
    )
    transfer_ret, _ = evaluate_policy(
        trainer.opts, test_env, cfg.eval_episodes, np.random.default_rng(20_000 + seed)
    )
    return train_ret, transfer_ret


def test_transfer_direction_lava_crossing():
    pair = lava_crossing_pair(8)
    transfer = {1: [], 4: []}
    for n_options in (4, 1):
        for seed in range(TRANSFER_SEEDS):
            train_ret, transfer_ret = _train_and_transfer(
                "lava_crossing_middle", 8, pair, n_options, seed
            )
            transfer[n_options].append(transfer_ret)
            print(
                f"lava M->R options={n_options} seed={seed} "
                f"train={train_ret:.3f} transfer={transfer_ret:.3f}",
                flush=True,
            )

    fpair = flower_maze_pair(7)
    for n_options in (4, 1):
        vals = [
            _train_and_transfer("flower_maze_right", 7, fpair, n_options, s)[1]
            for s in range(3)
        ]
        print(
            f"flower R->T options={n_options} transfer(3 seeds, reported only)="
            f"{[round(v, 3) for v in vals]}",
            flush=True,
        )

    med4 = float(np.median(transfer[4]))
    med1 = float(np.median(transfer[1]))
    mean4 = float(np.mean(transfer[4]))
    mean1 = float(np.mean(transfer[1]))
    ok = med4 >= med1 and mean4 - mean1 >= 0.05
    _verdict(
        "transfer-direction",
        ok,
        f"median(4opt)={med4:.3f} median(1opt)={med1:.3f} "
        f"mean(4opt)={mean4:.3f} mean(1opt)={mean1:.3f} "
        f"mean_margin={mean4 - mean1:.3f} (needs >= 0.05)",
    )
