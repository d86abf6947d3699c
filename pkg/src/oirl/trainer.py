"""Adversarial training loop: alternate discriminator and PPOC updates.

Each iteration collects novice trajectories, trains the per-option
discriminators on an expert/novice mixture via the recursive loss,
extracts rewards, and runs one PPOC update on them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, build_env_spec
from .discriminator import (
    EXPERT,
    NOVICE,
    OptionDiscriminator,
    RecSample,
    _sigmoid,
    discriminator_load,
    discriminator_save,
    loss_from_terms,
    recursive_terms,
)
from .grids import GridEnv
from .nets import AdamState, FeedForwardNet, adam_step
from .options import NeuralOptionSet, composite_action
from .ppoc import PPOCAgent, compute_gae, master_update, ppo_update, termination_update
from .rollout import DemoSet, DemoStep, collect, fit_density

METRICS_FIELDS = [
    "iteration",
    "disc_loss",
    "disc_accuracy",
    "mean_extracted_reward",
    "policy_return",
    "termination_rate",
    "weight_clip_frac",
    "branch_fallbacks",
    "master_noop",
    "responsibility_fallbacks",
]


@dataclass
class TrainState:
    iteration: int
    agent: PPOCAgent
    discriminator: OptionDiscriminator
    env: GridEnv
    rng: np.random.Generator
    config: RunConfig
    seed: int
    metrics: list = field(default_factory=list)
    density: object = None


def assign_option_responsibilities(opts, demo_trajectories, featurize, n_options: int):
    """Forward-filtered option posteriors for unlabeled demo steps.

    The hidden option evolves with the termination/master dynamics and
    emits actions through the intra-option policies. Returns (list of
    [T, n_options] arrays, fallback_count).
    """
    all_resp = []
    fallbacks = 0
    for steps in demo_trajectories:
        resp = np.zeros((len(steps), n_options))
        alpha = None
        for t, st in enumerate(steps):
            x = featurize(st.s, st.n)
            lik = np.array([np.asarray(opts.intra_probs(w, x))[st.a] for w in range(n_options)])
            if alpha is None:
                prior = np.asarray(opts.master_probs(x))
            else:
                beta = np.array([opts.termination(w, x) for w in range(n_options)])
                master = np.asarray(opts.master_probs(x))
                # predict: continue with 1-beta, or terminate and redraw
                prior = alpha * (1.0 - beta) + float(alpha @ beta) * master
            post = prior * lik
            total = post.sum()
            if total <= 0.0 or not np.isfinite(total):
                post = np.full(n_options, 1.0 / n_options)
                fallbacks += 1
            else:
                post = post / total
            resp[t] = post
            alpha = post
        all_resp.append(resp)
    return all_resp, fallbacks


@dataclass
class MixtureBatch:
    """Expert/novice samples with importance weights p_hat/mu_hat."""

    samples: list  # RecSample
    weights: np.ndarray
    sources: list
    clip_count: int


def build_mixture_batch(
    opts,
    density,
    expert_samples,
    novice_samples,
    featurize,
    clip_bounds=(0.1, 10.0),
) -> MixtureBatch:
    """Weight each sample by pi_w(a|s) / mu_w(a|s), clipped and self-normalized.

    At the adversarial optimum the exponentiated discriminator reward
    equals the policy density, so the policy stands in for the intractable
    generator density in the numerator.
    """
    samples = list(expert_samples) + list(novice_samples)
    lo, hi = clip_bounds
    weights = np.zeros(len(samples))
    clip_count = 0
    for i, smp in enumerate(samples):
        x = featurize(smp.s, smp.n)
        pi = float(np.asarray(opts.intra_probs(smp.w, x))[smp.a])
        mu = 0.5 * pi + 0.5 * density.prob(smp.w, smp.s, smp.a)
        w = pi / max(mu, 1e-12)
        if w < lo or w > hi:
            clip_count += 1
        weights[i] = np.clip(w, lo, hi)
    weights = weights / weights.sum() * len(samples)
    return MixtureBatch(
        samples=samples,
        weights=weights,
        sources=[s.source for s in samples],
        clip_count=clip_count,
    )


def evaluate_policy(opts, env, n_episodes: int, rng: np.random.Generator, mode: str = "stochastic", featurize=None):
    """Mean/std episode return without learning. Greedy mode breaks ties low."""
    if featurize is None:
        featurize = lambda s, n: env.observe(s, n)
    returns = np.zeros(n_episodes)
    for ep in range(n_episodes):
        s = env.reset(rng)
        n = 0
        w = None
        total = 0.0
        while True:
            x = featurize(s, n)
            if mode == "stochastic":
                a, w, _, _ = composite_action(opts, x, w, rng)
            else:
                if w is None or opts.termination(w, x) >= 0.5:
                    w = int(np.argmax(opts.master_probs(x)))
                a = int(np.argmax(opts.intra_probs(w, x)))
            s, r, done, _ = env.step(a, rng)
            n += 1
            total += r
            if done:
                break
        returns[ep] = total
    return float(returns.mean()), float(returns.std())


def _novice_rec_samples(trajectories):
    out = []
    for tr in trajectories:
        for st in tr.steps:
            out.append(
                RecSample(
                    s=st.s,
                    n=st.n,
                    a=st.a,
                    s_next=st.s_next,
                    n_next=st.n_next,
                    w=st.w,
                    source=NOVICE,
                    term_next=st.done and not st.truncated,
                )
            )
    return out


def _expert_rec_samples(demos: DemoSet, responsibilities, n_samples: int, rng, n_options: int):
    """Uniformly sample demo transitions; assign an option from the posterior."""
    flat = []
    for traj, resp in zip(demos.trajectories, responsibilities):
        for st, row in zip(traj, resp):
            flat.append((st, row))
    idx = rng.choice(len(flat), size=min(n_samples, len(flat)), replace=len(flat) < n_samples)
    out = []
    for i in idx:
        st, row = flat[i]
        w = int(rng.choice(n_options, p=row))
        out.append(
            RecSample(
                s=st.s,
                n=st.n,
                a=st.a,
                s_next=st.s_next,
                n_next=st.n_next,
                w=w,
                source=EXPERT,
                term_next=st.done,
            )
        )
    return out


def extract_rewards(disc: OptionDiscriminator, trajectories, featurize):
    """r = f(s,a,s',w) - log pi_w(a|s) per novice step, one array per trajectory."""
    rewards = []
    for tr in trajectories:
        if not tr.steps:
            rewards.append(np.zeros(0))
            continue
        xs = np.stack([featurize(st.s, st.n) for st in tr.steps])
        xsp = np.stack([featurize(st.s_next, st.n_next) for st in tr.steps])
        r = np.zeros(len(tr.steps))
        options = np.array([st.w for st in tr.steps])
        term = np.array([st.done and not st.truncated for st in tr.steps])
        acts = np.array([st.a for st in tr.steps])
        logp = np.array([st.logp_a for st in tr.steps])
        for w in np.unique(options):
            sel = options == w
            f, _ = disc.f_batch(int(w), xs[sel], acts[sel], xsp[sel], term[sel])
            r[sel] = f - logp[sel]
        rewards.append(r)
    return rewards


class Trainer:
    """One seed's training run (Algorithm-level orchestration)."""

    def __init__(
        self,
        config: RunConfig,
        demos: DemoSet | None,
        seed: int,
        out_dir=None,
        env=None,
        branch_env=None,
    ):
        config.validate()
        self.config = config
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        root = np.random.SeedSequence(seed)
        (
            self._init_seq,
            self._collect_seq,
            self._disc_seq,
            self._ppo_seq,
            self._eval_seq,
        ) = root.spawn(5)
        init_rng = np.random.default_rng(self._init_seq)
        if env is None:
            spec = build_env_spec(config.env_name, config.env_size)
            env = GridEnv(spec)
            branch_env = GridEnv(spec)
        self.env = env
        self.branch_env = branch_env if branch_env is not None else env
        self.featurize = self.env.observe
        self.opts = NeuralOptionSet(
            n_options=config.n_options,
            obs_dim=self.env.obs_dim,
            n_actions=self.env.n_actions,
            rng=init_rng,
            hidden=config.policy_hidden,
        )
        self.agent = PPOCAgent(self.opts, config.ppoc, init_rng)
        self.disc = OptionDiscriminator(
            n_options=config.n_options,
            obs_dim=self.env.obs_dim,
            n_actions=self.env.n_actions,
            gamma=config.ppoc.gamma,
            rng=init_rng,
            mode=config.disc_mode,
            hidden=config.disc_hidden,
        )
        n_g = self.disc.g[0].get_flat().size
        n_h = self.disc.h.get_flat().size
        self.disc_adams = {
            w: AdamState(lr=config.ppoc.disc_lr, n_params=n_g, eps=config.ppoc.adam_eps, clip_norm=None)
            for w in range(config.n_options)
        }
        self.h_adam = AdamState(lr=config.ppoc.disc_lr, n_params=n_h, eps=config.ppoc.adam_eps, clip_norm=None)
        self.demos = demos
        self.collect_rng = np.random.default_rng(self._collect_seq)
        self.disc_rng = np.random.default_rng(self._disc_seq)
        self.ppo_rng = np.random.default_rng(self._ppo_seq)
        self.eval_rng = np.random.default_rng(self._eval_seq)
        self.metrics: list = []
        self.iteration = 0
        self.last_return = 0.0

    # -- one iteration -----------------------------------------------------

    def run_iteration(self) -> dict:
        cfg = self.config
        row = {k: 0.0 for k in METRICS_FIELDS}
        row["iteration"] = self.iteration

        trajectories = collect(
            self.env, self.opts, cfg.steps_per_iter, self.collect_rng, featurize=self.featurize
        )
        novice = _novice_rec_samples(trajectories)

        if cfg.self_imitation:
            expert_source = collect(
                self.env, self.opts, cfg.expert_batch, self.collect_rng, featurize=self.featurize
            )
            demo_trajs = [
                [
                    DemoStep(s=st.s, n=st.n, a=st.a, s_next=st.s_next, n_next=st.n_next, done=st.done)
                    for st in tr.steps
                ]
                for tr in expert_source
            ]
        else:
            demo_trajs = self.demos.trajectories

        responsibilities, fallbacks = assign_option_responsibilities(
            self.opts, demo_trajs, self.featurize, cfg.n_options
        )
        row["responsibility_fallbacks"] = fallbacks
        density = fit_density(
            DemoSet(trajectories=demo_trajs, env_hash="", provenance={}),
            cfg.n_options,
            self.opts,
            n_states=self.env.n_states,
            n_actions=self.env.n_actions,
            featurize=self.featurize,
            responsibilities=np.concatenate(responsibilities),
        )
        self.density = density

        expert = _expert_rec_samples(
            DemoSet(trajectories=demo_trajs, env_hash="", provenance={}),
            responsibilities,
            cfg.expert_batch,
            self.disc_rng,
            cfg.n_options,
        )
        mixture = build_mixture_batch(
            self.opts, density, expert, novice, self.featurize, cfg.weight_clip
        )
        row["weight_clip_frac"] = mixture.clip_count / max(len(mixture.samples), 1)

        # discriminator pass: expert side from demos, novice side from the
        # importance-weighted mixture, expanded by the recursive loss
        branch_metrics: dict = {}
        terms = []
        for smp in expert:
            for t in recursive_terms(
                smp, self.opts, self.branch_env, cfg.recursive, self.disc_rng, self.featurize, branch_metrics
            ):
                t.coeff /= max(len(expert), 1)
                terms.append(t)
        for smp, wgt in zip(mixture.samples, mixture.weights):
            smp_novice = RecSample(
                s=smp.s, n=smp.n, a=smp.a, s_next=smp.s_next, n_next=smp.n_next,
                w=smp.w, source=NOVICE, term_next=smp.term_next,
            )
            for t in recursive_terms(
                smp_novice, self.opts, self.branch_env, cfg.recursive, self.disc_rng, self.featurize, branch_metrics
            ):
                t.coeff *= wgt / len(mixture.samples)
                terms.append(t)
        loss, g_grads, h_grads = loss_from_terms(self.disc, terms)
        for w, grads in g_grads.items():
            adam_step(self.disc.g[w], grads, self.disc_adams[w])
        adam_step(self.disc.h, h_grads, self.h_adam)
        row["disc_loss"] = loss
        row["branch_fallbacks"] = branch_metrics.get("branch_fallbacks", 0)
        row["disc_accuracy"] = self._accuracy(expert, novice)

        # rewards and PPOC
        rewards = extract_rewards(self.disc, trajectories, self.featurize)
        row["mean_extracted_reward"] = float(np.concatenate(rewards).mean())
        batch = compute_gae(
            trajectories,
            self.agent.q_values,
            cfg.ppoc.gamma,
            cfg.ppoc.gae_lambda,
            self.featurize,
            rewards=rewards,
        )
        ppo_update(self.agent, batch, self.ppo_rng)
        termination_update(self.agent, batch)
        m = master_update(self.agent, batch)
        row["master_noop"] = int(m.get("master_noop", False))
        row["termination_rate"] = float(
            np.mean([st.beta_sampled for tr in trajectories for st in tr.steps])
        )
        row["policy_return"] = float(np.mean([tr.episode_return for tr in trajectories]))
        self.last_return = row["policy_return"]
        if not all(np.isfinite(v) for v in row.values() if isinstance(v, float)):
            self.save_checkpoint(tag=f"abort_iter{self.iteration}")
            raise FloatingPointError(f"non-finite metric at iteration {self.iteration}")
        self.metrics.append(row)
        self.iteration += 1
        return row

    def _accuracy(self, expert_samples, novice_samples) -> float:
        """Fraction of one-step samples the discriminator labels correctly."""
        scores = []
        for samples, want_high in ((expert_samples, True), (novice_samples, False)):
            if not samples:
                continue
            sub = samples if len(samples) <= 512 else samples[:512]
            xs = np.stack([self.featurize(s.s, s.n) for s in sub])
            xsp = np.stack([self.featurize(s.s_next, s.n_next) for s in sub])
            acts = np.array([s.a for s in sub])
            term = np.array([s.term_next for s in sub])
            side = np.zeros(len(sub))
            options = np.array([s.w for s in sub])
            for w in np.unique(options):
                sel = options == w
                f, _ = self.disc.f_batch(int(w), xs[sel], acts[sel], xsp[sel], term[sel])
                logp = np.log(
                    np.maximum(
                        [
                            np.asarray(self.opts.intra_probs(int(w), self.featurize(s.s, s.n)))[s.a]
                            for s, m in zip(sub, sel)
                            if m
                        ],
                        1e-30,
                    )
                )
                d = _sigmoid(f - logp)
                side[sel] = d
            scores.append(np.mean(side > 0.5) if want_high else np.mean(side < 0.5))
        return float(np.mean(scores)) if scores else 0.5

    # -- persistence ---------------------------------------------------------

    def save_checkpoint(self, tag: str = "final") -> Path:
        if self.out_dir is None:
            raise RuntimeError("trainer has no output directory")
        ckpt = self.out_dir / f"checkpoint_{tag}"
        ckpt.mkdir(parents=True, exist_ok=True)
        self.opts.save(ckpt / "options")
        discriminator_save(self.disc, ckpt / "discriminator")
        np.savez(ckpt / "critic.npz", flat=self.agent.critic.get_flat())
        adam_arrays = {}
        for name, st in self._adam_states():
            adam_arrays[f"{name}_m"] = st.m
            adam_arrays[f"{name}_v"] = st.v
            adam_arrays[f"{name}_t"] = np.array(st.t)
        np.savez(ckpt / "optimizers.npz", **adam_arrays)
        state = {
            "iteration": self.iteration,
            "seed": self.seed,
            "config_hash": self.config.hash(),
            "env_name": self.config.env_name,
            "env_size": self.config.env_size,
            "rng": {
                "collect": self.collect_rng.bit_generator.state,
                "disc": self.disc_rng.bit_generator.state,
                "ppo": self.ppo_rng.bit_generator.state,
                "eval": self.eval_rng.bit_generator.state,
            },
        }
        (ckpt / "state.json").write_text(json.dumps(state))
        return ckpt

    def _adam_states(self):
        named = [("h", self.h_adam), ("critic", self.agent.critic_adam), ("master", self.agent.master_adam)]
        for w in range(self.config.n_options):
            named.append((f"disc_{w}", self.disc_adams[w]))
            named.append((f"policy_{w}", self.agent.policy_adams[w]))
            named.append((f"termination_{w}", self.agent.termination_adams[w]))
        return named

    def load_checkpoint(self, ckpt) -> None:
        ckpt = Path(ckpt)
        loaded = NeuralOptionSet.load(ckpt / "options")
        for w in range(self.config.n_options):
            self.opts.policy_nets[w].set_flat(loaded.policy_nets[w].get_flat())
            self.opts.termination_nets[w].set_flat(loaded.termination_nets[w].get_flat())
        self.opts.master_net.set_flat(loaded.master_net.get_flat())
        self.disc = discriminator_load(ckpt / "discriminator")
        self.agent.critic.set_flat(np.load(ckpt / "critic.npz")["flat"])
        opt_path = ckpt / "optimizers.npz"
        if opt_path.exists():
            data = np.load(opt_path)
            for name, st in self._adam_states():
                st.m = data[f"{name}_m"]
                st.v = data[f"{name}_v"]
                st.t = int(data[f"{name}_t"])
        state = json.loads((ckpt / "state.json").read_text())
        self.iteration = state["iteration"]
        self.collect_rng.bit_generator.state = state["rng"]["collect"]
        self.disc_rng.bit_generator.state = state["rng"]["disc"]
        self.ppo_rng.bit_generator.state = state["rng"]["ppo"]
        self.eval_rng.bit_generator.state = state["rng"]["eval"]

    def write_metrics(self, path) -> None:
        write_metrics_csv(path, self.metrics, self.config)


def write_metrics_csv(path, rows: list, config: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version=1 config_hash={config.hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def train(config: RunConfig, demos: DemoSet | None, seed: int, out_dir=None, resume=None) -> TrainState:
    """Run the full adversarial loop for one seed. Returns the final state."""
    trainer = Trainer(config, demos, seed, out_dir=out_dir)
    if resume is not None:
        trainer.load_checkpoint(resume)
    while trainer.iteration < config.iterations:
        trainer.run_iteration()
    if out_dir is not None:
        trainer.save_checkpoint("final")
        trainer.write_metrics(Path(out_dir) / "metrics.csv")
    return TrainState(
        iteration=trainer.iteration,
        agent=trainer.agent,
        discriminator=trainer.disc,
        env=trainer.env,
        rng=trainer.collect_rng,
        config=config,
        seed=seed,
        metrics=trainer.metrics,
        density=getattr(trainer, "density", None),
    )
