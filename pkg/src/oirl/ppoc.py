"""PPOC: proximal policy optimization over an option set.

Updates three parameter groups from one advantage batch: intra-option
policies (clipped surrogate + entropy + value loss), termination functions
(option-advantage plus deliberation cost), and the master policy (clipped
surrogate on option-selection steps).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import AdamState, FeedForwardNet, adam_step, log_softmax, softmax
from .options import NeuralOptionSet


@dataclass
class PPOCConfig:
    lr: float = 7e-4
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    gae_lambda: float = 0.95
    gamma: float = 0.99
    entropy_coef: float = 1e-2
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    delib_cost: float = 0.1
    disc_lr: float = 1e-3
    adam_eps: float = 1e-5
    normalize_adv: bool = True

    def validate(self) -> None:
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0 or not 0.0 <= self.gamma <= 1.0:
            raise ValueError("lambda and gamma must be in [0, 1]")
        if self.delib_cost < 0.0:
            raise ValueError("deliberation cost must be >= 0")


@dataclass
class AdvantageBatch:
    obs: np.ndarray  # [N, d]
    next_obs: np.ndarray  # [N, d]
    actions: np.ndarray  # [N]
    options: np.ndarray  # [N]
    advantages: np.ndarray  # [N] GAE, normalized if configured
    value_targets: np.ndarray  # [N]
    old_logp_a: np.ndarray  # [N]
    old_logp_w: np.ndarray  # [N], nan off selection steps
    selection_mask: np.ndarray  # [N] bool
    term_next: np.ndarray  # [N] bool, s_next terminal (not truncation)
    rewards: np.ndarray  # [N] rewards actually used (for metrics)


class PPOCAgent:
    """Neural option set plus a per-option value critic and their optimizers."""

    def __init__(
        self,
        opts: NeuralOptionSet,
        cfg: PPOCConfig,
        rng: np.random.Generator,
        critic_hidden: tuple = (64, 64),
    ):
        cfg.validate()
        self.opts = opts
        self.cfg = cfg
        self.critic = FeedForwardNet(
            [opts.obs_dim, *critic_hidden, opts.n_options], rng, activation="tanh"
        )
        mk = lambda net, lr: AdamState(
            lr=lr, n_params=net.get_flat().size, eps=cfg.adam_eps, clip_norm=cfg.max_grad_norm
        )
        self.policy_adams = [mk(n, cfg.lr) for n in opts.policy_nets]
        self.termination_adams = [mk(n, cfg.lr) for n in opts.termination_nets]
        self.master_adam = mk(opts.master_net, cfg.lr)
        self.critic_adam = mk(self.critic, cfg.lr)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.critic.forward(obs))

    def v_omega(self, obs: np.ndarray) -> np.ndarray:
        q = self.q_values(obs)
        master = softmax(np.atleast_2d(self.opts.master_net.forward(obs)))
        return (q * master).sum(axis=1)


def compute_gae(trajectories, value_fn, gamma: float, lam: float, featurize, rewards=None):
    """GAE(gamma, lambda) over whole trajectories.

    value_fn(obs [N,d]) -> per-option values [N, n_options]; the value of a
    step is the critic value of its active option. Terminal bootstrap is 0;
    truncation bootstraps the critic at the final state. rewards optionally
    overrides the stored environment rewards (one array per trajectory).
    """
    if value_fn is None:
        raise ValueError("compute_gae requires a value function")
    all_obs, all_next_obs, acts, opts_idx = [], [], [], []
    advs, targets = [], []
    old_logp_a, old_logp_w, selection, term_next, used_rewards = [], [], [], [], []
    for k, traj in enumerate(trajectories):
        steps = traj.steps
        r = np.array([st.r_env for st in steps]) if rewards is None else np.asarray(rewards[k])
        if len(r) != len(steps):
            raise ValueError("reward override length mismatch")
        obs = np.stack([featurize(st.s, st.n) for st in steps])
        next_obs = np.stack([featurize(st.s_next, st.n_next) for st in steps])
        q = np.atleast_2d(value_fn(obs))
        v = q[np.arange(len(steps)), [st.w for st in steps]]
        q_next_last = np.atleast_2d(value_fn(next_obs[-1:]))[0]
        last = steps[-1]
        bootstrap = 0.0 if (last.done and not last.truncated) else float(q_next_last[last.w])
        v_next = np.append(v[1:], bootstrap)
        # within the episode, non-final steps continue; final step uses bootstrap
        deltas = r + gamma * v_next - v
        adv = np.zeros(len(steps))
        acc = 0.0
        for t in reversed(range(len(steps))):
            acc = deltas[t] + gamma * lam * acc
            adv[t] = acc
        all_obs.append(obs)
        all_next_obs.append(next_obs)
        acts.extend(st.a for st in steps)
        opts_idx.extend(st.w for st in steps)
        advs.append(adv)
        targets.append(adv + v)
        old_logp_a.extend(st.logp_a for st in steps)
        old_logp_w.extend(st.logp_w for st in steps)
        selection.extend(st.selected for st in steps)
        term_next.extend(st.done and not st.truncated for st in steps)
        used_rewards.append(r)
    return AdvantageBatch(
        obs=np.concatenate(all_obs),
        next_obs=np.concatenate(all_next_obs),
        actions=np.array(acts),
        options=np.array(opts_idx),
        advantages=np.concatenate(advs),
        value_targets=np.concatenate(targets),
        old_logp_a=np.array(old_logp_a),
        old_logp_w=np.array(old_logp_w),
        selection_mask=np.array(selection, dtype=bool),
        term_next=np.array(term_next, dtype=bool),
        rewards=np.concatenate(used_rewards),
    )


def _clipped_surrogate_grad(ratio: np.ndarray, adv: np.ndarray, clip: float):
    """Value and d/d(ratio) of -min(ratio*A, clip(ratio)*A), per sample."""
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    obj = np.minimum(ratio * adv, clipped * adv)
    within = (ratio >= 1.0 - clip) & (ratio <= 1.0 + clip)
    unclipped_min = ratio * adv <= clipped * adv
    dobj_dr = np.where(unclipped_min, adv, adv * within)
    return -obj, -dobj_dr


def policy_surrogate_loss(net: FeedForwardNet, obs, actions, adv, old_logp, cfg: PPOCConfig):
    """Clipped PPO surrogate minus entropy bonus for one intra-option policy.

    Returns (loss, grads).
    """
    n = len(actions)
    logits, cache = net.forward_cache(obs)
    logp = log_softmax(logits)
    p = np.exp(logp)
    lp_a = logp[np.arange(n), actions]
    ratio = np.exp(lp_a - old_logp)
    loss_vec, dl_dr = _clipped_surrogate_grad(ratio, adv, cfg.clip)
    entropy = -(p * logp).sum(axis=1)
    loss = float(loss_vec.mean() - cfg.entropy_coef * entropy.mean())
    # d ratio / d logits = ratio * (onehot - p)
    dz = np.zeros_like(logits)
    coef = (dl_dr * ratio / n)[:, None]
    onehot = np.zeros_like(p)
    onehot[np.arange(n), actions] = 1.0
    dz += coef * (onehot - p)
    # entropy bonus: dH/dz = -p * (logp + H), and the bonus enters with -coef
    dz += (cfg.entropy_coef / n) * p * (logp + entropy[:, None])
    grads, _ = net.backward(cache, dz)
    return loss, grads


def value_loss(critic: FeedForwardNet, obs, options, targets, cfg: PPOCConfig):
    """value_coef * MSE on the active option's critic column. Returns (loss, grads)."""
    n = len(options)
    q, cache = critic.forward_cache(obs)
    v = q[np.arange(n), options]
    err = v - targets
    loss = float(cfg.value_coef * np.mean(err**2))
    dq = np.zeros_like(q)
    dq[np.arange(n), options] = cfg.value_coef * 2.0 * err / n
    grads, _ = critic.backward(cache, dq)
    return loss, grads


def termination_loss(net: FeedForwardNet, obs_next, option_adv, eta: float):
    """mean beta(s') * (A(s', w) + eta); pushing beta up where A < -eta.

    Returns (loss, grads). option_adv is treated as a constant.
    """
    n = len(option_adv)
    z, cache = net.forward_cache(obs_next)
    beta = 1.0 / (1.0 + np.exp(-z[:, 0]))
    loss = float(np.mean(beta * (option_adv + eta)))
    dz = np.zeros_like(z)
    dz[:, 0] = beta * (1.0 - beta) * (option_adv + eta) / n
    grads, _ = net.backward(cache, dz)
    return loss, grads


def master_surrogate_loss(net: FeedForwardNet, obs, options, adv, old_logp_w, cfg: PPOCConfig):
    """Clipped surrogate for the policy over options on selection steps."""
    n = len(options)
    logits, cache = net.forward_cache(obs)
    logp = log_softmax(logits)
    p = np.exp(logp)
    lp_w = logp[np.arange(n), options]
    ratio = np.exp(lp_w - old_logp_w)
    loss_vec, dl_dr = _clipped_surrogate_grad(ratio, adv, cfg.clip)
    loss = float(loss_vec.mean())
    onehot = np.zeros_like(p)
    onehot[np.arange(n), options] = 1.0
    dz = (dl_dr * ratio / n)[:, None] * (onehot - p)
    grads, _ = net.backward(cache, dz)
    return loss, grads


def ppo_update(agent: PPOCAgent, batch: AdvantageBatch, rng: np.random.Generator):
    """Epochs of minibatch clipped-surrogate updates for policies and critic."""
    cfg = agent.cfg
    adv = batch.advantages.copy()
    if cfg.normalize_adv and adv.std() > 1e-8:
        adv = (adv - adv.mean()) / adv.std()
    n = len(adv)
    metrics = {"policy_loss": 0.0, "value_loss": 0.0, "updates": 0}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            for w in np.unique(batch.options[idx]):
                sel = idx[batch.options[idx] == w]
                net = agent.opts.policy_nets[w]
                loss, grads = policy_surrogate_loss(
                    net, batch.obs[sel], batch.actions[sel], adv[sel], batch.old_logp_a[sel], cfg
                )
                if not np.isfinite(loss):
                    raise FloatingPointError("NaN in PPO surrogate; aborting iteration")
                adam_step(net, grads, agent.policy_adams[w])
                metrics["policy_loss"] += loss
            vloss, vgrads = value_loss(
                agent.critic, batch.obs[idx], batch.options[idx], batch.value_targets[idx], cfg
            )
            adam_step(agent.critic, vgrads, agent.critic_adam)
            metrics["value_loss"] += vloss
            metrics["updates"] += 1
    return metrics


def termination_update(agent: PPOCAgent, batch: AdvantageBatch):
    """One gradient step per termination net on the deliberation objective."""
    cfg = agent.cfg
    metrics = {"termination_loss": 0.0}
    live = ~batch.term_next
    if not live.any():
        return metrics
    q_next = agent.q_values(batch.next_obs[live])
    master_next = softmax(np.atleast_2d(agent.opts.master_net.forward(batch.next_obs[live])))
    v_next = (q_next * master_next).sum(axis=1)
    options = batch.options[live]
    for w in np.unique(options):
        sel = options == w
        option_adv = q_next[sel, w] - v_next[sel]
        net = agent.opts.termination_nets[w]
        loss, grads = termination_loss(net, batch.next_obs[live][sel], option_adv, cfg.delib_cost)
        adam_step(net, grads, agent.termination_adams[w])
        metrics["termination_loss"] += loss
    return metrics


def master_update(agent: PPOCAgent, batch: AdvantageBatch):
    """Clipped-surrogate step for the policy over options on selection steps."""
    cfg = agent.cfg
    sel = batch.selection_mask
    if agent.opts.n_options == 1 or not sel.any():
        return {"master_loss": 0.0, "master_steps": 0, "master_noop": True}
    obs = batch.obs[sel]
    options = batch.options[sel]
    q = agent.q_values(obs)
    master = softmax(np.atleast_2d(agent.opts.master_net.forward(obs)))
    v = (q * master).sum(axis=1)
    adv = q[np.arange(len(options)), options] - v
    if cfg.normalize_adv and adv.std() > 1e-8:
        adv = (adv - adv.mean()) / adv.std()
    loss, grads = master_surrogate_loss(
        agent.opts.master_net, obs, options, adv, batch.old_logp_w[sel], cfg
    )
    adam_step(agent.opts.master_net, grads, agent.master_adam)
    return {"master_loss": loss, "master_steps": int(sel.sum()), "master_noop": False}
