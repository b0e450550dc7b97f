"""Advantage-modulated actor-critic training over a fixed dataset."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .advantage import AdvantageOracle, batch_modulated_advantage
from .dataset import Batch, OfflineDataset, sample_batch
from .diffusion import (BehaviorModel, bc_loss, make_vp_schedule, noise_net_spec, reverse_backward,
                        reverse_process)
from .envs.maze import MazeSpec, maze_reset, step_arrays


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    alpha: float = 1.0                  # actor guidance weight before |Q| normalization
    backup_count: int = 10
    use_max_q_backup: bool = False      # True scores backup_count target-actor candidates and keeps the max
    eval_candidates: int = 50
    eval_temperature: float = 0.05
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    target_rate: float = 0.005
    batch_size: int = 256
    total_steps: int = 50_000
    eval_interval: int = 10_000
    log_interval: int = 1000
    eval_episodes: int = 100
    diffusion_steps: int = 10
    emb_dim: int = 16
    actor_hidden: tuple = (64, 64, 64)
    critic_architecture: str = "residual"
    critic_hidden: int = 64
    critic_blocks: int = 2
    actor_init: str = "behavior"        # behavior (copy the pretrained behavior model) | random
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.backup_count < 1 or self.eval_candidates < 1:
            raise ValueError("backup_count and eval_candidates must be >= 1")
        if not self.use_max_q_backup and self.backup_count != 1:
            object.__setattr__(self, "backup_count", 1)
        if self.eval_temperature <= 0:
            raise ValueError("eval_temperature must be positive")
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError("target_rate must lie in (0, 1]")
        for name in ("batch_size", "eval_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.actor_init not in ("random", "behavior"):
            raise ValueError(f"actor_init must be 'random' or 'behavior', got {self.actor_init!r}")


def critic_spec(obs_dim: int, act_dim: int, cfg: TrainConfig) -> nn.NetSpec:
    if cfg.critic_architecture == "residual":
        return nn.NetSpec((obs_dim + act_dim, cfg.critic_hidden, 1), architecture="residual",
                          block_count=cfg.critic_blocks)
    return nn.NetSpec((obs_dim + act_dim, *([cfg.critic_hidden] * 3), 1))


@dataclass
class CriticPair:
    q1: nn.NetParams
    q2: nn.NetParams
    target1: nn.NetParams
    target2: nn.NetParams

    def __post_init__(self):
        if self.q1.spec != self.target1.spec or self.q2.spec != self.target2.spec:
            raise ValueError("online and target critic specs differ")

    @classmethod
    def create(cls, spec: nn.NetSpec, rng, dtype=np.float32) -> "CriticPair":
        q1 = nn.init_params(spec, rng, dtype)
        q2 = nn.init_params(spec, rng, dtype)
        return cls(q1, q2, q1.copy(), q2.copy())

    def min_q(self, states, actions, target: bool = False) -> np.ndarray:
        a, b = (self.target1, self.target2) if target else (self.q1, self.q2)
        x = np.concatenate([states, actions], axis=1).astype(a.dtype, copy=False)
        return np.minimum(nn.forward(a, x)[:, 0], nn.forward(b, x)[:, 0])


@dataclass
class ActorModel:
    noise_net: nn.NetParams
    target_noise_net: nn.NetParams
    schedule: object
    emb_dim: int = 16

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, cfg: TrainConfig, rng, dtype=np.float32):
        params = nn.init_params(noise_net_spec(obs_dim, act_dim, cfg.actor_hidden, cfg.emb_dim), rng, dtype)
        return cls(params, params.copy(), make_vp_schedule(cfg.diffusion_steps), cfg.emb_dim)

    def as_behavior(self, target: bool = False) -> BehaviorModel:
        return BehaviorModel(self.target_noise_net if target else self.noise_net, self.schedule, self.emb_dim)

    @property
    def act_dim(self) -> int:
        return self.noise_net.spec.out_dim


def critic_target(batch: Batch, actor: ActorModel, critics: CriticPair, oracle: AdvantageOracle | None,
                  config: TrainConfig, rng: np.random.Generator, ablate: bool = False):
    """Per-sample r + gamma (1 - done) max_j [minQ'(s', a'_j) + softclip(A(a'_j | s'))].

    Returns (targets, modulated advantages of all candidates). With
    ``ablate`` or no oracle the advantage term is identically zero.
    """
    n = len(batch)
    k = config.backup_count
    s_next = np.repeat(batch.next_observations, k, axis=0)
    cand, _ = reverse_process(actor.as_behavior(target=True), s_next, rng)
    q = critics.min_q(s_next, cand, target=True).astype(np.float64)
    if ablate or oracle is None:
        adv = np.zeros_like(q)
    else:
        adv = batch_modulated_advantage(oracle, s_next, cand, np.repeat(batch.indices, k))
    scored = (q + adv).reshape(n, k)
    backup = scored.max(axis=1) if config.use_max_q_backup else scored[:, 0]
    targets = batch.rewards + config.gamma * (1.0 - batch.dones) * backup
    return targets, adv


def critic_loss(batch: Batch, critics: CriticPair, targets, return_grad: bool = False,
                params: tuple | None = None):
    """Mean over batch and both heads of (target - Q(s, a))^2."""
    q1, q2 = (critics.q1, critics.q2) if params is None else params
    x = np.concatenate([batch.observations, batch.actions], axis=1).astype(q1.dtype)
    targets = np.asarray(targets, dtype=q1.dtype)
    n = len(x)
    total = 0.0
    grads = []
    for head in (q1, q2):
        if return_grad:
            y, cache = nn.forward_with_cache(head, x)
        else:
            y = nn.forward(head, x)
        diff = y[:, 0] - targets
        total += float(np.sum(diff * diff)) / (2 * n)
        if return_grad:
            g, _ = nn.backward(head, cache, (diff / n)[:, None])
            grads.append(g)
    return (total, grads) if return_grad else total


def actor_loss(batch: Batch, actor: ActorModel, critics: CriticPair, config: TrainConfig,
               rng: np.random.Generator, return_grad: bool = False, params: nn.NetParams | None = None):
    """BC loss on dataset pairs minus alpha / mean|Q| times mean min-twin Q of sampled actions.

    The sampled actions come from a full reverse-process rollout and the
    guidance gradient flows back through every denoising step. The |Q|
    normalizer is treated as a constant.
    """
    params = actor.noise_net if params is None else params
    model = actor.as_behavior()
    bc = bc_loss(model, batch.observations, batch.actions, rng, params=params, return_grad=return_grad)
    bc_value, bc_grad = bc if return_grad else (bc, None)
    states = np.asarray(batch.observations, dtype=params.dtype)
    acts, trace = reverse_process(model, states, rng, params=params, keep=return_grad)
    x = np.concatenate([states, acts], axis=1).astype(critics.q1.dtype)
    n = len(x)
    if return_grad:
        y1, c1 = nn.forward_with_cache(critics.q1, x)
        y2, c2 = nn.forward_with_cache(critics.q2, x)
    else:
        y1, y2 = nn.forward(critics.q1, x), nn.forward(critics.q2, x)
    q = np.minimum(y1[:, 0], y2[:, 0])
    if not np.all(np.isfinite(q)):
        raise nn.NonFiniteError("critic value during actor guidance", q[~np.isfinite(q)][:5])
    scale = config.alpha / max(float(np.mean(np.abs(q))), 1e-12)
    loss = bc_value - scale * float(np.mean(q))
    if not return_grad:
        return loss
    pick1 = y1[:, 0] <= y2[:, 0]
    dq = (-scale / n) * np.ones(n, dtype=params.dtype)
    _, dx1 = nn.backward(critics.q1, c1, np.where(pick1, dq, 0.0)[:, None])
    _, dx2 = nn.backward(critics.q2, c2, np.where(pick1, 0.0, dq)[:, None])
    obs_dim = states.shape[1]
    d_action = dx1[:, obs_dim:] + dx2[:, obs_dim:]
    grad = bc_grad + reverse_backward(model, trace, d_action, params=params)
    return loss, grad


@dataclass
class TrainState:
    dataset: OfflineDataset
    oracle: AdvantageOracle | None
    actor: ActorModel
    critics: CriticPair
    config: TrainConfig
    ablate: bool = False
    step: int = 0
    actor_opt: nn.OptimizerState = None
    critic_opts: tuple = None

    def __post_init__(self):
        if self.actor_opt is None:
            self.actor_opt = nn.OptimizerState.for_params(self.actor.noise_net, learning_rate=self.config.actor_lr)
        if self.critic_opts is None:
            self.critic_opts = tuple(nn.OptimizerState.for_params(q, learning_rate=self.config.critic_lr)
                                     for q in (self.critics.q1, self.critics.q2))


def init_train_state(dataset: OfflineDataset, oracle: AdvantageOracle | None, config: TrainConfig,
                     rng: np.random.Generator, ablate: bool = False,
                     behavior: BehaviorModel | None = None) -> TrainState:
    """Fresh networks; with ``actor_init="behavior"`` the actor starts as a copy of ``behavior``."""
    actor = ActorModel.create(dataset.obs_dim, dataset.act_dim, config, rng)
    critics = CriticPair.create(critic_spec(dataset.obs_dim, dataset.act_dim, config), rng)
    if config.actor_init == "behavior":
        if behavior is None and oracle is not None:
            behavior = oracle.behavior
        if behavior is None:
            raise ValueError("actor_init='behavior' needs the pretrained behavior model")
        if behavior.noise_net.spec != actor.noise_net.spec or behavior.schedule.step_count != config.diffusion_steps:
            raise ValueError("behavior model and actor differ in architecture or diffusion steps; "
                             "match [train] actor_hidden/diffusion_steps/emb_dim to [pretrain]")
        actor.noise_net.values[:] = behavior.noise_net.values
        actor.target_noise_net.values[:] = behavior.noise_net.values
    return TrainState(dataset, oracle, actor, critics, config, ablate)


METRIC_KEYS = ("critic_loss", "actor_loss", "mean_q", "mean_adv", "pos_adv_frac")


def train_step(state: TrainState, rng: np.random.Generator) -> dict:
    cfg = state.config
    batch = sample_batch(state.dataset, cfg.batch_size, rng)
    targets, adv = critic_target(batch, state.actor, state.critics, state.oracle, cfg, rng, state.ablate)
    c_loss, grads = critic_loss(batch, state.critics, targets, return_grad=True)
    for head, g, opt in zip((state.critics.q1, state.critics.q2), grads, state.critic_opts):
        nn.adamw_step(head, nn.gradient(head, lambda p, g=g: (c_loss, g)), opt)
    a_loss, a_grad = actor_loss(batch, state.actor, state.critics, cfg, rng, return_grad=True)
    if not np.isfinite(a_loss):
        raise nn.NonFiniteError("actor loss", a_loss)
    nn.adamw_step(state.actor.noise_net, a_grad, state.actor_opt)
    nn.soft_update(state.critics.target1, state.critics.q1, cfg.target_rate)
    nn.soft_update(state.critics.target2, state.critics.q2, cfg.target_rate)
    nn.soft_update(state.actor.target_noise_net, state.actor.noise_net, cfg.target_rate)
    state.step += 1
    mean_q = float(np.mean(state.critics.min_q(batch.observations, batch.actions)))
    return {"critic_loss": c_loss, "actor_loss": a_loss, "mean_q": mean_q,
            "mean_adv": float(np.mean(adv)), "pos_adv_frac": float(np.mean(adv > 0))}


# --- action selection and evaluation ------------------------------------------

def _softmax_pick(q: np.ndarray, temperature: float, rng) -> np.ndarray:
    """One index per row of ``q`` drawn from softmax(q / temperature)."""
    z = (q - q.max(axis=1, keepdims=True)) / temperature
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(len(q))
    idx = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, q.shape[1] - 1)


def select_actions(actor: ActorModel, critics: CriticPair, states, config: TrainConfig, rng):
    """Q-guided choice among ``eval_candidates`` actor samples for each state row."""
    states = np.atleast_2d(states)
    m, c = len(states), config.eval_candidates
    rep = np.repeat(states, c, axis=0)
    cand, _ = reverse_process(actor.as_behavior(), rep, rng)
    q = critics.min_q(rep, cand).astype(np.float64).reshape(m, c)
    idx = _softmax_pick(q, config.eval_temperature, rng)
    return cand.reshape(m, c, -1)[np.arange(m), idx]


def select_action(actor: ActorModel, critics: CriticPair, state, config: TrainConfig, rng) -> np.ndarray:
    return select_actions(actor, critics, np.asarray(state)[None, :], config, rng)[0]


@dataclass
class EvalResult:
    success_rate: float
    median_length: float
    lengths: list
    successes: list
    trajectories: list = field(default_factory=list)   # per episode: {"positions", "actions"}

    def as_dict(self) -> dict:
        return {"success_rate": self.success_rate, "median_length": self.median_length,
                "lengths": self.lengths, "successes": self.successes}


def evaluate(actor: ActorModel, critics: CriticPair, env: MazeSpec, episode_count: int,
             config: TrainConfig, rng: np.random.Generator, normalize=None) -> EvalResult:
    """Roll out all episodes in lockstep; lengths count steps to the goal or the cap."""
    if episode_count == 0:
        return EvalResult(0.0, float("nan"), [], [], [])
    norm = (lambda s: s) if normalize is None else normalize
    starts = [maze_reset(env, rng) for _ in range(episode_count)]
    pos = np.array([s.position for s in starts], dtype=np.float64)
    vel = np.array([s.velocity for s in starts], dtype=np.float64)
    active = np.ones(episode_count, bool)
    lengths = np.full(episode_count, env.max_episode_steps)
    success = np.zeros(episode_count, bool)
    paths = [[p.tolist()] for p in pos]
    acts: list = [[] for _ in range(episode_count)]
    for t in range(env.max_episode_steps):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        obs = np.concatenate([pos[ids], vel[ids]], axis=1).astype(np.float32)
        a = select_actions(actor, critics, norm(obs), config, rng).astype(np.float64)
        p2, v2, goal = step_arrays(env, pos[ids], vel[ids], a)
        pos[ids], vel[ids] = p2, v2
        for j, e in enumerate(ids):
            paths[e].append(p2[j].tolist())
            acts[e].append(a[j].tolist())
        done = ids[goal]
        success[done] = True
        lengths[done] = t + 1
        active[done] = False
    trajs = [{"positions": paths[e], "actions": acts[e], "success": bool(success[e]),
              "length": int(lengths[e])} for e in range(episode_count)]
    return EvalResult(float(success.mean()), float(np.median(lengths)), lengths.tolist(),
                      success.tolist(), trajs)


def export_trajectories(result: EvalResult, path) -> None:
    with open(path, "w") as fh:
        for k, tr in enumerate(result.trajectories):
            fh.write(json.dumps({"episode": k, **tr}) + "\n")


# --- loop -------------------------------------------------------------------

CSV_FIELDS = ("step",) + METRIC_KEYS + ("eval_success", "eval_median_len")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train(state: TrainState, rng: np.random.Generator, env: MazeSpec | None = None,
          metrics_path=None, eval_rng_seed: int | None = None, progress=None) -> list[dict]:
    """Run ``total_steps`` steps; log interval means, evaluate every ``eval_interval``."""
    cfg = state.config
    rows: list[dict] = []
    acc = {k: 0.0 for k in METRIC_KEYS}
    count = 0
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
    try:
        while state.step < cfg.total_steps:
            m = train_step(state, rng)
            for k in METRIC_KEYS:
                acc[k] += m[k]
            count += 1
            step = state.step
            if step % cfg.log_interval == 0 or step == cfg.total_steps:
                row = {"step": step, **{k: acc[k] / count for k in METRIC_KEYS},
                       "eval_success": None, "eval_median_len": None}
                if env is not None and (step % cfg.eval_interval == 0 or step == cfg.total_steps):
                    seed = cfg.seed if eval_rng_seed is None else eval_rng_seed
                    res = evaluate(state.actor, state.critics, env, cfg.eval_episodes, cfg,
                                   np.random.default_rng([seed, step]), state.dataset.normalize)
                    row["eval_success"], row["eval_median_len"] = res.success_rate, res.median_length
                rows.append(row)
                if writer is not None:
                    writer.writerow([step] + [_fmt(row[k]) for k in CSV_FIELDS[1:]])
                    fh.flush()
                if progress is not None:
                    progress(row)
                acc = {k: 0.0 for k in METRIC_KEYS}
                count = 0
    finally:
        if fh is not None:
            fh.close()
    return rows


ACTOR_FILE, ACTOR_TARGET_FILE = "actor.ckpt", "actor_target.ckpt"
CRITIC_FILES = ("critic1.ckpt", "critic2.ckpt", "critic1_target.ckpt", "critic2_target.ckpt")


def save_policy(state: TrainState, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_params(state.actor.noise_net, out / ACTOR_FILE)
    nn.save_params(state.actor.target_noise_net, out / ACTOR_TARGET_FILE)
    c = state.critics
    for name, p in zip(CRITIC_FILES, (c.q1, c.q2, c.target1, c.target2)):
        nn.save_params(p, out / name)


def load_policy(out_dir, config: TrainConfig) -> tuple[ActorModel, CriticPair]:
    out = Path(out_dir)
    for name in (ACTOR_FILE, ACTOR_TARGET_FILE) + CRITIC_FILES:
        if not (out / name).exists():
            raise FileNotFoundError(f"missing trained model {out / name}; run `adac train` first")
    actor = ActorModel(nn.load_params(out / ACTOR_FILE), nn.load_params(out / ACTOR_TARGET_FILE),
                       make_vp_schedule(config.diffusion_steps), config.emb_dim)
    critics = CriticPair(*(nn.load_params(out / n) for n in CRITIC_FILES))
    return actor, critics
