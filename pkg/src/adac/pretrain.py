"""Frozen auxiliary learners: behavior diffusion model, expectile value, dynamics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dataset import OfflineDataset, batch_at
from .diffusion import BehaviorModel, bc_loss, make_behavior_model


@dataclass
class ValueModel:
    net: nn.NetParams
    tau: float = 0.9

    def __post_init__(self):
        if self.net.spec.out_dim != 1:
            raise ValueError("value net must have a scalar output")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")

    def __call__(self, states) -> np.ndarray:
        return nn.forward(self.net, np.asarray(states, dtype=self.net.dtype))[..., 0]


@dataclass
class TransitionModel:
    net: nn.NetParams

    def __call__(self, states, actions) -> np.ndarray:
        dt = self.net.dtype
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1).astype(dt)
        y = nn.forward(self.net, x)
        return y[0] if np.ndim(states) == 1 else y


def expectile_weights(u, tau: float):
    return np.where(u < 0, 1.0 - tau, tau)


def expectile_value_loss(model: ValueModel, states, rewards, next_states, dones, gamma: float,
                         params: nn.NetParams | None = None, return_grad: bool = False,
                         target: nn.NetParams | None = None):
    """Mean of |tau - 1(u<0)| u^2 with u = r + gamma (1-done) V(s') - V(s).

    V(s') is evaluated but never differentiated; ``target`` (a lagged copy)
    scores it when given, otherwise the trained parameters do.
    """
    params = model.net if params is None else params
    target = params if target is None else target
    dt = params.dtype
    states = np.asarray(states, dtype=dt)
    n = len(states)
    v_next = nn.forward(target, np.asarray(next_states, dtype=dt))[:, 0].astype(dt, copy=False)
    target = np.asarray(rewards, dtype=dt) + gamma * (1.0 - np.asarray(dones, dtype=dt)) * v_next
    if return_grad:
        v, cache = nn.forward_with_cache(params, states)
    else:
        v = nn.forward(params, states)
    u = target - v[:, 0]
    w = expectile_weights(u, model.tau)
    loss = float(np.sum(w * u * u) / n)
    if not return_grad:
        return loss
    grad, _ = nn.backward(params, cache, (-2.0 * w * u / n)[:, None])
    return loss, grad


def transition_loss(model: TransitionModel, states, actions, next_states,
                    params: nn.NetParams | None = None, return_grad: bool = False):
    """Mean over the batch of ||P(s, a) - s'||^2."""
    params = model.net if params is None else params
    dt = params.dtype
    x = np.concatenate([states, actions], axis=1).astype(dt)
    n = len(x)
    if return_grad:
        pred, cache = nn.forward_with_cache(params, x)
    else:
        pred = nn.forward(params, x)
    diff = pred - np.asarray(next_states, dtype=dt)
    loss = float(np.sum(diff * diff) / n)
    if not return_grad:
        return loss
    grad, _ = nn.backward(params, cache, 2.0 * diff / n)
    return loss, grad


@dataclass
class PretrainConfig:
    behavior_steps: int = 30_000
    value_steps: int = 30_000
    transition_steps: int = 30_000
    batch_size: int = 256
    learning_rate: float = 3e-4
    holdout_fraction: float = 0.05
    log_interval: int = 1000
    holdout_size: int = 2048       # holdout rows scored per log line
    diffusion_steps: int = 10
    emb_dim: int = 16
    behavior_hidden: tuple = (64, 64, 64)
    value_hidden: tuple = (64, 64)
    transition_hidden: tuple = (64, 64)
    tau: float = 0.9
    gamma: float = 0.99
    value_target_rate: float = 0.005   # soft-update rate of the lagged V(s') copy; 1 disables the lag

    def __post_init__(self):
        if not 0.0 < self.value_target_rate <= 1.0:
            raise ValueError("value_target_rate must lie in (0, 1]")


@dataclass
class PretrainResult:
    behavior: BehaviorModel
    value: ValueModel
    transition: TransitionModel
    logs: dict = field(default_factory=dict)       # model name -> rows (step, train, holdout)

    def __iter__(self):
        return iter((self.behavior, self.value, self.transition))

    def final_holdout(self) -> dict:
        return {k: rows[-1][2] for k, rows in self.logs.items() if rows}


def split_indices(n: int, holdout_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    k = int(round(holdout_fraction * n)) if n > 1 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def _fit(name, params, loss_fn, steps, train_idx, hold_idx, cfg: PretrainConfig, rng, logs,
         after_step=None):
    """Generic AdamW loop; ``loss_fn(idx, rng, params, grad)`` scores rows ``idx``."""
    opt = nn.OptimizerState.for_params(params, learning_rate=cfg.learning_rate)
    hold = hold_idx[:cfg.holdout_size] if len(hold_idx) else train_idx[:cfg.holdout_size]
    rows = logs.setdefault(name, [])
    eval_seed = int(rng.integers(2**63))

    def holdout():
        return loss_fn(hold, np.random.default_rng(eval_seed), params, False)

    last = float("nan")
    rows.append((0, float("nan"), holdout()))
    for step in range(1, steps + 1):
        idx = train_idx[rng.integers(0, len(train_idx), size=cfg.batch_size)]
        last, grad = loss_fn(idx, rng, params, True)
        if not np.isfinite(last):
            raise nn.NonFiniteError(f"{name} loss at step {step}", last)
        nn.adamw_step(params, grad, opt)
        if after_step is not None:
            after_step()
        if step % cfg.log_interval == 0 or step == steps:
            rows.append((step, last, holdout()))
    return params


def pretrain_all(dataset: OfflineDataset, config: PretrainConfig, rng: np.random.Generator,
                 log_dir=None) -> PretrainResult:
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    cfg = config
    split_rng, b_rng, v_rng, p_rng = rng.spawn(4)
    train_idx, hold_idx = split_indices(len(dataset), cfg.holdout_fraction, split_rng)
    obs_dim, act_dim = dataset.obs_dim, dataset.act_dim
    logs: dict = {}

    behavior = make_behavior_model(obs_dim, act_dim, b_rng, cfg.diffusion_steps,
                                   cfg.behavior_hidden, cfg.emb_dim)
    value = ValueModel(nn.init_params(nn.NetSpec((obs_dim, *cfg.value_hidden, 1)), v_rng), cfg.tau)
    transition = TransitionModel(
        nn.init_params(nn.NetSpec((obs_dim + act_dim, *cfg.transition_hidden, obs_dim)), p_rng))

    def bc(idx, r, p, grad):
        b = batch_at(dataset, idx)
        return bc_loss(behavior, b.observations, b.actions, r, params=p, return_grad=grad)

    value_target = value.net.copy()

    def vl(idx, r, p, grad):
        b = batch_at(dataset, idx)
        return expectile_value_loss(value, b.observations, b.rewards, b.next_observations,
                                    b.dones, cfg.gamma, params=p, return_grad=grad, target=value_target)

    def lag_value():
        nn.soft_update(value_target, value.net, cfg.value_target_rate)

    def tl(idx, r, p, grad):
        b = batch_at(dataset, idx)
        return transition_loss(transition, b.observations, b.actions, b.next_observations,
                               params=p, return_grad=grad)

    _fit("behavior", behavior.noise_net, bc, cfg.behavior_steps, train_idx, hold_idx, cfg, b_rng, logs)
    _fit("value", value.net, vl, cfg.value_steps, train_idx, hold_idx, cfg, v_rng, logs, lag_value)
    _fit("transition", transition.net, tl, cfg.transition_steps, train_idx, hold_idx, cfg, p_rng, logs)

    result = PretrainResult(behavior, value, transition, logs)
    if log_dir is not None:
        write_logs(result, log_dir)
    return result


def write_logs(result: PretrainResult, log_dir) -> None:
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in result.logs.items():
        with open(log_dir / f"pretrain_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "holdout_loss"])
            for step, tr, ho in rows:
                w.writerow([step, "" if np.isnan(tr) else repr(float(tr)), repr(float(ho))])


def transition_rmse(model: TransitionModel, dataset: OfflineDataset, idx) -> np.ndarray:
    b = batch_at(dataset, idx)
    pred = model(b.observations, b.actions)
    return np.sqrt(np.mean((pred - b.next_observations) ** 2, axis=0))


MODEL_FILES = {"behavior": "behavior.ckpt", "value": "value.ckpt", "transition": "transition.ckpt"}


def save_models(result: PretrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_params(result.behavior.noise_net, out / MODEL_FILES["behavior"])
    nn.save_params(result.value.net, out / MODEL_FILES["value"])
    nn.save_params(result.transition.net, out / MODEL_FILES["transition"])


def load_models(out_dir, config: PretrainConfig) -> PretrainResult:
    from .diffusion import make_vp_schedule

    out = Path(out_dir)
    for f in MODEL_FILES.values():
        if not (out / f).exists():
            raise FileNotFoundError(f"missing pretrained model {out / f}; run `adac pretrain` first")
    behavior = BehaviorModel(nn.load_params(out / MODEL_FILES["behavior"]),
                             make_vp_schedule(config.diffusion_steps), config.emb_dim)
    value = ValueModel(nn.load_params(out / MODEL_FILES["value"]), config.tau)
    transition = TransitionModel(nn.load_params(out / MODEL_FILES["transition"]))
    return PretrainResult(behavior, value, transition)
