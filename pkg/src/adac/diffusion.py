"""DDPM machinery for state-conditioned action generation.

The noise network sees ``noisy_action || state || sinusoid(i)`` and predicts
the injected noise. Sampling is ancestral; ``reverse_process`` can keep the
per-step caches so a loss on the final action can be pushed back through
every denoising step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn

BETA_MIN = 0.1
BETA_MAX = 10.0


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def step_count(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        ab = self.alpha_bars
        if not (np.all((self.betas > 0) & (self.betas < 1)) and np.all((ab > 0) & (ab < 1))):
            raise ValueError("schedule coefficients must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")


def make_vp_schedule(T: int, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    i = np.arange(1, T + 1, dtype=np.float64)
    betas = 1.0 - np.exp(-beta_min / T - (2 * i - 1) * (beta_max - beta_min) / (2.0 * T * T))
    alphas = 1.0 - betas
    alpha_bars = np.empty(T)
    acc = 1.0
    for k in range(T):
        acc = acc * alphas[k]
        alpha_bars[k] = acc
    sched = DiffusionSchedule(betas, alphas, alpha_bars)
    sched.validate()
    return sched


def timestep_embedding(steps, dim: int) -> np.ndarray:
    """Sinusoidal features of integer steps, shape (len(steps), dim)."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(steps), 1))], axis=1)
    return emb


@dataclass
class BehaviorModel:
    noise_net: nn.NetParams
    schedule: DiffusionSchedule
    emb_dim: int = 16

    @property
    def act_dim(self) -> int:
        return self.noise_net.spec.out_dim

    @property
    def obs_dim(self) -> int:
        return self.noise_net.spec.in_dim - self.act_dim - self.emb_dim


def noise_net_spec(obs_dim: int, act_dim: int, hidden=(64, 64, 64), emb_dim: int = 16) -> nn.NetSpec:
    return nn.NetSpec((act_dim + obs_dim + emb_dim, *hidden, act_dim))


def make_behavior_model(obs_dim: int, act_dim: int, rng, steps: int = 10, hidden=(64, 64, 64),
                        emb_dim: int = 16, dtype=np.float32) -> BehaviorModel:
    spec = noise_net_spec(obs_dim, act_dim, hidden, emb_dim)
    return BehaviorModel(nn.init_params(spec, rng, dtype), make_vp_schedule(steps), emb_dim)


def _net_input(model: BehaviorModel, noisy, states, steps, emb_cache=None):
    emb = timestep_embedding(steps, model.emb_dim) if emb_cache is None else emb_cache
    dt = model.noise_net.dtype
    return np.concatenate([noisy, states, np.broadcast_to(emb, (len(noisy), model.emb_dim))],
                          axis=1).astype(dt, copy=False)


def bc_loss(model: BehaviorModel, states, actions, rng: np.random.Generator,
            params: nn.NetParams | None = None, return_grad: bool = False):
    """Noise-prediction loss: mean over the batch of ||eps - eps_theta(a_i, s, i)||^2.

    ``params`` overrides the model's noise net (used by gradient checks and
    by the actor, which shares this loss).
    """
    params = model.noise_net if params is None else params
    dt = params.dtype
    states = np.asarray(states, dtype=dt)
    actions = np.asarray(actions, dtype=dt)
    n, d = actions.shape
    T = model.schedule.step_count
    steps = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, d)).astype(dt)
    ab = model.schedule.alpha_bars[steps - 1][:, None].astype(dt)
    noisy = np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * eps
    x = _net_input(model, noisy, states, steps)
    if not return_grad:
        pred = nn.forward(params, x)
        return float(np.sum((eps - pred) ** 2) / n)
    pred, cache = nn.forward_with_cache(params, x)
    diff = eps - pred
    loss = float(np.sum(diff ** 2) / n)
    grad, _ = nn.backward(params, cache, -2.0 * diff / n)
    return loss, grad


def _coefficients(schedule: DiffusionSchedule, i: int):
    beta = schedule.betas[i - 1]
    alpha = schedule.alphas[i - 1]
    ab = schedule.alpha_bars[i - 1]
    return 1.0 / math.sqrt(alpha), beta / math.sqrt(1.0 - ab), math.sqrt(beta)


@dataclass
class ReverseTrace:
    caches: list
    pre_clip: np.ndarray


def reverse_process(model: BehaviorModel, states, rng: np.random.Generator | None,
                    params: nn.NetParams | None = None, keep: bool = False, noise=None):
    """Ancestral sampling from a_T ~ N(0, I); returns (actions, trace or None).

    Posterior mean (1/sqrt(alpha_i)) (a_i - beta_i / sqrt(1 - abar_i) eps_theta),
    noise of variance beta_i for i > 1, final action clamped to [-1, 1].
    ``noise`` of shape (T, n, act_dim) replaces the generator: slice 0 is a_T,
    slice k the perturbation added after step T - k + 1.
    """
    params = model.noise_net if params is None else params
    dt = params.dtype
    states = np.asarray(states, dtype=dt)
    if states.ndim == 1:
        states = states[None, :]
    n = len(states)
    T = model.schedule.step_count
    if noise is None:
        def draw(k):
            return rng.standard_normal((n, model.act_dim))
    else:
        noise = np.asarray(noise)
        if noise.shape != (T, n, model.act_dim):
            raise ValueError(f"noise shape {noise.shape} != {(T, n, model.act_dim)}")

        def draw(k):
            return noise[k]
    a = draw(0).astype(dt)
    caches = [] if keep else None
    for i in range(T, 0, -1):
        x = _net_input(model, a, states, [i])
        if keep:
            eps_hat, cache = nn.forward_with_cache(params, x)
            caches.append(cache)
        else:
            eps_hat = nn.forward(params, x)
        inv_sqrt_alpha, k, sigma = _coefficients(model.schedule, i)
        a = (inv_sqrt_alpha * (a - k * eps_hat)).astype(dt, copy=False)
        if i > 1:
            a = a + (sigma * draw(T - i + 1)).astype(dt)
    out = np.clip(a, -1.0, 1.0)
    return out, (ReverseTrace(caches, a) if keep else None)


def reverse_backward(model: BehaviorModel, trace: ReverseTrace, d_action,
                     params: nn.NetParams | None = None) -> np.ndarray:
    """Gradient w.r.t. noise-net parameters of a loss whose gradient at the
    sampled (clamped) actions is ``d_action``."""
    params = model.noise_net if params is None else params
    act_dim = model.act_dim
    g = np.asarray(d_action, dtype=params.dtype) * (np.abs(trace.pre_clip) <= 1.0)
    total = np.zeros_like(params.values)
    T = model.schedule.step_count
    # caches are stored from step T down to 1; walk them back from step 1
    for pos, i in enumerate(range(1, T + 1)):
        cache = trace.caches[T - 1 - pos]
        inv_sqrt_alpha, k, _ = _coefficients(model.schedule, i)
        grad, dx = nn.backward(params, cache, -inv_sqrt_alpha * k * g)
        total += grad
        g = inv_sqrt_alpha * g + dx[:, :act_dim]
    return total


def bc_sample(model: BehaviorModel, state, rng: np.random.Generator) -> np.ndarray:
    """One action per state row (a single vector in, a single vector out)."""
    single = np.ndim(state) == 1
    out, _ = reverse_process(model, state, rng)
    return out[0] if single else out
