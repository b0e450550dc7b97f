"""State-value advantage with quantile thresholds over behavior actions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffusion import BehaviorModel, reverse_process
from .pretrain import TransitionModel, ValueModel


def quantile(values, kappa: float) -> float:
    """Linear-interpolation quantile at continuous rank kappa * (n - 1)."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("quantile of an empty list")
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    r = kappa * (x.size - 1)
    lo = int(np.floor(r))
    hi = min(lo + 1, x.size - 1)
    return float(x[lo] + (r - lo) * (x[hi] - x[lo]))


def softclip(x, lambda_pos: float, lambda_neg: float):
    """lambda * tanh(x / lambda), with separate scales for each sign."""
    if lambda_pos <= 0 or lambda_neg <= 0:
        raise ValueError("softclip scales must be positive")
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, lambda_pos * np.tanh(x / lambda_pos), lambda_neg * np.tanh(x / lambda_neg))
    return float(out) if out.ndim == 0 else out


def quantile_rows(values, kappa: float) -> np.ndarray:
    """Row-wise version of :func:`quantile` for a (rows, N) array."""
    x = np.sort(np.asarray(values, dtype=float), axis=1)
    if x.shape[1] == 0:
        raise ValueError("quantile of an empty list")
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    r = kappa * (x.shape[1] - 1)
    lo = int(np.floor(r))
    hi = min(lo + 1, x.shape[1] - 1)
    return x[:, lo] + (r - lo) * (x[:, hi] - x[:, lo])


@dataclass(frozen=True)
class AdvantageConfig:
    kappa: float = 0.65
    sample_count: int = 25
    lambda_pos: float = 6.0
    lambda_neg: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.lambda_pos <= 0 or self.lambda_neg <= 0:
            raise ValueError("lambda_pos and lambda_neg must be positive")
        if self.lambda_pos < self.lambda_neg:
            warnings.warn("lambda_pos < lambda_neg: positive advantages saturate first", stacklevel=2)


def state_stream(seed: int, index: int) -> np.random.Generator:
    """Deterministic generator for the state at dataset position ``index``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(index),)))


@dataclass
class AdvantageOracle:
    value: ValueModel
    dynamics: TransitionModel
    behavior: BehaviorModel
    config: AdvantageConfig = field(default_factory=AdvantageConfig)
    threshold_cache: np.ndarray | None = None
    cache_seed: int | None = None

    def checksums(self) -> tuple[str, str, str]:
        return (self.value.net.checksum(), self.dynamics.net.checksum(),
                self.behavior.noise_net.checksum())

    def next_value(self, states, actions) -> np.ndarray:
        """V(P(s, a)) for paired rows."""
        return self.value(self.dynamics(np.atleast_2d(states), np.atleast_2d(actions)))


def _behavior_noise(oracle: AdvantageOracle, rng: np.random.Generator) -> np.ndarray:
    T = oracle.behavior.schedule.step_count
    return rng.standard_normal((T, oracle.config.sample_count, oracle.behavior.act_dim))


def _sample_values(oracle: AdvantageOracle, states, noises) -> np.ndarray:
    """(rows, N) next-state values of N behavior actions per state row."""
    states = np.atleast_2d(states)
    N = oracle.config.sample_count
    rep = np.repeat(states, N, axis=0)
    noise = np.concatenate(noises, axis=1)          # (T, rows*N, act)
    actions, _ = reverse_process(oracle.behavior, rep, None, noise=noise)
    return oracle.next_value(rep, actions).reshape(len(states), N)


def sample_next_values(oracle: AdvantageOracle, states, rngs) -> np.ndarray:
    """Next-state values of N behavior samples per state, one generator per state."""
    return _sample_values(oracle, states, [_behavior_noise(oracle, r) for r in rngs])


def threshold(oracle: AdvantageOracle, state, rng: np.random.Generator) -> float:
    vals = sample_next_values(oracle, np.atleast_2d(state), [rng])
    return float(quantile_rows(vals, oracle.config.kappa)[0])


def advantage(oracle: AdvantageOracle, state, action, rng: np.random.Generator | None = None,
              index: int | None = None) -> float:
    """Raw advantage V(P(s, a)) - threshold(s); reads the cache when ``index`` is given."""
    v = float(oracle.next_value(state, action)[0])
    if index is not None and oracle.threshold_cache is not None:
        return v - float(oracle.threshold_cache[index])
    if rng is None:
        raise ValueError("a generator is needed when the threshold is not cached")
    return v - threshold(oracle, state, rng)


def modulated_advantage(oracle: AdvantageOracle, state, action, rng=None, index=None) -> float:
    c = oracle.config
    return softclip(advantage(oracle, state, action, rng, index), c.lambda_pos, c.lambda_neg)


def batch_modulated_advantage(oracle: AdvantageOracle, states, actions, indices) -> np.ndarray:
    """Soft-clipped advantages at cached dataset next-states (vectorized)."""
    if oracle.threshold_cache is None:
        raise ValueError("thresholds not precomputed")
    raw = oracle.next_value(states, actions) - oracle.threshold_cache[np.asarray(indices)]
    c = oracle.config
    return softclip(raw, c.lambda_pos, c.lambda_neg)


def precompute_thresholds(oracle: AdvantageOracle, next_states, seed: int) -> AdvantageOracle:
    """Threshold for every dataset next-state, each from its own substream.

    States are processed one at a time: BLAS results depend on the batch
    shape in the last bits, and the cache must equal a fresh single-state
    computation exactly. Returns a new oracle sharing the frozen models.
    """
    next_states = np.asarray(next_states)
    out = np.empty(len(next_states))
    for j, s in enumerate(next_states):
        out[j] = threshold(oracle, s, state_stream(seed, j))
    return AdvantageOracle(oracle.value, oracle.dynamics, oracle.behavior, oracle.config, out, seed)


def cached_threshold_fresh(oracle: AdvantageOracle, next_state, index: int) -> float:
    """Recompute the threshold the cache holds for ``index``."""
    return threshold(oracle, next_state, state_stream(oracle.cache_seed, index))


@dataclass
class AdvantageStats:
    mean_positive: float
    mean_negative: float
    positive_fraction: float
    count: int

    def as_dict(self) -> dict:
        return {"mean_positive": self.mean_positive, "mean_negative": self.mean_negative,
                "positive_fraction": self.positive_fraction, "count": self.count}


def behavior_advantages(oracle: AdvantageOracle, states, actions, seed: int, kappas) -> dict:
    """Raw advantages of the dataset actions, one array per kappa, sharing samples."""
    states = np.atleast_2d(states)
    vals = sample_next_values(oracle, states, [state_stream(seed, j) for j in range(len(states))])
    own = oracle.next_value(states, actions)
    return {k: own - quantile_rows(vals, k) for k in kappas}


def advantage_stats(raw) -> AdvantageStats:
    raw = np.asarray(raw, dtype=float)
    pos, neg = raw[raw > 0], raw[raw <= 0]
    return AdvantageStats(float(pos.mean()) if pos.size else 0.0,
                          float(neg.mean()) if neg.size else 0.0,
                          float(np.mean(raw > 0)) if raw.size else 0.0, int(raw.size))
