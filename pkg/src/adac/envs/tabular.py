"""Finite MDPs with an explicit behavior-policy support."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class TabularMdp:
    """Arrays: ``transition[s, a, s']``, ``reward[s, a]``, ``behavior[s, a]``.

    ``behavior`` holds the behavior policy's action probabilities; its
    support (non-zero entries) is the set of in-dataset actions at ``s``.
    """

    transition: np.ndarray
    reward: np.ndarray
    behavior: np.ndarray
    gamma: float
    r_max: float = 1.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.behavior = np.asarray(self.behavior, dtype=float)
        self.validate()

    @property
    def state_count(self) -> int:
        return self.reward.shape[0]

    @property
    def action_count(self) -> int:
        return self.reward.shape[1]

    @property
    def support(self) -> np.ndarray:
        return self.behavior > 0

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.transition.max(axis=2), 1.0)))

    def validate(self) -> None:
        S, A = self.reward.shape
        if S < 1 or A < 1:
            raise ValueError("empty MDP")
        if self.transition.shape != (S, A, S) or self.behavior.shape != (S, A):
            raise ValueError("inconsistent table shapes")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=2) - 1) > 1e-12):
            raise ValueError("transition rows must be distributions")
        if np.any(np.abs(self.reward) > self.r_max):
            raise ValueError("reward exceeds r_max")
        if np.any(self.behavior < 0) or np.any(np.abs(self.behavior.sum(axis=1) - 1) > 1e-12):
            raise ValueError("behavior rows must be distributions")

    def to_json(self) -> str:
        return json.dumps({
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "behavior": self.behavior.tolist(),
            "gamma": self.gamma,
            "r_max": self.r_max,
        })

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls(**json.loads(text))


def make_random_mdp(state_count: int, action_count: int, behavior_coverage: float = 1.0,
                    deterministic: bool = False, rng: np.random.Generator | None = None,
                    gamma: float = 0.9, r_max: float = 1.0,
                    max_successors: int = 3) -> TabularMdp:
    """Random MDP; the behavior policy is uniform over a random action subset."""
    if state_count < 2 or action_count < 2:
        raise ValueError("need at least 2 states and 2 actions")
    if not 0.0 < behavior_coverage <= 1.0:
        raise ValueError("behavior_coverage must lie in (0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    S, A = state_count, action_count
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            if deterministic:
                P[s, a, rng.integers(S)] = 1.0
            else:
                k = int(rng.integers(1, min(max_successors, S) + 1))
                nxt = rng.choice(S, size=k, replace=False)
                P[s, a, nxt] = rng.dirichlet(np.ones(k))
    reward = rng.uniform(-r_max, r_max, size=(S, A))
    k = max(1, math.ceil(behavior_coverage * A - 1e-12))
    behavior = np.zeros((S, A))
    for s in range(S):
        behavior[s, rng.choice(A, size=k, replace=False)] = 1.0 / k
    return TabularMdp(P, reward, behavior, gamma, r_max)
