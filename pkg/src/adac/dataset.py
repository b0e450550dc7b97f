"""Offline transition store: binary format, batch sampling, length statistics."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ADAC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQQI")   # magic, version, obs_dim, act_dim, count, n_boundaries, has_norm
HEADER_SIZE = _HEADER.size


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    indices: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class OfflineDataset:
    """Columns of float32 transitions plus trajectory split points.

    ``boundaries`` holds the index of the first transition of every
    trajectory except the first, so a single trajectory has no boundaries.
    ``normalization`` is an optional ``(mean, scale)`` pair for states.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray
    boundaries: np.ndarray
    normalization: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32).reshape(-1)
        self.next_observations = np.asarray(self.next_observations, dtype=np.float32)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        self.boundaries = np.asarray(self.boundaries, dtype=np.uint64).reshape(-1)
        n = len(self.rewards)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D")
        if not (len(self.observations) == len(self.actions) == len(self.next_observations)
                == len(self.dones) == n):
            raise ValueError("column lengths differ")
        if self.next_observations.shape != self.observations.shape:
            raise ValueError("state and next_state dimensions differ")
        b = self.boundaries.astype(np.int64)
        if b.size and (np.any(np.diff(b) <= 0) or b[0] <= 0 or b[-1] >= n):
            raise ValueError("boundaries must be strictly increasing inside (0, n)")
        if self.normalization is not None:
            mean, scale = (np.asarray(v, dtype=np.float64) for v in self.normalization)
            if mean.shape != (self.obs_dim,) or scale.shape != (self.obs_dim,) or np.any(scale <= 0):
                raise ValueError("normalization needs obs_dim means and positive scales")
            self.normalization = (mean, scale)

    @classmethod
    def empty(cls, obs_dim: int, act_dim: int) -> "OfflineDataset":
        return cls(np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros(0),
                   np.zeros((0, obs_dim)), np.zeros(0, bool), np.zeros(0))

    @classmethod
    def from_trajectories(cls, trajectories, obs_dim: int | None = None,
                          act_dim: int | None = None) -> "OfflineDataset":
        trajectories = list(trajectories)
        if not trajectories:
            return cls.empty(obs_dim or 0, act_dim or 0)
        obs = np.concatenate([t.observations[:-1] for t in trajectories])
        nxt = np.concatenate([t.observations[1:] for t in trajectories])
        act = np.concatenate([t.actions for t in trajectories])
        rew = np.concatenate([t.rewards for t in trajectories])
        done = np.concatenate([t.dones for t in trajectories])
        starts = np.cumsum([len(t) for t in trajectories])[:-1]
        return cls(obs, act, rew, nxt, done, starts)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i) -> Transition:
        return Transition(self.observations[i], self.actions[i], float(self.rewards[i]),
                          self.next_observations[i], bool(self.dones[i]))

    def trajectory_lengths(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        edges = np.concatenate([[0], self.boundaries.astype(np.int64), [len(self)]])
        return np.diff(edges)

    def trajectory_slices(self) -> list[slice]:
        edges = np.concatenate([[0], np.cumsum(self.trajectory_lengths())])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def normalize(self, states) -> np.ndarray:
        states = np.asarray(states)
        if self.normalization is None:
            return states
        mean, scale = self.normalization
        return ((states - mean) / scale).astype(states.dtype)

    def subset(self, indices) -> "OfflineDataset":
        """Transitions at ``indices`` as one flat trajectory-free set."""
        idx = np.asarray(indices)
        return OfflineDataset(self.observations[idx], self.actions[idx], self.rewards[idx],
                              self.next_observations[idx], self.dones[idx], np.zeros(0),
                              self.normalization)

    def record_size(self) -> int:
        return 4 * (2 * self.obs_dim + self.act_dim + 2)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        same = all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self._columns(), other._columns())
        )
        if (self.normalization is None) != (other.normalization is None):
            return False
        if self.normalization is not None:
            same &= all(a.tobytes() == b.tobytes() for a, b in zip(self.normalization, other.normalization))
        return bool(same)

    def _columns(self):
        return (self.observations, self.actions, self.rewards, self.next_observations,
                self.dones, self.boundaries)


# --- binary format -----------------------------------------------------------

def encode(dataset: OfflineDataset) -> bytes:
    d = dataset
    header = _HEADER.pack(MAGIC, VERSION, d.obs_dim, d.act_dim, len(d), len(d.boundaries),
                          int(d.normalization is not None))
    records = np.concatenate([
        d.observations, d.actions, d.rewards[:, None], d.next_observations,
        d.dones[:, None].astype(np.float32),
    ], axis=1).astype("<f4")
    parts = [header, records.tobytes(), d.boundaries.astype("<u8").tobytes()]
    if d.normalization is not None:
        parts += [v.astype("<f8").tobytes() for v in d.normalization]
    return b"".join(parts)


def decode(buf: bytes) -> OfflineDataset:
    if len(buf) < HEADER_SIZE:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, obs_dim, act_dim, count, n_bound, has_norm = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if has_norm not in (0, 1):
        raise DatasetFormatError("invalid normalization flag", 32)
    width = 2 * obs_dim + act_dim + 2
    off = HEADER_SIZE
    need = count * width * 4
    if len(buf) < off + need:
        raise DatasetFormatError(f"truncated records: expected {need} bytes", len(buf))
    rec = np.frombuffer(buf, dtype="<f4", count=count * width, offset=off).reshape(count, width)
    off += need
    if len(buf) < off + 8 * n_bound:
        raise DatasetFormatError("truncated boundary table", len(buf))
    bounds = np.frombuffer(buf, dtype="<u8", count=n_bound, offset=off).copy()
    off += 8 * n_bound
    norm = None
    if has_norm:
        if len(buf) < off + 16 * obs_dim:
            raise DatasetFormatError("truncated normalization block", len(buf))
        mean = np.frombuffer(buf, dtype="<f8", count=obs_dim, offset=off).copy()
        scale = np.frombuffer(buf, dtype="<f8", count=obs_dim, offset=off + 8 * obs_dim).copy()
        norm = (mean, scale)
        off += 16 * obs_dim
    if off != len(buf):
        raise DatasetFormatError("trailing bytes", off)
    o, a = obs_dim, act_dim
    dones = rec[:, 2 * o + a + 1]
    if np.any((dones != 0) & (dones != 1)):
        raise DatasetFormatError("done flags must be 0 or 1", HEADER_SIZE)
    try:
        return OfflineDataset(rec[:, :o].copy(), rec[:, o:o + a].copy(), rec[:, o + a].copy(),
                              rec[:, o + a + 1:2 * o + a + 1].copy(), dones == 1, bounds, norm)
    except ValueError as exc:
        raise DatasetFormatError(str(exc), HEADER_SIZE) from exc


def save(dataset: OfflineDataset, path) -> None:
    Path(path).write_bytes(encode(dataset))


def load(path) -> OfflineDataset:
    return decode(Path(path).read_bytes())


def export_jsonl(dataset: OfflineDataset, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(dataset)):
            t = dataset[i]
            fh.write(json.dumps({
                "state": t.state.tolist(), "action": t.action.tolist(), "reward": t.reward,
                "next_state": t.next_state.tolist(), "done": t.done,
            }) + "\n")


# --- sampling and statistics -------------------------------------------------

def sample_batch(dataset: OfflineDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw with replacement; states are normalized if the dataset says so."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return batch_at(dataset, idx)


def batch_at(dataset: OfflineDataset, idx) -> Batch:
    idx = np.asarray(idx)
    return Batch(idx, dataset.normalize(dataset.observations[idx]), dataset.actions[idx],
                 dataset.rewards[idx], dataset.normalize(dataset.next_observations[idx]),
                 dataset.dones[idx])


@dataclass
class LengthCategories:
    optimal: float
    near_optimal: float
    competitive: float
    sub_optimal: float
    thresholds: tuple[int, int, int]

    def __post_init__(self):
        t1, t2, t3 = self.thresholds
        if not 0 < t1 < t2 < t3:
            raise ValueError("thresholds must satisfy 0 < t1 < t2 < t3")

    def as_dict(self) -> dict:
        return {"optimal": self.optimal, "near_optimal": self.near_optimal,
                "competitive": self.competitive, "sub_optimal": self.sub_optimal,
                "thresholds": list(self.thresholds)}


def length_categories(lengths, thresholds) -> LengthCategories:
    t1, t2, t3 = thresholds
    L = np.asarray(lengths)
    if L.size == 0:
        return LengthCategories(0.0, 0.0, 0.0, 0.0, tuple(thresholds))
    return LengthCategories(
        float(np.mean(L < t1)), float(np.mean((L >= t1) & (L < t2))),
        float(np.mean((L >= t2) & (L < t3))), float(np.mean(L >= t3)), tuple(thresholds),
    )


def trajectory_stats(dataset: OfflineDataset, thresholds) -> LengthCategories:
    return length_categories(dataset.trajectory_lengths(), thresholds)


def scaled_thresholds(shortest_steps: int) -> tuple[int, int, int]:
    """Length thresholds at 1.25x, 1.6x and 2.1x the shortest path."""
    return (math.ceil(1.25 * shortest_steps), math.ceil(1.6 * shortest_steps),
            math.ceil(2.1 * shortest_steps))


def fit_normalization(dataset: OfflineDataset, min_scale: float = 1e-6) -> OfflineDataset:
    if len(dataset) == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    obs = dataset.observations.astype(np.float64)
    mean = obs.mean(axis=0)
    scale = np.maximum(obs.std(axis=0), min_scale)
    return OfflineDataset(dataset.observations, dataset.actions, dataset.rewards,
                          dataset.next_observations, dataset.dones, dataset.boundaries,
                          (mean, scale))
