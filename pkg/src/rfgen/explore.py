"""Exploration machinery: top-k experience replay, diversity-filter
memories, and a random-network-distillation novelty bonus.

All state here is mutated only between training batches by the single
run thread; reads during scoring are safe to parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .smiles import Fingerprint, tanimoto

__all__ = ["BufferEntry", "ReplayBuffer", "DiversityMemory", "RndState"]


@dataclass
class BufferEntry:
    key: str
    tokens: List[int]
    reward: float
    prior_ll: Optional[float] = None
    order: int = 0  # insertion counter, breaks eviction ties


class ReplayBuffer:
    """Keeps the top-`capacity` episodes by reward, deduplicated by key.

    Re-inserting a known key is a no-op. On overflow the entry with the
    lowest reward is evicted (oldest first on ties).
    """

    def __init__(self, capacity: int = 100, sampler: str = "prioritized"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if sampler not in ("uniform", "prioritized"):
            raise ValueError(f"unknown sampler {sampler!r}")
        self.capacity = capacity
        self.sampler = sampler
        self._entries: Dict[str, BufferEntry] = {}
        self._counter = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> List[BufferEntry]:
        return list(self._entries.values())

    def insert(self, key: str, tokens: Sequence[int], reward: float,
               prior_ll: Optional[float] = None) -> None:
        if key in self._entries:
            return
        self._entries[key] = BufferEntry(
            key=key, tokens=list(tokens), reward=float(reward),
            prior_ll=prior_ll, order=self._counter,
        )
        self._counter += 1
        if len(self._entries) > self.capacity:
            worst = min(self._entries.values(), key=lambda e: (e.reward, e.order))
            del self._entries[worst.key]

    def sample(self, n: int, rng: np.random.Generator) -> List[BufferEntry]:
        """n draws with replacement; prioritized: p_i = R_i / sum R_j
        (uniform fallback when all rewards are zero)."""
        if n < 0:
            raise ValueError("sample size must be >= 0")
        if not self._entries:
            raise ValueError("sample from empty buffer")
        entries = self.entries
        if self.sampler == "prioritized":
            r = np.array([e.reward for e in entries], dtype=np.float64)
            total = r.sum()
            probs = r / total if total > 0 else None
        else:
            probs = None
        idx = rng.choice(len(entries), size=n, replace=True, p=probs)
        return [entries[int(i)] for i in idx]

    def dump(self, path) -> None:
        """Line-delimited records: key, reward, token ids (tab-separated)."""
        with open(path, "w", encoding="utf-8") as fh:
            for e in self._entries.values():
                ids = " ".join(str(t) for t in e.tokens)
                fh.write(f"{e.key}\t{e.reward!r}\t{ids}\n")

    @classmethod
    def restore(cls, path, capacity: int = 100, sampler: str = "prioritized") -> "ReplayBuffer":
        buf = cls(capacity=capacity, sampler=sampler)
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
                key, reward, ids = parts
                buf.insert(key, [int(t) for t in ids.split()], float(reward))
        return buf


class DiversityMemory:
    """Memory-based penalty on repeated (or similar) molecules.

    unique mode: multiplier 0 for any key seen before, else 1.
    similar mode: assign the fingerprint to the first bin whose centroid
    has tanimoto >= threshold (creating a new bin otherwise); multiplier
    0 once the assigned bin holds more than bin_capacity members.
    """

    def __init__(self, mode: str = "unique", threshold: float = 0.65,
                 bin_capacity: int = 25):
        if mode not in ("unique", "similar"):
            raise ValueError(f"unknown diversity filter mode {mode!r}")
        self.mode = mode
        self.threshold = threshold
        self.bin_capacity = bin_capacity
        self._seen: set = set()
        self._centroids: List[Fingerprint] = []
        self._counts: List[int] = []

    def penalty(self, key: str, fp: Optional[Fingerprint] = None) -> float:
        if self.mode == "unique":
            if key in self._seen:
                return 0.0
            self._seen.add(key)
            return 1.0
        if fp is None:
            raise ValueError("similar mode needs a fingerprint")
        for i, centroid in enumerate(self._centroids):
            if tanimoto(fp, centroid) >= self.threshold:
                self._counts[i] += 1
                return 0.0 if self._counts[i] > self.bin_capacity else 1.0
        self._centroids.append(fp)
        self._counts.append(1)
        return 1.0

    @property
    def num_bins(self) -> int:
        return len(self._centroids)


class RndState:
    """Random network distillation: a trainable predictor chases a frozen
    random target; the squared error on a fingerprint is the novelty
    signal (large when the region was rarely trained on).

    The bonus is the error normalized by a running std of observed
    errors, scaled by `coef` and clamped to [0, 1].
    """

    def __init__(self, input_bits: int = 1024, hidden: int = 64, out_dim: int = 32,
                 coef: float = 1.0, lr: float = 1e-3, seed: int = 0):
        self.coef = float(coef)
        rng = np.random.default_rng(seed)

        def draw(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        # frozen target
        self._tw1 = draw(input_bits, hidden)
        self._tb1 = rng.normal(0.0, 0.1, size=hidden)
        self._tw2 = draw(hidden, out_dim)
        self._tb2 = rng.normal(0.0, 0.1, size=out_dim)
        # trainable predictor
        self._pw1 = nc.parameter(draw(input_bits, hidden))
        self._pb1 = nc.parameter(rng.normal(0.0, 0.1, size=hidden))
        self._pw2 = nc.parameter(draw(hidden, out_dim))
        self._pb2 = nc.parameter(rng.normal(0.0, 0.1, size=out_dim))
        self._opt = nc.AdamState(self.parameters, lr=lr)
        # Welford accumulators over raw errors
        self._count = 0
        self._mean = 0.0
        self._m2 = 0.0

    @property
    def parameters(self) -> List[nc.Tensor]:
        return [self._pw1, self._pb1, self._pw2, self._pb2]

    @staticmethod
    def _as_input(fps: Sequence[Fingerprint]) -> np.ndarray:
        return np.stack([fp.bits.astype(np.float64) for fp in fps])

    def _target(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self._tw1 + self._tb1) @ self._tw2 + self._tb2

    def _predict(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(x @ self._pw1.data + self._pb1.data)
        return h @ self._pw2.data + self._pb2.data

    def raw_errors(self, fps: Sequence[Fingerprint]) -> np.ndarray:
        """||f_hat(x) - f(x)||^2 per fingerprint."""
        x = self._as_input(fps)
        diff = self._predict(x) - self._target(x)
        return (diff * diff).sum(axis=1)

    def observe(self, errors: Sequence[float]) -> None:
        for e in np.asarray(errors, dtype=np.float64):
            self._count += 1
            delta = e - self._mean
            self._mean += delta / self._count
            self._m2 += delta * (e - self._mean)

    @property
    def running_std(self) -> float:
        if self._count < 2:
            return 1.0
        return max(np.sqrt(self._m2 / (self._count - 1)), 1e-8)

    def bonus(self, fp: Fingerprint) -> float:
        """coef * error / running_std, clamped to [0, 1]."""
        if self.coef == 0.0:
            return 0.0
        err = float(self.raw_errors([fp])[0])
        return float(np.clip(self.coef * err / self.running_std, 0.0, 1.0))

    def bonuses(self, fps: Sequence[Fingerprint]) -> np.ndarray:
        if self.coef == 0.0:
            return np.zeros(len(fps))
        errs = self.raw_errors(fps)
        return np.clip(self.coef * errs / self.running_std, 0.0, 1.0)

    def train(self, fps: Sequence[Fingerprint]) -> float:
        """One Adam step of MSE toward the frozen target; returns the MSE."""
        if not fps:
            return 0.0
        x = self._as_input(fps)
        target = self._target(x)
        with nc.Tape() as tape:
            h = nc.tanh(nc.add(nc.matmul(nc.constant(x), self._pw1), self._pb1))
            pred = nc.add(nc.matmul(h, self._pw2), self._pb2)
            diff = nc.sub(pred, target)
            loss = nc.mean(nc.mul(diff, diff))
        grads = nc.backward(loss, tape)
        nc.adam_step(self.parameters, grads, self._opt)
        return loss.item()
