"""Benchmark metrics recomputable from a run log alone: validity,
uniqueness, Top-10 Avg, Top-10 AUC, sphere-exclusion diversity, and a
descriptor-range filter pass rate.

A RunLog holds one record per scored molecule, invalid ones included
(reward 0). Metrics that honor a molecule budget look only at the first
`budget` records; the log itself may overshoot by part of a batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .smiles import analyze, descriptors, fingerprint, normal_form


@lru_cache(maxsize=262144)
def _analyzed(s: str) -> Tuple[bool, Tuple[str, ...]]:
    mol = analyze(s)
    return mol.valid, tuple(mol.tokens)

__all__ = [
    "LogRecord",
    "RunLog",
    "MetricReport",
    "DescriptorRanges",
    "validity_frac",
    "uniqueness_frac",
    "top10_avg",
    "top10_auc",
    "sediv",
    "filter_pass_frac",
    "compute_report",
    "CSV_FIELDS",
]

CSV_FIELDS = ["index", "smiles", "reward", "shaped_reward", "prior_nll", "agent_nll", "batch"]


@dataclass
class LogRecord:
    index: int
    smiles: str
    reward: float
    shaped_reward: float
    prior_nll: float
    agent_nll: float
    batch: int


@dataclass
class RunLog:
    budget: int = 10000
    records: List[LogRecord] = field(default_factory=list)

    def append(self, **kwargs) -> None:
        rec = LogRecord(**kwargs)
        if self.records and rec.index <= self.records[-1].index:
            raise ValueError("record indices must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def in_budget(self) -> List[LogRecord]:
        return self.records[: self.budget]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for r in self.records:
                writer.writerow(
                    [r.index, r.smiles, repr(r.reward), repr(r.shaped_reward),
                     repr(r.prior_nll), repr(r.agent_nll), r.batch]
                )

    @classmethod
    def read_csv(cls, path, budget: Optional[int] = None) -> "RunLog":
        log = cls(budget=budget if budget is not None else 0)
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty file") from None
            if header != CSV_FIELDS:
                raise ValueError(f"{path}: unexpected header {header!r}")
            for rowno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != len(CSV_FIELDS):
                    raise ValueError(f"{path}: row {rowno}: expected {len(CSV_FIELDS)} fields")
                try:
                    log.append(
                        index=int(row[0]), smiles=row[1], reward=float(row[2]),
                        shaped_reward=float(row[3]), prior_nll=float(row[4]),
                        agent_nll=float(row[5]), batch=int(row[6]),
                    )
                except ValueError as e:
                    raise ValueError(f"{path}: row {rowno}: {e}") from None
        if budget is None:
            log.budget = len(log.records)
        return log


@dataclass
class MetricReport:
    valid_frac: float
    unique_frac: float
    top10_avg: float
    top10_auc: float
    sediv: float
    filter_pass_frac: float

    FIELDS = ["valid_frac", "unique_frac", "top10_avg", "top10_auc", "sediv", "filter_pass_frac"]

    def to_text(self) -> str:
        return "\n".join(f"{name}={getattr(self, name)!r}" for name in self.FIELDS) + "\n"

    def to_csv_row(self) -> List[str]:
        return [repr(getattr(self, name)) for name in self.FIELDS]

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass
class DescriptorRanges:
    """Inclusive descriptor windows for the simplified property filter."""

    length: Tuple[float, float] = (1, 1000)
    heavy_atoms: Tuple[float, float] = (0, 1000)
    ring_closures: Tuple[float, float] = (0, 100)
    hetero_fraction: Tuple[float, float] = (0.0, 1.0)

    def contains(self, desc: Dict[str, float]) -> bool:
        for name in ("length", "heavy_atoms", "ring_closures", "hetero_fraction"):
            lo, hi = getattr(self, name)
            if not (lo <= desc[name] <= hi):
                return False
        return True


def _records(log: RunLog) -> List[LogRecord]:
    recs = log.in_budget()
    if not recs:
        raise ValueError("metrics need a non-empty log")
    return recs


def validity_frac(log: RunLog) -> float:
    recs = _records(log)
    n_valid = sum(1 for r in recs if _analyzed(r.smiles)[0])
    return n_valid / len(recs)


def uniqueness_frac(log: RunLog, include_invalid: bool = True) -> float:
    """Distinct normal-form keys over total scored molecules.

    include_invalid=False drops invalid molecules from both counts.
    """
    recs = _records(log)
    if not include_invalid:
        recs = [r for r in recs if _analyzed(r.smiles)[0]]
        if not recs:
            return 0.0
    keys = {normal_form(r.smiles) for r in recs}
    return len(keys) / len(recs)


def _best_by_key(recs: Iterable[LogRecord]) -> Dict[str, float]:
    best: Dict[str, float] = {}
    for r in recs:
        key = normal_form(r.smiles)
        if key not in best or r.reward > best[key]:
            best[key] = r.reward
    return best


def _topk_mean(values, k: int = 10) -> float:
    arr = np.sort(np.asarray(list(values), dtype=np.float64))[::-1]
    if arr.size == 0:
        return 0.0
    return float(arr[: min(k, arr.size)].mean())


def top10_avg(log: RunLog) -> float:
    """Mean reward of the 10 best-scoring distinct molecules (duplicates
    counted once; fewer than 10 distinct -> average what exists)."""
    return _topk_mean(_best_by_key(_records(log)).values())


def top10_auc(log: RunLog, interval: int = 100) -> float:
    """Budget-normalized area under the running Top-10 Avg curve.

    Every `interval` scored molecules contributes one checkpoint holding
    the Top-10 Avg over everything scored so far (rectangle rule); a run
    that ends early keeps its final value for the remaining checkpoints.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if log.budget < 1:
        raise ValueError("top10_auc needs a positive budget")
    recs = log.in_budget()
    n_checkpoints = math.ceil(log.budget / interval)
    best: Dict[str, float] = {}
    values: List[float] = []
    pos = 0
    for c in range(1, n_checkpoints + 1):
        upto = min(c * interval, log.budget)
        while pos < min(upto, len(recs)):
            r = recs[pos]
            key = normal_form(r.smiles)
            if key not in best or r.reward > best[key]:
                best[key] = r.reward
            pos += 1
        values.append(_topk_mean(best.values()))
    return float(np.mean(values))


def sediv(
    molecules: Sequence[Sequence[str]],
    sample_k: int = 1000,
    threshold: float = 0.65,
    seed: int = 0,
) -> float:
    """Sphere-exclusion diversity over token lists of valid molecules.

    Samples min(sample_k, n) molecules without replacement (seeded),
    then runs a greedy leader pass in sampled order: a molecule becomes
    a new center iff its tanimoto to every existing center is below the
    threshold. Returns centers / sampled.
    """
    n = len(molecules)
    if n == 0:
        raise ValueError("sediv needs at least one molecule")
    rng = np.random.default_rng(seed)
    k = min(sample_k, n)
    idx = rng.choice(n, size=k, replace=False)
    center_bits: List[np.ndarray] = []
    stacked: Optional[np.ndarray] = None
    for i in idx:
        fp = fingerprint(list(molecules[int(i)]))
        if stacked is None or not _any_similar(stacked, fp.bits, threshold):
            center_bits.append(fp.bits)
            stacked = np.stack(center_bits)
    return len(center_bits) / k


def _any_similar(stacked: np.ndarray, bits: np.ndarray, threshold: float) -> bool:
    inter = np.logical_and(stacked, bits).sum(axis=1)
    union = np.logical_or(stacked, bits).sum(axis=1)
    sims = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return bool((sims >= threshold).any())


def filter_pass_frac(log: RunLog, ranges: DescriptorRanges) -> float:
    """Fraction of scored molecules that are valid and fall inside every
    descriptor window."""
    recs = _records(log)
    passed = 0
    for r in recs:
        valid, tokens = _analyzed(r.smiles)
        if valid and ranges.contains(descriptors(tokens)):
            passed += 1
    return passed / len(recs)


def compute_report(
    log: RunLog,
    ranges: Optional[DescriptorRanges] = None,
    interval: int = 100,
    sediv_sample: int = 1000,
    sediv_threshold: float = 0.65,
    sediv_seed: int = 0,
    unique_includes_invalid: bool = True,
) -> MetricReport:
    """All metrics in one pass over the budget-truncated log."""
    recs = _records(log)
    ranges = ranges or DescriptorRanges()
    analyzed = [_analyzed(r.smiles) for r in recs]
    valid_tokens = [tokens for valid, tokens in analyzed if valid]
    return MetricReport(
        valid_frac=validity_frac(log),
        unique_frac=uniqueness_frac(log, include_invalid=unique_includes_invalid),
        top10_avg=top10_avg(log),
        top10_auc=top10_auc(log, interval=interval),
        sediv=(
            sediv(valid_tokens, sample_k=sediv_sample, threshold=sediv_threshold,
                  seed=sediv_seed)
            if valid_tokens
            else 0.0
        ),
        filter_pass_frac=filter_pass_frac(log, ranges),
    )
