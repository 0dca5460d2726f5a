"""Sampled leave-one-out ranking: HR@k and NDCG@k over one positive plus n negatives."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import sample_negatives


def rank_of_positive(positive, negatives):
    """1 + number of negatives scoring at least as high (ties count against the positive)."""
    return 1 + int(np.count_nonzero(np.asarray(negatives) >= positive))


def hr_at_k(rank, k):
    return 1 if rank <= k else 0


def ndcg_at_k(rank, k):
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def user_rng(seed, user_id):
    """Independent stream per ``(seed, user)`` so evaluation order never matters."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(user_id)]))


@dataclass
class EvalReport:
    k: int
    negatives: int
    ranks: dict = field(default_factory=dict)
    hr: float = 0.0
    ndcg: float = 0.0
    users_evaluated: int = 0
    excluded_users: int = 0
    run: int = 0

    def to_json(self):
        return {"run": self.run, "k": self.k, "negatives": self.negatives, "hr": self.hr,
                "ndcg": self.ndcg, "users": self.users_evaluated}


@dataclass
class RunAggregate:
    reports: list
    hr_mean: float
    hr_std: float
    ndcg_mean: float
    ndcg_std: float

    def to_json(self):
        first = self.reports[0]
        return {"run": "aggregate", "k": first.k, "negatives": first.negatives,
                "hr": self.hr_mean, "ndcg": self.ndcg_mean, "users": first.users_evaluated,
                "runs": len(self.reports), "hr_mean": self.hr_mean, "hr_std": self.hr_std,
                "ndcg_mean": self.ndcg_mean, "ndcg_std": self.ndcg_std}


def candidate_lists(cases, n_negatives, num_items, seed, exclude_history=True):
    """``[n_cases, 1 + n]`` item ids, positive first."""
    out = np.zeros((len(cases), 1 + n_negatives), np.int64)
    for row, case in enumerate(cases):
        if exclude_history:
            exclude = set(case.known_items) | set(case.history.items.tolist()) | {case.item}
        else:
            exclude = {case.item}
        out[row, 0] = case.item
        out[row, 1:] = sample_negatives(exclude, n_negatives, num_items, user_rng(seed, case.user_id))
    return out


def evaluate(model, cases, n_negatives=99, k=10, seed=0, *, num_items, exclude_history=True,
             chunk_size=256, run=0):
    """Rank each held-out item among ``n_negatives`` sampled items.

    ``model`` is anything with ``score_candidates(cases, candidates)`` returning
    a score matrix, or such a function itself. Users with an empty history are
    skipped and counted in ``excluded_users``.
    """
    scorer = getattr(model, "score_candidates", model)
    usable = [c for c in cases if len(c.history) > 0]
    report = EvalReport(k=k, negatives=n_negatives, excluded_users=len(cases) - len(usable), run=run)
    hits, gains = [], []
    for start in range(0, len(usable), chunk_size):
        part = usable[start:start + chunk_size]
        cands = candidate_lists(part, n_negatives, num_items, seed, exclude_history)
        scores = np.asarray(scorer(part, cands))
        for case, row in zip(part, scores):
            r = rank_of_positive(row[0], row[1:])
            report.ranks[case.user_id] = r
            hits.append(hr_at_k(r, k))
            gains.append(ndcg_at_k(r, k))
    report.users_evaluated = len(usable)
    if usable:
        report.hr = float(np.mean(hits))
        report.ndcg = float(np.mean(gains))
    return report


def aggregate_runs(reports):
    """Mean and population standard deviation of HR and NDCG across runs."""
    if not reports:
        raise ValueError("need at least one report to aggregate")
    hr = np.array([r.hr for r in reports])
    ndcg = np.array([r.ndcg for r in reports])
    return RunAggregate(list(reports), float(hr.mean()), float(hr.std()), float(ndcg.mean()), float(ndcg.std()))


def emit(obj, stream):
    stream.write(json.dumps(obj, sort_keys=True) + "\n")
    stream.flush()
