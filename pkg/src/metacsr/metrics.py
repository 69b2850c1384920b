"""Ranking-quality metrics over per-user candidate lists.

AUC counts ordered (positive, negative) score pairs with ties worth 0.5, so
a constant scorer lands exactly at 0.5. List metrics (MAP, Hit@N, NDCG@N)
rank candidates by descending score with ties broken by ascending item id,
which keeps reports deterministic.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RankedQuery:
    """Scored candidates for one user: parallel scores/relevance/id arrays."""

    scores: tuple[float, ...]
    relevant: tuple[bool, ...]
    item_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.scores) != len(self.relevant):
            raise ValueError("scores and relevance flags differ in length")
        if self.item_ids is not None and len(self.item_ids) != len(self.scores):
            raise ValueError("item ids differ in length")

    @property
    def ids(self) -> tuple[int, ...]:
        return self.item_ids or tuple(range(len(self.scores)))

    def ranking(self):
        """Relevance flags in rank order (descending score, ascending id)."""
        order = sorted(range(len(self.scores)),
                       key=lambda i: (-self.scores[i], self.ids[i]))
        return [self.relevant[i] for i in order]


def _require_queries(queries):
    if not queries:
        raise ValueError("metric over an empty query set")


def auc(queries) -> float:
    """Mean per-user fraction of correctly ordered (pos, neg) pairs."""
    _require_queries(queries)
    total = 0.0
    for q in queries:
        pos = [s for s, r in zip(q.scores, q.relevant) if r]
        neg = [s for s, r in zip(q.scores, q.relevant) if not r]
        if not pos or not neg:
            raise ValueError("AUC needs at least one positive and one negative")
        pos_a = np.asarray(pos)[:, None]
        neg_a = np.asarray(neg)[None, :]
        wins = (pos_a > neg_a).sum() + 0.5 * (pos_a == neg_a).sum()
        total += wins / (len(pos) * len(neg))
    return total / len(queries)


def auc_from_rank(rank, n_candidates) -> float:
    """Single-positive AUC recovered from the positive's tie-aware rank.

    ``rank`` is the 1-based position of the positive when ties are counted
    as half above, half below (the same 0.5 tie rule as :func:`auc`).
    """
    n_neg = n_candidates - 1
    return (n_candidates - rank) / n_neg


def mean_average_precision(queries) -> float:
    _require_queries(queries)
    total = 0.0
    for q in queries:
        ranking = q.ranking()
        if not any(ranking):
            raise ValueError("MAP query without a relevant item")
        hits = 0
        avep = 0.0
        for position, rel in enumerate(ranking, start=1):
            if rel:
                hits += 1
                avep += hits / position
        total += avep / hits
    return total / len(queries)


def hit_at_n(queries, n) -> float:
    _require_queries(queries)
    if n < 1:
        raise ValueError("N must be >= 1")
    return sum(1.0 if any(q.ranking()[:n]) else 0.0
               for q in queries) / len(queries)


def ndcg_at_n(queries, n) -> float:
    _require_queries(queries)
    if n < 1:
        raise ValueError("N must be >= 1")
    total = 0.0
    for q in queries:
        ranking = q.ranking()
        discounts = 1.0 / np.log2(np.arange(2, len(ranking) + 2))
        gains = np.asarray(ranking, dtype=float)
        dcg = float((gains[:n] * discounts[:n]).sum())
        ideal = np.sort(gains)[::-1]
        idcg = float((ideal[:n] * discounts[:n]).sum())
        total += dcg / idcg if idcg > 0 else 0.0
    return total / len(queries)


@dataclass
class MetricsReport:
    """Aggregated metrics plus deterministic run metadata.

    ``timestamp`` is optional and excluded from serialization unless set:
    reports from identical (config, seed) runs must be byte-identical.
    """

    auc: float
    map: float
    hit: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    seed: int | None = None
    config_hash: str | None = None
    scenario: str | None = None
    model: str | None = None
    timestamp: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        meta = {"seed": self.seed, "config_hash": self.config_hash,
                "scenario": self.scenario, "model": self.model}
        if self.timestamp is not None:
            meta["timestamp"] = self.timestamp
        meta.update(self.extra)
        payload = {
            "auc": self.auc,
            "map": self.map,
            "hit": {str(n): v for n, v in sorted(self.hit.items())},
            "ndcg": {str(n): v for n, v in sorted(self.ndcg.items())},
            "users": self.n_users,
            "meta": {k: v for k, v in meta.items() if v is not None},
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Flat ``metric,N,value`` rows for plotting."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "N", "value"])
        writer.writerow(["auc", "", repr(self.auc)])
        writer.writerow(["map", "", repr(self.map)])
        for n in sorted(self.hit):
            writer.writerow(["hit", n, repr(self.hit[n])])
        for n in sorted(self.ndcg):
            writer.writerow(["ndcg", n, repr(self.ndcg[n])])
        return buf.getvalue()

    @staticmethod
    def from_json(text) -> "MetricsReport":
        raw = json.loads(text)
        meta = raw.get("meta", {})
        known = {"seed", "config_hash", "scenario", "model", "timestamp"}
        return MetricsReport(
            auc=raw["auc"], map=raw["map"],
            hit={int(k): v for k, v in raw["hit"].items()},
            ndcg={int(k): v for k, v in raw["ndcg"].items()},
            n_users=raw["users"],
            seed=meta.get("seed"), config_hash=meta.get("config_hash"),
            scenario=meta.get("scenario"), model=meta.get("model"),
            timestamp=meta.get("timestamp"),
            extra={k: v for k, v in meta.items() if k not in known},
        )


def build_report(queries, top_n=range(1, 21), **meta) -> MetricsReport:
    return MetricsReport(
        auc=auc(queries),
        map=mean_average_precision(queries),
        hit={n: hit_at_n(queries, n) for n in top_n},
        ndcg={n: ndcg_at_n(queries, n) for n in top_n},
        n_users=len(queries),
        **meta,
    )
