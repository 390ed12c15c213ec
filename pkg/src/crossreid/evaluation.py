"""Cross-camera retrieval evaluation (CMC and mAP) plus an independent enumeration oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .data import JUNK, DomainDataset

REPORT_RANKS = (1, 5, 10, 20)


@dataclass
class RankingResult:
    cmc: np.ndarray
    map: float
    n_queries_evaluated: int
    n_queries_skipped: int = 0
    per_query_ap: list = field(default_factory=list)
    per_query_first_rank: list = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_report(self, config_hash: str = "", notes: str = "") -> dict:
        return {
            "cmc": {f"rank{k}": float(self.cmc[min(k, len(self.cmc)) - 1]) for k in REPORT_RANKS},
            "map": float(self.map),
            "n_queries": self.n_queries_evaluated,
            "n_queries_skipped": self.n_queries_skipped,
            "config_hash": config_hash,
            "protocol": "cross-camera: same-id same-camera and junk gallery entries excluded",
            **({"notes": notes} if notes else {}),
        }


def write_report(result: RankingResult, path: str | Path, config_hash: str = "", notes: str = "") -> None:
    Path(path).write_text(json.dumps(result.to_report(config_hash, notes), indent=2, sort_keys=True) + "\n")


def pairwise_distances(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix in double precision."""
    Q, G = np.atleast_2d(np.asarray(Q, np.float64)), np.atleast_2d(np.asarray(G, np.float64))
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {Q.shape[1]} vs {G.shape[1]}")
    return cdist(Q, G, "euclidean")


def average_precision(relevance) -> float:
    """Mean over relevant positions k of precision@k."""
    rel = np.asarray(relevance, dtype=bool)
    if not rel.any():
        raise ValueError("average precision is undefined without a relevant entry")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def _ids_cams(ds: DomainDataset):
    return (np.asarray([r.person_id for r in ds.records]), np.asarray([r.camera_id for r in ds.records]))


def evaluate(query: DomainDataset, q_feat: np.ndarray, gallery: DomainDataset, g_feat: np.ndarray,
             max_rank: int = 20) -> RankingResult:
    """Rank the gallery for every query and score it under the cross-camera rule.

    Ties in distance keep gallery order. Queries with no valid match are skipped.
    """
    q_feat, g_feat = np.asarray(q_feat), np.asarray(g_feat)
    if len(q_feat) != len(query) or len(g_feat) != len(gallery):
        raise ValueError("descriptors are not aligned with records")
    q_ids, q_cams = _ids_cams(query)
    g_ids, g_cams = _ids_cams(gallery)
    dist = pairwise_distances(q_feat, g_feat) if len(query) and len(gallery) else np.zeros((len(query), 0))
    cmc = np.zeros(max_rank)
    aps, firsts, skipped = [], [], 0
    for i in range(len(query)):
        order = np.argsort(dist[i], kind="stable")
        keep = (g_ids[order] != JUNK) & ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        matches = g_ids[order][keep] == q_ids[i]
        if not matches.any():
            skipped += 1
            continue
        first = int(np.argmax(matches))
        if first < max_rank:
            cmc[first:] += 1
        aps.append(average_precision(matches))
        firsts.append(first + 1)
    if not aps:
        raise ValueError("no query has a valid cross-camera match in the gallery")
    n = len(aps)
    return RankingResult(cmc / n, float(np.mean(aps)), n, skipped, aps, firsts)


def oracle_evaluate(query: DomainDataset, q_feat, gallery: DomainDataset, g_feat, max_rank: int = 20) -> RankingResult:
    """Same contract as ``evaluate`` by explicit enumeration in plain Python."""
    qs = [(r.person_id, r.camera_id, [float(v) for v in f]) for r, f in zip(query.records, q_feat)]
    gs = [(r.person_id, r.camera_id, [float(v) for v in f]) for r, f in zip(gallery.records, g_feat)]
    hits_at = [0] * max_rank
    ap_sum, ap_list, firsts, n_eval, n_skip = [], [], [], 0, 0
    for qid, qcam, qf in qs:
        ranked = []
        for j, (gid, gcam, gf) in enumerate(gs):
            if gid == JUNK or (gid == qid and gcam == qcam):
                continue
            d = math.sqrt(sum((a - b) * (a - b) for a, b in zip(qf, gf)))
            ranked.append((d, j, gid == qid))
        ranked.sort(key=lambda t: (t[0], t[1]))
        n_rel = sum(1 for t in ranked if t[2])
        if n_rel == 0:
            n_skip += 1
            continue
        n_eval += 1
        found, precisions, first = 0, [], None
        for pos, (_, _, rel) in enumerate(ranked, start=1):
            if rel:
                found += 1
                precisions.append(found / pos)
                if first is None:
                    first = pos
        for k in range(1, max_rank + 1):
            if first <= k:
                hits_at[k - 1] += 1
        ap = sum(precisions) / n_rel
        ap_sum.append(ap)
        ap_list.append(ap)
        firsts.append(first)
    if n_eval == 0:
        raise ValueError("no query has a valid cross-camera match in the gallery")
    cmc = np.asarray([h / n_eval for h in hits_at])
    return RankingResult(cmc, math.fsum(ap_sum) / n_eval, n_eval, n_skip, ap_list, firsts)
