"""Classification, batch-hard triplet and composite objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.8
    beta3: float = 0.2
    gamma1: float = 0.5
    gamma2: float = 0.8
    margin: float = 0.3

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    @property
    def uses_imitated(self) -> bool:
        return self.gamma1 > 0 and self.alpha > 0

    @property
    def uses_triplets(self) -> bool:
        return self.gamma2 > 0


PRESETS = {
    "duke2market": LossWeights(1.0, 0.9, 0.8, 0.2, 0.5, 0.8, 0.3),
    "market2duke": LossWeights(1.4, 1.0, 1.0, 0.2, 0.5, 0.6, 0.3),
}


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return -F.log_softmax(logits, dim=1).gather(1, labels[:, None]).mean()


@dataclass
class TripletInfo:
    positive: torch.Tensor   # index of hardest positive per anchor, -1 if none
    negative: torch.Tensor   # index of hardest negative per anchor
    per_anchor: torch.Tensor  # hinge value per anchor (nan for skipped anchors)
    n_skipped: int


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    d2 = (x[:, None, :] - x[None, :, :]).pow(2).sum(-1)
    # sqrt has an infinite derivative at 0; route zero distances around it
    pos = d2 > 0
    return torch.where(pos, d2.clamp_min(1e-300 if x.dtype == torch.float64 else 1e-30).sqrt(),
                       torch.zeros_like(d2))


def batch_hard_triplet_loss(emb: torch.Tensor, labels, margin: float = 0.3, return_info: bool = False):
    """Mean over anchors of max(0, m + max_p D(a, p) - min_n D(a, n)).

    Anchors without any positive in the batch are skipped; every other anchor
    counts, including those whose hinge is zero.
    """
    labels = torch.as_tensor(labels)
    if emb.dim() != 2 or labels.shape != emb.shape[:1]:
        raise ValueError("embeddings must be B x d with one label per row")
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask, neg_mask = same & ~eye, ~same
    has_pos = pos_mask.any(1)
    if not neg_mask.any():
        raise ValueError("triplet batch has a single class, so no negatives exist")
    if not has_pos.any():
        raise ValueError("triplet batch has no class with two or more members")

    dist = pairwise_euclidean(emb)
    inf = torch.tensor(float("inf"), dtype=dist.dtype)
    ap, p_idx = torch.where(pos_mask, dist, -inf).max(1)
    an, n_idx = torch.where(neg_mask, dist, inf).min(1)
    hinge = F.relu(margin + ap - an)
    loss = hinge[has_pos].mean()
    if not return_info:
        return loss
    info = TripletInfo(torch.where(has_pos, p_idx, -1), n_idx,
                       torch.where(has_pos, hinge.detach(), torch.full_like(hinge, float("nan"))),
                       int((~has_pos).sum()))
    return loss, info


def triplet_oracle(emb, labels, margin: float = 0.3):
    """Brute force over every (a, p, n) triple; returns (loss, positives, negatives).

    Plain Python floats; shares nothing with ``batch_hard_triplet_loss``.
    Ties resolve to the lowest index.
    """
    pts = [[float(v) for v in row] for row in emb]
    labs = [int(v) for v in labels]
    n = len(pts)
    best_p, best_n, terms = [-1] * n, [-1] * n, []
    for a in range(n):
        best = None
        for q in range(n):
            if q == a or labs[q] != labs[a]:
                continue
            for neg in range(n):
                if labs[neg] == labs[a]:
                    continue
                dp, dn = math.dist(pts[a], pts[q]), math.dist(pts[a], pts[neg])
                key = (-dp, q, dn, neg)
                if best is None or key < best:
                    best = key
        if best is None:
            continue
        best_p[a], best_n[a] = best[1], best[3]
        dp, dn = -best[0], best[2]
        terms.append(max(0.0, margin + dp - dn))
    if not terms:
        raise ValueError("no anchor has a positive")
    return math.fsum(terms) / len(terms), best_p, best_n


def dual_classification_loss(l_source, l_imitated, alpha: float):
    return l_source + alpha * l_imitated


def total_triplet_loss(l_source, l_imitated, l_pseudo, beta1: float, beta2: float, beta3: float):
    return beta1 * l_source + beta2 * l_imitated + beta3 * l_pseudo


def total_loss(class_dual, tri_total, gamma1: float, gamma2: float):
    return gamma1 * class_dual + gamma2 * tri_total
