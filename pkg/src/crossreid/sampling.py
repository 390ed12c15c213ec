"""Mini-batch streams for the classification and commonality tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DomainDataset


@dataclass(frozen=True)
class BatchRecipe:
    """Per-step stream sizes.

    ``tri_t_total`` counts every real target image in the commonality stream
    (anchors plus singleton negatives); each anchor also brings its M^t pseudo
    images. ``cofwd_t`` unlabelled target images ride along the classification
    forward pass so shared normalisation statistics see target data.
    """

    class_src: int = 64
    class_st: int = 72
    tri_src: int = 32
    tri_st: int = 24
    tri_tt_anchors: int = 4
    tri_t_total: int = 32
    pk_p: int = 8
    pk_k: int = 4
    st_pk_p: int = 8
    st_pk_k: int = 3
    cofwd_t: int = 32

    def __post_init__(self):
        if self.tri_t_total < self.tri_tt_anchors:
            raise ValueError("tri_t_total must be >= tri_tt_anchors")
        if self.pk_p * self.pk_k != self.tri_src:
            raise ValueError("pk_p * pk_k must equal tri_src")
        if min(vars(self).values()) < 0:
            raise ValueError("recipe sizes must be non-negative")

    @classmethod
    def for_setting(cls, m_source: int, m_target: int, class_src: int = 64, class_st: int = 72,
                    t_per_source_cam: int = 4, pk_p: int = 8, pk_k: int = 4, anchors: int = 4,
                    cofwd_t: int = 32) -> BatchRecipe:
        """Recipe with pseudo/imitated streams of 4*M^t and ``t_per_source_cam``*M^s target images."""
        tri_st = 4 * m_target
        st_k = math.ceil(tri_st / pk_p)
        return cls(class_src, class_st, pk_p * pk_k, pk_p * st_k, anchors, t_per_source_cam * m_source,
                   pk_p, pk_k, pk_p, st_k, cofwd_t)

    @property
    def tri_negatives(self) -> int:
        return self.tri_t_total - self.tri_tt_anchors


RECIPE_PRESETS = {
    "duke2market": BatchRecipe.for_setting(8, 6, class_st=72),
    "market2duke": BatchRecipe.for_setting(6, 8, class_st=128, t_per_source_cam=12),
}


def identity_label_map(ds: DomainDataset) -> dict[int, int]:
    """Person id -> contiguous classifier index."""
    return {pid: i for i, pid in enumerate(ds.identities)}


def sample_pk_batch(ds: DomainDataset, P: int, K: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``P`` distinct identities with ``K`` images each; returns (record indices, person ids).

    Identities with fewer than K images are sampled with replacement.
    """
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(ds.records):
        if r.person_id >= 0:
            by_id.setdefault(r.person_id, []).append(i)
    ids = sorted(by_id)
    if len(ids) < P:
        raise ValueError(f"need {P} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=P, replace=False)
    idx, labels = [], []
    for c in chosen:
        pool = by_id[ids[c]]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        idx.extend(pool[j] for j in picks)
        labels.extend([ids[c]] * K)
    return np.asarray(idx, dtype=np.int64), np.asarray(labels, dtype=np.int64)


@dataclass
class SurrogateLabelledBatch:
    """Target originals and pseudo images with surrogate class labels.

    Anchor ``a`` (label ``a``) is grouped with its M^t pseudo variants; each
    negative target image is its own class.
    """

    t_indices: np.ndarray
    t_labels: np.ndarray
    tt_indices: np.ndarray
    tt_labels: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.t_labels, self.tt_labels])

    def __len__(self) -> int:
        return len(self.t_indices) + len(self.tt_indices)


def pseudo_children(target: DomainDataset, pseudo: DomainDataset) -> list[list[int]]:
    """For each target record, the indices of the pseudo records generated from it."""
    children: list[list[int]] = [[] for _ in range(len(target))]
    for j, r in enumerate(pseudo.records):
        if r.source_record is None:
            raise ValueError("pseudo record without an origin")
        children[target.index_of(r.source_record.image_ref)].append(j)
    return children


def sample_ttt_batch(target: DomainDataset, pseudo: DomainDataset, n_anchors: int, n_negatives: int,
                     rng: np.random.Generator, children: list[list[int]] | None = None) -> SurrogateLabelledBatch:
    if n_anchors < 1 or n_negatives < 1:
        raise ValueError("need at least one anchor and one negative")
    if n_anchors + n_negatives > len(target):
        raise ValueError(f"{n_anchors} anchors + {n_negatives} negatives exceed {len(target)} target images")
    if children is None:
        children = pseudo_children(target, pseudo)
    picks = rng.choice(len(target), size=n_anchors + n_negatives, replace=False)
    anchors, negatives = picks[:n_anchors], picks[n_anchors:]
    tt_idx, tt_lab = [], []
    for a, t in enumerate(anchors):
        tt_idx.extend(children[t])
        tt_lab.extend([a] * len(children[t]))
    t_labels = np.concatenate([np.arange(n_anchors), n_anchors + np.arange(n_negatives)])
    return SurrogateLabelledBatch(picks.astype(np.int64), t_labels.astype(np.int64),
                                  np.asarray(tt_idx, dtype=np.int64), np.asarray(tt_lab, dtype=np.int64))


def sample_classification_batch(source: DomainDataset, imitated: DomainDataset, recipe: BatchRecipe,
                                rng: np.random.Generator, label_map: dict[int, int] | None = None):
    """Uniform draws from S and ST; returns (s_idx, st_idx, class labels of both, concatenated)."""
    if recipe.class_src and len(source) == 0 or recipe.class_st and len(imitated) == 0:
        raise ValueError("cannot sample from an empty dataset")
    label_map = label_map or identity_label_map(source)
    s_idx = rng.integers(0, len(source), size=recipe.class_src) if recipe.class_src else np.zeros(0, np.int64)
    st_idx = rng.integers(0, len(imitated), size=recipe.class_st) if recipe.class_st else np.zeros(0, np.int64)
    labels = [label_map[source.records[i].person_id] for i in s_idx]
    labels += [label_map[imitated.records[i].person_id] for i in st_idx]
    return s_idx, st_idx, np.asarray(labels, dtype=np.int64)


@dataclass
class StepBatch:
    """Record indices of every stream drawn for one optimisation step."""

    cls_s: np.ndarray
    cls_st: np.ndarray
    cls_labels: np.ndarray
    cofwd_t: np.ndarray
    tri_s: np.ndarray | None = None
    tri_s_labels: np.ndarray | None = None
    tri_st: np.ndarray | None = None
    tri_st_labels: np.ndarray | None = None
    ttt: SurrogateLabelledBatch | None = None

    def manifest(self, data) -> str:
        """Human-readable listing of the images in this batch (for diagnostics)."""
        lines = []
        for name, ds, idx in [("cls_s", data.source, self.cls_s), ("cls_st", data.imitated, self.cls_st),
                              ("cofwd_t", data.target, self.cofwd_t), ("tri_s", data.source, self.tri_s),
                              ("tri_st", data.imitated, self.tri_st)]:
            for i in ([] if idx is None else idx):
                lines.append(f"{name}\t{ds.records[i].image_ref}")
        if self.ttt is not None:
            lines += [f"ttt_t\t{data.target.records[i].image_ref}" for i in self.ttt.t_indices]
            lines += [f"ttt_tt\t{data.pseudo.records[i].image_ref}" for i in self.ttt.tt_indices]
        return "\n".join(lines)


@dataclass
class TrainData:
    source: DomainDataset
    target: DomainDataset
    imitated: DomainDataset | None = None
    pseudo: DomainDataset | None = None
    label_map: dict[int, int] = field(default_factory=dict)
    children: list[list[int]] | None = None

    def __post_init__(self):
        if not self.label_map:
            self.label_map = identity_label_map(self.source)
        if self.pseudo is not None and self.children is None:
            self.children = pseudo_children(self.target, self.pseudo)

    @property
    def num_classes(self) -> int:
        return len(self.label_map)


class StreamSampler:
    """Draws every stream of a step from one owned generator."""

    def __init__(self, data: TrainData, recipe: BatchRecipe, seed: int):
        self.data, self.recipe = data, recipe
        self.rng = np.random.default_rng(seed)

    def draw(self, use_imitated: bool, use_triplets: bool) -> StepBatch:
        d, r, rng = self.data, self.recipe, self.rng
        recipe = r if use_imitated else BatchRecipe(**{**vars(r), "class_st": 0})
        s_idx, st_idx, labels = sample_classification_batch(d.source, d.imitated, recipe, rng, d.label_map)
        cofwd = rng.choice(len(d.target), size=min(r.cofwd_t, len(d.target)), replace=False) \
            if use_imitated and r.cofwd_t else np.zeros(0, np.int64)
        batch = StepBatch(s_idx, st_idx, labels, np.asarray(cofwd, dtype=np.int64))
        if use_triplets:
            batch.tri_s, batch.tri_s_labels = sample_pk_batch(d.source, r.pk_p, r.pk_k, rng)
            batch.tri_st, batch.tri_st_labels = sample_pk_batch(d.imitated, r.st_pk_p, r.st_pk_k, rng)
            batch.ttt = sample_ttt_batch(d.target, d.pseudo, r.tri_tt_anchors, r.tri_negatives, rng, d.children)
        return batch
