"""Randomised verification harnesses shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .data import JUNK, DomainDataset, ImageRecord, SyntheticWorldSpec
from .evaluation import evaluate, oracle_evaluate
from .losses import LossWeights, batch_hard_triplet_loss, triplet_oracle
from .model import ModelConfig, init_model
from .sampling import BatchRecipe, StreamSampler
from .training import GradCheckReport, finite_difference_check


def random_ranking_instance(rng: np.random.Generator, ties: bool = False, max_q: int = 10, max_g: int = 50,
                            max_ids: int = 5, max_cams: int = 4, dim: int = 4):
    """Small query/gallery pair; ``ties`` draws integer descriptors so equal distances are common."""
    n_ids, n_cams = int(rng.integers(1, max_ids + 1)), int(rng.integers(1, max_cams + 1))
    nq, ng = int(rng.integers(1, max_q + 1)), int(rng.integers(1, max_g + 1))

    def records(n, junk_rate):
        out = []
        for i in range(n):
            pid = JUNK if rng.random() < junk_rate else int(rng.integers(0, n_ids))
            out.append(ImageRecord(f"{i}.png", pid, int(rng.integers(1, n_cams + 1)), "T"))
        return DomainDataset(out)

    q, g = records(nq, 0.0), records(ng, 0.1)
    if ties:
        qf = rng.integers(0, 3, size=(nq, dim)).astype(np.float64)
        gf = rng.integers(0, 3, size=(ng, dim)).astype(np.float64)
    else:
        qf, gf = rng.normal(size=(nq, dim)), rng.normal(size=(ng, dim))
    return q, qf, g, gf


def metric_oracle_trials(n_trials: int = 200, seed: int = 0, tie_fraction: float = 0.25) -> dict:
    """Compare ``evaluate`` with ``oracle_evaluate`` on random instances."""
    rng = np.random.default_rng(seed)
    done = mismatches = both_rejected = 0
    max_diff = 0.0
    while done < n_trials:
        inst = random_ranking_instance(rng, ties=rng.random() < tie_fraction)
        errs = []
        results = []
        for fn in (evaluate, oracle_evaluate):
            try:
                results.append(fn(*inst, max_rank=10))
            except ValueError:
                errs.append(fn.__name__)
        if len(errs) == 2:
            both_rejected += 1
            continue
        done += 1
        if errs:
            mismatches += 1
            continue
        a, b = results
        if not np.array_equal(a.cmc, b.cmc) or a.n_queries_evaluated != b.n_queries_evaluated:
            mismatches += 1
        max_diff = max(max_diff, abs(a.map - b.map))
    return {"trials": done, "cmc_mismatches": mismatches, "max_map_diff": max_diff,
            "rejected_instances": both_rejected}


def triplet_oracle_trials(n_trials: int = 100, seed: int = 0, max_batch: int = 32, margin: float = 0.3) -> dict:
    """Compare batch-hard mining with brute-force triple enumeration on random batches."""
    rng = np.random.default_rng(seed)
    sel_mismatch, max_diff, done = 0, 0.0, 0
    while done < n_trials:
        b = int(rng.integers(3, max_batch + 1))
        labels = rng.integers(0, int(rng.integers(2, max(3, b // 2) + 1)), size=b)
        counts = np.bincount(labels)
        if (counts >= 2).sum() == 0 or (counts > 0).sum() < 2:
            continue
        emb = rng.normal(size=(b, int(rng.integers(1, 9)))) * rng.uniform(0.05, 2.0)
        loss, info = batch_hard_triplet_loss(torch.from_numpy(emb), torch.from_numpy(labels), margin, True)
        o_loss, o_pos, o_neg = triplet_oracle(emb, labels, margin)
        has_pos = info.positive >= 0
        if (info.positive.tolist() != o_pos
                or [n if p else -1 for n, p in zip(info.negative.tolist(), has_pos.tolist())] != o_neg):
            sel_mismatch += 1
        max_diff = max(max_diff, abs(float(loss) - o_loss))
        done += 1
    return {"trials": done, "selection_mismatches": sel_mismatch, "max_loss_diff": max_diff}


def gradcheck_desk(eps: float = 1e-3, n_params: int = 50, seed: int = 0,
                   weights: LossWeights | None = None, channels=(8, 16, 32, 64)) -> GradCheckReport:
    """Finite-difference check of the full objective on a small synthetic batch and the desk backbone."""
    from .experiment import build_desk_world
    spec = SyntheticWorldSpec(n_source_ids=10, n_target_ids=10, m_source_cams=3, m_target_cams=4,
                              images_per_id_per_cam=2, image_size=(64, 32), seed=seed, n_test_ids=2)
    world = build_desk_world(spec)
    recipe = BatchRecipe.for_setting(3, 4, class_src=8, class_st=8, pk_p=4, pk_k=2, anchors=2, cofwd_t=4)
    recipe = replace(recipe, st_pk_p=4, st_pk_k=2, tri_st=8, tri_t_total=6)
    batch = StreamSampler(world.data, recipe, seed).draw(True, True)
    model = init_model(ModelConfig(world.data.num_classes, image_size=spec.image_size,
                                   desk_channels=channels, seed=seed))
    return finite_difference_check(model, world.data, batch, weights or LossWeights(), eps, n_params, seed,
                                   return_report=True)


def gradcheck_from_config(cfg, eps: float = 1e-3, n_params: int = 50) -> GradCheckReport:
    torch.set_num_threads(1)
    chans = tuple(int(c) for c in cfg.model.desk_channels.split(","))
    return gradcheck_desk(eps, n_params, cfg.seed, cfg.weights, chans)
