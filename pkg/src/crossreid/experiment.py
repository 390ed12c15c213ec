"""In-memory desk-scale pipeline: synthetic world -> style engine -> training -> evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import SyntheticWorldSpec, synthesize_target_test, synthesize_world
from .evaluation import RankingResult, evaluate
from .losses import LossWeights
from .model import ModelConfig, extract_descriptor
from .sampling import BatchRecipe, TrainData
from .style import DomainIndex, ParametricEngine, build_imitated_dataset, build_pseudo_dataset
from .training import Schedule, TrainResult, run_training

log = logging.getLogger(__name__)

# Rows of the ablation, each a LossWeights override of the full objective.
ABLATION_MODES = {
    "baseline": dict(alpha=0.0, gamma1=1.0, gamma2=0.0),
    "dual": dict(gamma2=0.0),
    "full": dict(),
}


def desk_world_spec(seed: int = 0) -> SyntheticWorldSpec:
    return SyntheticWorldSpec(n_source_ids=32, n_target_ids=32, m_source_cams=3, m_target_cams=4,
                              images_per_id_per_cam=4, image_size=(64, 32), seed=seed, n_test_ids=24)


def desk_recipe(m_source: int = 3, m_target: int = 4) -> BatchRecipe:
    return BatchRecipe.for_setting(m_source, m_target, class_src=32, class_st=32, pk_p=4, pk_k=4,
                                   anchors=4, cofwd_t=16)


def desk_schedule() -> Schedule:
    return Schedule(base_lr_new=0.05, total_epochs=60, decay_period=40, steps_per_epoch=15)


@dataclass
class DeskWorld:
    spec: SyntheticWorldSpec
    data: TrainData
    query: object
    gallery: object
    engine: ParametricEngine


def build_desk_world(spec: SyntheticWorldSpec) -> DeskWorld:
    source, target = synthesize_world(spec)
    query, gallery = synthesize_target_test(spec)
    domains = DomainIndex.from_datasets(source, target)
    engine = ParametricEngine(spec.styles, domains, spec.image_size)
    target_u = target.unlabelled()
    st = build_imitated_dataset(engine, source, target.cameras)
    tt = build_pseudo_dataset(engine, target_u)
    return DeskWorld(spec, TrainData(source, target_u, st, tt), query, gallery, engine)


def evaluate_model(model, world: DeskWorld) -> RankingResult:
    q = extract_descriptor(model, world.query)
    g = extract_descriptor(model, world.gallery)
    return evaluate(world.query, q, world.gallery, g, max_rank=20)


def run_mode(world: DeskWorld, mode: str, seed: int, base: LossWeights | None = None,
             recipe: BatchRecipe | None = None, schedule: Schedule | None = None,
             model_cfg: ModelConfig | None = None) -> tuple[TrainResult, RankingResult]:
    weights = replace(base or LossWeights(), **ABLATION_MODES[mode])
    recipe = recipe or desk_recipe(world.spec.m_source_cams, world.spec.m_target_cams)
    schedule = schedule or desk_schedule()
    model_cfg = model_cfg or ModelConfig(num_classes=world.data.num_classes, image_size=world.spec.image_size)
    model_cfg = replace(model_cfg, seed=seed)
    res = run_training(world.data, model_cfg, weights, recipe, schedule, seed)
    return res, evaluate_model(res.model, world)


def run_ablation(seeds=(0, 1, 2), world_seed: int = 0, modes=tuple(ABLATION_MODES), **kw) -> dict:
    """Rank-1 / mAP per mode and seed on one desk world; returns a nested dict."""
    torch.set_num_threads(1)
    world = build_desk_world(desk_world_spec(world_seed))
    out = {m: {"rank1": [], "map": [], "seconds": []} for m in modes}
    for mode in modes:
        for seed in seeds:
            t0 = time.time()
            _, r = run_mode(world, mode, seed, **kw)
            out[mode]["rank1"].append(r.rank(1))
            out[mode]["map"].append(r.map)
            out[mode]["seconds"].append(time.time() - t0)
            log.info("%s seed=%d rank1=%.4f mAP=%.4f (%.1fs)", mode, seed, r.rank(1), r.map, time.time() - t0)
    for m in modes:
        out[m]["mean_rank1"] = float(np.mean(out[m]["rank1"]))
        out[m]["mean_map"] = float(np.mean(out[m]["map"]))
    return out
