"""On-disk pipeline behind the command-line entry points.

Layout under ``cfg.out``::

    world/            synthetic S + T images, manifest.tsv, styles.json
    world_test/       query/ and gallery/ of the synthetic target test split
    engine/           engine.txt header (+ engine.pt for the GAN)
    generated/st/     imitated-target images + manifest.tsv
    generated/tt/     pseudo-target images + manifest.tsv
    run/              ckpt_epoch<k>/, metrics.log, config.resolved
    report.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import torch

from .config import ExperimentConfig
from .data import (MANIFEST_NAME, CameraStyle, DomainDataset, SyntheticWorldSpec, encode_image, load_domain,
                   materialize, read_manifest, synthesize_target_test, synthesize_world, write_manifest)
from .evaluation import RankingResult, evaluate, write_report
from .model import ModelConfig, extract_descriptor
from .sampling import TrainData, identity_label_map
from .style import (DomainIndex, GanEngine, ParametricEngine, StyleEngine, build_imitated_dataset,
                    build_pseudo_dataset, train_style_engine)
from .training import latest_checkpoint, load_model, run_training

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: Path, command: str):
        super().__init__(f"{what} not found; run `crossreid {command}` first")


def world_spec(cfg: ExperimentConfig) -> SyntheticWorldSpec:
    d = cfg.dataset
    return SyntheticWorldSpec(d.n_source_ids, d.n_target_ids, d.m_source_cams, d.m_target_cams,
                              d.images_per_id_per_cam, cfg.image_size, None, cfg.seed, d.n_test_ids)


def paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out)
    return {"world": out / "world", "world_test": out / "world_test", "engine": out / "engine",
            "st": out / "generated" / "st", "tt": out / "generated" / "tt", "run": out / "run",
            "report": out / "report.json"}


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, command)
    return path


# --- synth -------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig) -> Path:
    if cfg.dataset.kind != "synthetic":
        raise ValueError("synth needs [dataset] kind = synthetic")
    p = paths(cfg)
    spec = world_spec(cfg)
    source, target = synthesize_world(spec)
    world = DomainDataset(source.records + target.records, name="world")
    p["world"].mkdir(parents=True, exist_ok=True)
    for ds in (source, target):
        for i, r in enumerate(ds.records):
            encode_image(ds.pixels[i], p["world"] / r.image_ref)
    write_manifest(world, p["world"] / MANIFEST_NAME)
    (p["world"] / "styles.json").write_text(json.dumps({
        "source_cams": source.cameras, "target_cams": target.cameras,
        "styles": [asdict(s) for s in spec.styles]}, indent=2) + "\n")
    if spec.n_test_ids:
        query, gallery = synthesize_target_test(spec)
        materialize(query, p["world_test"] / "query")
        materialize(gallery, p["world_test"] / "gallery")
    return p["world"] / MANIFEST_NAME


# --- dataset access ----------------------------------------------------------

def load_train_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    """(labelled source, unlabelled target) training sets."""
    if cfg.dataset.kind == "real":
        s = load_domain(cfg.dataset.source_root, "train", True, "S", cfg.image_size)
        t = load_domain(cfg.dataset.target_root, "train", False, "T", cfg.image_size)
        return s, t
    world = read_manifest(_need(paths(cfg)["world"] / MANIFEST_NAME, "synth"), image_size=cfg.image_size)
    s_idx = [i for i, r in enumerate(world.records) if r.domain_tag == "S"]
    t_idx = [i for i, r in enumerate(world.records) if r.domain_tag == "T"]
    world = world.preloaded()
    s, t = world.select(s_idx), world.select(t_idx)
    s.name, t.name = "source", "target"
    return s, t.unlabelled()


def load_test_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    if cfg.dataset.kind == "real":
        return (load_domain(cfg.dataset.target_root, "query", True, "T", cfg.image_size),
                load_domain(cfg.dataset.target_root, "gallery", True, "T", cfg.image_size))
    wt = paths(cfg)["world_test"]
    return (read_manifest(_need(wt / "query" / MANIFEST_NAME, "synth"), image_size=cfg.image_size),
            read_manifest(_need(wt / "gallery" / MANIFEST_NAME, "synth"), image_size=cfg.image_size))


# --- train-style -------------------------------------------------------------

def cmd_train_style(cfg: ExperimentConfig) -> Path:
    p = paths(cfg)
    p["engine"].mkdir(parents=True, exist_ok=True)
    if cfg.engine.kind == "parametric":
        styles = _need(p["world"] / "styles.json", "synth")
        (p["engine"] / "engine.txt").write_text(json.dumps({"kind": "parametric", **json.loads(styles.read_text())},
                                                           indent=2) + "\n")
        return p["engine"] / "engine.txt"
    source, target = load_train_domains(cfg)
    gan_cfg = replace(cfg.gan, image_size=cfg.image_size)
    engine, hist = train_style_engine(source, target, gan_cfg,
                                      expected_cams=(cfg.dataset.m_source_cams, cfg.dataset.m_target_cams))
    engine.save(p["engine"] / "engine.pt")
    (p["engine"] / "history.tsv").write_text(
        "#g_step\td_loss\tg_adv\tg_cls\tg_rec\n" + "".join(
            f"{i}\t{a!r}\t{b!r}\t{c!r}\t{d!r}\n"
            for i, (a, b, c, d) in enumerate(zip(hist.d_loss, hist.g_adv, hist.g_cls, hist.g_rec))))
    return p["engine"] / "engine.pt"


def load_engine(cfg: ExperimentConfig) -> StyleEngine:
    p = paths(cfg)
    header = json.loads(_need(p["engine"] / "engine.txt", "train-style").read_text())
    if header["kind"] == "parametric":
        domains = DomainIndex(tuple(header["source_cams"]), tuple(header["target_cams"]))
        styles = [CameraStyle(tuple(s["gain"]), s["offset"], s["noise"]) for s in header["styles"]]
        return ParametricEngine(styles, domains, cfg.image_size)
    return GanEngine.load(_need(p["engine"] / "engine.pt", "train-style"))


# --- generate ----------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> tuple[Path, Path]:
    p = paths(cfg)
    engine = load_engine(cfg)
    source, target = load_train_domains(cfg)
    st = build_imitated_dataset(engine, source, target.cameras)
    tt = build_pseudo_dataset(engine, target)
    n_s, n_t, m_t = len(source), len(target), target.n_cameras
    if len(st) != n_s * m_t or len(tt) != n_t * m_t:
        raise RuntimeError(f"count identity violated: |ST|={len(st)} vs {n_s}*{m_t}, |TT|={len(tt)} vs {n_t}*{m_t}")
    return materialize(st, p["st"]), materialize(tt, p["tt"])


def load_train_data(cfg: ExperimentConfig, need_generated: bool = True) -> TrainData:
    source, target = load_train_domains(cfg)
    st = tt = None
    if need_generated:
        p = paths(cfg)
        st = read_manifest(_need(p["st"] / MANIFEST_NAME, "generate"), origin=source, image_size=cfg.image_size)
        tt = read_manifest(_need(p["tt"] / MANIFEST_NAME, "generate"), origin=target, image_size=cfg.image_size)
        if cfg.dataset.kind == "synthetic":
            st, tt = st.preloaded(), tt.preloaded()
    return TrainData(source, target, st, tt, identity_label_map(source))


def model_config(cfg: ExperimentConfig, num_classes: int) -> ModelConfig:
    chans = tuple(int(c) for c in cfg.model.desk_channels.split(","))
    return ModelConfig(num_classes, cfg.model.backbone, cfg.model.pretrained, cfg.image_size, chans, seed=cfg.seed)


# --- train / eval ------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, resume: str | None = None):
    torch.set_num_threads(1)
    p = paths(cfg)
    w = cfg.weights
    data = load_train_data(cfg, need_generated=w.uses_imitated or w.uses_triplets)
    p["run"].mkdir(parents=True, exist_ok=True)
    (p["run"] / "config.resolved").write_text(cfg.resolved_text())
    ckpt = None
    if resume:
        ckpt = latest_checkpoint(p["run"]) if resume == "latest" else Path(resume)
        if ckpt is None:
            raise MissingArtifact(p["run"] / "ckpt_epoch*", "train")
    return run_training(data, model_config(cfg, data.num_classes), w, cfg.recipe, cfg.schedule, cfg.seed,
                        p["run"], ckpt, cfg.hash)


def cmd_eval(cfg: ExperimentConfig, ckpt: str | None = None) -> RankingResult:
    torch.set_num_threads(1)
    p = paths(cfg)
    ckpt_dir = Path(ckpt) if ckpt else latest_checkpoint(p["run"]) if p["run"].exists() else None
    if ckpt_dir is None:
        raise MissingArtifact(p["run"] / "ckpt_epoch*", "train")
    model = load_model(_need(ckpt_dir, "train"))
    query, gallery = load_test_domains(cfg)
    res = evaluate(query, extract_descriptor(model, query), gallery, extract_descriptor(model, gallery),
                   cfg.eval.max_rank)
    write_report(res, p["report"], cfg.hash,
                 notes="GAN loss weights, learning rate and iteration count are StarGAN defaults, not tuned values"
                 if cfg.engine.kind == "gan" else "")
    return res
