"""Experiment configuration: sectioned ``key = value`` files, presets and resolution."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import PRESETS as WEIGHT_PRESETS
from .losses import LossWeights
from .sampling import RECIPE_PRESETS, BatchRecipe
from .style import GanConfig
from .training import Schedule


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "synthetic"        # synthetic | real
    source_root: str = ""
    target_root: str = ""
    image_h: int = 64
    image_w: int = 32
    n_source_ids: int = 32
    n_target_ids: int = 32
    m_source_cams: int = 3
    m_target_cams: int = 4
    images_per_id_per_cam: int = 4
    n_test_ids: int = 24


@dataclass
class EngineSection:
    kind: str = "parametric"       # parametric | gan


@dataclass
class ModelSection:
    backbone: str = "desk"
    pretrained: bool = False
    desk_channels: str = "8,16,32,64"


@dataclass
class EvalSection:
    max_rank: int = 20


@dataclass
class ExperimentConfig:
    seed: int
    out: str = "runs/desk"
    preset: str = "desk"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    engine: EngineSection = field(default_factory=EngineSection)
    gan: GanConfig = field(default_factory=GanConfig)
    model: ModelSection = field(default_factory=ModelSection)
    weights: LossWeights = field(default_factory=LossWeights)
    recipe: BatchRecipe = field(default_factory=BatchRecipe)
    schedule: Schedule = field(default_factory=Schedule)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.dataset.image_h, self.dataset.image_w)

    def resolved_text(self) -> str:
        return dump_config(self)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]


SECTIONS = ("dataset", "engine", "gan", "model", "weights", "recipe", "schedule", "eval")


def preset(name: str, seed: int) -> ExperimentConfig:
    """``desk``, ``duke2market`` or ``market2duke`` defaults."""
    if name == "desk":
        from .experiment import desk_recipe, desk_schedule
        ds = DatasetSection()
        return ExperimentConfig(seed=seed, preset=name, dataset=ds,
                                recipe=desk_recipe(ds.m_source_cams, ds.m_target_cams), schedule=desk_schedule(),
                                gan=GanConfig(image_size=(ds.image_h, ds.image_w), seed=seed))
    if name in WEIGHT_PRESETS:
        ds = DatasetSection(kind="real", image_h=256, image_w=128)
        ms, mt = (8, 6) if name == "duke2market" else (6, 8)
        ds.m_source_cams, ds.m_target_cams = ms, mt
        return ExperimentConfig(seed=seed, preset=name, dataset=ds, engine=EngineSection("gan"),
                                gan=GanConfig(image_size=(256, 128), g_channels=64, d_channels=64, n_res=6,
                                              d_layers=6, batch_size=16, total_iters=200000, seed=seed),
                                model=ModelSection("resnet50", True), weights=WEIGHT_PRESETS[name],
                                recipe=RECIPE_PRESETS[name], schedule=Schedule())
    raise ConfigError(f"unknown preset {name!r}")


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(type(like[0])(v) for v in raw.replace("x", ",").split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None


def _update(obj, items: dict, section: str):
    names = {f.name: f for f in fields(obj)}
    changes = {}
    for k, v in items.items():
        if k not in names:
            raise ConfigError(f"unknown key {k!r} in [{section}]")
        changes[k] = _coerce(v, getattr(obj, k), f"[{section}] {k}")
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid [{section}]: {e}") from None


def parse_config(text: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    if seed is None:
        if "seed" not in exp:
            raise ConfigError("[experiment] seed is mandatory")
        seed = _coerce(exp["seed"], 0, "[experiment] seed")
    unknown = set(exp) - {"seed", "out", "preset"}
    if unknown:
        raise ConfigError(f"unknown keys in [experiment]: {sorted(unknown)}")
    cfg = preset(exp.get("preset", "desk").strip(), seed)
    cfg.out = out or exp.get("out", cfg.out).strip()
    for sec in cp.sections():
        if sec == "experiment":
            continue
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        setattr(cfg, sec, _update(getattr(cfg, sec), dict(cp[sec]), sec))
    # the GAN trains on the dataset's image size and follows the experiment seed unless told otherwise
    gan_keys = dict(cp["gan"]) if cp.has_section("gan") else {}
    if "image_size" not in gan_keys:
        cfg.gan = replace(cfg.gan, image_size=cfg.image_size)
    if "seed" not in gan_keys:
        cfg.gan = replace(cfg.gan, seed=seed)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind not in ("synthetic", "real"):
        raise ConfigError(f"[dataset] kind must be synthetic or real, not {cfg.dataset.kind!r}")
    if cfg.engine.kind not in ("parametric", "gan"):
        raise ConfigError(f"[engine] kind must be parametric or gan, not {cfg.engine.kind!r}")
    if cfg.engine.kind == "parametric" and cfg.dataset.kind != "synthetic":
        raise ConfigError("the parametric engine only exists for synthetic worlds")
    if cfg.dataset.kind == "real" and not (cfg.dataset.source_root and cfg.dataset.target_root):
        raise ConfigError("real datasets need [dataset] source_root and target_root")
    if cfg.model.backbone not in ("desk", "resnet50"):
        raise ConfigError(f"unknown backbone {cfg.model.backbone!r}")


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), seed, out)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully explicit config text; parsing it back reproduces ``cfg``."""
    lines = ["[experiment]", f"seed = {cfg.seed}", f"out = {cfg.out}", f"preset = {cfg.preset}", ""]
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in asdict(getattr(cfg, sec)).items()]
        lines.append("")
    return "\n".join(lines)
