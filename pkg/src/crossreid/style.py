"""Camera-style engines over the joint source+target camera domain set.

Two engines share one surface: a multi-domain translation GAN trained once over
every camera of both datasets, and an exact parametric engine that inverts the
synthetic world's affine camera styles.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import UNLABELLED, CameraStyle, DomainDataset, ImageRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainIndex:
    """Bijection (dataset, camera_id) <-> joint index; source cameras come first."""

    source_cams: tuple[int, ...]
    target_cams: tuple[int, ...]

    @classmethod
    def from_datasets(cls, source: DomainDataset, target: DomainDataset) -> DomainIndex:
        return cls(tuple(source.cameras), tuple(target.cameras))

    @property
    def n_domains(self) -> int:
        return len(self.source_cams) + len(self.target_cams)

    def index(self, side: str, camera_id: int) -> int:
        cams = self.source_cams if side == "S" else self.target_cams
        if camera_id not in cams:
            raise KeyError(f"camera {camera_id} unknown on side {side!r}")
        pos = cams.index(camera_id)
        return pos if side == "S" else len(self.source_cams) + pos

    def camera(self, index: int) -> tuple[str, int]:
        if not 0 <= index < self.n_domains:
            raise KeyError(f"domain index {index} outside [0, {self.n_domains})")
        ns = len(self.source_cams)
        return ("S", self.source_cams[index]) if index < ns else ("T", self.target_cams[index - ns])

    def one_hot(self, index: int) -> np.ndarray:
        self.camera(index)
        v = np.zeros(self.n_domains, dtype=np.float32)
        v[index] = 1.0
        return v

    def origin_of(self, record: ImageRecord) -> int:
        """Joint index of the camera that captured ``record``."""
        if record.domain_tag == "S":
            return self.index("S", record.camera_id)
        # T, and ST/TT whose camera is a target camera
        return self.index("T", record.camera_id)


class StyleEngine:
    kind = "abstract"

    def __init__(self, domains: DomainIndex, image_size: tuple[int, int]):
        self.domains = domains
        self.image_size = tuple(image_size)

    def _check(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img)
        if img.shape[-3:] != (*self.image_size, 3):
            raise ValueError(f"image shape {img.shape[-3:]} does not match engine size {self.image_size}")
        return img

    def transfer(self, img: np.ndarray, target: int, origin: int | Sequence[int] | None = None) -> np.ndarray:
        raise NotImplementedError


class ParametricEngine(StyleEngine):
    """Undo the origin camera's affine colour map, apply the target's, clamp."""

    kind = "parametric"

    def __init__(self, styles: Sequence[CameraStyle], domains: DomainIndex, image_size: tuple[int, int]):
        super().__init__(domains, image_size)
        if len(styles) != domains.n_domains:
            raise ValueError(f"need {domains.n_domains} styles, got {len(styles)}")
        self.styles = tuple(styles)

    def affine(self, origin: int, target: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) of the composed map origin -> target."""
        self.domains.camera(origin), self.domains.camera(target)  # range checks
        a, b = self.styles[origin], self.styles[target]
        ga, gb = np.asarray(a.gain, np.float64), np.asarray(b.gain, np.float64)
        scale = gb / ga
        return scale, b.offset - a.offset * scale

    def transfer(self, img, target, origin=None):
        if origin is None:
            raise ValueError("the parametric engine needs the origin camera of every image")
        img = self._check(img).astype(np.float64)
        batched = img.ndim == 4
        imgs = img if batched else img[None]
        origins = np.broadcast_to(np.asarray(origin), (len(imgs),))
        out = np.empty_like(imgs)
        for i, o in enumerate(origins):
            scale, shift = self.affine(int(o), target)
            out[i] = np.clip(imgs[i] * scale + shift, -1.0, 1.0)
        return out if batched else out[0]


def parametric_engine(styles: Sequence[CameraStyle], domains: DomainIndex,
                      image_size: tuple[int, int]) -> ParametricEngine:
    return ParametricEngine(styles, domains, image_size)


def transfer(engine: StyleEngine, img: np.ndarray, target: int, origin=None) -> np.ndarray:
    return engine.transfer(img, target, origin)


# --- GAN engine --------------------------------------------------------------

@dataclass
class GanConfig:
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0
    d_steps_per_g: int = 5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    total_iters: int = 2000
    batch_size: int = 8
    image_size: tuple[int, int] = (64, 32)
    g_channels: int = 16
    d_channels: int = 16
    n_res: int = 2
    d_layers: int = 4
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if min(self.lambda_cls, self.lambda_rec, self.lambda_gp) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        h, w = self.image_size
        if h % 2 ** self.d_layers or w % 2 ** self.d_layers:
            raise ValueError(f"image_size {self.image_size} must be divisible by 2**d_layers")


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.InstanceNorm2d(ch, affine=True))

    def forward(self, x):
        return x + self.main(x)


class Generator(nn.Module):
    """Down-sampling, residual bottleneck, up-sampling; domain one-hot tiled onto the input."""

    def __init__(self, n_domains, ch=64, n_res=6):
        super().__init__()
        layers = [nn.Conv2d(3 + n_domains, ch, 7, 1, 3, bias=False), nn.InstanceNorm2d(ch, affine=True),
                  nn.ReLU(inplace=True)]
        c = ch
        for _ in range(2):
            layers += [nn.Conv2d(c, c * 2, 4, 2, 1, bias=False), nn.InstanceNorm2d(c * 2, affine=True),
                       nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(n_res)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(c, c // 2, 4, 2, 1, bias=False), nn.InstanceNorm2d(c // 2, affine=True),
                       nn.ReLU(inplace=True)]
            c //= 2
        layers += [nn.Conv2d(c, 3, 7, 1, 3, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, x, c):
        c = c.view(c.size(0), c.size(1), 1, 1).expand(-1, -1, x.size(2), x.size(3))
        return self.main(torch.cat([x, c], dim=1))


class Discriminator(nn.Module):
    """PatchGAN critic with an auxiliary camera-domain classifier."""

    def __init__(self, image_size, n_domains, ch=64, n_layers=6):
        super().__init__()
        layers = [nn.Conv2d(3, ch, 4, 2, 1), nn.LeakyReLU(0.01)]
        c = ch
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(c, c * 2, 4, 2, 1), nn.LeakyReLU(0.01)]
            c *= 2
        self.main = nn.Sequential(*layers)
        kh, kw = image_size[0] // 2 ** n_layers, image_size[1] // 2 ** n_layers
        self.src = nn.Conv2d(c, 1, 3, 1, 1, bias=False)
        self.cls = nn.Conv2d(c, n_domains, (kh, kw), bias=False)

    def forward(self, x):
        h = self.main(x)
        return self.src(h), self.cls(h).flatten(1)


def gradient_penalty(critic_out, x):
    grad = torch.autograd.grad(critic_out, x, grad_outputs=torch.ones_like(critic_out),
                               create_graph=True, retain_graph=True)[0]
    norm = grad.flatten(1).norm(2, dim=1)
    return ((norm - 1) ** 2).mean()


def to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32).transpose(0, 3, 1, 2)))


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


class GanEngine(StyleEngine):
    kind = "gan"

    def __init__(self, generator: Generator, domains: DomainIndex, cfg: GanConfig,
                 discriminator: Discriminator | None = None):
        super().__init__(domains, cfg.image_size)
        self.generator = generator.eval()
        self.discriminator = discriminator
        self.cfg = cfg

    @torch.no_grad()
    def transfer(self, img, target, origin=None):
        img = self._check(img)
        batched = img.ndim == 4
        x = to_nchw(img if batched else img[None])
        c = torch.from_numpy(self.domains.one_hot(target)).expand(len(x), -1)
        out = to_nhwc(self.generator.eval()(x, c)).astype(np.float64)
        return out if batched else out[0]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save({"generator": self.generator.state_dict(),
                    "discriminator": None if self.discriminator is None else self.discriminator.state_dict()},
                   tmp)
        os.replace(tmp, path)
        header = {"kind": "gan", "config": dataclasses.asdict(self.cfg),
                  "source_cams": list(self.domains.source_cams), "target_cams": list(self.domains.target_cams)}
        path.with_suffix(".txt").write_text(json.dumps(header, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> GanEngine:
        path = Path(path)
        header = json.loads(path.with_suffix(".txt").read_text())
        cfg = GanConfig(**header["config"])
        domains = DomainIndex(tuple(header["source_cams"]), tuple(header["target_cams"]))
        gen = Generator(domains.n_domains, cfg.g_channels, cfg.n_res)
        state = torch.load(path, map_location="cpu", weights_only=True)
        gen.load_state_dict(state["generator"])
        return cls(gen, domains, cfg)


@dataclass
class GanHistory:
    d_updates: int = 0
    g_updates: int = 0
    d_loss: list = dataclasses.field(default_factory=list)
    g_adv: list = dataclasses.field(default_factory=list)
    g_cls: list = dataclasses.field(default_factory=list)
    g_rec: list = dataclasses.field(default_factory=list)

    def running(self, name: str, window: int = 100) -> np.ndarray:
        """Trailing moving average of a per-generator-step series."""
        x = np.asarray(getattr(self, name), dtype=np.float64)
        if len(x) == 0:
            return x
        c = np.cumsum(np.insert(x, 0, 0.0))
        idx = np.arange(1, len(x) + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)


def train_style_engine(source: DomainDataset, target: DomainDataset, cfg: GanConfig,
                       expected_cams: tuple[int, int] | None = None,
                       log_every: int = 200) -> tuple[GanEngine, GanHistory]:
    """Train one multi-domain generator over every source and target camera.

    Each generator update follows ``cfg.d_steps_per_g`` critic updates
    (WGAN-GP critic plus a domain-classification head).
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("both datasets must be non-empty")
    if expected_cams is not None and (source.n_cameras < expected_cams[0] or target.n_cameras < expected_cams[1]):
        raise ValueError(f"datasets have {source.n_cameras}/{target.n_cameras} cameras, "
                         f"fewer than the declared {expected_cams}")
    domains = DomainIndex.from_datasets(source, target)
    if domains.n_domains < 2:
        raise ValueError("need at least two camera domains")

    images = np.concatenate([source.images(), target.images()]).astype(np.float32)
    if images.shape[1:3] != cfg.image_size:
        raise ValueError(f"images {images.shape[1:3]} do not match cfg.image_size {cfg.image_size}")
    labels = np.asarray([domains.index("S", r.camera_id) for r in source.records]
                        + [domains.index("T", r.camera_id) for r in target.records])
    x_all = to_nchw(images)
    y_all = torch.from_numpy(labels)
    nd = domains.n_domains

    gen_state = torch.Generator().manual_seed(cfg.seed)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        G = Generator(nd, cfg.g_channels, cfg.n_res)
        D = Discriminator(cfg.image_size, nd, cfg.d_channels, cfg.d_layers)
    g_opt = torch.optim.Adam(G.parameters(), cfg.lr, betas=(cfg.beta1, cfg.beta2))
    d_opt = torch.optim.Adam(D.parameters(), cfg.lr, betas=(cfg.beta1, cfg.beta2))
    G.train(), D.train()
    hist = GanHistory()

    def draw():
        idx = torch.randint(len(x_all), (cfg.batch_size,), generator=gen_state)
        trg = torch.randint(nd, (cfg.batch_size,), generator=gen_state)
        return x_all[idx], y_all[idx], trg

    for it in range(cfg.total_iters):
        for _ in range(cfg.d_steps_per_g):
            x, org, trg = draw()
            c_trg = F.one_hot(trg, nd).float()
            out_src, out_cls = D(x)
            d_real = -out_src.mean()
            d_cls = F.cross_entropy(out_cls, org)
            with torch.no_grad():
                fake = G(x, c_trg)
            d_fake = D(fake)[0].mean()
            alpha = torch.rand(x.size(0), 1, 1, 1, generator=gen_state)
            x_hat = (alpha * x + (1 - alpha) * fake).requires_grad_(True)
            d_gp = gradient_penalty(D(x_hat)[0], x_hat)
            d_loss = d_real + d_fake + cfg.lambda_cls * d_cls + cfg.lambda_gp * d_gp
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            hist.d_updates += 1

        x, org, trg = draw()
        c_org, c_trg = F.one_hot(org, nd).float(), F.one_hot(trg, nd).float()
        fake = G(x, c_trg)
        out_src, out_cls = D(fake)
        g_adv = -out_src.mean()
        g_cls = F.cross_entropy(out_cls, trg)
        g_rec = (x - G(fake, c_org)).abs().mean()
        g_loss = g_adv + cfg.lambda_cls * g_cls + cfg.lambda_rec * g_rec
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()
        hist.g_updates += 1
        hist.d_loss.append(d_loss.item())
        hist.g_adv.append(g_adv.item())
        hist.g_cls.append(g_cls.item())
        hist.g_rec.append(g_rec.item())
        if log_every and (it + 1) % log_every == 0:
            log.info("gan iter %d/%d d=%.4f g_adv=%.4f g_cls=%.4f rec=%.4f", it + 1, cfg.total_iters,
                     hist.d_loss[-1], hist.g_adv[-1], hist.g_cls[-1], hist.g_rec[-1])

    return GanEngine(G.eval(), domains, cfg, D.eval()), hist


# --- generated datasets ------------------------------------------------------

def _generated_name(rec: ImageRecord, prefix: str, cam: int) -> str:
    stem = rec.image_ref.rsplit(".", 1)[0].replace("/", "_")
    return f"{prefix}_{stem}_to_c{cam}.png"


def _restyle(engine: StyleEngine, ds: DomainDataset, cams: Sequence[int], side: str,
             batch_size: int) -> np.ndarray:
    n, m = len(ds), len(cams)
    out = np.empty((n * m, *engine.image_size, 3), dtype=np.float32)
    origins = np.asarray([engine.domains.index(side, r.camera_id) for r in ds.records])
    for lo in range(0, n, batch_size):
        hi = min(n, lo + batch_size)
        imgs = ds.images(range(lo, hi))
        for j, cam in enumerate(cams):
            out[np.arange(lo, hi) * m + j] = engine.transfer(imgs, engine.domains.index("T", cam), origins[lo:hi])
    return out


def build_imitated_dataset(engine: StyleEngine | None, source: DomainDataset, target_cams: Sequence[int],
                           materialize: bool = True, batch_size: int = 64) -> DomainDataset:
    """Every source image re-rendered in every target camera style; identities kept."""
    target_cams = list(target_cams)
    if not target_cams:
        raise ValueError("target camera set is empty")
    records = [ImageRecord(_generated_name(r, "st", c), r.person_id, c, "ST", r, c)
               for r in source.records for c in target_cams]
    pixels = None
    if materialize and len(source):
        if engine is None:
            raise ValueError("materializing needs a style engine")
        pixels = _restyle(engine, source, target_cams, "S", batch_size)
    return DomainDataset(records, pixels, image_size=source.image_size, name="ST")


def build_pseudo_dataset(engine: StyleEngine | None, target: DomainDataset,
                         materialize: bool = True, batch_size: int = 64) -> DomainDataset:
    """Every target image re-rendered in every target camera style, its own included."""
    if len(target) == 0:
        raise ValueError("target dataset is empty")
    cams = target.cameras
    records = [ImageRecord(_generated_name(r, "tt", c), UNLABELLED, c, "TT", r, c)
               for r in target.records for c in cams]
    pixels = None
    if materialize:
        if engine is None:
            raise ValueError("materializing needs a style engine")
        pixels = _restyle(engine, target, cams, "T", batch_size)
    return DomainDataset(records, pixels, image_size=target.image_size, name="TT")
