"""Two-branch re-ID network: backbone -> pooled descriptor -> embedding-1024 -> {classifier, embedding-128}."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .data import DomainDataset

BACKBONES = ("desk", "resnet50")


@dataclass
class ModelConfig:
    num_classes: int
    backbone: str = "desk"
    pretrained: bool = False
    image_size: tuple[int, int] = (64, 32)
    desk_channels: tuple[int, ...] = (8, 16, 32, 64)
    emb_dim: int = 1024
    common_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.desk_channels = tuple(self.desk_channels)


class ForwardOutput(NamedTuple):
    pool_feat: torch.Tensor
    emb1024: torch.Tensor
    logits: torch.Tensor
    emb128: torch.Tensor


def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True), nn.MaxPool2d(2))


class DeskBackbone(nn.Module):
    def __init__(self, channels=(8, 16, 32, 64)):
        super().__init__()
        blocks, cin = [], 3
        for c in channels:
            blocks.append(_conv_block(cin, c))
            cin = c
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = cin

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class ResNet50Backbone(nn.Module):
    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50
        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        self.features = nn.Sequential(*list(net.children())[:-2])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = 2048

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class ReIDModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "desk":
            self.backbone = DeskBackbone(cfg.desk_channels)
        elif cfg.backbone == "resnet50":
            self.backbone = ResNet50Backbone(cfg.pretrained)
        else:
            raise ValueError(f"unknown backbone {cfg.backbone!r}; expected one of {BACKBONES}")
        d = self.backbone.out_dim
        self.emb1024 = nn.Sequential(nn.Linear(d, cfg.emb_dim), nn.BatchNorm1d(cfg.emb_dim), nn.ReLU(inplace=True))
        self.classifier = nn.Linear(cfg.emb_dim, cfg.num_classes)
        self.emb128 = nn.Linear(cfg.emb_dim, cfg.common_dim)
        self._init_new_layers()

    @property
    def pool_dim(self) -> int:
        return self.backbone.out_dim

    def _init_new_layers(self):
        # kaiming for the embedding layers, small normal for the identity classifier
        for m in (self.emb1024[0], self.emb128):
            nn.init.kaiming_normal_(m.weight, mode="fan_out")
            nn.init.zeros_(m.bias)
        nn.init.ones_(self.emb1024[1].weight)
        nn.init.zeros_(self.emb1024[1].bias)
        nn.init.normal_(self.classifier.weight, std=0.001)
        nn.init.zeros_(self.classifier.bias)

    def param_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(pretrained backbone parameters, newly added parameters)."""
        backbone = list(self.backbone.parameters())
        ids = {id(p) for p in backbone}
        return backbone, [p for p in self.parameters() if id(p) not in ids]

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.cfg.image_size:
            raise ValueError(f"expected N x 3 x {self.cfg.image_size[0]} x {self.cfg.image_size[1]} images, "
                             f"got {tuple(x.shape)}")
        pool = self.backbone(x)
        e = self.emb1024(pool)
        return ForwardOutput(pool, e, self.classifier(e), self.emb128(e))


def init_model(cfg: ModelConfig) -> ReIDModel:
    """Build a model with parameters drawn from ``cfg.seed`` (global RNG state untouched)."""
    if cfg.num_classes <= 1:
        raise ValueError("need more than one source identity")
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return ReIDModel(cfg)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """NHWC numpy in [-1, 1] -> NCHW tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))).to(dtype)


def forward_features(model: ReIDModel, images, mode: str = "eval") -> ForwardOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    model.train(mode == "train")
    if isinstance(images, np.ndarray):
        images = images_to_tensor(images, next(model.parameters()).dtype)
    if mode == "eval":
        with torch.no_grad():
            return model(images)
    return model(images)


@torch.no_grad()
def extract_descriptor(model: ReIDModel, ds: DomainDataset, batch_size: int = 256) -> np.ndarray:
    """Pooled backbone descriptors (``N x D_pool``, float64) in record order."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = []
    for lo in range(0, len(ds), batch_size):
        x = images_to_tensor(ds.images(range(lo, min(len(ds), lo + batch_size))), dtype)
        rows.append(model(x).pool_feat.double().numpy())
    model.train(was_training)
    if not rows:
        return np.zeros((0, model.pool_dim))
    return np.concatenate(rows)
