"""End-to-end optimisation of the combined classification + commonality objective."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .losses import (LossWeights, batch_hard_triplet_loss, cross_entropy_loss, dual_classification_loss,
                     total_loss, total_triplet_loss)
from .model import ModelConfig, ReIDModel, images_to_tensor, init_model
from .sampling import BatchRecipe, StepBatch, StreamSampler, TrainData

log = logging.getLogger(__name__)

LOSS_KEYS = ("cls_s", "cls_stt", "tri_s", "tri_st", "tri_ttt", "total")
METRIC_COLUMNS = ("step", "epoch", "lr") + LOSS_KEYS + ("wall_time",)


@dataclass
class Schedule:
    base_lr_new: float = 0.1
    base_lr_backbone: float = 0.01
    decay_factor: float = 0.1
    decay_period: int = 40
    total_epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps_per_epoch: int = 0  # 0: ceil(N^s / class_src)
    save_every: int = 0       # 0: only the final epoch

    def __post_init__(self):
        if self.decay_period <= 0 or self.total_epochs <= 0:
            raise ValueError("decay_period and total_epochs must be positive")


def lr_at(epoch: int, base_lr: float, decay_factor: float = 0.1, decay_period: int = 40) -> float:
    """Step decay ``base_lr * decay_factor ** (epoch // decay_period)``, rounded in decimal."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // decay_period
    return float(Decimal(repr(base_lr)) * Decimal(repr(decay_factor)) ** k)


# --- loss evaluation ---------------------------------------------------------

@dataclass
class BatchTensors:
    images: torch.Tensor
    slices: dict
    cls_labels: torch.Tensor
    tri_s_labels: torch.Tensor | None
    tri_st_labels: torch.Tensor | None
    ttt_labels: torch.Tensor | None


def prepare_batch(data: TrainData, batch: StepBatch, dtype=torch.float32) -> BatchTensors:
    """Stack the images of every stream for a single forward pass."""
    parts = [("cls_s", data.source, batch.cls_s), ("cls_st", data.imitated, batch.cls_st),
             ("cofwd_t", data.target, batch.cofwd_t)]
    if batch.ttt is not None:
        parts += [("tri_s", data.source, batch.tri_s), ("tri_st", data.imitated, batch.tri_st),
                  ("ttt_t", data.target, batch.ttt.t_indices), ("ttt_tt", data.pseudo, batch.ttt.tt_indices)]
    arrays, slices, lo = [], {}, 0
    for name, ds, idx in parts:
        if idx is None or len(idx) == 0:
            continue
        arrays.append(ds.images(idx))
        slices[name] = slice(lo, lo + len(idx))
        lo += len(idx)
    images = images_to_tensor(np.concatenate(arrays), dtype)
    as_t = lambda a: None if a is None else torch.as_tensor(a, dtype=torch.long)
    return BatchTensors(images, slices, as_t(batch.cls_labels), as_t(batch.tri_s_labels),
                        as_t(batch.tri_st_labels), None if batch.ttt is None else as_t(batch.ttt.labels))


def compute_losses(model: ReIDModel, bt: BatchTensors, w: LossWeights, out=None) -> dict[str, torch.Tensor]:
    out = model(bt.images) if out is None else out
    zero = out.logits.new_zeros(())
    sl = bt.slices
    n_s = sl["cls_s"].stop - sl["cls_s"].start if "cls_s" in sl else 0
    losses = dict.fromkeys(LOSS_KEYS, zero)
    if "cls_s" in sl:
        losses["cls_s"] = cross_entropy_loss(out.logits[sl["cls_s"]], bt.cls_labels[:n_s])
    if "cls_st" in sl:
        losses["cls_stt"] = cross_entropy_loss(out.logits[sl["cls_st"]], bt.cls_labels[n_s:])
    if "tri_s" in sl:
        e = out.emb128
        losses["tri_s"] = batch_hard_triplet_loss(e[sl["tri_s"]], bt.tri_s_labels, w.margin)
        losses["tri_st"] = batch_hard_triplet_loss(e[sl["tri_st"]], bt.tri_st_labels, w.margin)
        ttt = torch.cat([e[sl["ttt_t"]], e[sl["ttt_tt"]]])
        losses["tri_ttt"] = batch_hard_triplet_loss(ttt, bt.ttt_labels, w.margin)
    dual = dual_classification_loss(losses["cls_s"], losses["cls_stt"], w.alpha)
    tri = total_triplet_loss(losses["tri_s"], losses["tri_st"], losses["tri_ttt"], w.beta1, w.beta2, w.beta3)
    losses["total"] = total_loss(dual, tri, w.gamma1, w.gamma2)
    return losses


# --- optimisation ------------------------------------------------------------

def make_optimizer(model: ReIDModel, schedule: Schedule) -> torch.optim.SGD:
    backbone, new = model.param_groups()
    groups = [{"params": backbone, "name": "backbone"}, {"params": new, "name": "new"}]
    opt = torch.optim.SGD(groups, lr=schedule.base_lr_new, momentum=schedule.momentum,
                          weight_decay=schedule.weight_decay)
    set_epoch_lr(opt, model, schedule, 0)
    return opt


def set_epoch_lr(opt: torch.optim.Optimizer, model: ReIDModel, schedule: Schedule, epoch: int) -> float:
    # two learning rates only make sense when the backbone starts from pretrained weights
    pretrained = model.cfg.pretrained
    for g in opt.param_groups:
        base = schedule.base_lr_backbone if (g["name"] == "backbone" and pretrained) else schedule.base_lr_new
        g["lr"] = lr_at(epoch, base, schedule.decay_factor, schedule.decay_period)
    return lr_at(epoch, schedule.base_lr_new, schedule.decay_factor, schedule.decay_period)


class NonFiniteLoss(FloatingPointError):
    pass


def train_epoch(model: ReIDModel, opt: torch.optim.Optimizer, data: TrainData, sampler: StreamSampler,
                weights: LossWeights, schedule: Schedule, epoch: int, steps: int, step_offset: int = 0,
                metrics_fh=None, dump_dir: Path | None = None) -> list[dict]:
    """Run ``steps`` optimisation steps; returns the logged loss components per step."""
    lr = set_epoch_lr(opt, model, schedule, epoch)
    model.train()
    rows = []
    for s in range(steps):
        batch = sampler.draw(weights.uses_imitated, weights.uses_triplets)
        bt = prepare_batch(data, batch, next(model.parameters()).dtype)
        losses = compute_losses(model, bt, weights)
        if not all(math.isfinite(v.item()) for v in losses.values()):
            msg = f"non-finite loss at step {step_offset + s}: { {k: v.item() for k, v in losses.items()} }"
            if dump_dir is not None:
                dump = Path(dump_dir) / f"bad_batch_step{step_offset + s}.txt"
                dump.write_text(batch.manifest(data) + "\n")
                msg += f"; batch manifest written to {dump}"
            raise NonFiniteLoss(msg)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        row = {"step": step_offset + s, "epoch": epoch, "lr": lr, **{k: v.item() for k, v in losses.items()},
               "wall_time": time.time()}
        rows.append(row)
        if metrics_fh is not None:
            metrics_fh.write(format_metrics_row(row) + "\n")
    if metrics_fh is not None:
        metrics_fh.flush()
    return rows


def format_metrics_row(row: dict) -> str:
    vals = [str(row["step"]), str(row["epoch"]), repr(row["lr"])]
    vals += [repr(row[k]) for k in LOSS_KEYS]
    vals.append(f"{row['wall_time']:.3f}")
    return "\t".join(vals)


def steps_per_epoch(data: TrainData, recipe: BatchRecipe, schedule: Schedule) -> int:
    if schedule.steps_per_epoch > 0:
        return schedule.steps_per_epoch
    return max(1, math.ceil(len(data.source) / max(recipe.class_src, 1)))


def config_hash(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(run_dir: Path, model: ReIDModel, opt, sampler: StreamSampler, epoch: int, cfg_hash: str) -> Path:
    """Write ``<run>/ckpt_epoch<epoch>`` atomically (temp directory, then rename)."""
    final = Path(run_dir) / f"ckpt_epoch{epoch}"
    tmp = Path(run_dir) / f".ckpt_epoch{epoch}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(),
                "sampler_rng": sampler.rng.bit_generator.state, "epoch": epoch}, tmp / "model.pt")
    (tmp / "model.txt").write_text(json.dumps({
        "backbone": model.cfg.backbone, "pool_dim": model.pool_dim, "num_classes": model.cfg.num_classes,
        "config_hash": cfg_hash, "epoch": epoch, "model_config": asdict(model.cfg)}, indent=2) + "\n")
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def load_model(ckpt_dir: str | Path) -> ReIDModel:
    ckpt_dir = Path(ckpt_dir)
    header = json.loads((ckpt_dir / "model.txt").read_text())
    model = init_model(ModelConfig(**header["model_config"]))
    state = torch.load(ckpt_dir / "model.pt", map_location="cpu", weights_only=False)
    model.load_state_dict(state["model"])
    return model.eval()


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    ckpts = sorted(Path(run_dir).glob("ckpt_epoch*"), key=lambda p: int(p.name[len("ckpt_epoch"):]))
    return ckpts[-1] if ckpts else None


@dataclass
class TrainResult:
    model: ReIDModel
    history: list[dict]
    checkpoint: Path | None
    start_epoch: int


def run_training(data: TrainData, model_cfg: ModelConfig, weights: LossWeights, recipe: BatchRecipe,
                 schedule: Schedule, seed: int, run_dir: str | Path | None = None,
                 resume: str | Path | None = None, cfg_hash: str = "") -> TrainResult:
    """Train for ``schedule.total_epochs`` epochs, optionally resuming from a checkpoint.

    A checkpoint saved after epoch ``k`` holds ``epoch = k + 1``, the next epoch to run.
    """
    if weights.uses_imitated and data.imitated is None:
        raise ValueError("alpha > 0 needs the imitated (ST) dataset")
    if weights.uses_triplets and (data.imitated is None or data.pseudo is None):
        raise ValueError("triplet terms need both the ST and TT datasets")
    if model_cfg.num_classes != data.num_classes:
        raise ValueError(f"model has {model_cfg.num_classes} classes, source has {data.num_classes}")
    cfg_hash = cfg_hash or config_hash(model_cfg, weights, recipe, schedule, seed)
    model = init_model(model_cfg)
    opt = make_optimizer(model, schedule)
    sampler = StreamSampler(data, recipe, seed)
    start = 0
    if resume is not None:
        state = torch.load(Path(resume) / "model.pt", map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sampler.rng.bit_generator.state = state["sampler_rng"]
        start = state["epoch"]

    n_steps = steps_per_epoch(data, recipe, schedule)
    run_dir = Path(run_dir) if run_dir is not None else None
    fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "metrics.log", "a" if resume is not None else "w")
        if resume is None:
            fh.write("#" + "\t".join(METRIC_COLUMNS) + "\n")
    history, ckpt = [], None
    try:
        for epoch in range(start, schedule.total_epochs):
            rows = train_epoch(model, opt, data, sampler, weights, schedule, epoch, n_steps,
                               epoch * n_steps, fh, run_dir)
            history.extend(rows)
            last = epoch + 1 == schedule.total_epochs
            if run_dir is not None and (last or (schedule.save_every and (epoch + 1) % schedule.save_every == 0)):
                ckpt = save_checkpoint(run_dir, model, opt, sampler, epoch + 1, cfg_hash)
            log.info("epoch %d: total=%.4f", epoch, rows[-1]["total"])
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model.eval(), history, ckpt, start)


# --- numerical verification --------------------------------------------------

class _KinkRecorder:
    """Records which branch every non-smooth op took during one forward pass.

    ReLU activity masks, max-pool argmax positions and, for each triplet term,
    the mined (positive, negative) pairs plus hinge activity. Two passes with
    equal records lie on the same smooth piece of the loss surface.
    """

    def __init__(self, model: ReIDModel):
        self.record: list[torch.Tensor] = []
        self.handles = []
        for mod in model.modules():
            if isinstance(mod, torch.nn.ReLU):
                self.handles.append(mod.register_forward_hook(self._relu))
            elif isinstance(mod, torch.nn.MaxPool2d):
                self.handles.append(mod.register_forward_hook(self._pool))

    def _relu(self, mod, inp, out):
        self.record.append(out > 0)

    def _pool(self, mod, inp, out):
        _, idx = F.max_pool2d(inp[0], mod.kernel_size, mod.stride, mod.padding, mod.dilation,
                              ceil_mode=mod.ceil_mode, return_indices=True)
        self.record.append(idx)

    def run(self, model: ReIDModel, bt: BatchTensors, w: LossWeights) -> tuple[float, list[torch.Tensor]]:
        self.record = []
        with torch.no_grad():
            out = model(bt.images)
            loss = float(compute_losses(model, bt, w, out)["total"])
        sig = self.record
        sl = bt.slices
        if "tri_s" in sl:
            e = out.emb128
            groups = [(e[sl["tri_s"]], bt.tri_s_labels), (e[sl["tri_st"]], bt.tri_st_labels),
                      (torch.cat([e[sl["ttt_t"]], e[sl["ttt_tt"]]]), bt.ttt_labels)]
            for emb, labels in groups:
                _, info = batch_hard_triplet_loss(emb, labels, w.margin, return_info=True)
                sig += [info.positive, info.negative, info.per_anchor > 0]
        return loss, sig

    def close(self):
        for h in self.handles:
            h.remove()


def _same_piece(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_kink_skipped: int
    errors: list[float]
    # errors on the skipped draws, kept for inspection only
    kink_errors: list[float]
    loss_terms: dict[str, float]


def finite_difference_check(model: ReIDModel, data: TrainData, batch: StepBatch, weights: LossWeights,
                            eps: float = 1e-3, n_params: int = 50, seed: int = 0,
                            return_report: bool = False, max_draws: int | None = None):
    """Max relative error between autograd and central differences of the total loss.

    Runs on a float64 copy of ``model`` in training mode; relative errors use
    ``|a - n| / max(|a|, |n|, 1e-8)``. ReLU, max-pool and batch-hard mining make
    the loss piecewise smooth, and a central difference whose stencil crosses a
    piece boundary does not estimate the derivative. Such draws are detected by
    comparing branch records at theta and theta +- eps, counted, and replaced by
    the next random parameter until ``n_params`` have been compared.
    """
    m = copy.deepcopy(model).double().train()
    bt = prepare_batch(data, batch, torch.float64)
    params = [p for p in m.parameters() if p.requires_grad]
    rec = _KinkRecorder(m)
    try:
        base, base_sig = rec.run(m, bt, weights)
        again, again_sig = rec.run(m, bt, weights)
        if base != again or not _same_piece(base_sig, again_sig):
            raise RuntimeError("model is not deterministic; disable stochastic layers first")
        m.zero_grad()
        terms = compute_losses(m, bt, weights)
        terms["total"].backward()
        loss_terms = {k: v.item() for k, v in terms.items()}

        sizes = np.asarray([p.numel() for p in params])
        bounds = np.cumsum(sizes)
        total = int(sizes.sum())
        max_draws = total if max_draws is None else min(max_draws, total)
        order = np.random.default_rng(seed).permutation(total)[:max_draws]
        errors, kink_errors = [], []
        for k in order:
            if len(errors) >= n_params:
                break
            pi = int(np.searchsorted(bounds, k, side="right"))
            j = int(k - (bounds[pi - 1] if pi else 0))
            p = params[pi]
            analytic = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
            with torch.no_grad():
                orig = float(p.view(-1)[j])
                p.view(-1)[j] = orig + eps
                up, up_sig = rec.run(m, bt, weights)
                p.view(-1)[j] = orig - eps
                down, down_sig = rec.run(m, bt, weights)
                p.view(-1)[j] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if _same_piece(up_sig, base_sig) and _same_piece(down_sig, base_sig):
                errors.append(err)
            else:
                kink_errors.append(err)
    finally:
        rec.close()
    if len(errors) < n_params:
        raise RuntimeError(f"only {len(errors)} of {n_params} parameters had a smooth stencil "
                           f"({len(kink_errors)} crossed a kink); use a smaller eps")
    report = GradCheckReport(max(errors, default=0.0), len(errors), len(kink_errors), errors, kink_errors,
                             loss_terms)
    return report if return_report else report.max_rel_error
