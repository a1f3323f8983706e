"""Minibatch training: L2 loss, Adam, warmup + linear decay, random patches."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autograd import GradTape
from .clipio import find_clips, load_clip, downscale
from .errors import DataError, ShapeError, TrainingDivergedError
from .metrics import evaluate, merge_reports
from .network import BRANCHED, NetParams, forward_clip, forward_frame, frames_to_batch, fuse_network

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_epochs: float = 500
    total_epochs: int = 5000
    lr_floor: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hr_patch: int = 384
    lr_patch: int = 96
    batch_size: int = 16
    batches_per_epoch: int = 10
    seed: int = 0
    lam: float = 0.0

    def __post_init__(self):
        if self.lr_patch * 4 != self.hr_patch:
            raise ValueError(f"hr_patch ({self.hr_patch}) must be 4 x lr_patch ({self.lr_patch})")
        if not self.lr_floor < self.lr_peak and self.lr_peak != 0:
            raise ValueError("lr_floor must be below lr_peak")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.batch_size < 1 or self.batches_per_epoch < 1 or self.total_epochs < 1:
            raise ValueError("batch_size, batches_per_epoch and total_epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Patch sizes and schedule shrunk for single-CPU runs."""
        base = dict(lr_patch=24, hr_patch=96, warmup_epochs=50, total_epochs=500)
        base.update(overrides)
        return cls(**base)

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.batches_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read training config {path}: {exc}") from exc


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over the warmup, then linear decay to lr_floor.

    A zero ``lr_peak`` freezes training entirely (the floor is not applied).
    """
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.lr_peak == 0:
        return 0.0
    if cfg.warmup_epochs > 0 and epoch <= cfg.warmup_epochs:
        return cfg.lr_peak * epoch / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    if span == 0:
        return cfg.lr_peak
    frac = (epoch - cfg.warmup_epochs) / span
    return cfg.lr_peak + (cfg.lr_floor - cfg.lr_peak) * frac


def l2_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff


def objective(loss: float, flops: int, lam: float) -> float:
    """FLOPs-regularised objective: loss + lambda * GFLOPs."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return loss + lam * flops / 1e9


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; returns (new_params, new_state)."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (p - step).astype(p.dtype, copy=False)
        m_new[name], v_new[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class ClipDataset:
    """Paired HR/LR clips held in memory as (1, 3T, h, w) arrays."""

    hr: List[np.ndarray]
    lr: List[np.ndarray]
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.hr) != len(self.lr):
            raise DataError("HR and LR clip counts differ")
        for h, l in zip(self.hr, self.lr):
            if h.shape[:2] != l.shape[:2] or h.shape[2] != 4 * l.shape[2] or h.shape[3] != 4 * l.shape[3]:
                raise DataError(f"HR clip {h.shape} is not 4x LR clip {l.shape}")

    def __len__(self):
        return len(self.hr)

    def astype(self, dtype) -> "ClipDataset":
        return ClipDataset([c.astype(dtype) for c in self.hr], [c.astype(dtype) for c in self.lr], self.names)

    @classmethod
    def from_dir(cls, root, dtype=None) -> "ClipDataset":
        """Load ``root/hr`` (+ ``root/lr`` if present; otherwise bicubic-derived)."""
        root = Path(root)
        hr_root = root / "hr" if (root / "hr").is_dir() else root
        lr_root = root / "lr" if (root / "lr").is_dir() else None
        hr, lr, names = [], [], []
        for clip_dir in find_clips(hr_root):
            rel = clip_dir.relative_to(hr_root)
            hr_clip = load_clip(clip_dir, dtype)
            if lr_root is not None:
                lr_clip = load_clip(lr_root / rel, dtype)
            else:
                lr_clip = downscale(hr_clip).astype(hr_clip.dtype)
            hr.append(hr_clip)
            lr.append(lr_clip)
            names.append(str(rel))
        return cls(hr, lr, names)


def sample_patch_pair(lr_clip: np.ndarray, hr_clip: np.ndarray, cfg: TrainConfig,
                      rng: np.random.Generator, scale: int = 4):
    """Random aligned LR/HR crops; the HR crop sits at ``scale`` x the LR offset."""
    lh, lw = lr_clip.shape[2:]
    if hr_clip.shape[2] != scale * lh or hr_clip.shape[3] != scale * lw:
        raise ShapeError(f"HR clip {hr_clip.shape} is not {scale}x LR clip {lr_clip.shape}")
    p = cfg.lr_patch
    if lh < p or lw < p:
        raise ShapeError(f"LR clip {lh}x{lw} smaller than patch {p}; lower lr_patch/hr_patch")
    y = int(rng.integers(0, lh - p + 1))
    x = int(rng.integers(0, lw - p + 1))
    lr_patch = lr_clip[:, :, y:y + p, x:x + p]
    hr_patch = hr_clip[:, :, scale * y:scale * (y + p), scale * x:scale * (x + p)]
    return np.ascontiguousarray(lr_patch), np.ascontiguousarray(hr_patch)


def sample_batch(dataset: ClipDataset, cfg: TrainConfig, rng: np.random.Generator):
    """``batch_size`` single-frame patch pairs as (B, 3, p, p) / (B, 3, 4p, 4p)."""
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        idx = int(rng.integers(len(dataset)))
        lr_p, hr_p = sample_patch_pair(dataset.lr[idx], dataset.hr[idx], cfg, rng)
        lr_frames, hr_frames = frames_to_batch(lr_p), frames_to_batch(hr_p)
        f = int(rng.integers(lr_frames.shape[0]))
        # Random flips/transposes keep the data distribution symmetric.
        k = int(rng.integers(8))
        lrs.append(_augment(lr_frames[f], k))
        hrs.append(_augment(hr_frames[f], k))
    return np.ascontiguousarray(np.stack(lrs)), np.ascontiguousarray(np.stack(hrs))


def _augment(img: np.ndarray, k: int) -> np.ndarray:
    if k & 1:
        img = img[:, :, ::-1]
    if k & 2:
        img = img[:, ::-1, :]
    if k & 4:
        img = img.transpose(0, 2, 1)
    return img


def loss_and_grads(params: NetParams, lr_batch: np.ndarray, hr_batch: np.ndarray):
    tape = GradTape()
    out = forward_frame(tape.watch(lr_batch), params, ops=tape)
    loss, g = l2_loss(out.data, hr_batch)
    grads = tape.backward(out, g.astype(out.data.dtype, copy=False))
    return loss, grads.as_arrays()


def validate(params: NetParams, dataset: Optional[ClipDataset]):
    """Deploy-mode (loss, PSNR) over full clips; fused for speed."""
    if dataset is None or len(dataset) == 0:
        return float("nan"), float("nan")
    net = fuse_network(params) if params.mode == BRANCHED else params
    reports, sq, count = [], 0.0, 0
    for lr_clip, hr_clip in zip(dataset.lr, dataset.hr):
        pred = forward_clip(lr_clip.astype(net.dtype), net, deploy=True)
        reports.append(evaluate(pred, hr_clip))
        diff = pred.astype(np.float64) - hr_clip
        sq += float(np.sum(diff * diff))
        count += diff.size
    return sq / count, merge_reports(reports).mean_psnr


@dataclass
class TrainResult:
    params: NetParams
    curve: List[dict]
    steps: int


def train(params: NetParams, dataset: ClipDataset, cfg: TrainConfig,
          val: Optional[ClipDataset] = None, val_every: int = 1) -> TrainResult:
    """Run ``cfg.total_epochs`` x ``cfg.batches_per_epoch`` Adam steps."""
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if params.mode != BRANCHED:
        raise ValueError("train on branched parameters; fuse afterwards")
    dataset = dataset.astype(params.dtype)
    rng = np.random.default_rng(cfg.seed)
    arrays = dict(params.to_arrays())
    state = AdamState.zeros_like(arrays)
    curve = []
    step = 0
    for epoch in range(cfg.total_epochs):
        losses = []
        lr = 0.0
        for _ in range(cfg.batches_per_epoch):
            step += 1
            lr = lr_at(step / cfg.batches_per_epoch, cfg)
            lr_batch, hr_batch = sample_batch(dataset, cfg, rng)
            loss, grads = loss_and_grads(params, lr_batch, hr_batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            losses.append(loss)
            arrays, state = adam_step(arrays, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            params = params.with_arrays(arrays)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_psnr": float("nan")}
        if val is not None and ((epoch + 1) % val_every == 0 or epoch + 1 == cfg.total_epochs):
            row["val_psnr"] = validate(params, val)[1]
        curve.append(row)
        logger.debug("epoch %d lr %.3g loss %.6f val %.3f", row["epoch"], lr, row["train_loss"], row["val_psnr"])
    return TrainResult(params, curve, step)


def write_curve_csv(curve: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_psnr"])
        writer.writeheader()
        for row in curve:
            writer.writerow(row)


def bicubic_baseline(dataset: ClipDataset) -> float:
    """Mean PSNR of plain bicubic x4 upsampling over the dataset."""
    from .clipio import upscale

    return merge_reports([evaluate(upscale(l), h) for l, h in zip(dataset.lr, dataset.hr)]).mean_psnr
