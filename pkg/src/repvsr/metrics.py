"""PSNR, the challenge score, and a wall-clock inference benchmark.

PSNR convention: float RGB in [0, 1] with MAX = 1, MSE over the three
channels of one frame, then the arithmetic mean over frames. No 8-bit
quantisation and no luma conversion.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ShapeError

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SCORE_PSNR_OFFSET = 27.0


@dataclass
class EvalReport:
    per_frame_psnr: List[float]
    mean_psnr: float
    frames: int

    def to_dict(self):
        return asdict(self)


@dataclass
class BenchResult:
    runtime_ms: float
    trials: int
    warmup_runs: int
    dims: Tuple[int, int, int, int]
    samples_ms: List[float] = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def psnr_from_mse(mse: float) -> float:
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def frame_psnrs(pred: np.ndarray, gt: np.ndarray) -> List[float]:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim != 4 or pred.shape[1] % 3:
        raise ShapeError(f"expected (n, 3*T, h, w) clips, got {pred.shape}")
    n, c, h, w = pred.shape
    diff = (np.asarray(pred, np.float64) - np.asarray(gt, np.float64)).reshape(n * c // 3, 3 * h * w)
    mses = np.mean(diff * diff, axis=1)
    return [psnr_from_mse(float(m)) for m in mses]


def evaluate(pred: np.ndarray, gt: np.ndarray) -> EvalReport:
    values = frame_psnrs(pred, gt)
    mean = float(np.mean(values)) if values else float("nan")
    return EvalReport(values, mean, len(values))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-frame PSNR in dB over every 3-channel frame of the clips."""
    return evaluate(pred, gt).mean_psnr


def merge_reports(reports) -> EvalReport:
    values = [v for r in reports for v in r.per_frame_psnr]
    return EvalReport(values, float(np.mean(values)) if values else float("nan"), len(values))


def score_formula(psnr_db: float, runtime_ms: float) -> float:
    """Challenge score 2^(2 (PSNR - 27)) / runtime_ms."""
    if not runtime_ms > 0:
        raise ValueError(f"runtime must be positive, got {runtime_ms}")
    return 2.0 ** (2.0 * (psnr_db - SCORE_PSNR_OFFSET)) / runtime_ms


def bench_forward(params, dims=(1, 30, 180, 320), trials: int = 10, warmup: int = 2,
                  seed: int = 0) -> BenchResult:
    """Median wall-clock of ``forward_clip`` on a fixed random clip.

    Callers must not run other engine work concurrently while timing.
    """
    from .network import forward_clip

    if trials < 3:
        raise ValueError(f"trials must be >= 3, got {trials}")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    clip = rng.random(dims).astype(params.dtype)
    for _ in range(warmup):
        forward_clip(clip, params, deploy=True)
    samples = []
    for _ in range(trials):
        start = time.perf_counter()
        forward_clip(clip, params, deploy=True)
        samples.append((time.perf_counter() - start) * 1e3)
    return BenchResult(statistics.median(samples), trials, warmup, dims, samples)
