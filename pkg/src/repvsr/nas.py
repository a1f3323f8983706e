"""Architecture search over channel width and block count.

The space is the (nc, nb) grid; every candidate is short-trained (or scored
by an analytic stand-in), then ranked by the challenge score or by the
FLOPs-regularised objective ``val_loss + lambda * GFLOPs``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import TrainingDivergedError
from .metrics import bench_forward, score_formula
from .network import FUSED, NetConfig, count_flops, count_params_config, fuse_network, init_params
from .trainer import ClipDataset, TrainConfig, objective, train, validate

logger = logging.getLogger(__name__)

CHALLENGE_H, CHALLENGE_W = 180, 320
REPORT_COLUMNS = ["nc", "nb", "params", "flops", "val_psnr", "runtime_ms", "objective", "score"]


@dataclass(frozen=True)
class SearchSpace:
    nc_choices: tuple = tuple(range(1, 33))
    nb_choices: tuple = tuple(range(0, 9))
    # Fixed axes of the space; recorded for reports, never searched.
    conv_type: str = field(default="normal", init=False)
    kernel: int = field(default=3, init=False)
    activation: str = field(default="relu", init=False)

    def __post_init__(self):
        object.__setattr__(self, "nc_choices", tuple(int(v) for v in self.nc_choices))
        object.__setattr__(self, "nb_choices", tuple(int(v) for v in self.nb_choices))
        if not self.nc_choices or not self.nb_choices:
            raise ValueError("search space choice sets must be non-empty")
        if min(self.nc_choices) < 1:
            raise ValueError("nc choices must be >= 1 (a 0-channel network is not evaluable)")
        if min(self.nb_choices) < 0:
            raise ValueError("nb choices must be >= 0")

    @property
    def size(self) -> int:
        return len(self.nc_choices) * len(self.nb_choices)

    @classmethod
    def parse(cls, text: str) -> "SearchSpace":
        """Parse ``"nc=4,8,16;nb=1-4"`` (comma lists and inclusive ranges)."""
        values = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            key, _, spec = part.partition("=")
            key = key.strip()
            if key not in ("nc", "nb") or not spec:
                raise ValueError(f"bad search-space clause {part!r}; expected nc=... or nb=...")
            items = []
            for tok in spec.split(","):
                tok = tok.strip()
                if "-" in tok:
                    lo, hi = (int(t) for t in tok.split("-", 1))
                    items.extend(range(lo, hi + 1))
                else:
                    items.append(int(tok))
            values[f"{key}_choices"] = tuple(dict.fromkeys(items))
        return cls(**values)


@dataclass
class Candidate:
    nc: int
    nb: int
    params: int = 0
    flops: int = 0
    val_psnr: float = math.nan
    val_loss: float = math.nan
    runtime_ms: float = math.nan
    objective: float = math.nan
    score: float = math.nan
    failed: bool = False
    error: str = ""

    def to_dict(self):
        return asdict(self)


def enumerate_candidates(space: SearchSpace, strategy: str = "grid", n: Optional[int] = None,
                         seed: int = 0) -> List[Candidate]:
    """Grid (nc-major cross product) or ``n`` distinct seeded random draws."""
    grid = [(nc, nb) for nc in space.nc_choices for nb in space.nb_choices]
    if strategy == "grid":
        picks = grid
    elif strategy == "random":
        if n is None or n < 1:
            raise ValueError("random search needs n >= 1")
        if n > len(grid):
            raise ValueError(f"cannot draw {n} distinct candidates from a space of {len(grid)}")
        idx = np.random.default_rng(seed).choice(len(grid), size=n, replace=False)
        picks = [grid[i] for i in idx]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return [Candidate(nc, nb) for nc, nb in picks]


@dataclass
class MockEvaluator:
    """Analytic stand-in: PSNR = a - b / (nc (nb + 1)); runtime linear in GFLOPs.

    The validation loss is the MSE implied by the PSNR (MAX = 1).
    """

    a: float = 28.2
    b: float = 12.0
    runtime_offset_ms: float = 10.0
    ms_per_gflop: float = 6.3
    height: int = CHALLENGE_H
    width: int = CHALLENGE_W

    def __call__(self, cand: Candidate, cfg: NetConfig):
        psnr = self.a - self.b / (cand.nc * (cand.nb + 1))
        flops = count_flops(cfg, FUSED, self.height, self.width)
        runtime = self.runtime_offset_ms + self.ms_per_gflop * flops / 1e9
        return psnr, 10.0 ** (-psnr / 10.0), runtime


@dataclass
class TrainingEvaluator:
    """Short-train each candidate and time its fused forward pass.

    ``runtime="bench"`` measures wall clock on this host (non-deterministic);
    ``runtime="flops"`` uses ``ms_per_gflop * GFLOPs`` so reports are
    reproducible byte for byte.
    """

    dataset: ClipDataset
    val: ClipDataset
    train_cfg: TrainConfig
    runtime: str = "flops"
    ms_per_gflop: float = 7.1
    bench_dims: Sequence[int] = (1, 30, CHALLENGE_H, CHALLENGE_W)
    bench_trials: int = 3
    seed: int = 0

    def __call__(self, cand: Candidate, cfg: NetConfig):
        params = init_params(cfg, seed=self.seed)
        result = train(params, self.dataset, self.train_cfg, val=None)
        val_loss, val_psnr = validate(result.params, self.val)
        if self.runtime == "bench":
            fused = fuse_network(result.params)
            runtime = bench_forward(fused, self.bench_dims, trials=self.bench_trials, warmup=1).runtime_ms
        elif self.runtime == "flops":
            runtime = self.ms_per_gflop * count_flops(cfg, FUSED, CHALLENGE_H, CHALLENGE_W) / 1e9
        else:
            raise ValueError(f"unknown runtime source {self.runtime!r}")
        return val_psnr, val_loss, runtime


def evaluate_candidate(cand: Candidate, evaluator, lam: float = 0.0, frames: int = 10) -> Candidate:
    """Fill PSNR, FLOPs, runtime, objective and score; failures are recorded."""
    cfg = NetConfig(nc=cand.nc, nb=cand.nb, frames=frames)
    out = Candidate(cand.nc, cand.nb)
    out.params = count_params_config(cfg, FUSED)
    out.flops = count_flops(cfg, FUSED, CHALLENGE_H, CHALLENGE_W)
    try:
        psnr, loss, runtime = evaluator(cand, cfg)
        if not (math.isfinite(psnr) and math.isfinite(loss)):
            raise TrainingDivergedError("non-finite validation metrics")
    except TrainingDivergedError as exc:
        out.failed, out.error = True, str(exc)
        logger.warning("candidate nc=%d nb=%d failed: %s", cand.nc, cand.nb, exc)
        return out
    out.val_psnr, out.val_loss, out.runtime_ms = float(psnr), float(loss), float(runtime)
    out.objective = objective(out.val_loss, out.flops, lam)
    out.score = score_formula(out.val_psnr, out.runtime_ms)
    return out


def select_best(candidates: Sequence[Candidate], criterion: str = "score") -> Candidate:
    """Highest score or lowest objective; ties go to fewer FLOPs, then smaller nc, nb."""
    ok = [c for c in candidates if not c.failed]
    if not ok:
        raise ValueError("no successful candidates to select from")
    if criterion == "score":
        return min(ok, key=lambda c: (-c.score, c.flops, c.nc, c.nb))
    if criterion == "objective":
        return min(ok, key=lambda c: (c.objective, c.flops, c.nc, c.nb))
    raise ValueError(f"unknown criterion {criterion!r}")


@dataclass
class SearchReport:
    candidates: List[Candidate]
    best: Candidate
    criterion: str
    lam: float
    space: SearchSpace

    def summary(self) -> dict:
        return {
            "criterion": self.criterion,
            "lambda": self.lam,
            "space": {"nc": list(self.space.nc_choices), "nb": list(self.space.nb_choices),
                      "conv_type": self.space.conv_type, "kernel": self.space.kernel,
                      "activation": self.space.activation},
            "evaluated": len(self.candidates),
            "failed": [[c.nc, c.nb] for c in self.candidates if c.failed],
            "selected": self.best.to_dict(),
        }


def search(space: SearchSpace, evaluator, strategy: str = "grid", n: Optional[int] = None,
           seed: int = 0, lam: float = 0.0, criterion: str = "score") -> SearchReport:
    candidates = [evaluate_candidate(c, evaluator, lam)
                  for c in enumerate_candidates(space, strategy, n, seed)]
    return SearchReport(candidates, select_best(candidates, criterion), criterion, lam, space)


def write_report(report: SearchReport, csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for c in report.candidates:
            writer.writerow([repr(getattr(c, col)) if isinstance(getattr(c, col), float) else getattr(c, col)
                             for col in REPORT_COLUMNS])
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
