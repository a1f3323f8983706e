"""The full super-resolution graph built from (nc, nb).

Per frame::

    f0 = relu(head(x))                      3x3, 3 -> nc
    f  = f0 -> [relu(block_i(f))] * nb      RepConv blocks (or fused 3x3)
    g  = relu(fusion_reduce(concat(f0, f))) 1x1, 2nc -> nc
    y  = depth_to_space(tail_compress(g))   1x1, nc -> 48, then x4 shuffle
    y += nearest_upsample(x)                when global_residual is set

A clip packs ``frames`` RGB frames into ``3 * frames`` channels; every frame
runs through the same weights independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Union

import numpy as np

from . import repconv as rc
from .autograd import EAGER
from .errors import ContractError, ShapeError
from .repconv import RepConvParams
from .tensor import ConvParams, get_dtype

SCALE = 4
BRANCHED, FUSED = "branched", "fused"
MODES = (BRANCHED, FUSED)
_PIXEL_BUDGET = 1 << 16


@dataclass(frozen=True)
class NetConfig:
    nc: int = 16
    nb: int = 4
    scale: int = SCALE
    frames: int = 10
    global_residual: bool = True

    def __post_init__(self):
        if self.nc < 1:
            raise ValueError(f"nc must be >= 1, got {self.nc}")
        if self.nb < 0:
            raise ValueError(f"nb must be >= 0, got {self.nb}")
        if self.scale != SCALE:
            raise ValueError(f"scale is fixed at {SCALE}, got {self.scale}")
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")

    @property
    def tail_channels(self) -> int:
        return 3 * self.scale * self.scale


@dataclass(frozen=True)
class NetParams:
    config: NetConfig
    head: ConvParams
    blocks: List[Union[RepConvParams, ConvParams]]
    fusion_reduce: ConvParams
    tail_compress: ConvParams
    mode: str = BRANCHED

    def __post_init__(self):
        cfg = self.config
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.blocks) != cfg.nb:
            raise ShapeError(f"expected {cfg.nb} blocks, got {len(self.blocks)}")
        want = RepConvParams if self.mode == BRANCHED else ConvParams
        for i, blk in enumerate(self.blocks):
            if not isinstance(blk, want):
                raise ContractError(f"block {i} is {type(blk).__name__}, expected {want.__name__} in {self.mode} mode")
            if isinstance(blk, ConvParams) and (blk.k, blk.c_in, blk.c_out, blk.pad) != (3, cfg.nc, cfg.nc, 1):
                raise ShapeError(f"fused block {i} must be 3x3 {cfg.nc}->{cfg.nc} pad 1")
            if isinstance(blk, RepConvParams) and blk.c != cfg.nc:
                raise ShapeError(f"block {i} has {blk.c} channels, expected {cfg.nc}")
        checks = {
            "head": (self.head, 3, 3, cfg.nc, 1),
            "fusion_reduce": (self.fusion_reduce, 1, 2 * cfg.nc, cfg.nc, 0),
            "tail_compress": (self.tail_compress, 1, cfg.nc, cfg.tail_channels, 0),
        }
        for name, (p, k, ci, co, pad) in checks.items():
            if (p.k, p.c_in, p.c_out, p.pad) != (k, ci, co, pad):
                raise ShapeError(f"{name} must be {k}x{k} {ci}->{co} pad {pad}, "
                                 f"got {p.k}x{p.k} {p.c_in}->{p.c_out} pad {p.pad}")

    @property
    def dtype(self):
        return self.head.dtype

    def named_convs(self):
        """(name, ConvParams) pairs in canonical file order."""
        yield "head", self.head
        for i, blk in enumerate(self.blocks):
            if isinstance(blk, RepConvParams):
                for part, p in blk.convs().items():
                    yield f"blocks.{i}.{part}", p
            else:
                yield f"blocks.{i}", blk
        yield "fusion_reduce", self.fusion_reduce
        yield "tail_compress", self.tail_compress

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Ordered ``<layer>.weight`` / ``<layer>.bias`` mapping."""
        out = {}
        for name, p in self.named_convs():
            out[f"{name}.weight"] = p.weight
            if p.bias is not None:
                out[f"{name}.bias"] = p.bias
        return out

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "NetParams":
        """Same structure, new tensor values (names as in :meth:`to_arrays`)."""
        return params_from_arrays(self.config, self.mode, arrays)

    def astype(self, dtype) -> "NetParams":
        return self.with_arrays({k: v.astype(dtype) for k, v in self.to_arrays().items()})


def layer_specs(config: NetConfig, mode: str):
    """Canonical (name, k, c_in, c_out, pad, has_bias) layer list."""
    nc = config.nc
    specs = [("head", 3, 3, nc, 1, True)]
    for i in range(config.nb):
        if mode == BRANCHED:
            wide = rc.EXPANSION * nc
            specs += [
                (f"blocks.{i}.expand", 1, nc, wide, 0, False),
                (f"blocks.{i}.spatial", 3, wide, wide, 1, True),
                (f"blocks.{i}.reduce", 1, wide, nc, 0, True),
                (f"blocks.{i}.residual", 1, nc, nc, 0, True),
            ]
        else:
            specs.append((f"blocks.{i}", 3, nc, nc, 1, True))
    specs.append(("fusion_reduce", 1, 2 * nc, nc, 0, True))
    specs.append(("tail_compress", 1, nc, config.tail_channels, 0, True))
    return specs


def params_from_arrays(config: NetConfig, mode: str, arrays: Dict[str, np.ndarray]) -> NetParams:
    convs = {}
    for name, _, _, _, pad, has_bias in layer_specs(config, mode):
        bias = arrays[f"{name}.bias"] if has_bias else None
        convs[name] = ConvParams(arrays[f"{name}.weight"], bias, pad)
    blocks = []
    for i in range(config.nb):
        if mode == BRANCHED:
            blocks.append(RepConvParams(**{part: convs[f"blocks.{i}.{part}"]
                                           for part in ("expand", "spatial", "reduce", "residual")}))
        else:
            blocks.append(convs[f"blocks.{i}"])
    return NetParams(config, convs["head"], blocks, convs["fusion_reduce"], convs["tail_compress"], mode)


def init_params(config: NetConfig, seed: int = 0, dtype=None, tail_gain: float = 0.1) -> NetParams:
    """Uniform fan-in initialisation.

    Layers feeding a ReLU get He scaling (variance 2/fan_in). The convs
    inside a block have no activation between them: expand and spatial get
    variance 1/fan_in, reduce and residual half that, so the two branches
    sum to roughly unit gain per block. The tail
    starts small so the initial output stays close to the upsampled input.
    """
    dtype = dtype or get_dtype()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, k, ci, co, _, has_bias in layer_specs(config, BRANCHED):
        if name == "tail_compress":
            var = tail_gain ** 2 * 2.0
        elif name.startswith("blocks."):
            var = 1.0 / (2.0 if name.endswith(("reduce", "residual")) else 1.0)
        else:
            var = 2.0
        bound = np.sqrt(3.0 * var / (ci * k * k))
        arrays[f"{name}.weight"] = rng.uniform(-bound, bound, (co, ci, k, k)).astype(dtype)
        if has_bias:
            arrays[f"{name}.bias"] = np.zeros(co, dtype)
    return params_from_arrays(config, BRANCHED, arrays)


def zero_params(config: NetConfig, mode: str = BRANCHED, dtype=None) -> NetParams:
    dtype = dtype or get_dtype()
    arrays = {}
    for name, k, ci, co, _, has_bias in layer_specs(config, mode):
        arrays[f"{name}.weight"] = np.zeros((co, ci, k, k), dtype)
        if has_bias:
            arrays[f"{name}.bias"] = np.zeros(co, dtype)
    return params_from_arrays(config, mode, arrays)


def forward_frame(x, params: NetParams, ops=EAGER, deploy: bool = False):
    """Run one batch of RGB frames (n, 3, h, w) -> (n, 3, 4h, 4w).

    ``deploy`` clamps the result to [0, 1]; training leaves it raw.
    """
    cfg = params.config
    c = ops.value(x).shape[1]
    if c != 3:
        raise ShapeError(f"forward_frame expects 3 channels, got {c}")
    f0 = ops.relu(ops.conv2d(x, params.head, "head"))
    f = f0
    for i, blk in enumerate(params.blocks):
        if isinstance(blk, RepConvParams):
            f = rc.repconv_forward_branched(f, blk, ops, f"blocks.{i}")
        else:
            f = rc.repconv_forward_fused(f, blk, ops, f"blocks.{i}")
        f = ops.relu(f)
    g = ops.relu(ops.conv2d(ops.concat(f0, f), params.fusion_reduce, "fusion_reduce"))
    y = ops.depth_to_space(ops.conv2d(g, params.tail_compress, "tail_compress"), cfg.scale)
    if cfg.global_residual:
        y = ops.add(y, ops.upsample(x, cfg.scale))
    if deploy:
        y = np.clip(ops.value(y), 0.0, 1.0)
    return y


def frames_to_batch(clip: np.ndarray) -> np.ndarray:
    n, c, h, w = clip.shape
    if c % 3:
        raise ShapeError(f"clip channels {c} are not a multiple of 3")
    return clip.reshape(n * (c // 3), 3, h, w)


def batch_to_frames(batch: np.ndarray, n: int) -> np.ndarray:
    b, c, h, w = batch.shape
    return batch.reshape(n, (b // n) * c, h, w)


def forward_clip(clip: np.ndarray, params: NetParams, deploy: bool = False) -> np.ndarray:
    """Apply the per-frame network to each 3-channel frame of a packed clip."""
    n = clip.shape[0]
    frames = frames_to_batch(clip)
    h, w = clip.shape[2:]
    chunk = max(1, _PIXEL_BUDGET // max(1, h * w))
    outs = [forward_frame(frames[i:i + chunk], params, deploy=deploy)
            for i in range(0, frames.shape[0], chunk)]
    out = np.concatenate(outs, axis=0) if outs else np.zeros(
        (0, 3, h * params.config.scale, w * params.config.scale), dtype=clip.dtype)
    return batch_to_frames(out, n)


def fuse_network(params: NetParams) -> NetParams:
    if params.mode != BRANCHED:
        raise ContractError("network is already fused")
    return replace(params, blocks=[rc.fuse_repconv(b) for b in params.blocks], mode=FUSED)


def _layer_macs(config: NetConfig, mode: str) -> Dict[str, int]:
    """MACs per LR pixel, grouped into trunk and block-stack parts."""
    nc = config.nc
    trunk = 3 * nc * 9 + 2 * nc * nc + nc * config.tail_channels
    blocks = config.nb * rc.block_macs_per_pixel(nc, mode == FUSED)
    return {"trunk": trunk, "blocks": blocks}


def count_flops(config: NetConfig, mode: str, h: int, w: int, part: str = "all") -> int:
    """FLOPs (2 x MACs) of the conv layers for one clip of ``frames`` frames.

    ``part`` selects ``"all"``, ``"blocks"`` (block stack only) or ``"trunk"``.
    Every conv is stride 1 with "same" padding, so each runs at h x w.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    macs = _layer_macs(config, mode)
    per_pixel = macs["trunk"] + macs["blocks"] if part == "all" else macs[part]
    return 2 * per_pixel * h * w * config.frames


def count_params(params: NetParams) -> int:
    return sum(p.num_params() for _, p in params.named_convs())


def count_params_config(config: NetConfig, mode: str) -> int:
    """Parameter count from the layer table alone (no tensors built)."""
    return sum(co * ci * k * k + (co if has_bias else 0)
               for _, k, ci, co, _, has_bias in layer_specs(config, mode))
