"""Clip directories, bicubic resampling and the binary weight file.

Bicubic kernel (Keys, a = -0.5)::

    k(t) = (a+2)|t|^3 - (a+3)|t|^2 + 1        |t| <= 1
         = a|t|^3 - 5a|t|^2 + 8a|t| - 4a      1 < |t| < 2
         = 0                                  otherwise

Output pixel j maps to input coordinate ``(j + 0.5) * s - 0.5`` with
``s = n_in / n_out``. When downscaling (s > 1) the kernel is stretched by s
(antialiasing); taps are normalised to sum to one and out-of-range taps are
clamped to the nearest edge pixel. For a 4 -> 1 reduction the single output
sample sits at input coordinate 1.5 and draws on inputs -6.5 .. 9.5 (clamped).

Weight file layout (little-endian)::

    "RVSR" | u16 version=1 | u8 mode (0 branched, 1 fused) | u8 flags
    (bit0 = global_residual) | u32 nc | u32 nb | u32 frames | u32 scale
    then per tensor, in canonical network order:
    u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 payload
"""
from __future__ import annotations

import math
import re
import struct
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import errors
from .errors import DataError, ShapeError
from .network import BRANCHED, FUSED, NetConfig, NetParams, layer_specs, params_from_arrays
from .tensor import get_dtype

KEYS_A = -0.5
FRAME_RE = re.compile(r"^frame_(\d{5,})\.png$")

MAGIC = b"RVSR"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIII")
_MODE_CODES = {BRANCHED: 0, FUSED: 1}


def keys_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int, a: float = KEYS_A) -> np.ndarray:
    """(n_out, n_in) matrix of 1-D bicubic taps with edge clamping."""
    if n_in <= 0 or n_out <= 0:
        raise ShapeError(f"resample extents must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    radius = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) * scale - 0.5
        taps = np.arange(math.floor(center - radius), math.ceil(center + radius) + 1)
        weights = keys_kernel((taps - center) / stretch, a)
        weights /= weights.sum()
        np.add.at(mat[j], np.clip(taps, 0, n_in - 1), weights)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of an (n, c, h, w) tensor, clamped to [0, 1]."""
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    if img.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {img.shape}")
    mh = resample_matrix(img.shape[2], out_h)
    mw = resample_matrix(img.shape[3], out_w)
    out = np.einsum("yh,nchw,xw->ncyx", mh, np.asarray(img, np.float64), mw, optimize=True)
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else get_dtype()
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=dtype)


def downscale(img: np.ndarray, scale: int = 4) -> np.ndarray:
    h, w = img.shape[2:]
    if h % scale or w % scale:
        raise ShapeError(f"{h}x{w} is not divisible by scale {scale}")
    return bicubic_resize(img, h // scale, w // scale)


def upscale(img: np.ndarray, scale: int = 4) -> np.ndarray:
    h, w = img.shape[2:]
    return bicubic_resize(img, h * scale, w * scale)


# -- clip directories ---------------------------------------------------------

def frame_name(i: int) -> str:
    return f"frame_{i:05d}.png"


def _frame_files(path: Path):
    found = {}
    for entry in path.iterdir():
        m = FRAME_RE.match(entry.name)
        if m and entry.is_file():
            found[int(m.group(1))] = entry
    return found


def is_clip_dir(path) -> bool:
    path = Path(path)
    return path.is_dir() and bool(_frame_files(path))


def find_clips(root) -> List[Path]:
    """The clip directories under ``root`` (``root`` itself if it is one)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    if is_clip_dir(root):
        return [root]
    clips = sorted(p for p in root.rglob("*") if is_clip_dir(p))
    if not clips:
        raise DataError(f"no clip directories (frame_00000.png ...) under {root}")
    return clips


def to_u8(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half away from zero."""
    return np.floor(np.clip(np.asarray(x, np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_clip(path, dtype=None) -> np.ndarray:
    """Load frame_00000.png ... as a (1, 3T, h, w) tensor scaled to [0, 1]."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = _frame_files(path)
    if not files:
        raise DataError(f"{path} contains no frame_NNNNN.png files")
    missing = sorted(set(range(len(files))) - set(files))
    if missing:
        raise DataError(f"{path}: frame index {missing[0]} missing (indices must be contiguous from 0)")
    frames = []
    for i in range(len(files)):
        with Image.open(files[i]) as im:
            if im.mode != "RGB":
                raise DataError(f"{files[i]} is {im.mode}, expected 8-bit RGB")
            arr = np.asarray(im, dtype=np.uint8)
        if frames and arr.shape != frames[0].shape:
            raise DataError(f"{files[i]} is {arr.shape[1]}x{arr.shape[0]}, expected "
                            f"{frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(arr)
    stack = np.stack(frames).transpose(0, 3, 1, 2)  # (T, 3, h, w)
    t, _, h, w = stack.shape
    return (stack.reshape(1, 3 * t, h, w).astype(dtype or get_dtype()) / 255.0).astype(dtype or get_dtype())


def save_clip(clip: np.ndarray, path) -> List[Path]:
    """Write a (1, 3T, h, w) tensor as T PNG frames."""
    if clip.ndim != 4 or clip.shape[0] != 1 or clip.shape[1] % 3:
        raise ShapeError(f"expected a (1, 3T, h, w) clip, got {clip.shape}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _, c, h, w = clip.shape
    u8 = to_u8(clip).reshape(c // 3, 3, h, w).transpose(0, 2, 3, 1)
    written = []
    for i, frame in enumerate(u8):
        target = path / frame_name(i)
        Image.fromarray(np.ascontiguousarray(frame), mode="RGB").save(target)
        written.append(target)
    return written


def prepare_dataset(hr_root, out_root, scale: int = 4) -> List[Path]:
    """Bicubic-downscale every HR clip, mirroring the directory structure."""
    hr_root, out_root = Path(hr_root), Path(out_root)
    written = []
    for clip_dir in find_clips(hr_root):
        rel = clip_dir.relative_to(hr_root)
        hr = load_clip(clip_dir, np.float64)
        save_clip(downscale(hr, scale), out_root / rel)
        written.append(out_root / rel)
    return written


# -- weight files ---------------------------------------------------------------

def encode_weights(params: NetParams) -> bytes:
    cfg = params.config
    flags = 1 if cfg.global_residual else 0
    parts = [_HEADER.pack(MAGIC, VERSION, _MODE_CODES[params.mode], flags,
                          cfg.nc, cfg.nb, cfg.frames, cfg.scale)]
    for name, arr in params.to_arrays().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise errors.TruncatedFileError(
                f"weight file truncated: need {n} bytes at offset {self.pos}, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_weights(data: bytes, dtype=None) -> NetParams:
    reader = _Reader(data)
    if len(data) < len(MAGIC) or data[:4] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise errors.TruncatedFileError("weight file truncated inside the magic")
        raise errors.BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    magic, version, mode_code, flags, nc, nb, frames, scale = reader.unpack(_HEADER.format)
    if version != VERSION:
        raise errors.UnsupportedVersionError(f"unsupported weight file version {version}")
    modes = {v: k for k, v in _MODE_CODES.items()}
    if mode_code not in modes:
        raise errors.WeightFormatError(f"unknown mode code {mode_code}")
    try:
        cfg = NetConfig(nc=nc, nb=nb, scale=scale, frames=frames, global_residual=bool(flags & 1))
    except ValueError as exc:
        raise errors.DimMismatchError(f"invalid network header: {exc}") from exc
    mode = modes[mode_code]
    arrays = {}
    for name, k, ci, co, _, has_bias in layer_specs(cfg, mode):
        expected = [(f"{name}.weight", (co, ci, k, k))]
        if has_bias:
            expected.append((f"{name}.bias", (co,)))
        for key, shape in expected:
            (length,) = reader.unpack("<H")
            got = reader.take(length).decode("utf-8", errors="replace")
            if got != key:
                raise errors.DimMismatchError(f"expected tensor {key!r}, found {got!r}")
            (rank,) = reader.unpack("<B")
            dims = reader.unpack(f"<{rank}I") if rank else ()
            if tuple(dims) != shape:
                raise errors.DimMismatchError(f"{key}: dims {tuple(dims)} do not match {shape} for nc={nc}")
            count = int(np.prod(dims, dtype=np.int64))
            payload = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
            arrays[key] = payload.astype(dtype or np.float32)
    if reader.pos != len(data):
        raise errors.TrailingBytesError(f"{len(data) - reader.pos} trailing bytes after last tensor")
    return params_from_arrays(cfg, mode, arrays)


def save_weights(params: NetParams, path) -> None:
    Path(path).write_bytes(encode_weights(params))


def load_weights(path, dtype=None) -> NetParams:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"weight file {path} not found")
    return decode_weights(path.read_bytes(), dtype)
