"""Procedural video clips for desk-scale experiments.

Each clip is a textured canvas (gratings, hard-edged shapes, checkers and
smooth colour ramps) panned by a constant random velocity, so consecutive
frames are coherent. HR values are snapped to the 8-bit grid, making the
in-memory data identical to what a save/load round trip produces.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .clipio import downscale, save_clip, to_u8


def _grating(rng, yy, xx):
    freq = rng.uniform(0.01, 0.09)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    if rng.random() < 0.5:
        wave = np.sign(wave)
    return 0.5 + 0.5 * wave


def _shapes(rng, yy, xx, size):
    img = np.full(yy.shape, rng.random())
    for _ in range(rng.integers(4, 12)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(4, size / 4)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            theta = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            mask = (np.abs(u) < r) & (np.abs(v) < r * rng.uniform(0.2, 1.0))
        img[mask] = rng.random()
    return img


def _checker(rng, yy, xx):
    cell = rng.uniform(6, 20)
    theta = rng.uniform(0, np.pi / 2)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    return ((np.floor(u / cell) + np.floor(v / cell)) % 2).astype(np.float64)


def _canvas(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    layers = [_grating, _checker]
    planes = []
    base = _shapes(rng, yy, xx, size)
    for _ in range(3):
        tex = layers[rng.integers(len(layers))](rng, yy, xx)
        alpha = rng.uniform(0.2, 0.6)
        planes.append((1 - alpha) * base + alpha * tex)
    rgb = np.stack(planes)
    tint = rng.uniform(0.3, 1.0, (3, 1, 1))
    ramp = (yy / size * rng.uniform(-0.3, 0.3) + xx / size * rng.uniform(-0.3, 0.3))[None]
    return np.clip(rgb * tint + ramp + rng.uniform(0, 0.2), 0.0, 1.0)


def synth_clip(rng: np.random.Generator, frames: int = 10, size: int = 96) -> np.ndarray:
    """One (1, 3·frames, size, size) HR clip on the 8-bit grid."""
    vy, vx = rng.integers(-2, 3, 2)
    margin = 2 * frames + 2
    canvas = _canvas(rng, size + 2 * margin)
    out = np.empty((frames, 3, size, size))
    for t in range(frames):
        oy, ox = margin + vy * t, margin + vx * t
        out[t] = canvas[:, oy:oy + size, ox:ox + size]
    return to_u8(out.reshape(1, 3 * frames, size, size)) / 255.0


def synth_dataset(n_clips: int, seed: int = 0, frames: int = 10, size: int = 96, scale: int = 4,
                  quantize: bool = True):
    """Lists of (hr, lr) float64 clips; LR is the bicubic downscale of HR.

    ``quantize`` snaps LR to the 8-bit grid, matching LR clips read from disk.
    """
    rng = np.random.default_rng(seed)
    hr = [synth_clip(rng, frames, size) for _ in range(n_clips)]
    lr = [downscale(clip, scale) for clip in hr]
    if quantize:
        lr = [to_u8(clip) / 255.0 for clip in lr]
    return hr, lr


def write_dataset(root, n_clips: int, seed: int = 0, frames: int = 10, size: int = 96,
                  scale: int = 4, with_lr: bool = True):
    """Write ``root/hr/clip_NNN`` (and ``root/lr/clip_NNN``) PNG directories."""
    root = Path(root)
    hr, _ = synth_dataset(n_clips, seed, frames, size, scale)
    for i, clip in enumerate(hr):
        save_clip(clip, root / "hr" / f"clip_{i:03d}")
        if with_lr:
            save_clip(downscale(clip, scale), root / "lr" / f"clip_{i:03d}")
    return root
