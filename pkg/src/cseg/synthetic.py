"""Synthetic videos with exact ground truth, for tests and desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .imagecore import BG, FG, IGNORE, encode_mask, resize_bilinear


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # (T, H, W, 3) float32
    labels: np.ndarray  # (T, H, W) uint8
    background: np.ndarray  # (H, W, 3) float32


def smooth_background(rng, height, width, lo=0.25, hi=0.65):
    """Low-frequency colour texture, a stand-in for a static scene."""
    coarse = rng.random((max(2, height // 24), max(2, width // 24), 3))
    fine = rng.random((max(2, height // 6), max(2, width // 6), 3))
    tex = 0.75 * resize_bilinear(coarse, (height, width)) + 0.25 * resize_bilinear(fine, (height, width))
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    return (lo + (hi - lo) * tex).astype(np.float32)


def textured_square(rng, size):
    """Blocky pattern of saturated colours, each far from mid-gray."""
    cells = max(2, size // 8)
    palette = rng.choice([0.0, 0.05, 0.95, 1.0], size=(cells, cells, 3))
    palette[..., rng.integers(3)] = rng.choice([0.0, 1.0])
    tex = np.repeat(np.repeat(palette, -(-size // cells), axis=0), -(-size // cells), axis=1)
    return tex[:size, :size].astype(np.float32)


def _paint(frame, labels, tex, top, left, boundary):
    h, w = labels.shape
    s = tex.shape[0]
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + s, h), min(left + s, w)
    if r0 >= r1 or c0 >= c1:
        return
    if boundary:
        b0, b1 = max(r0 - boundary, 0), min(r1 + boundary, h)
        d0, d1 = max(c0 - boundary, 0), min(c1 + boundary, w)
        ring = labels[b0:b1, d0:d1]
        ring[ring == BG] = IGNORE
    frame[r0:r1, c0:c1] = tex[r0 - top:r1 - top, c0 - left:c1 - left]
    labels[r0:r1, c0:c1] = FG


def moving_squares_video(seed=0, height=240, width=320, n_frames=60, n_squares=4,
                         size_range=(36, 64), speed_range=(4.0, 7.0), boundary=1, noise=0.01):
    """Textured squares crossing a static background.

    Every square starts outside the frame, so frame 0 shows the empty scene.
    A ``boundary``-pixel ring around each square is labelled IGNORE.
    """
    rng = np.random.default_rng(seed)
    bg = smooth_background(rng, height, width)
    squares = []
    for k in range(n_squares):
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        speed = rng.uniform(*speed_range)
        start = int(k * n_frames / n_squares * 0.6)
        side = rng.integers(4)
        if side == 0:    # from the left
            pos = np.array([rng.uniform(0, height - size), -size - 1.0])
            ang = rng.uniform(-0.5, 0.5)
        elif side == 1:  # from the right
            pos = np.array([rng.uniform(0, height - size), width + 1.0])
            ang = np.pi + rng.uniform(-0.5, 0.5)
        elif side == 2:  # from the top
            pos = np.array([-size - 1.0, rng.uniform(0, width - size)])
            ang = np.pi / 2 + rng.uniform(-0.5, 0.5)
        else:            # from the bottom
            pos = np.array([height + 1.0, rng.uniform(0, width - size)])
            ang = -np.pi / 2 + rng.uniform(-0.5, 0.5)
        vel = speed * np.array([np.sin(ang), np.cos(ang)])
        squares.append((start, pos, vel, textured_square(rng, size)))

    frames = np.empty((n_frames, height, width, 3), np.float32)
    labels = np.zeros((n_frames, height, width), np.uint8)
    for t in range(n_frames):
        frame = bg.copy()
        for start, pos, vel, tex in squares:
            if t < start:
                continue
            top, left = np.rint(pos + vel * (t - start)).astype(int)
            _paint(frame, labels[t], tex, top, left, boundary)
        if noise:
            frame += rng.normal(0.0, noise, frame.shape).astype(np.float32)
        frames[t] = np.clip(frame, 0.0, 1.0)
    return SyntheticVideo(frames, labels, bg)


def bouncing_square_video(seed=0, height=120, width=160, n_frames=200, size=12,
                          velocity=(1.7, 2.3), color=(1.0, 0.1, 0.1)):
    """One solid square bouncing around a static textured background."""
    rng = np.random.default_rng(seed)
    bg = smooth_background(rng, height, width, 0.3, 0.6)
    tex = np.broadcast_to(np.asarray(color, np.float32), (size, size, 3))
    pos = np.array([rng.uniform(0, height - size), rng.uniform(0, width - size)])
    vel = np.asarray(velocity, float)
    frames = np.empty((n_frames, height, width, 3), np.float32)
    labels = np.zeros((n_frames, height, width), np.uint8)
    for t in range(n_frames):
        frame = bg.copy()
        top, left = np.rint(pos).astype(int)
        _paint(frame, labels[t], tex, top, left, 0)
        frames[t] = frame
        pos = pos + vel
        for ax, limit in ((0, height - size), (1, width - size)):
            if not 0 <= pos[ax] <= limit:
                vel[ax] = -vel[ax]
                pos[ax] = np.clip(pos[ax], 0, limit)
    return SyntheticVideo(frames, labels, bg)


def _to8(frame):
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def write_cdnet_video(root, category, name, video: SyntheticVideo, roi_start=1):
    """Write ``video`` as ``root/category/name`` in the CDnet folder layout."""
    vdir = Path(root) / category / name
    (vdir / "input").mkdir(parents=True, exist_ok=True)
    (vdir / "groundtruth").mkdir(parents=True, exist_ok=True)
    for t, (frame, lab) in enumerate(zip(video.frames, video.labels), start=1):
        Image.fromarray(_to8(frame)).save(vdir / "input" / f"in{t:06d}.png")
        Image.fromarray(encode_mask(lab)).save(vdir / "groundtruth" / f"gt{t:06d}.png")
    h, w = video.labels.shape[1:]
    Image.fromarray(np.full((h, w), 255, np.uint8)).save(vdir / "ROI.bmp")
    (vdir / "temporalROI.txt").write_text(f"{roi_start} {len(video.frames)}\n")
    return vdir


def synthetic_corpus(seeds=(11, 12, 13), n_frames=60, height=240, width=320, **kw):
    """Three (by default) moving-squares videos over distinct backgrounds."""
    return {f"synthetic{i}": moving_squares_video(seed, height, width, n_frames, **kw)
            for i, seed in enumerate(seeds)}
