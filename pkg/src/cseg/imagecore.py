"""Pixel plumbing shared by every other module.

Conventions used throughout the package:

* a *frame* is an ``(H, W, 3)`` float32 array of RGB intensities in ``[0, 1]``
  (channel-interleaved, row-major);
* a *gray frame* is an ``(H, W)`` float array in ``[0, 1]``;
* a *label mask* is an ``(H, W)`` uint8 array holding :data:`BG`, :data:`FG`
  or :data:`IGNORE`;
* a *score map* is an ``(H, W)`` float array in ``[0, 1]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

from .errors import FormatError, InputError

BG, FG, IGNORE = 0, 1, 2

# 8-bit coding of label masks on disk (IGNORE matches CDnet's "unknown").
MASK_BG_VALUE = 0
MASK_FG_VALUE = 255
MASK_IGNORE_VALUE = 170

NETWORK_HEIGHT, NETWORK_WIDTH = 240, 320
PATCH_SIDE = 37
TRAIN_STRIDE = 10
INFER_STRIDE = 37

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_unit_rgb(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit channel data to unit-interval float32 (v -> v / 255)."""
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise InputError(f"expected uint8 image data, got {raw.dtype}")
    return raw.astype(np.float32) / np.float32(255.0)


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return frame.astype(np.float64)
    return frame[..., :3].astype(np.float64) @ LUMA_WEIGHTS


def resize_bilinear(img: np.ndarray, target=(NETWORK_HEIGHT, NETWORK_WIDTH)) -> np.ndarray:
    """Bilinear resize with half-pixel sample centres and edge clamping.

    Works on ``(H, W)`` and ``(H, W, C)`` arrays. Returns a copy with the
    input dtype when the size already matches.
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3) or img.shape[0] == 0 or img.shape[1] == 0:
        raise InputError(f"cannot resize image of shape {img.shape}")
    th, tw = int(target[0]), int(target[1])
    if th <= 0 or tw <= 0:
        raise InputError(f"invalid target size {target}")
    h, w = img.shape[:2]
    if (h, w) == (th, tw):
        return img.copy()

    def axis_weights(n_src, n_dst):
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, th)
    x0, x1, fx = axis_weights(w, tw)
    src = img.astype(np.float64)
    if src.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    if np.issubdtype(img.dtype, np.floating):
        return out.astype(img.dtype)
    return np.clip(np.rint(out), np.iinfo(img.dtype).min, np.iinfo(img.dtype).max).astype(img.dtype)


def resize_nearest(img: np.ndarray, target=(NETWORK_HEIGHT, NETWORK_WIDTH)) -> np.ndarray:
    """Nearest-neighbour resize, used for label data where blending is meaningless."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    th, tw = int(target[0]), int(target[1])
    if (h, w) == (th, tw):
        return img.copy()
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.intp), w - 1)
    return img[rows][:, cols]


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchLayout:
    """Where square patches sit on a zero-padded source image.

    Origins are given in padded coordinates; the source pixel ``(r, c)`` lives
    at padded position ``(r + pad_top, c + pad_left)``.
    """

    height: int
    width: int
    side: int
    stride: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    row_origins: tuple
    col_origins: tuple

    @property
    def padded_shape(self):
        return (self.height + self.pad_top + self.pad_bottom,
                self.width + self.pad_left + self.pad_right)

    @property
    def n_rows(self):
        return len(self.row_origins)

    @property
    def n_cols(self):
        return len(self.col_origins)

    @property
    def n_patches(self):
        return self.n_rows * self.n_cols

    def origins(self):
        """All patch origins in row-major order."""
        return [(r, c) for r in self.row_origins for c in self.col_origins]


def _axis_origins(padded: int, side: int, stride: int) -> tuple:
    if padded < side:
        raise InputError(f"padded extent {padded} is smaller than patch side {side}")
    origins = list(range(0, padded - side + 1, stride))
    last = padded - side
    if origins[-1] != last:
        # Move the final patch flush with the boundary; if that would open a
        # gap behind it, add the flush patch instead.
        if len(origins) > 1 and origins[-2] + side >= last:
            origins[-1] = last
        else:
            origins.append(last)
    return tuple(origins)


def plan_patches(height: int, width: int, side: int = PATCH_SIDE, stride: int = TRAIN_STRIDE,
                 pad: int | None = None) -> PatchLayout:
    """Plan a tiling of an ``height x width`` image by ``side``-sized patches.

    ``pad`` defaults to ``side // 2`` zero pixels on every edge so each source
    pixel can be a patch centre; pass ``pad=0`` to tile the raw image.
    Origins step by ``stride`` and the last one per axis is clamped to end on
    the padded boundary, so every source pixel is covered.
    """
    if side < 1 or side % 2 == 0:
        raise InputError(f"patch side must be odd and positive, got {side}")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    if height < 1 or width < 1:
        raise InputError(f"invalid image size {height}x{width}")
    if pad is None:
        pad = side // 2
    if pad < 0:
        raise InputError(f"pad must be >= 0, got {pad}")
    if stride > side:
        # Larger steps would leave uncovered columns between patches.
        warnings.warn(f"stride {stride} exceeds patch side {side}; using stride {side} so every pixel is covered",
                      stacklevel=2)
        stride = side
    rows = _axis_origins(height + 2 * pad, side, stride)
    cols = _axis_origins(width + 2 * pad, side, stride)
    return PatchLayout(height, width, side, stride, pad, pad, pad, pad, rows, cols)


def _check_layout(img: np.ndarray, layout: PatchLayout):
    if img.shape[:2] != (layout.height, layout.width):
        raise InputError(f"layout planned for {layout.height}x{layout.width}, "
                         f"image is {img.shape[0]}x{img.shape[1]}")


def pad_image(img: np.ndarray, layout: PatchLayout, fill=0) -> np.ndarray:
    _check_layout(img, layout)
    widths = [(layout.pad_top, layout.pad_bottom), (layout.pad_left, layout.pad_right)]
    widths += [(0, 0)] * (img.ndim - 2)
    return np.pad(img, widths, mode="constant", constant_values=fill)


def extract_patches(img: np.ndarray, layout: PatchLayout, fill=0) -> np.ndarray:
    """Cut ``img`` into the patches of ``layout`` (row-major order).

    Returns ``(N, side, side)`` for 2-D input and ``(N, side, side, C)`` for
    ``(H, W, C)`` input. The padded margin reads as ``fill``.
    """
    img = np.asarray(img)
    padded = pad_image(img, layout, fill)
    s = layout.side
    windows = sliding_window_view(padded, (s, s), axis=(0, 1))
    rows = np.asarray(layout.row_origins)
    cols = np.asarray(layout.col_origins)
    picked = windows[rows[:, None], cols[None, :]]  # (nr, nc, [C,] s, s)
    picked = picked.reshape((-1,) + picked.shape[2:])
    if img.ndim == 3:
        picked = np.moveaxis(picked, 1, -1)
    return np.ascontiguousarray(picked)


def reassemble_scores(patches: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Paste per-patch score arrays back into a source-sized map.

    Overlapping contributions are averaged; the padded margin is cropped.
    """
    patches = np.asarray(patches)
    s = layout.side
    if patches.ndim == 2 and patches.shape[1] == s * s:
        patches = patches.reshape(-1, s, s)
    if patches.shape != (layout.n_patches, s, s):
        raise InputError(f"expected {layout.n_patches} patches of {s}x{s}, got array {patches.shape}")
    ph, pw = layout.padded_shape
    total = np.zeros((ph, pw), dtype=np.float64)
    count = np.zeros((ph, pw), dtype=np.float64)
    for k, (r, c) in enumerate(layout.origins()):
        total[r:r + s, c:c + s] += patches[k]
        count[r:r + s, c:c + s] += 1.0
    crop = (slice(layout.pad_top, layout.pad_top + layout.height),
            slice(layout.pad_left, layout.pad_left + layout.width))
    return total[crop] / count[crop]


def coverage_counts(layout: PatchLayout) -> np.ndarray:
    """How many patches cover each padded pixel."""
    ph, pw = layout.padded_shape
    rows = np.zeros(ph)
    cols = np.zeros(pw)
    for r in layout.row_origins:
        rows[r:r + layout.side] += 1
    for c in layout.col_origins:
        cols[c:c + layout.side] += 1
    return np.outer(rows, cols)


# ---------------------------------------------------------------------------
# filtering and morphology
# ---------------------------------------------------------------------------

def median_filter(score_map: np.ndarray, kernel: int = 9, rows_per_chunk: int = 64) -> np.ndarray:
    """Exact windowed median; borders replicate the edge pixels.

    Windows are gathered with a strided view and the middle element picked by
    ``np.partition``, a few times faster than a generic rank filter for 9x9.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise InputError(f"median kernel must be odd and positive, got {kernel}")
    m = np.asarray(score_map)
    if m.ndim != 2:
        raise InputError(f"median filter expects a 2-D map, got shape {m.shape}")
    r = kernel // 2
    mid = kernel * kernel // 2
    padded = np.pad(m, r, mode="edge")
    out = np.empty_like(m)
    for top in range(0, m.shape[0], rows_per_chunk):
        bottom = min(top + rows_per_chunk, m.shape[0])
        win = sliding_window_view(padded[top:bottom + 2 * r], (kernel, kernel))
        win = win.reshape(bottom - top, m.shape[1], kernel * kernel)
        out[top:bottom] = np.partition(win, mid, axis=-1)[..., mid]
    return out


def threshold_map(score_map: np.ndarray, r: float = 0.3) -> np.ndarray:
    """FG where the score is strictly above ``r``, BG otherwise."""
    return np.where(np.asarray(score_map) > r, FG, BG).astype(np.uint8)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Grow the FG region by a square of side ``2 * radius + 1``.

    Only BG pixels are converted; IGNORE pixels keep their label.
    """
    if radius < 0:
        raise InputError(f"dilation radius must be >= 0, got {radius}")
    mask = np.asarray(mask)
    if radius == 0:
        return mask.copy()
    fg = mask == FG
    grown = ndimage.maximum_filter(fg, size=2 * radius + 1, mode="constant", cval=False)
    out = mask.copy()
    out[grown & (mask == BG)] = FG
    return out


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def read_frame(path) -> np.ndarray:
    """Read any Pillow-supported image (PNG/JPG/PPM/...) as a unit-RGB frame."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            raw = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return to_unit_rgb(raw)


def read_gray8(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")).copy()
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def write_frame(path, frame: np.ndarray):
    data = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def encode_mask(mask: np.ndarray) -> np.ndarray:
    lut = np.array([MASK_BG_VALUE, MASK_FG_VALUE, MASK_IGNORE_VALUE], dtype=np.uint8)
    mask = np.asarray(mask)
    if mask.size and mask.max() > IGNORE:
        raise FormatError(f"label mask holds unknown label {int(mask.max())}")
    return lut[mask]


def decode_mask(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    out = np.where(data >= 128, FG, BG).astype(np.uint8)
    out[data == MASK_IGNORE_VALUE] = IGNORE
    return out


def write_mask(path, mask: np.ndarray):
    Image.fromarray(encode_mask(mask)).save(path)


def read_mask(path) -> np.ndarray:
    return decode_mask(read_gray8(path))
