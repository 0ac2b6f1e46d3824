"""Adaptive background image generation.

A per-pixel library keeps the last 90 samples that the foreground segmenter
labelled as background. The rendered background averages the ``bm`` newest
samples, where ``bm`` shrinks when the flux-tensor motion detector reports
that a large share of the frame is moving.
"""

from __future__ import annotations

import math
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError, NotReadyError
from .imagecore import BG, FG, dilate, to_gray

LIBRARY_SIZE = 90
BM_MIN, BM_MAX = 5, 90
FS_LOW, FS_HIGH = 0.02, 0.25
PAD_MIN, PAD_MAX = 1, 5
ALPHA_DOWN, ALPHA_UP = 0.2, 0.01
FLUX_WINDOW = 5
FLUX_INTEGRATION = 5
FLUX_TAU_FACTOR = 3.0
FLUX_TAU_FLOOR = 1e-4

BM_MODES = ("monotone-decreasing", "as-printed")

# A segmenter hook maps (frame, current background) to a BG/FG label mask.
SegmenterHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# flux tensor motion detection
# ---------------------------------------------------------------------------

def _spatial_gradient(img: np.ndarray):
    p = np.pad(img, 1, mode="edge")
    ix = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    iy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return ix, iy


class FluxBuffer:
    """Ring of the most recent grayscale frames and their spatial gradients."""

    def __init__(self, window: int = FLUX_WINDOW):
        if window != 5:
            raise InputError("the flux trace uses a 5-frame window")
        self.window = window
        self.frames = deque(maxlen=window)
        self.gradients = deque(maxlen=window)

    def push(self, gray: np.ndarray):
        gray = np.asarray(gray, dtype=np.float64)
        if self.frames and self.frames[0].shape != gray.shape:
            raise InputError(f"flux buffer holds {self.frames[0].shape} frames, got {gray.shape}")
        self.frames.append(gray)
        self.gradients.append(_spatial_gradient(gray))

    @property
    def ready(self) -> bool:
        return len(self.frames) == self.window

    def clear(self):
        self.frames.clear()
        self.gradients.clear()


def flux_trace(buf: FluxBuffer, integration: int = FLUX_INTEGRATION) -> np.ndarray:
    """Trace of the flux tensor at the buffer's centre frame.

    The spatio-temporal gradient ``(Ix, Iy, It)`` is differentiated in time by
    central differences around the centre frame; the squared norm of that
    derivative is summed over an ``integration``-square window (zero outside
    the image).
    """
    if not buf.ready:
        raise NotReadyError(f"flux buffer holds {len(buf.frames)} of {buf.window} frames")
    f = buf.frames
    g = buf.gradients
    it_before = (f[2] - f[0]) / 2.0
    it_after = (f[4] - f[2]) / 2.0
    ixt = (g[3][0] - g[1][0]) / 2.0
    iyt = (g[3][1] - g[1][1]) / 2.0
    itt = (it_after - it_before) / 2.0
    energy = ixt * ixt + iyt * iyt + itt * itt
    box = np.ones((integration, integration))
    return ndimage.correlate(energy, box, mode="constant", cval=0.0)


def flux_threshold(trace: np.ndarray) -> float:
    return max(FLUX_TAU_FACTOR * float(np.mean(trace)), FLUX_TAU_FLOOR)


def motion_mask(trace: np.ndarray, tau: float) -> np.ndarray:
    if tau < 0:
        raise InputError(f"tau must be >= 0, got {tau}")
    return np.where(np.asarray(trace) > tau, FG, BG).astype(np.uint8)


def motion_fraction(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        raise InputError("empty motion mask")
    return float(np.count_nonzero(mask == FG)) / mask.size


def lowpass_fs(prev: float, raw: float) -> float:
    """Asymmetric low-pass: fast to follow a drop, slow to follow a rise."""
    if raw < prev:
        alpha = ALPHA_DOWN
    elif raw > prev:
        alpha = ALPHA_UP
    else:
        return prev
    return alpha * raw + (1.0 - alpha) * prev


def memory_length(fs: float, mode: str = "monotone-decreasing") -> float:
    """Number of library samples averaged into the background.

    ``"as-printed"`` follows the published piecewise formula literally, whose
    middle branch rises from 5 to 90 and so jumps at both knees.
    ``"monotone-decreasing"`` uses the decreasing ramp 90 -> 5 between the
    knees, which is continuous and matches the stated intent (more motion,
    shorter memory). Both agree at the knees themselves.
    """
    if mode not in BM_MODES:
        raise InputError(f"unknown bm mode {mode!r}; choose from {BM_MODES}")
    if fs >= FS_HIGH:
        return float(BM_MIN)
    if fs <= FS_LOW:
        return float(BM_MAX)
    ramp = (fs - FS_LOW) / (FS_HIGH - FS_LOW) * (BM_MAX - BM_MIN)
    if mode == "as-printed":
        return BM_MIN + ramp
    return BM_MAX - ramp


def padding_radius(fs: float) -> int:
    if fs <= FS_LOW:
        return PAD_MIN
    if fs >= FS_HIGH:
        return PAD_MAX
    r = PAD_MIN + (fs - FS_LOW) / (FS_HIGH - FS_LOW) * (PAD_MAX - PAD_MIN)
    return min(PAD_MAX, max(PAD_MIN, _round_half_up(r)))


@dataclass
class MotionState:
    fs_filtered: float = 0.0
    fs_raw: float = 0.0
    bm: float = float(BM_MAX)
    padding_radius: int = PAD_MIN
    flux_ready: bool = False


# ---------------------------------------------------------------------------
# background pixel library
# ---------------------------------------------------------------------------

class PixelLibrary:
    """Per-pixel circular buffer of background samples.

    ``samples[i, y, x]`` is slot ``i`` of pixel ``(y, x)``; ``bi`` points at
    the slot written next (the oldest one once the buffer is full). A running
    float64 sum over all slots makes the full-memory render O(H*W).
    """

    def __init__(self, height: int, width: int, capacity: int = LIBRARY_SIZE):
        self.capacity = capacity
        self.samples = np.zeros((capacity, height, width, 3), dtype=np.float32)
        self.bi = np.zeros((height, width), dtype=np.int32)
        self.fill = np.zeros((height, width), dtype=np.int32)
        self.seed = np.zeros((height, width, 3), dtype=np.float32)
        self.total = np.zeros((height, width, 3), dtype=np.float64)

    def resum(self):
        self.total = self.samples.sum(axis=0, dtype=np.float64)

    @property
    def shape(self):
        return self.samples.shape[1:3]

    @classmethod
    def bootstrap(cls, frame: np.ndarray, capacity: int = LIBRARY_SIZE) -> "PixelLibrary":
        """Library whose every slot holds ``frame``."""
        frame = np.asarray(frame, dtype=np.float32)
        lib = cls(frame.shape[0], frame.shape[1], capacity)
        lib.samples[:] = frame
        lib.fill[:] = capacity
        lib.seed = frame.copy()
        lib.resum()
        return lib

    def update(self, frame: np.ndarray, fg: np.ndarray, pad: int) -> np.ndarray:
        """Store ``frame`` at every pixel that is BG after padding ``fg``.

        Returns the boolean map of written pixels.
        """
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape[:2] != self.shape or np.shape(fg) != self.shape:
            raise InputError(f"library is {self.shape}, frame {frame.shape[:2]}, mask {np.shape(fg)}")
        write = dilate(fg, pad) == BG
        ys, xs = np.nonzero(write)
        slots = self.bi[ys, xs]
        new = frame[ys, xs]
        self.total[ys, xs] += new.astype(np.float64) - self.samples[slots, ys, xs]
        self.samples[slots, ys, xs] = new
        self.bi[write] = (self.bi[write] + 1) % self.capacity
        self.fill[write] = np.minimum(self.fill[write] + 1, self.capacity)
        return write

    def render(self, bm: float) -> np.ndarray:
        """Mean of the ``round(bm)`` most recent samples of every pixel."""
        k = min(max(1, _round_half_up(bm)), self.capacity)
        if k == self.capacity and np.all(self.fill == self.capacity):
            out = self.total / self.capacity
        else:
            offsets = np.arange(1, k + 1, dtype=np.int32)[:, None, None]
            idx = (self.bi[None] - offsets) % self.capacity
            picked = np.take_along_axis(self.samples, idx[..., None], axis=0).astype(np.float64)
            valid = offsets <= self.fill[None]
            counts = np.minimum(self.fill, k)
            total = (picked * valid[..., None]).sum(axis=0)
            out = np.where(counts[..., None] > 0, total / np.maximum(counts, 1)[..., None], self.seed)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def update_library(lib: PixelLibrary, frame, fg, pad: int) -> PixelLibrary:
    lib.update(frame, fg, pad)
    return lib


def render_background(lib: PixelLibrary, bm: float) -> np.ndarray:
    return lib.render(bm)


# ---------------------------------------------------------------------------
# default foreground segmenter
# ---------------------------------------------------------------------------

def naive_segment(frame: np.ndarray, background: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """FG where the largest per-channel absolute difference exceeds ``tau``."""
    frame = np.asarray(frame)
    background = np.asarray(background)
    if frame.shape != background.shape:
        raise InputError(f"frame {frame.shape} and background {background.shape} differ in shape")
    diff = np.abs(frame.astype(np.float64) - background.astype(np.float64))
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return np.where(diff > tau, FG, BG).astype(np.uint8)


class NaiveSegmenter:
    """Frame-vs-background differencing with ghost absorption.

    A pixel that stays FG for more than ``max_fg_run`` consecutive frames is
    released as BG so a library seeded with a foreground object (a ghost) can
    recover.
    """

    def __init__(self, tau: float = 0.1, max_fg_run: int = 30):
        self.tau = tau
        self.max_fg_run = max_fg_run
        self.run = None

    def __call__(self, frame: np.ndarray, background: np.ndarray) -> np.ndarray:
        mask = naive_segment(frame, background, self.tau)
        if self.run is None or self.run.shape != mask.shape:
            self.run = np.zeros(mask.shape, dtype=np.int32)
        self.run = np.where(mask == FG, self.run + 1, 0)
        if self.max_fg_run is not None:
            mask[self.run > self.max_fg_run] = BG
        return mask


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSBG"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIddidi")


@dataclass
class BackgroundModel:
    """Per-stream state: library, flux buffer and motion state.

    Call :meth:`step` once per frame, in order.
    """

    height: int
    width: int
    hook: SegmenterHook | None = None
    bm_mode: str = "monotone-decreasing"
    capacity: int = LIBRARY_SIZE
    library: PixelLibrary | None = None
    flux: FluxBuffer = field(default_factory=FluxBuffer)
    motion: MotionState = field(default_factory=MotionState)
    background: np.ndarray | None = None
    frames_seen: int = 0

    def __post_init__(self):
        if self.bm_mode not in BM_MODES:
            raise InputError(f"unknown bm mode {self.bm_mode!r}; choose from {BM_MODES}")
        if self.hook is None:
            self.hook = NaiveSegmenter()

    def step(self, frame: np.ndarray):
        """Consume one frame; return ``(background, MotionState)``."""
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape != (self.height, self.width, 3):
            raise InputError(f"model expects {self.height}x{self.width}x3 frames, got {frame.shape}")
        if self.library is None:
            self.library = PixelLibrary.bootstrap(frame, self.capacity)
            self.background = self.library.render(BM_MAX)

        fg = np.asarray(self.hook(frame, self.background))
        if fg.shape != frame.shape[:2]:
            raise InputError(f"segmenter returned mask {fg.shape} for frame {frame.shape[:2]}")

        self.flux.push(to_gray(frame))
        m = self.motion
        if self.flux.ready:
            trace = flux_trace(self.flux)
            m.fs_raw = motion_fraction(motion_mask(trace, flux_threshold(trace)))
            m.fs_filtered = lowpass_fs(m.fs_filtered, m.fs_raw)
            m.bm = memory_length(m.fs_filtered, self.bm_mode)
            m.padding_radius = padding_radius(m.fs_filtered)
            m.flux_ready = True
        else:
            m.bm = float(BM_MAX)
            m.padding_radius = PAD_MIN

        self.library.update(frame, fg, m.padding_radius)
        self.background = self.library.render(m.bm)
        self.frames_seen += 1
        return self.background, MotionState(**vars(m))

    # -- checkpointing -----------------------------------------------------

    def save(self, path):
        """Write a versioned, checksummed snapshot for pause/resume."""
        if self.library is None:
            raise InputError("nothing to checkpoint before the first frame")
        m = self.motion
        header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.height, self.width,
                                   self.capacity, len(self.flux.frames), m.fs_filtered, m.fs_raw,
                                   m.padding_radius, m.bm, self.frames_seen)
        mode = self.bm_mode.encode()
        parts = [header, struct.pack("<I", len(mode)), mode,
                 self.library.bi.astype("<i4").tobytes(), self.library.fill.astype("<i4").tobytes(),
                 self.library.samples.astype("<f4").tobytes(), self.library.seed.astype("<f4").tobytes(),
                 self.background.astype("<f4").tobytes()]
        parts += [f.astype("<f8").tobytes() for f in self.flux.frames]
        blob = b"".join(parts)
        Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))

    @classmethod
    def load(cls, path, hook: SegmenterHook | None = None) -> "BackgroundModel":
        raw = Path(path).read_bytes()
        if len(raw) < _CKPT_HEADER.size + 8:
            raise FormatError(f"{path}: truncated checkpoint")
        blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        (magic, version, h, w, cap, n_flux, fs_f, fs_r, pad, bm, seen) = _CKPT_HEADER.unpack_from(blob)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a background checkpoint")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
        if zlib.crc32(blob) != crc:
            raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
        off = _CKPT_HEADER.size
        (n_mode,) = struct.unpack_from("<I", blob, off)
        off += 4
        mode = blob[off:off + n_mode].decode()
        off += n_mode

        def take(dtype, shape):
            nonlocal off
            n = int(np.prod(shape)) * np.dtype(dtype).itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
            off += n
            return arr.copy()

        model = cls(h, w, hook=hook, bm_mode=mode, capacity=cap)
        lib = PixelLibrary(h, w, cap)
        lib.bi = take("<i4", (h, w)).astype(np.int32)
        lib.fill = take("<i4", (h, w)).astype(np.int32)
        lib.samples = take("<f4", (cap, h, w, 3)).astype(np.float32)
        lib.seed = take("<f4", (h, w, 3)).astype(np.float32)
        lib.resum()
        model.library = lib
        model.background = take("<f4", (h, w, 3)).astype(np.float32)
        for _ in range(n_flux):
            model.flux.push(take("<f8", (h, w)))
        model.motion = MotionState(fs_f, fs_r, bm, pad, model.flux.ready)
        model.frames_seen = seen
        return model
