"""Dataset manifests, ground-truth coding and the CDnet directory reader."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InputError
from .imagecore import BG, FG, IGNORE, read_gray8

log = logging.getLogger(__name__)

# Categories whose videos are used for training (the rest are held out
# because their background changes too much).
TRAINING_CATEGORIES = frozenset({
    "badWeather", "baseline", "cameraJitter", "dynamicBackground",
    "nightVideos", "shadow", "thermal", "turbulence",
})
ALL_CATEGORIES = TRAINING_CATEGORIES | {"intermittentObjectMotion", "lowFramerate", "PTZ"}

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff"}


class GroundTruthCoding:
    """Total map from 8-bit ground-truth values to BG / FG / IGNORE.

    CDnet values: 0 static, 50 hard shadow, 85 outside ROI, 170 unknown
    (object boundary), 255 moving. Shadows count as background. Values off
    the table go to the nearest coded value.
    """

    CDNET = {0: BG, 50: BG, 85: IGNORE, 170: IGNORE, 255: FG}

    def __init__(self, table: dict | None = None):
        table = dict(self.CDNET if table is None else table)
        if not table:
            raise InputError("ground-truth coding table is empty")
        keys = np.array(sorted(table))
        values = np.arange(256)
        nearest = keys[np.abs(values[:, None] - keys[None, :]).argmin(axis=1)]
        self.table = {int(k): int(v) for k, v in table.items()}
        self.lut = np.array([table[int(k)] for k in nearest], dtype=np.uint8)

    def decode(self, gt8: np.ndarray, roi: np.ndarray | None = None) -> np.ndarray:
        labels = self.lut[np.asarray(gt8, dtype=np.uint8)]
        if roi is not None:
            labels = labels.copy()
            labels[np.asarray(roi) == 0] = IGNORE
        return labels

    def to_dict(self):
        return {str(k): v for k, v in sorted(self.table.items())}

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): int(v) for k, v in d.items()})


@dataclass
class VideoEntry:
    video_id: str
    category: str
    frames: list
    groundtruth: list
    roi: str | None = None
    background: dict = field(default_factory=lambda: {"source": "bgmodel"})
    warmup: list = field(default_factory=list)  # frames before the temporal ROI

    def __post_init__(self):
        if len(self.frames) != len(self.groundtruth):
            raise InputError(f"video {self.video_id}: {len(self.frames)} frames but "
                             f"{len(self.groundtruth)} ground-truth entries")


@dataclass
class DatasetManifest:
    """Videos with their frame / ground-truth paths, relative to ``root``."""

    root: Path
    videos: list
    include: frozenset = TRAINING_CATEGORIES

    def path(self, rel) -> Path:
        return Path(self.root) / rel

    def training_videos(self):
        return [v for v in self.videos if v.category in self.include]

    def read_labels(self, video: VideoEntry, index: int, coding: GroundTruthCoding | None = None):
        coding = coding or GroundTruthCoding()
        gt = read_gray8(self.path(video.groundtruth[index]))
        roi = None
        if video.roi:
            roi = read_gray8(self.path(video.roi))
            if roi.shape != gt.shape:
                raise InputError(f"video {video.video_id}: ROI {roi.shape} does not match ground truth {gt.shape}")
        return coding.decode(gt, roi)

    def save(self, path):
        doc = {
            "root": str(self.root),
            "include": sorted(self.include),
            "videos": [
                {"id": v.video_id, "category": v.category, "roi": v.roi, "background": v.background,
                 "warmup": list(v.warmup), "frames": list(v.frames), "groundtruth": list(v.groundtruth)}
                for v in self.videos
            ],
        }
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        root = Path(doc.get("root", "."))
        if not root.is_absolute():
            root = path.parent / root
        videos = [VideoEntry(v["id"], v["category"], v["frames"], v["groundtruth"], v.get("roi"),
                             v.get("background") or {"source": "bgmodel"}, v.get("warmup") or [])
                  for v in doc.get("videos", [])]
        return cls(root, videos, frozenset(doc.get("include", TRAINING_CATEGORIES)))


def _images(folder: Path):
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _frame_number(p: Path):
    m = re.search(r"(\d+)", p.stem)
    return int(m.group(1)) if m else None


def load_cdnet_video(root: Path, video_dir: Path, category: str) -> VideoEntry:
    """Read one ``category/video`` folder of a CDnet-style tree."""
    vid = f"{category}/{video_dir.name}"
    troi = video_dir / "temporalROI.txt"
    if not troi.is_file():
        raise InputError(f"video {vid}: missing temporalROI.txt in {video_dir}")
    try:
        start, end = (int(t) for t in troi.read_text().split()[:2])
    except ValueError as exc:
        raise InputError(f"video {vid}: malformed {troi}") from exc
    frames = _images(video_dir / "input")
    gts = _images(video_dir / "groundtruth")
    if len(frames) != len(gts):
        raise InputError(f"video {vid}: {len(frames)} input frames but {len(gts)} ground-truth images")
    keep, warmup = [], []
    for i, (f, g) in enumerate(zip(frames, gts), start=1):
        n = _frame_number(f)
        n = i if n is None else n
        if start <= n <= end:
            keep.append((f, g))
        elif n < start:
            warmup.append(f)
    if not keep:
        raise InputError(f"video {vid}: temporal ROI {start}-{end} selects no frames")
    rois = sorted(p for p in video_dir.iterdir() if p.stem == "ROI" and p.suffix.lower() in IMAGE_SUFFIXES)
    rel = lambda p: str(p.relative_to(root))  # noqa: E731
    return VideoEntry(vid, category, [rel(f) for f, _ in keep], [rel(g) for _, g in keep],
                      rel(rois[0]) if rois else None, warmup=[rel(f) for f in warmup])


def load_cdnet(root) -> DatasetManifest:
    """Build a manifest from ``root/<category>/<video>/{input,groundtruth}``.

    Frames are restricted to the temporal ROI; the spatial ROI image, when
    present, is folded into IGNORE labels on read.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root {root} does not exist")
    videos = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for video_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            has_input = (video_dir / "input").is_dir()
            has_gt = (video_dir / "groundtruth").is_dir()
            if not (has_input or has_gt):
                continue
            if not (has_input and has_gt):
                missing = "groundtruth" if has_input else "input"
                raise InputError(f"{video_dir}: missing {missing}/ folder")
            videos.append(load_cdnet_video(root, video_dir, cat_dir.name))
    if not videos:
        raise InputError(f"{root}: no category/video folders with input/ and groundtruth/")
    return DatasetManifest(root, videos)
