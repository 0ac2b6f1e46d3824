"""Dataset preparation, training and per-frame / per-video segmentation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bgmodel import BackgroundModel, NaiveSegmenter
from .dataset import DatasetManifest, GroundTruthCoding, VideoEntry
from .errors import DivergenceError, FormatError, InputError
from .imagecore import (FG, IGNORE, INFER_STRIDE, NETWORK_HEIGHT, NETWORK_WIDTH, PATCH_SIDE, TRAIN_STRIDE,
                        coverage_counts, extract_patches, median_filter, pad_image, plan_patches, read_frame,
                        reassemble_scores, resize_bilinear, resize_nearest, threshold_map)
from .network import Network, NetworkConfig, RmsProp, bce_masked

log = logging.getLogger(__name__)

NETWORK_SIZE = (NETWORK_HEIGHT, NETWORK_WIDTH)
STORE_FORMAT = "cseg-sample-store"
STORE_VERSION = 1


@dataclass
class SamplingPolicy:
    train_frames: int = 150
    val_frames: int = 20
    stride: int = TRAIN_STRIDE
    seed: int = 0


def split_frames(manifest: DatasetManifest, policy: SamplingPolicy) -> dict:
    """Pick disjoint random training and validation frame indices per video."""
    rng = np.random.default_rng(policy.seed)
    splits = {}
    for video in manifest.training_videos():
        perm = rng.permutation(len(video.frames))
        train = sorted(int(i) for i in perm[:policy.train_frames])
        val = sorted(int(i) for i in perm[policy.train_frames:policy.train_frames + policy.val_frames])
        splits[video.video_id] = {"train": train, "val": val}
    return splits


# ---------------------------------------------------------------------------
# background sources
# ---------------------------------------------------------------------------

class BgModelSource:
    """Backgrounds rendered by running the adaptive model over a video.

    The model sees every frame up to the last requested one (warm-up frames
    first). Results can be cached as ``.npy`` files under ``cache_dir``.
    """

    def __init__(self, cache_dir=None, bm_mode="monotone-decreasing", size=NETWORK_SIZE, tau=0.1):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.bm_mode = bm_mode
        self.size = size
        self.tau = tau

    def _cache_path(self, video: VideoEntry, index: int):
        safe = video.video_id.replace("/", "__")
        return self.cache_dir / safe / f"bg{index:06d}.npy"

    def __call__(self, manifest: DatasetManifest, video: VideoEntry, indices) -> dict:
        indices = sorted(set(indices))
        if not indices:
            return {}
        out = {}
        if self.cache_dir:
            for i in indices:
                p = self._cache_path(video, i)
                if p.is_file():
                    out[i] = np.load(p)
            if len(out) == len(indices):
                return out
        model = BackgroundModel(*self.size, hook=NaiveSegmenter(self.tau), bm_mode=self.bm_mode)
        for rel in video.warmup:
            model.step(resize_bilinear(read_frame(manifest.path(rel)), self.size))
        wanted = set(indices)
        for i in range(indices[-1] + 1):
            bg, _ = model.step(resize_bilinear(read_frame(manifest.path(video.frames[i])), self.size))
            if i in wanted:
                out[i] = bg.copy()
        if self.cache_dir:
            for i, bg in out.items():
                p = self._cache_path(video, i)
                p.parent.mkdir(parents=True, exist_ok=True)
                np.save(p, bg)
        return out


class ImageSource:
    """Backgrounds read from a folder of images aligned with the frames."""

    def __init__(self, size=NETWORK_SIZE):
        self.size = size

    def __call__(self, manifest: DatasetManifest, video: VideoEntry, indices) -> dict:
        folder = manifest.path(video.background["path"])
        files = sorted(p for p in folder.iterdir() if p.is_file())
        if len(files) != len(video.frames):
            raise InputError(f"video {video.video_id}: {len(files)} background images for {len(video.frames)} frames")
        return {i: resize_bilinear(read_frame(files[i]), self.size) for i in indices}


def default_source(video: VideoEntry, bgmodel_source: BgModelSource):
    kind = (video.background or {}).get("source", "bgmodel")
    if kind == "bgmodel":
        return bgmodel_source
    if kind == "images":
        return ImageSource(bgmodel_source.size)
    raise InputError(f"video {video.video_id}: unknown background source {kind!r}")


# ---------------------------------------------------------------------------
# sample store
# ---------------------------------------------------------------------------

def patch_mean(video: np.ndarray, background: np.ndarray, layout) -> np.ndarray:
    """Per-channel mean of every image pixel of every video and background patch.

    Overlapping patches count a pixel once per patch; the zero margin is not
    image data and is left out.
    """
    cov = coverage_counts(layout)[layout.pad_top:layout.pad_top + layout.height,
                                  layout.pad_left:layout.pad_left + layout.width]
    total = np.einsum("fhwc,hw->c", video.astype(np.float64), cov)
    total += np.einsum("fhwc,hw->c", background.astype(np.float64), cov)
    return (total / (2 * len(video) * cov.sum())).astype(np.float32)


class SampleStore:
    """Aligned video / background / label frames, served as patch triplets.

    Sample ``i`` is patch ``i % n_patches`` (row-major in the layout) of frame
    ``i // n_patches``. Patches come out mean-subtracted; the zero-padded
    margin reads 0 in the video/background channels and IGNORE in the labels.
    """

    def __init__(self, video, background, labels, mean, stride=TRAIN_STRIDE, frame_ids=None,
                 coding: GroundTruthCoding | None = None):
        self.video = np.asarray(video, np.float32)
        self.background = np.asarray(background, np.float32)
        self.labels = np.asarray(labels, np.uint8)
        if not (self.video.shape == self.background.shape and self.video.shape[:3] == self.labels.shape):
            raise InputError(f"store arrays disagree: video {self.video.shape}, "
                             f"background {self.background.shape}, labels {self.labels.shape}")
        self.mean = np.asarray(mean, np.float32)
        self.stride = stride
        self.frame_ids = list(frame_ids) if frame_ids is not None else [("", i) for i in range(len(self.video))]
        self.coding = coding or GroundTruthCoding()
        h, w = self.video.shape[1:3] if len(self.video) else NETWORK_SIZE
        self.layout = plan_patches(h, w, PATCH_SIDE, stride)
        self._pairs = None
        self._plabels = None

    def __len__(self):
        return len(self.video) * self.layout.n_patches

    @property
    def n_frames(self):
        return len(self.video)

    def _prepare(self):
        if self._pairs is None:
            pairs = np.concatenate([self.video - self.mean, self.background - self.mean], axis=-1)
            self._pairs = np.stack([pad_image(p, self.layout, 0.0) for p in pairs]) if len(pairs) else pairs
            self._plabels = np.stack([pad_image(lab, self.layout, IGNORE) for lab in self.labels]) \
                if len(self.labels) else self.labels
            self._origins = np.array(self.layout.origins())

    def batch(self, indices):
        """``(X, targets, ignore)`` with X of shape ``(B, 6, 37, 37)``."""
        self._prepare()
        indices = np.asarray(indices)
        s = self.layout.side
        frames, patches = np.divmod(indices, self.layout.n_patches)
        x = np.empty((len(indices), s, s, 6), np.float32)
        lab = np.empty((len(indices), s, s), np.uint8)
        for k, (f, p) in enumerate(zip(frames, patches)):
            r, c = self._origins[p]
            x[k] = self._pairs[f, r:r + s, c:c + s]
            lab[k] = self._plabels[f, r:r + s, c:c + s]
        lab = lab.reshape(len(indices), -1)
        return x.transpose(0, 3, 1, 2), (lab == FG).astype(np.uint8), lab == IGNORE

    def sample(self, i):
        """One triplet as a dict of video / background patches, target and ignore flags."""
        x, t, ig = self.batch([i])
        return {"video": x[0, :3], "background": x[0, 3:], "target": t[0], "ignore": ig[0]}

    def save(self, directory, frames_per_shard=16):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        shards = []
        for k, start in enumerate(range(0, max(self.n_frames, 1), frames_per_shard)):
            name = f"shard_{k:04d}.npz"
            sl = slice(start, start + frames_per_shard)
            np.savez(directory / name, video=self.video[sl], background=self.background[sl], labels=self.labels[sl])
            shards.append({"file": name, "frames": int(len(self.video[sl]))})
        index = {
            "format": STORE_FORMAT, "version": STORE_VERSION,
            "samples": len(self), "frames": self.n_frames,
            "frame_shape": list(self.video.shape[1:3]), "patch_side": self.layout.side,
            "stride": self.stride, "patches_per_frame": self.layout.n_patches,
            "mean": [float(m) for m in self.mean], "coding": self.coding.to_dict(),
            "frame_ids": [[str(v), int(i)] for v, i in self.frame_ids], "shards": shards,
        }
        (directory / "index.json").write_text(json.dumps(index, indent=1))

    @classmethod
    def load(cls, directory) -> "SampleStore":
        directory = Path(directory)
        try:
            index = json.loads((directory / "index.json").read_text())
        except OSError as exc:
            raise InputError(f"no sample store at {directory}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{directory}/index.json is corrupt") from exc
        if index.get("format") != STORE_FORMAT or index.get("version") != STORE_VERSION:
            raise FormatError(f"{directory}: store format {index.get('format')} v{index.get('version')}, "
                              f"expected {STORE_FORMAT} v{STORE_VERSION}")
        parts = {"video": [], "background": [], "labels": []}
        for shard in index["shards"]:
            with np.load(directory / shard["file"]) as z:
                for key in parts:
                    parts[key].append(z[key])
        h, w = index["frame_shape"]
        cat = {k: (np.concatenate(v) if v else np.zeros((0, h, w) + ((3,) if k != "labels" else ())))
               for k, v in parts.items()}
        if len(cat["video"]) != index["frames"]:
            raise FormatError(f"{directory}: index lists {index['frames']} frames, shards hold {len(cat['video'])}")
        return cls(cat["video"], cat["background"], cat["labels"], index["mean"], index["stride"],
                   [tuple(f) for f in index["frame_ids"]], GroundTruthCoding.from_dict(index["coding"]))


@dataclass
class PreparedData:
    train: SampleStore
    val: SampleStore
    splits: dict = field(default_factory=dict)


def prepare_dataset(manifest: DatasetManifest, policy: SamplingPolicy | None = None, bg_source=None,
                    coding: GroundTruthCoding | None = None, size=NETWORK_SIZE) -> PreparedData:
    """Build training and validation stores from the manifest's training videos."""
    policy = policy or SamplingPolicy()
    coding = coding or GroundTruthCoding()
    bgm = bg_source if isinstance(bg_source, BgModelSource) else BgModelSource(size=size)
    videos = manifest.training_videos()
    if not videos:
        raise InputError(f"manifest has no videos in the training categories {sorted(manifest.include)}")
    splits = split_frames(manifest, policy)
    parts = {"train": ([], [], [], []), "val": ([], [], [], [])}
    for video in videos:
        split = splits[video.video_id]
        source = bg_source if (bg_source is not None and not isinstance(bg_source, BgModelSource)) \
            else default_source(video, bgm)
        backgrounds = source(manifest, video, split["train"] + split["val"])
        for name in ("train", "val"):
            vids, bgs, labs, ids = parts[name]
            for i in split[name]:
                gt_path = manifest.path(video.groundtruth[i])
                if not gt_path.is_file():
                    log.warning("video %s frame %d: ground truth %s missing; skipped", video.video_id, i, gt_path)
                    continue
                vids.append(resize_bilinear(read_frame(manifest.path(video.frames[i])), size))
                bgs.append(np.asarray(backgrounds[i], np.float32))
                labs.append(resize_nearest(manifest.read_labels(video, i, coding), size))
                ids.append((video.video_id, i))
    tv, tb, tl, tid = parts["train"]
    if not tv:
        raise InputError("dataset preparation produced no training frames")
    layout = plan_patches(size[0], size[1], PATCH_SIDE, policy.stride)
    mean = patch_mean(np.stack(tv), np.stack(tb), layout)
    train = SampleStore(np.stack(tv), np.stack(tb), np.stack(tl), mean, policy.stride, tid, coding)
    vv, vb, vl, vid = parts["val"]
    empty = np.zeros((0,) + size + (3,), np.float32)
    val = SampleStore(np.stack(vv) if vv else empty, np.stack(vb) if vb else empty,
                      np.stack(vl) if vl else np.zeros((0,) + size, np.uint8), mean, policy.stride, vid, coding)
    return PreparedData(train, val, splits)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    network: Network
    history: list
    optimizer: RmsProp


def dataset_loss(net: Network, store: SampleStore, batch_size: int = 300) -> float:
    """Inference-mode masked BCE over every sample of ``store``."""
    total, count = 0.0, 0
    for start in range(0, len(store), batch_size):
        x, t, ig = store.batch(np.arange(start, min(start + batch_size, len(store))))
        n = int((~ig).sum())
        if n:
            total += bce_masked(net.forward(x), t, ig) * n
            count += n
    return total / count if count else float("nan")


def train(store: SampleStore, val_store: SampleStore | None = None, epochs: int = 10, batch_size: int = 150,
          lr: float = 2.5e-3, seed: int = 0, config: NetworkConfig | None = None, progress=None) -> TrainResult:
    """Mini-batch RMSProp on the masked BCE, shuffling each epoch.

    ``progress`` (optional) is called with each finished epoch's history row.
    """
    if store is None or len(store) == 0:
        raise InputError("training store is empty")
    rng = np.random.default_rng(seed)
    net = Network.init(seed, config)
    net.input_mean = store.mean.copy()
    opt = RmsProp(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(store))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            x, t, ig = store.batch(idx)
            loss, grads = net.loss_and_grads(x, t, ig)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}, batch {start // batch_size}")
            opt.step(net.params, grads)
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_loss": dataset_loss(net, val_store) if val_store is not None and len(val_store) else float("nan")}
        history.append(row)
        log.info("epoch %d train %.5f val %.5f", epoch, row["train_loss"], row["val_loss"])
        if progress:
            progress(row)
    return TrainResult(net, history, opt)


def write_history(path, history):
    lines = ["epoch\ttrain_loss\tval_loss"]
    lines += [f"{h['epoch']}\t{h['train_loss']:.8f}\t{h['val_loss']:.8f}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def score_frame(net: Network, frame: np.ndarray, background: np.ndarray, stride: int = INFER_STRIDE,
                pad: int = 0) -> np.ndarray:
    """Raw network score map at network resolution (240x320)."""
    mean = net.require_mean()
    frame = resize_bilinear(np.asarray(frame, np.float32), NETWORK_SIZE)
    background = resize_bilinear(np.asarray(background, np.float32), NETWORK_SIZE)
    pair = np.concatenate([frame - mean, background - mean], axis=-1)
    layout = plan_patches(NETWORK_SIZE[0], NETWORK_SIZE[1], PATCH_SIDE, stride, pad)
    patches = extract_patches(pair, layout).transpose(0, 3, 1, 2)
    scores = net.predict(patches)
    return reassemble_scores(scores, layout)


def segment_frame(net: Network, frame: np.ndarray, background: np.ndarray, threshold: float = 0.3,
                  median: int = 9, stride: int = INFER_STRIDE, pad: int = 0) -> np.ndarray:
    """Label mask for ``frame``: tile, classify, reassemble, median-filter, threshold.

    Frames of any size are processed at 240x320 and the mask is resized back.
    """
    scores = score_frame(net, frame, background, stride, pad)
    mask = threshold_map(median_filter(scores, median), threshold)
    h, w = np.shape(frame)[:2]
    return resize_nearest(mask, (h, w))


def segment_video(net: Network, frames, bgmodel: BackgroundModel | None = None, **kwargs):
    """Yield one label mask per frame, driving the background model as it goes."""
    for i, frame in enumerate(frames):
        try:
            small = resize_bilinear(np.asarray(frame, np.float32), NETWORK_SIZE)
            if bgmodel is None:
                bgmodel = BackgroundModel(*NETWORK_SIZE)
            background, _ = bgmodel.step(small)
            mask = segment_frame(net, small, background, **kwargs)
        except InputError as exc:
            raise InputError(f"frame {i}: {exc}") from exc
        yield resize_nearest(mask, np.shape(frame)[:2])
