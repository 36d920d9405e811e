"""Core data types, dot-product mask decoding and panoptic fusion."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import IntegrityError
from .numerics import Tensor, as_tensor, matmul
from .numerics.tensor import _sigmoid

VOID = 0

STAGES = ("prematch", "tracker", "refiner")


@dataclass(frozen=True)
class FrameQueries:
    """Unordered per-frame object queries from the segmenter.

    The last column of ``class_logits`` is the "no object" class.
    """

    embeddings: np.ndarray  # [N, D]
    class_logits: np.ndarray  # [N, K+1]
    mask_embeddings: np.ndarray  # [N, Dm]

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if n < 1:
            raise IntegrityError("FrameQueries needs at least one query")
        if self.class_logits.shape[0] != n or self.mask_embeddings.shape[0] != n:
            raise IntegrityError(
                f"query count mismatch: {n}, {self.class_logits.shape[0]}, {self.mask_embeddings.shape[0]}"
            )

    @property
    def num_queries(self) -> int:
        return self.embeddings.shape[0]

    def permuted(self, order: Sequence[int]) -> "FrameQueries":
        order = np.asarray(order)
        return FrameQueries(self.embeddings[order], self.class_logits[order], self.mask_embeddings[order])


@dataclass(frozen=True)
class VideoClip:
    """Pixel features stored as a codebook plus per-frame codebook index maps.

    ``features(t)[:, h, w] == codebook[index_maps[t, h, w]]``.
    """

    codebook: np.ndarray  # [M, Dm]
    index_maps: np.ndarray  # [T, H, W] integer

    def __post_init__(self):
        if self.index_maps.ndim != 3:
            raise IntegrityError("index maps must be [T, H, W]")
        if self.index_maps.size and int(self.index_maps.max()) >= self.codebook.shape[0]:
            raise IntegrityError("index map refers past the end of the codebook")

    @property
    def T(self) -> int:
        return self.index_maps.shape[0]

    @property
    def H(self) -> int:
        return self.index_maps.shape[1]

    @property
    def W(self) -> int:
        return self.index_maps.shape[2]

    @property
    def feature_dim(self) -> int:
        return self.codebook.shape[1]

    def features(self, t: int) -> np.ndarray:
        return np.moveaxis(self.codebook[self.index_maps[t]], -1, 0)

    def frames(self, start: int, stop: int) -> "VideoClip":
        return VideoClip(self.codebook, self.index_maps[start:stop])

    def resized(self, h: int, w: int) -> "VideoClip":
        return VideoClip(self.codebook, resize_nearest(self.index_maps, h, w))

    def cropped(self, top: int, left: int, size: int) -> "VideoClip":
        return VideoClip(self.codebook, self.index_maps[:, top:top + size, left:left + size])


@dataclass(frozen=True)
class Track:
    class_id: int
    is_thing: bool
    slot: int | None = None  # query slot that produced a predicted segment


@dataclass(frozen=True)
class PanopticVideo:
    """Per-frame segment id maps (0 = void) and the segment id -> class table."""

    id_maps: np.ndarray  # [T, H, W] int
    tracks: dict = field(default_factory=dict)  # segment id -> Track

    def __post_init__(self):
        if self.id_maps.ndim != 3:
            raise IntegrityError("id maps must be [T, H, W]")
        if self.id_maps.shape[0] == 0:
            raise IntegrityError("a panoptic video needs at least one frame")
        present = set(np.unique(self.id_maps).tolist()) - {VOID}
        missing = sorted(present - set(self.tracks))
        if missing:
            raise IntegrityError(f"segment ids {missing} appear in id maps but not in the track table")
        seen: dict[int, int] = {}
        for sid, tr in self.tracks.items():
            if tr.is_thing or sid not in present:
                continue
            if tr.class_id in seen:
                raise IntegrityError(
                    f"stuff class {tr.class_id} has two segment ids ({seen[tr.class_id]}, {sid})"
                )
            seen[tr.class_id] = sid

    @property
    def T(self) -> int:
        return self.id_maps.shape[0]

    @property
    def shape(self) -> tuple:
        return self.id_maps.shape

    def frames(self, start: int, stop: int) -> "PanopticVideo":
        maps = self.id_maps[start:stop]
        ids = set(np.unique(maps).tolist())
        return PanopticVideo(maps, {k: v for k, v in self.tracks.items() if k in ids})

    def resized(self, h: int, w: int) -> "PanopticVideo":
        maps = resize_nearest(self.id_maps, h, w)
        ids = set(np.unique(maps).tolist())
        return PanopticVideo(maps, {k: v for k, v in self.tracks.items() if k in ids})

    def cropped(self, top: int, left: int, size: int) -> "PanopticVideo":
        maps = self.id_maps[:, top:top + size, left:left + size]
        ids = set(np.unique(maps).tolist())
        return PanopticVideo(maps, {k: v for k, v in self.tracks.items() if k in ids})

    def __eq__(self, other):
        if not isinstance(other, PanopticVideo):
            return NotImplemented
        return np.array_equal(self.id_maps, other.id_maps) and self.tracks == other.tracks


@dataclass(frozen=True)
class TrackedQuerySequence:
    """Temporally aligned queries: slot n refers to one identity in every frame."""

    queries: np.ndarray  # [T, N, D]
    stage: str = "prematch"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.queries.ndim != 3:
            raise IntegrityError("tracked queries must be [T, N, D]")

    @property
    def T(self) -> int:
        return self.queries.shape[0]


def resize_nearest(maps: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = maps.shape[-2:]
    rows = np.minimum((np.arange(h) + 0.5) * H / h, H - 1).astype(int)
    cols = np.minimum((np.arange(w) + 0.5) * W / w, W - 1).astype(int)
    return maps[..., rows[:, None], cols[None, :]]


def rasterize_masks(mask_embeddings, pixel_features) -> Tensor:
    """Mask logits ``<mask_embeddings[n], pixel_features[:, h, w]>`` as ``[N, H, W]``."""
    m = as_tensor(mask_embeddings)
    f = np.asarray(getattr(pixel_features, "data", pixel_features))
    if m.ndim != 2 or f.ndim != 3 or m.shape[1] != f.shape[0]:
        raise ValueError(f"mask embedding {m.shape} incompatible with features {f.shape}")
    dm, h, w = f.shape
    return matmul(m, Tensor(f.reshape(dm, h * w))).reshape(m.shape[0], h, w)


@dataclass(frozen=True)
class FuseConfig:
    object_threshold: float = 0.5  # minimum object score to keep a query
    overlap_threshold: float = 0.8  # fraction of its mask a query must keep after competition


def class_probs(class_logits: np.ndarray) -> np.ndarray:
    z = class_logits - class_logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def segment_id(slot: int, class_id: int, num_slots: int, num_classes: int, is_thing: bool) -> int:
    """Stable segment id: things are keyed by (class, slot); stuff by class alone."""
    if is_thing:
        return 1 + class_id * num_slots + slot
    return 1 + num_classes * num_slots + class_id


def panoptic_fuse(mask_logits, class_logits, thing_classes: Sequence[bool],
                  config: FuseConfig = FuseConfig()) -> tuple[np.ndarray, dict]:
    """Fuse per-query masks into one id map for a frame.

    Returns the ``[H, W]`` id map and a track table ``{id: Track}``. Query
    slot order determines the ids so that the same slot keeps its id across
    frames of one video.
    """
    mask_logits = np.asarray(getattr(mask_logits, "data", mask_logits))
    class_logits = np.asarray(getattr(class_logits, "data", class_logits))
    n, h, w = mask_logits.shape
    num_classes = class_logits.shape[1] - 1
    probs = class_probs(class_logits)
    argmax = probs.argmax(axis=1)
    scores = probs[:, :num_classes].max(axis=1)
    labels = probs[:, :num_classes].argmax(axis=1)
    keep = np.flatnonzero((argmax != num_classes) & (scores >= config.object_threshold))

    id_map = np.zeros((h, w), dtype=np.int64)
    tracks: dict[int, Track] = {}
    if keep.size == 0:
        return id_map, tracks

    mask_probs = _sigmoid(mask_logits[keep])
    weighted = scores[keep, None, None] * mask_probs
    winner = weighted.argmax(axis=0)
    for j, q in enumerate(keep):
        cls = int(labels[q])
        original = mask_probs[j] >= 0.5
        area = int(original.sum())
        won = (winner == j) & original
        kept = int(won.sum())
        if area == 0 or kept == 0 or kept / area < config.overlap_threshold:
            continue
        thing = bool(thing_classes[cls])
        sid = segment_id(int(q), cls, n, num_classes, thing)
        id_map[won] = sid
        tracks[sid] = Track(cls, thing, int(q) if thing else None)
    return id_map, tracks


def assemble_video(frames: Sequence[tuple[np.ndarray, dict]]) -> PanopticVideo:
    maps = np.stack([m for m, _ in frames])
    tracks: dict[int, Track] = {}
    for _, tab in frames:
        tracks.update(tab)
    return PanopticVideo(maps, tracks)


def clip_features(clip: VideoClip) -> np.ndarray:
    """Dense pixel features ``[T, Dm, H, W]``."""
    return np.moveaxis(clip.codebook[clip.index_maps], -1, 1)


def rasterize_clip(mask_embeddings, features: np.ndarray) -> Tensor:
    """Per-frame mask logits ``[T, N, H, W]`` from ``mask_embeddings[T, N, Dm]``.

    ``features`` is ``[T, Dm, H, W]``; matching batch axes after T may be
    added to both arguments.
    """
    m = as_tensor(mask_embeddings)
    *lead, dm, h, w = features.shape
    if m.ndim != len(lead) + 2 or tuple(m.shape[:-2]) != tuple(lead) or m.shape[-1] != dm:
        raise ValueError(f"mask embeddings {m.shape} incompatible with features {features.shape}")
    flat = Tensor(features.reshape(*lead, dm, h * w))
    return matmul(m, flat).reshape(*m.shape[:-1], h, w)
