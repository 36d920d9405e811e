"""Synthetic panoptic videos and a frozen segmenter stand-in.

Scenes are horizontal "stuff" bands with moving geometric "things" drawn on
top in creation order. Pixel features come from a per-video codebook: row
``sid`` is ``[1, v_sid]`` where the ``v`` vectors are orthonormal, so a mask
embedding ``[-a/2, a * v_sid]`` decodes to ``+a/2`` on the segment and
``-a/2`` everywhere else.

The stub segmenter emits one query per entity (track or distractor) per
frame. An embedding is ``[beta * v_e | rho * prototype(class)]`` plus
Gaussian noise whose per-coordinate scale is ``sigma * ID_NOISE`` on the
identity block and ``sigma * SEM_NOISE`` on the semantic block: identity is
stable, the semantic part is dominated by frame-to-frame variation.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .datamodel import FrameQueries, PanopticVideo, Track, VideoClip
from .errors import ConfigError

CLASSES: tuple[tuple[str, bool], ...] = (
    ("disk", True),
    ("square", True),
    ("bar", True),
    ("diamond", True),
    ("sky", False),
    ("ground", False),
    ("wall", False),
)
THING_CLASSES = [i for i, (_, t) in enumerate(CLASSES) if t]
STUFF_CLASSES = [i for i, (_, t) in enumerate(CLASSES) if not t]
IS_THING = [t for _, t in CLASSES]
NUM_CLASSES = len(CLASSES)

MASK_SCALE = 8.0  # mask logits are +-MASK_SCALE/2 on/off a segment
LOGIT_PEAK = 6.0
ID_NORM = 1.0
PROTO_NORM = 3.0
ID_NOISE = 0.35
SEM_NOISE = 2.0
_PROTO_SEED = 20230617


def child_rng(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named stream derived from ``seed``."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng([int(seed), *keys])


@dataclass(frozen=True)
class SceneConfig:
    T: int = 16
    H: int = 64
    W: int = 64
    things_min: int = 2
    things_max: int = 4
    stuff_regions: int = 2
    speed_min: float = 1.0
    speed_max: float = 3.0
    size_min: int = 5
    size_max: int = 10
    p_appear: float = 0.0
    p_disappear: float = 0.0
    sigma: float = 0.0
    distractors: int = 2
    embed_dim: int = 64
    mask_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.H < 1 or self.W < 1:
            raise ConfigError("T, H, W must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        for p in ("p_appear", "p_disappear"):
            if not 0.0 <= getattr(self, p) <= 1.0:
                raise ConfigError(f"{p} must lie in [0, 1]")
        if not 0 <= self.things_min <= self.things_max:
            raise ConfigError("need 0 <= things_min <= things_max")
        if not 1 <= self.stuff_regions <= len(STUFF_CLASSES):
            raise ConfigError(f"stuff_regions must be in [1, {len(STUFF_CLASSES)}]")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ConfigError("need 0 <= speed_min <= speed_max")
        if self.size_min < 1 or self.size_max < self.size_min:
            raise ConfigError("need 1 <= size_min <= size_max")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0")
        idim = self.mask_dim - 1
        if self.stuff_regions + self.things_max + self.distractors > idim:
            raise ConfigError(f"at most {idim} entities fit the mask feature basis")
        if self.embed_dim - idim < NUM_CLASSES + 1:
            raise ConfigError("embed_dim too small for identity and class blocks")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scene config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _bounce(x0: float, v: float, t: int, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    u = (x0 - lo + v * t) % (2 * span)
    return lo + (span - abs(u - span))


def shape_mask(class_id: int, cy: float, cx: float, size: float, H: int, W: int) -> np.ndarray:
    rr, cc = np.mgrid[0:H, 0:W]
    dr, dc = rr - cy, cc - cx
    name = CLASSES[class_id][0]
    if name == "disk":
        return dr * dr + dc * dc <= size * size
    if name == "square":
        return (np.abs(dr) <= size) & (np.abs(dc) <= size)
    if name == "bar":
        return (np.abs(dr) <= size / 2) & (np.abs(dc) <= size * 1.5)
    if name == "diamond":
        return np.abs(dr) + np.abs(dc) <= size * 1.3
    raise ValueError(f"class {class_id} is not a thing class")


@dataclass(frozen=True)
class _Thing:
    class_id: int
    y0: float
    x0: float
    vy: float
    vx: float
    size: float
    start: int
    end: int

    def center(self, t: int, H: int, W: int) -> tuple[float, float]:
        return _bounce(self.y0, self.vy, t, 0, H - 1), _bounce(self.x0, self.vx, t, 0, W - 1)


def _scene(config: SceneConfig):
    rng = child_rng(config.seed, "scene")
    T, H, W = config.T, config.H, config.W
    cuts = np.sort(rng.choice(np.arange(1, H), size=config.stuff_regions - 1, replace=False)) if H > 1 else []
    bounds = [0, *[int(c) for c in cuts], H]
    stuff_cls = rng.choice(STUFF_CLASSES, size=config.stuff_regions, replace=False)
    n_things = int(rng.integers(config.things_min, config.things_max + 1))
    things = []
    for _ in range(n_things):
        cls = int(rng.choice(THING_CLASSES))
        speed = rng.uniform(config.speed_min, config.speed_max)
        ang = rng.uniform(0, 2 * np.pi)
        size = float(rng.integers(config.size_min, config.size_max + 1))
        start = int(rng.integers(1, T)) if T > 1 and rng.random() < config.p_appear else 0
        end = int(rng.integers(start + 1, T + 1)) if rng.random() < config.p_disappear else T
        things.append(
            _Thing(cls, rng.uniform(0, H - 1), rng.uniform(0, W - 1),
                   speed * np.sin(ang), speed * np.cos(ang), size, start, end)
        )
    return bounds, [int(c) for c in stuff_cls], things


def generate_clip(config: SceneConfig) -> tuple[VideoClip, PanopticVideo]:
    """Render one video and its exact panoptic ground truth."""
    T, H, W = config.T, config.H, config.W
    bounds, stuff_cls, things = _scene(config)
    tracks: dict[int, Track] = {}
    base = np.zeros((H, W), dtype=np.int64)
    for i, cls in enumerate(stuff_cls):
        sid = i + 1
        base[bounds[i]:bounds[i + 1]] = sid
        tracks[sid] = Track(cls, False)
    first_thing = len(stuff_cls) + 1
    for j, th in enumerate(things):
        tracks[first_thing + j] = Track(th.class_id, True)

    maps = np.empty((T, H, W), dtype=np.int64)
    for t in range(T):
        m = base.copy()
        for j, th in enumerate(things):
            if th.start <= t < th.end:
                cy, cx = th.center(t, H, W)
                m[shape_mask(th.class_id, cy, cx, th.size, H, W)] = first_thing + j
        maps[t] = m

    present = set(np.unique(maps).tolist())
    tracks = {k: v for k, v in tracks.items() if k in present}

    n_entities = len(stuff_cls) + len(things) + config.distractors
    idim = config.mask_dim - 1
    g = child_rng(config.seed, "basis").normal(size=(idim, n_entities))
    q, _ = np.linalg.qr(g)
    codebook = np.zeros((1 + n_entities, config.mask_dim))
    codebook[:, 0] = 1.0
    codebook[1:, 1:] = q.T
    return VideoClip(codebook, maps), PanopticVideo(maps, tracks)


def class_prototypes(sem_dim: int) -> np.ndarray:
    """Fixed orthogonal class directions (last row = "no object"), norm PROTO_NORM."""
    g = np.random.default_rng(_PROTO_SEED).normal(size=(sem_dim, NUM_CLASSES + 1))
    q, _ = np.linalg.qr(g)
    return q.T * PROTO_NORM


def segmenter_stub(clip: VideoClip, gt: PanopticVideo, config: SceneConfig, return_order: bool = False):
    """Noisy, per-frame shuffled queries standing in for a frozen image segmenter.

    Entity ``e`` (codebook row ``e + 1``) is a ground-truth track when
    ``e + 1`` is in the track table and a distractor otherwise. With
    ``return_order`` the per-frame orders are returned too:
    ``frames[t]`` row ``i`` describes entity ``order[t][i]``.
    """
    rng = child_rng(config.seed, "stub")
    n = clip.codebook.shape[0] - 1
    idim = clip.feature_dim - 1
    sem_dim = config.embed_dim - idim
    protos = class_prototypes(sem_dim)
    ident = clip.codebook[1:, 1:] * ID_NORM
    no_obj = NUM_CLASSES
    frames, orders = [], []
    for t in range(gt.T):
        visible = set(np.unique(gt.id_maps[t]).tolist())
        emb = np.zeros((n, config.embed_dim))
        logits = np.zeros((n, NUM_CLASSES + 1))
        masks = np.zeros((n, clip.feature_dim))
        masks[:, 0] = -MASK_SCALE / 2
        for e in range(n):
            sid = e + 1
            cls = gt.tracks[sid].class_id if sid in gt.tracks and sid in visible else no_obj
            emb[e, :idim] = ident[e]
            emb[e, idim:] = protos[cls]
            logits[e, cls] = LOGIT_PEAK
            if cls != no_obj:
                masks[e, 1:] = MASK_SCALE * clip.codebook[sid, 1:]
        noise = rng.normal(size=(n, config.embed_dim))
        noise[:, :idim] *= config.sigma * ID_NOISE
        noise[:, idim:] *= config.sigma * SEM_NOISE
        emb = emb + noise
        logits = logits + config.sigma * rng.normal(size=logits.shape)
        order = rng.permutation(n)
        frames.append(FrameQueries(emb[order], logits[order], masks[order]))
        orders.append(order)
    if return_order:
        return frames, orders
    return frames


def make_video(config: SceneConfig):
    clip, gt = generate_clip(config)
    return clip, gt, segmenter_stub(clip, gt, config)


def scene_for(base: SceneConfig, seed: int) -> SceneConfig:
    d = base.to_dict()
    d["seed"] = int(seed)
    return SceneConfig(**d)


def quantize(frames: Sequence[FrameQueries]) -> list[FrameQueries]:
    """Round query arrays to float32, exactly what a query dump stores."""
    f = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return [FrameQueries(f(q.embeddings), f(q.class_logits), f(q.mask_embeddings)) for q in frames]
