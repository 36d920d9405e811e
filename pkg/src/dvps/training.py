"""Two-stage training: tracker on short clips, then refiner on long clips.

Upstream stages are frozen: the segmenter stub's queries are plain arrays
and, while training the refiner, the tracker runs on constant tensors.
Per-iteration randomness comes from ``child_rng(seed, stage, iteration)`` so a
run resumed from a checkpoint replays the uninterrupted run exactly.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np

from .datamodel import FrameQueries, PanopticVideo, VideoClip, class_probs, clip_features, rasterize_clip
from .errors import ConfigError
from .losses import LossWeights, loss_refiner, loss_tracker
from .matcher import (ClipPredictions, assign_rectangular, cost_matrix, ground_truth_tracks, match_refiner,
                      match_tracker, prematch_frames)
from .model import (ModelConfig, Params, fit_heads, fit_reference_attention, frozen, init_refiner, init_tracker,
                    trainable, zero_residual_branches)
from .numerics import GradTape, NumericError, Tensor
from .refiner import refiner_forward
from .synth import child_rng
from .tracker import tracker_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 2000
    batch_size: int = 4
    clip_len: int = 5
    lr: float = 1e-4
    decay_factor: float = 0.1
    decay_at: float = 0.7  # fraction of max_iter
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    cls_weight: float = 2.0
    mask_weight: float = 5.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1
    warm_start: bool = True  # identity blocks plus heads taken from the upstream stage
    scale_min: int = 0  # 0 disables random rescaling
    scale_max: int = 0
    crop: int = 0  # 0 disables random square crops
    seed: int = 0

    def __post_init__(self):
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if not 0.0 < self.decay_at < 1.0:
            raise ConfigError("decay_at must lie in (0, 1)")
        if self.max_iter < 0 or self.batch_size < 1:
            raise ConfigError("max_iter must be >= 0 and batch_size >= 1")
        if self.scale_max < self.scale_min:
            raise ConfigError("scale_max must be >= scale_min")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.cls_weight, self.mask_weight, self.dice_weight, self.no_object_weight)

    def lr_at(self, it: int) -> float:
        return self.lr * (self.decay_factor if it >= self.decay_at * self.max_iter else 1.0)


@dataclass
class Video:
    name: str
    clip: VideoClip
    gt: PanopticVideo
    queries: list  # FrameQueries per frame


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, cfg: TrainConfig, state: dict | None = None):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        if state:
            self.load_state(state)

    def step(self, params: Params, grads: dict[str, np.ndarray], lr: float) -> Params:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g)) * c.beta1 + (1.0 - c.beta1) * g
            v = self.v.get(name, np.zeros_like(g)) * c.beta2 + (1.0 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            data = p.data
            if data.ndim >= 2:
                data = data * (1.0 - lr * c.weight_decay)
            data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            out[name] = Tensor(data, requires_grad=True)
        return out

    def state(self) -> dict:
        st = {"opt.step": np.array(float(self.step_count))}
        for k in self.m:
            st[f"opt.m.{k}"] = self.m[k]
            st[f"opt.v.{k}"] = self.v[k]
        return st

    def load_state(self, st: dict) -> None:
        self.step_count = int(st.get("opt.step", 0))
        for k, v in st.items():
            if k.startswith("opt.m."):
                self.m[k[6:]] = np.array(v)
            elif k.startswith("opt.v."):
                self.v[k[6:]] = np.array(v)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


@dataclass
class ClipSample:
    clip: VideoClip
    gt: PanopticVideo
    queries: list  # FrameQueries


def sample_batch(videos: Sequence[Video], cfg: TrainConfig, rng: np.random.Generator) -> list[ClipSample]:
    k = min(cfg.batch_size, len(videos))
    picks = rng.choice(len(videos), size=k, replace=False)
    out = []
    for i in sorted(int(p) for p in picks):
        v = videos[i]
        length = min(cfg.clip_len, v.gt.T)
        start = int(rng.integers(0, v.gt.T - length + 1))
        clip, gt = v.clip.frames(start, start + length), v.gt.frames(start, start + length)
        if cfg.scale_max > 0:
            s = int(rng.integers(cfg.scale_min, cfg.scale_max + 1))
            h, w = gt.shape[1:]
            nh, nw = (s, max(1, round(w * s / h))) if h <= w else (max(1, round(h * s / w)), s)
            clip, gt = clip.resized(nh, nw), gt.resized(nh, nw)
        if cfg.crop > 0:
            h, w = gt.shape[1:]
            size = min(cfg.crop, h, w)
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            clip, gt = clip.cropped(top, left, size), gt.cropped(top, left, size)
        out.append(ClipSample(clip, gt, v.queries[start:start + length]))
    return out


def _stub_predictions(aligned: Sequence[FrameQueries], feats: np.ndarray) -> ClipPredictions:
    probs = class_probs(np.stack([f.class_logits for f in aligned]))
    emb = np.stack([f.mask_embeddings for f in aligned])
    return ClipPredictions(probs, rasterize_clip(emb, feats).data)


@dataclass
class TrainResult:
    params: Params
    curve: list  # (iteration, loss, lr)
    optimizer: AdamW
    iteration: int


def _group(samples: Sequence[ClipSample]) -> list[list[ClipSample]]:
    """Bucket samples with identical (T, N, H, W) so they run as one batch."""
    groups: dict[tuple, list[ClipSample]] = {}
    for s in samples:
        key = (s.gt.T, s.queries[0].num_queries) + s.gt.shape[1:]
        groups.setdefault(key, []).append(s)
    return list(groups.values())


def _prematched(group: Sequence[ClipSample]):
    aligned = [prematch_frames(s.queries)[0] for s in group]
    seq = np.stack([np.stack([f.embeddings for f in al]) for al in aligned], axis=1)  # [T, B, N, D]
    feats = np.stack([clip_features(s.clip) for s in group], axis=1)  # [T, B, Dm, H, W]
    return aligned, seq, feats


def tracker_batch_loss(samples: Sequence[ClipSample], params: Params, model: ModelConfig, cfg: TrainConfig,
                       it: int) -> Tensor:
    """Summed tracker loss of ``samples``."""
    total = None
    for group in _group(samples):
        aligned, seq, feats = _prematched(group)
        out = tracker_forward(Tensor(seq), params, model)
        mask_logits = rasterize_clip(out.mask_embeddings, feats)
        for b, sample in enumerate(group):
            cl, ml = out.class_logits[:, b], mask_logits[:, b]
            gts = ground_truth_tracks(sample.gt)
            assignment = match_tracker(
                gts, it, cfg.max_iter,
                segmenter=_stub_predictions(aligned[b], feats[:, b]),
                tracker=ClipPredictions(class_probs(cl.data), ml.data),
                weights=cfg.loss_weights.costs(),
            )
            l = loss_tracker(cl, ml, gts, assignment.perm, cfg.loss_weights)
            total = l if total is None else total + l
    return total


def _train(stage: str, videos: Sequence[Video], params: Params, cfg: TrainConfig,
           batch_loss: Callable[[Sequence[ClipSample], Params, int], Tensor],
           optimizer: AdamW | None, start: int, stop: int | None,
           callback: Callable[[int, float], None] | None) -> TrainResult:
    params = trainable(params)
    opt = optimizer or AdamW(cfg)
    stop = cfg.max_iter if stop is None else min(stop, cfg.max_iter)
    names = sorted(params)
    curve = []
    for it in range(start, stop):
        rng = child_rng(cfg.seed, "train", stage, it)
        batch = sample_batch(videos, cfg, rng)
        try:
            with GradTape() as tape:
                loss = batch_loss(batch, params, it) * (1.0 / len(batch))
            grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
        except NumericError as exc:
            raise NumericError(f"{stage} training diverged at iteration {it}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"{stage} training diverged at iteration {it}: loss {value}")
        clip_gradients(grads, cfg.grad_clip)
        lr = cfg.lr_at(it)
        params = opt.step(params, grads, lr)
        curve.append((it, value, lr))
        if callback:
            callback(it, value)
    return TrainResult(params, curve, opt, stop)


def train_tracker(videos: Sequence[Video], init: Params, model: ModelConfig, cfg: TrainConfig, *,
                  optimizer: AdamW | None = None, start: int = 0, stop: int | None = None,
                  callback=None) -> TrainResult:
    if not videos:
        raise ValueError("no training videos")
    return _train("tracker", videos, init, cfg,
                  lambda s, p, it: tracker_batch_loss(s, p, model, cfg, it),
                  optimizer, start, stop, callback)


class FrozenTracker:
    """Constant tracker predictions for refiner training."""

    def __init__(self, params: Params, model: ModelConfig):
        self.params = frozen(params)
        self.model = model

    def run(self, seq: np.ndarray) -> dict:
        out = tracker_forward(Tensor(seq), self.params, self.model)
        return {
            "queries": out.queries.data,
            "class_logits": out.class_logits.data,
            "mask_embeddings": out.mask_embeddings.data,
        }


def refiner_batch_loss(samples: Sequence[ClipSample], params: Params, tracker: FrozenTracker,
                       model: ModelConfig, cfg: TrainConfig, it: int) -> Tensor:
    total = None
    for group in _group(samples):
        _, seq, feats = _prematched(group)
        trk = tracker.run(seq)
        trk_masks = rasterize_clip(trk["mask_embeddings"], feats).data
        out = refiner_forward(Tensor(trk["queries"]), params, model)
        mask_logits = rasterize_clip(out.mask_embeddings, feats)
        T = seq.shape[0]
        for b, sample in enumerate(group):
            cl, ml = out.class_logits[b], mask_logits[:, b]
            gts = ground_truth_tracks(sample.gt)
            video_probs = class_probs(cl.data)
            assignment = match_refiner(
                gts, it, cfg.max_iter,
                tracker=ClipPredictions(class_probs(trk["class_logits"][:, b]), trk_masks[:, b]),
                refiner=ClipPredictions(np.broadcast_to(video_probs, (T,) + video_probs.shape), ml.data),
                weights=cfg.loss_weights.costs(),
            )
            l = loss_refiner(cl, ml, gts, assignment.perm, cfg.loss_weights)
            total = l if total is None else total + l
    return total


def train_refiner(videos: Sequence[Video], init: Params, tracker_params: Params, model: ModelConfig,
                  cfg: TrainConfig, *, optimizer: AdamW | None = None, start: int = 0,
                  stop: int | None = None, callback=None) -> TrainResult:
    if not videos:
        raise ValueError("no training videos")
    tracker = FrozenTracker(tracker_params, model)
    return _train("refiner", videos, init, cfg,
                  lambda s, p, it: refiner_batch_loss(s, p, tracker, model, cfg, it),
                  optimizer, start, stop, callback)


HEAD_PARAMS = ("out_norm.", "class.", "mask.")


def object_correspondences(videos: Sequence[Video]) -> tuple[np.ndarray, np.ndarray]:
    """Queries of the same ground-truth object in consecutive frames, ``(earlier, later)``.

    Each frame's queries are matched to the objects present in it with the
    training matching cost on the segmenter's own predictions.
    """
    earlier, later = [], []
    for v in videos:
        gts = ground_truth_tracks(v.gt)
        feats = clip_features(v.clip)
        owner = []
        for t, f in enumerate(v.queries):
            present = [g for g in gts if g.masks[t].any()]
            if not present:
                owner.append({})
                continue
            logits = rasterize_clip(f.mask_embeddings[None], feats[t:t + 1]).data[0]
            cost = cost_matrix(class_probs(f.class_logits), logits, [g.class_id for g in present],
                               np.stack([g.masks[t] for g in present]))
            perm = assign_rectangular(cost).perm
            owner.append({g.track_id: int(perm[i]) for i, g in enumerate(present)})
        for t in range(1, len(owner)):
            for sid, q in owner[t].items():
                if sid in owner[t - 1]:
                    earlier.append(v.queries[t - 1].embeddings[owner[t - 1][sid]])
                    later.append(v.queries[t].embeddings[q])
    d = videos[0].queries[0].embeddings.shape[1]
    return np.reshape(earlier, (-1, d)), np.reshape(later, (-1, d))


def initial_tracker(model: ModelConfig, videos: Sequence[Video], rng: np.random.Generator,
                    warm_start: bool = True) -> Params:
    """Fresh tracker parameters.

    With ``warm_start`` the self-attention and FFN branches start as identity
    maps, the referring cross-attention starts as a nearest-neighbour lookup
    fitted on consecutive-frame queries of the same object, and the heads are
    fitted to the segmenter's own decoders on the training queries.
    """
    p = init_tracker(model, rng)
    if not warm_start:
        return p
    frames = [f for v in videos for f in v.queries]
    if not frames:
        raise ValueError("no training queries to fit the heads on")
    queries = np.concatenate([f.embeddings for f in frames])
    p = fit_heads(zero_residual_branches(p), queries,
                  np.concatenate([f.class_logits for f in frames]),
                  np.concatenate([f.mask_embeddings for f in frames]))
    earlier, later = object_correspondences(videos)
    if not len(earlier):
        return p
    return fit_reference_attention(p, earlier, later, queries, model)


def initial_refiner(model: ModelConfig, tracker_params: Params, rng: np.random.Generator,
                    warm_start: bool = True) -> Params:
    """Fresh refiner parameters; ``warm_start`` starts from identity blocks and the tracker's heads."""
    p = init_refiner(model, rng)
    if not warm_start:
        return p
    p = zero_residual_branches(p)
    for name, t in tracker_params.items():
        leaf = name[len("tracker."):]
        if leaf.startswith(HEAD_PARAMS):
            p["refiner." + leaf] = Tensor(t.data.copy(), requires_grad=True)
    return p


def default_tracker_config(**kw) -> TrainConfig:
    return replace(TrainConfig(clip_len=5), **kw)


def default_refiner_config(**kw) -> TrainConfig:
    return replace(TrainConfig(clip_len=21), **kw)
