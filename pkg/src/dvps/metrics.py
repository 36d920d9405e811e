"""Video panoptic metrics and the multi-scale logit merge.

VPQ_k follows the VIPSeg evaluation convention: windows of k consecutive
frames slide with stride 1, each window's segments are concatenated into
tubes, and TP/FP/FN counts plus matched IoU are accumulated per class
over every window (and every video, when a dataset is evaluated) before
the per-class quality is formed. Pixels that are void in the ground truth
take no part in any count.

STQ follows the STEP definition:

    AQ  = 1/|G| * sum_g 1/|g| * sum_p TPA(p, g) * IoU(p, g)   (thing tracks, whole video)
    SQ  = mean over classes of the semantic IoU
    STQ = sqrt(AQ * SQ)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datamodel import VOID, FuseConfig, PanopticVideo, panoptic_fuse

WINDOWS = (1, 2, 4, 6)
MATCH_IOU = 0.5


def _check_extent(pred: PanopticVideo, gt: PanopticVideo) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction extent {pred.shape} differs from ground truth {gt.shape}")


def _segment_keys(video: PanopticVideo):
    """Dense key map plus per-key class and thing flag.

    Stuff segments collapse to one key per class; key 0 is void.
    """
    keys: dict = {}
    lut = {VOID: 0}
    classes, things = [-1], [False]
    for sid in sorted(video.tracks):
        tr = video.tracks[sid]
        k = sid if tr.is_thing else ("stuff", tr.class_id)
        if k not in keys:
            keys[k] = len(classes)
            classes.append(tr.class_id)
            things.append(tr.is_thing)
        lut[sid] = keys[k]
    ids = np.unique(video.id_maps)
    table = np.zeros(int(ids.max()) + 1, dtype=np.int64)
    for sid in ids.tolist():
        table[sid] = lut[sid]
    return table[video.id_maps], np.array(classes), np.array(things)


class _PQStats:
    def __init__(self):
        self.iou: dict[int, float] = {}
        self.tp: dict[int, int] = {}
        self.fp: dict[int, int] = {}
        self.fn: dict[int, int] = {}

    def _bump(self, d, c, v):
        d[c] = d.get(c, 0) + v

    def add_window(self, g: np.ndarray, p: np.ndarray, gcls, pcls) -> None:
        keep = g != 0
        g, p = g[keep], p[keep]
        ng, np_ = len(gcls), len(pcls)
        inter = np.bincount(g * np_ + p, minlength=ng * np_).reshape(ng, np_)
        garea, parea = inter.sum(axis=1), inter.sum(axis=0)
        matched_g, matched_p = set(), set()
        for gi, pi in zip(*np.nonzero(inter)):
            if gi == 0 or pi == 0 or gcls[gi] != pcls[pi]:
                continue
            i = inter[gi, pi]
            iou = i / (garea[gi] + parea[pi] - i)
            if iou > MATCH_IOU:
                c = int(gcls[gi])
                self._bump(self.tp, c, 1)
                self._bump(self.iou, c, float(iou))
                matched_g.add(gi)
                matched_p.add(pi)
        for gi in np.flatnonzero(garea):
            if gi and gi not in matched_g:
                self._bump(self.fn, int(gcls[gi]), 1)
        for pi in np.flatnonzero(parea):
            if pi and pi not in matched_p:
                self._bump(self.fp, int(pcls[pi]), 1)

    def value(self) -> float:
        classes = set(self.tp) | set(self.fp) | set(self.fn)
        if not classes:
            return 100.0
        q = []
        for c in sorted(classes):
            tp, fp, fn = self.tp.get(c, 0), self.fp.get(c, 0), self.fn.get(c, 0)
            q.append(self.iou.get(c, 0.0) / (tp + 0.5 * fp + 0.5 * fn))
        return 100.0 * float(np.mean(q))


def _vpq_stats(pred: PanopticVideo, gt: PanopticVideo, k: int, stats: _PQStats | None = None) -> _PQStats:
    _check_extent(pred, gt)
    if k < 1:
        raise ValueError(f"window length must be >= 1, got {k}")
    stats = stats or _PQStats()
    gk, gcls, _ = _segment_keys(gt)
    pk, pcls, _ = _segment_keys(pred)
    k = min(k, gt.T)  # a video shorter than the window is one window
    for t0 in range(gt.T - k + 1):
        stats.add_window(gk[t0:t0 + k].ravel(), pk[t0:t0 + k].ravel(), gcls, pcls)
    return stats


def vpq_k(pred: PanopticVideo, gt: PanopticVideo, k: int) -> float:
    """VPQ over windows of ``k`` frames, in [0, 100]."""
    return _vpq_stats(pred, gt, k).value()


def vpq_dataset(pairs: Iterable[tuple[PanopticVideo, PanopticVideo]], ks: Sequence[int] = WINDOWS) -> dict:
    """Per-k VPQ with statistics pooled over every (pred, gt) pair."""
    stats = {k: _PQStats() for k in ks}
    for pred, gt in pairs:
        for k in ks:
            _vpq_stats(pred, gt, k, stats[k])
    return {k: stats[k].value() for k in ks}


def vpq_mean(per_k: dict) -> float:
    missing = [k for k in WINDOWS if k not in per_k]
    if missing:
        raise ValueError(f"missing VPQ window(s): {missing}")
    return float(sum(float(per_k[k]) for k in WINDOWS) / len(WINDOWS))


# STQ

def _semantic(video: PanopticVideo) -> np.ndarray:
    """Per-pixel class, -1 where void."""
    ids = np.unique(video.id_maps)
    table = np.full(int(ids.max()) + 1, -1, dtype=np.int64)
    for sid in ids.tolist():
        if sid != VOID:
            table[sid] = video.tracks[sid].class_id
    return table[video.id_maps]


class _STQStats:
    def __init__(self):
        self.aq_sum = 0.0
        self.gt_tracks = 0
        self.pred_tracks = 0
        self.confusion: dict[tuple[int, int], int] = {}

    def add(self, pred: PanopticVideo, gt: PanopticVideo) -> None:
        _check_extent(pred, gt)
        keep = gt.id_maps != VOID
        gsem, psem = _semantic(gt)[keep], _semantic(pred)[keep]
        pairs, counts = np.unique(np.stack([gsem, psem]), axis=1, return_counts=True)
        for (a, b), n in zip(pairs.T.tolist(), counts.tolist()):
            self.confusion[(a, b)] = self.confusion.get((a, b), 0) + n

        gthing = {s for s, tr in gt.tracks.items() if tr.is_thing}
        pthing = {s for s, tr in pred.tracks.items() if tr.is_thing}
        g = np.where(np.isin(gt.id_maps, list(gthing)), gt.id_maps, VOID)[keep]
        p = np.where(np.isin(pred.id_maps, list(pthing)), pred.id_maps, VOID)[keep]
        pred_area = dict(zip(*np.unique(p[p != VOID], return_counts=True)))
        self.pred_tracks += len(pred_area)
        for gid in np.unique(g[g != VOID]).tolist():
            sel = g == gid
            size = int(sel.sum())
            overlap = p[sel]
            score = 0.0
            for pid, tpa in zip(*np.unique(overlap[overlap != VOID], return_counts=True)):
                iou = tpa / (size + pred_area[pid] - tpa)
                score += tpa * iou
            self.aq_sum += score / size
            self.gt_tracks += 1

    def aq(self) -> float:
        if self.gt_tracks == 0:
            return 1.0 if self.pred_tracks == 0 else 0.0
        return self.aq_sum / self.gt_tracks

    def sq(self) -> float:
        classes = sorted({a for a, _ in self.confusion} | {b for _, b in self.confusion if b >= 0})
        if not classes:
            return 1.0
        ious = []
        for c in classes:
            tp = self.confusion.get((c, c), 0)
            gt_area = sum(n for (a, _), n in self.confusion.items() if a == c)
            pred_area = sum(n for (_, b), n in self.confusion.items() if b == c)
            ious.append(tp / (gt_area + pred_area - tp))
        return float(np.mean(ious))

    def value(self) -> float:
        return float(np.sqrt(self.aq() * self.sq()))


def stq(pred: PanopticVideo, gt: PanopticVideo) -> float:
    s = _STQStats()
    s.add(pred, gt)
    return s.value()


def association_accuracy(pred: PanopticVideo, gt: PanopticVideo) -> float:
    """Fraction of (gt thing track, frame) pairs whose majority predicted slot
    is the slot that covers most of that track over the whole video.

    A predicted segment's slot is the query slot recorded in its track entry;
    segments without one are their own slot, so a class flip of one query
    does not count as an identity switch. Void never counts as correct. A
    video without thing tracks scores 1.
    """
    hits, total = _association_counts(pred, gt)
    return hits / total if total else 1.0


def _slot_map(video: PanopticVideo) -> np.ndarray:
    ids = np.unique(video.id_maps)
    base = int(ids.max()) + 1
    table = np.zeros(base, dtype=np.int64)
    for sid in ids.tolist():
        if sid == VOID:
            continue
        slot = video.tracks[sid].slot
        table[sid] = sid if slot is None else base + slot
    return table[video.id_maps]


def _association_counts(pred: PanopticVideo, gt: PanopticVideo) -> tuple[int, int]:
    _check_extent(pred, gt)
    slots = _slot_map(pred)
    hits = total = 0
    for sid, tr in sorted(gt.tracks.items()):
        if not tr.is_thing:
            continue
        sel = gt.id_maps == sid
        ids, counts = np.unique(slots[sel], return_counts=True)
        if ids.size == 0:
            continue
        best = ids[np.argmax(counts)]
        for t in range(gt.T):
            here = slots[t][sel[t]]
            if here.size == 0:
                continue
            total += 1
            fi, fc = np.unique(here, return_counts=True)
            major = fi[np.argmax(fc)]
            hits += int(major == best and major != VOID)
    return hits, total


# multi-scale

def resize_bilinear(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resampling of the last two axes (half-pixel centers, edge clamped)."""
    H, W = x.shape[-2:]
    if (H, W) == (h, w):
        return x.astype(np.float64, copy=True)

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(H, h)
    c0, c1, fc = axis(W, w)
    top = x[..., r0, :] * (1 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def merge_scales(preds: Sequence[tuple], size: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Average ``(scale, mask_logits[..., N, h, w], class_logits[..., N, K+1])`` entries.

    Mask logits are resampled to ``size`` (default: the first entry's
    resolution) before averaging.
    """
    if not preds:
        raise ValueError("multi-scale merge needs at least one prediction")
    _, m0, c0 = preds[0]
    h, w = size or m0.shape[-2:]
    masks, logits = [], []
    for scale, m, c in preds:
        if m.shape[:-2] != m0.shape[:-2] or c.shape != c0.shape:
            raise ValueError(f"scale {scale}: query layout {m.shape[:-2]}/{c.shape} "
                             f"differs from {m0.shape[:-2]}/{c0.shape}")
        masks.append(resize_bilinear(np.asarray(m, dtype=np.float64), h, w))
        logits.append(np.asarray(c, dtype=np.float64))
    return np.mean(masks, axis=0), np.mean(logits, axis=0)


def multi_scale_merge(preds: Sequence[tuple], thing_classes: Sequence[bool],
                      config: FuseConfig = FuseConfig(), size: tuple[int, int] | None = None):
    """Merge one frame's per-scale predictions and fuse them into ``(id_map, tracks)``."""
    masks, logits = merge_scales(preds, size)
    return panoptic_fuse(masks, logits, thing_classes, config)


# reporting

COLUMNS = ("VPQ", "VPQ1", "VPQ2", "VPQ4", "VPQ6", "STQ")


@dataclass
class MetricReport:
    vpq_per_k: dict
    stq: float
    association_accuracy: float
    per_video: list = field(default_factory=list)  # dicts with name + COLUMNS + AA

    @property
    def vpq_mean(self) -> float:
        return vpq_mean(self.vpq_per_k)

    def row(self) -> dict:
        r = {"VPQ": self.vpq_mean}
        r.update({f"VPQ{k}": float(self.vpq_per_k[k]) for k in WINDOWS})
        r["STQ"] = self.stq
        return r

    def to_dict(self) -> dict:
        return {
            "vpq_per_k": {str(k): float(v) for k, v in sorted(self.vpq_per_k.items())},
            "vpq_mean": self.vpq_mean,
            "stq": self.stq,
            "association_accuracy": self.association_accuracy,
            "per_video": self.per_video,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Plain-text table: VPQ columns in [0, 100] at one decimal, STQ at three."""
        head = ["video"] + list(COLUMNS) + ["AA"]
        rows = []
        for v in self.per_video:
            rows.append([v["name"]] + [_fmt(c, v[c]) for c in COLUMNS] + [f"{v['AA']:.3f}"])
        total = self.row()
        rows.append(["all"] + [_fmt(c, total[c]) for c in COLUMNS] + [f"{self.association_accuracy:.3f}"])
        widths = [max(len(r[i]) for r in rows + [head]) for i in range(len(head))]
        lines = ["  ".join(s.rjust(w) if i else s.ljust(w) for i, (s, w) in enumerate(zip(r, widths)))
                 for r in [head] + rows]
        return "\n".join(lines) + "\n"


def _fmt(col: str, v: float) -> str:
    return f"{v:.3f}" if col == "STQ" else f"{v:.1f}"


def evaluate(pairs: Sequence[tuple[str, PanopticVideo, PanopticVideo]]) -> MetricReport:
    """Dataset report over ``(name, pred, gt)`` triples."""
    per_video = []
    vpq_all = {k: _PQStats() for k in WINDOWS}
    stq_all = _STQStats()
    hits = total = 0
    for name, pred, gt in pairs:
        per_k = {k: _vpq_stats(pred, gt, k, None) for k in WINDOWS}
        for k in WINDOWS:
            _vpq_stats(pred, gt, k, vpq_all[k])
        stq_all.add(pred, gt)
        h, n = _association_counts(pred, gt)
        hits, total = hits + h, total + n
        aa = h / n if n else 1.0
        vals = {k: s.value() for k, s in per_k.items()}
        row = {"name": name, "VPQ": vpq_mean(vals), "STQ": stq(pred, gt), "AA": aa}
        row.update({f"VPQ{k}": vals[k] for k in WINDOWS})
        per_video.append(row)
    aa_total = hits / total if total else 1.0
    return MetricReport({k: s.value() for k, s in vpq_all.items()}, stq_all.value(), aa_total, per_video)
