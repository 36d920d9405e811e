"""Linear assignment, adjacent-frame pre-matching and training-time matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import FrameQueries, PanopticVideo, TrackedQuerySequence


@dataclass(frozen=True)
class Assignment:
    """``perm[i]`` is the column (prediction) matched to row ``i``."""

    perm: np.ndarray
    cost: float
    source: str = ""

    def as_dict(self) -> dict[int, int]:
        return {i: int(j) for i, j in enumerate(self.perm)}


@dataclass(frozen=True)
class GroundTruthTrack:
    track_id: int
    class_id: int
    is_thing: bool
    first_frame: int
    masks: np.ndarray = field(repr=False)  # [T, H, W] bool


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    mask: float = 5.0
    dice: float = 5.0


def _solve(c: np.ndarray):
    """Shortest-augmenting-path Hungarian method for ``n <= m`` rows x cols.

    Returns (column of each row, row potentials, column potentials).
    """
    n, m = c.shape
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = c
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col[p[j] - 1] = j - 1
    return col, u[1:], v[1:]


def _saturates(adj: list[list[int]], rows: list[int], cols_free: set[int]) -> bool:
    """True when every row in ``rows`` can take a distinct column from ``cols_free``."""
    match: dict[int, int] = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def _assign(c: np.ndarray) -> Assignment:
    n, m = c.shape
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    col, u, v = _solve(c)
    # every optimal assignment lives on the zero-reduced-cost edges
    reduced = c - u[:, None] - v[None, :]
    tol = 1e-10 * (1.0 + np.abs(c).max())
    tight = reduced <= tol
    tight[np.arange(n), col] = True
    adj = [list(np.flatnonzero(tight[i])) for i in range(n)]
    if any(len(a) > 1 for a in adj):
        free = set(range(m))
        for i in range(n):
            for j in adj[i]:
                if j not in free:
                    continue
                free.discard(j)
                if _saturates(adj, list(range(i + 1, n)), free):
                    col[i] = j
                    break
                free.add(j)
    total = 0.0
    for i in range(n):
        total += c[i, col[i]]
    return Assignment(col, total)


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect assignment of a square matrix.

    Among optimal assignments the lexicographically smallest permutation is
    returned (ties judged with a relative tolerance of 1e-10).
    """
    c = np.asarray(getattr(cost, "data", cost), dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"hungarian needs a square matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("hungarian needs finite costs")
    return _assign(c)


def assign_rectangular(cost: np.ndarray) -> Assignment:
    """Match every row of a ``G x P`` cost matrix (G <= P) to a distinct column."""
    g, p = cost.shape
    if g > p:
        raise ValueError(f"{g} ground-truth tracks but only {p} queries")
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment needs finite costs")
    return _assign(np.asarray(cost, dtype=np.float64))


# pre-matching

def cosine_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``1 - cos`` between rows of ``a`` and rows of ``b``; values in [0, 2]."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    sim = (a / np.maximum(na, 1e-12)) @ (b / np.maximum(nb, 1e-12)).T
    return 1.0 - np.clip(sim, -1.0, 1.0)


def prematch_frames(frames: Sequence[FrameQueries]) -> tuple[list[FrameQueries], list[np.ndarray]]:
    """Align each frame's queries to the previous aligned frame.

    Returns the aligned frames and, per frame, the source row of each slot.
    """
    if not frames:
        raise ValueError("prematch needs at least one frame")
    n = frames[0].num_queries
    out = [frames[0]]
    orders = [np.arange(n)]
    for fq in frames[1:]:
        if fq.num_queries != n:
            raise ValueError(f"query count changes from {n} to {fq.num_queries}")
        order = hungarian(cosine_cost(out[-1].embeddings, fq.embeddings)).perm
        out.append(fq.permuted(order))
        orders.append(order)
    return out, orders


def prematch_chain(frames: Sequence[FrameQueries]) -> TrackedQuerySequence:
    aligned, _ = prematch_frames(frames)
    return TrackedQuerySequence(np.stack([f.embeddings for f in aligned]), "prematch")


# training-time matching

def ground_truth_tracks(gt: PanopticVideo) -> list[GroundTruthTrack]:
    out = []
    for sid in sorted(gt.tracks):
        masks = gt.id_maps == sid
        present = np.flatnonzero(masks.reshape(masks.shape[0], -1).any(axis=1))
        if present.size == 0:
            continue
        tr = gt.tracks[sid]
        out.append(GroundTruthTrack(sid, tr.class_id, tr.is_thing, int(present[0]), masks))
    return out


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def cost_matrix(class_probs: np.ndarray, mask_logits: np.ndarray, gt_classes: Sequence[int],
                gt_masks: np.ndarray, weights: CostWeights = CostWeights()) -> np.ndarray:
    """Pairwise matching cost, ``[G, P]``, between ground truths and predictions.

    ``class_probs[P, K+1]``, ``mask_logits[P, H, W]``, ``gt_masks[G, H, W]``.
    """
    p = mask_logits.shape[0]
    if mask_logits.shape[1:] != gt_masks.shape[1:]:
        raise ValueError(f"mask extents differ: {mask_logits.shape[1:]} vs {gt_masks.shape[1:]}")
    x = mask_logits.reshape(p, -1)
    t = gt_masks.reshape(gt_masks.shape[0], -1).astype(np.float64)
    hw = x.shape[1]
    bce = (_softplus(x).sum(axis=1)[None, :] - t @ x.T) / hw
    prob = _sigmoid(x)
    num = 2.0 * (t @ prob.T)
    den = t.sum(axis=1)[:, None] + prob.sum(axis=1)[None, :]
    dice = 1.0 - (num + 1.0) / (den + 1.0)
    cls = -class_probs[:, list(gt_classes)].T
    return weights.cls * cls + weights.mask * bce + weights.dice * dice


def match_cost(class_probs: np.ndarray, mask_logits: np.ndarray, gt_class: int, gt_mask: np.ndarray,
               weights: CostWeights = CostWeights()) -> float:
    """Cost of pairing one prediction with one ground-truth segment."""
    if mask_logits.shape != gt_mask.shape:
        raise ValueError(f"mask extents differ: {mask_logits.shape} vs {gt_mask.shape}")
    return float(cost_matrix(class_probs[None], mask_logits[None], [gt_class], gt_mask[None], weights)[0, 0])


@dataclass(frozen=True)
class ClipPredictions:
    """Per-frame class probabilities ``[T, N, K+1]`` and mask logits ``[T, N, H, W]``."""

    class_probs: np.ndarray
    mask_logits: np.ndarray


def use_own_predictions(iteration: int, max_iter: int) -> bool:
    return iteration >= max_iter / 2


def match_tracker(gts: Sequence[GroundTruthTrack], iteration: int, max_iter: int, *,
                  segmenter: ClipPredictions, tracker: ClipPredictions,
                  weights: CostWeights = CostWeights()) -> Assignment:
    """Match each track at its first frame; the resulting slots hold for the whole clip."""
    own = use_own_predictions(iteration, max_iter)
    preds, source = (tracker, "tracker") if own else (segmenter, "segmenter")
    n = preds.class_probs.shape[1]
    if len(gts) > n:
        raise ValueError(f"{len(gts)} ground-truth tracks but only {n} queries")
    cost = np.zeros((len(gts), n))
    for i, g in enumerate(gts):
        f = g.first_frame
        cost[i] = cost_matrix(preds.class_probs[f], preds.mask_logits[f], [g.class_id], g.masks[f][None], weights)[0]
    a = assign_rectangular(cost)
    return Assignment(a.perm, a.cost, source)


def video_cost_matrix(gts: Sequence[GroundTruthTrack], preds: ClipPredictions,
                      weights: CostWeights = CostWeights()) -> np.ndarray:
    n = preds.class_probs.shape[1]
    cost = np.zeros((len(gts), n))
    if not gts:
        return cost
    classes = [g.class_id for g in gts]
    for t in range(preds.class_probs.shape[0]):
        masks = np.stack([g.masks[t] for g in gts])
        cost += cost_matrix(preds.class_probs[t], preds.mask_logits[t], classes, masks, weights)
    return cost


def match_refiner(gts: Sequence[GroundTruthTrack], iteration: int, max_iter: int, *,
                  tracker: ClipPredictions, refiner: ClipPredictions,
                  weights: CostWeights = CostWeights()) -> Assignment:
    """Video-level matching: costs summed over every frame of the clip."""
    own = use_own_predictions(iteration, max_iter)
    preds, source = (refiner, "refiner") if own else (tracker, "tracker")
    n = preds.class_probs.shape[1]
    if len(gts) > n:
        raise ValueError(f"{len(gts)} ground-truth tracks but only {n} queries")
    a = assign_rectangular(video_cost_matrix(gts, preds, weights))
    return Assignment(a.perm, a.cost, source)
