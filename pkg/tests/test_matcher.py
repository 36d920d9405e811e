import itertools
import math

import numpy as np
import pytest

from dvps.datamodel import FrameQueries, PanopticVideo, Track
from dvps.matcher import (ClipPredictions, CostWeights, GroundTruthTrack, assign_rectangular, cosine_cost,
                          cost_matrix, ground_truth_tracks, hungarian, match_cost, match_refiner, match_tracker,
                          prematch_chain, prematch_frames, use_own_predictions, video_cost_matrix)


def brute_force(c):
    n, m = c.shape
    best, arg = math.inf, None
    for p in itertools.permutations(range(m), n):
        s = sum(c[i, p[i]] for i in range(n))
        if s < best - 1e-12:
            best, arg = s, p
    return best, arg


class TestHungarian:
    def test_identity(self):
        a = hungarian(1.0 - np.eye(4))
        assert list(a.perm) == [0, 1, 2, 3] and a.cost == 0.0

    def test_worked_example(self):
        a = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
        assert list(a.perm) == [1, 0, 2] and a.cost == 5.0

    def test_one_by_one(self):
        a = hungarian([[3.5]])
        assert list(a.perm) == [0] and a.cost == 3.5

    @pytest.mark.parametrize("n", range(2, 8))
    def test_brute_force(self, n):
        rng = np.random.default_rng(n)
        for trial in range(30 if n == 7 else 200):
            c = rng.normal(size=(n, n))
            if trial % 4 == 0:
                c = rng.integers(0, 3, size=(n, n)).astype(float)  # many ties
            best, arg = brute_force(c)
            a = hungarian(c)
            assert abs(a.cost - best) <= 1e-9
            assert abs(sum(c[i, a.perm[i]] for i in range(n)) - best) <= 1e-9

    def test_ties_lexicographic(self):
        # all-equal costs: every permutation is optimal
        assert list(hungarian(np.ones((4, 4))).perm) == [0, 1, 2, 3]
        c = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
        assert list(hungarian(c).perm) == [0, 1, 2]

    def test_ties_smallest_among_optima(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            c = rng.integers(0, 2, size=(4, 4)).astype(float)
            best = min(sum(c[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4)))
            optimal = [p for p in itertools.permutations(range(4)) if sum(c[i, p[i]] for i in range(4)) == best]
            assert tuple(hungarian(c).perm) == min(optimal)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            hungarian(np.zeros((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            hungarian([[0.0, np.inf], [1.0, 0.0]])

    def test_rectangular_brute_force(self):
        rng = np.random.default_rng(3)
        for g, p in [(1, 3), (2, 5), (3, 4), (0, 2)]:
            c = rng.normal(size=(g, p))
            best, _ = brute_force(c) if g else (0.0, ())
            assert abs(assign_rectangular(c).cost - best) <= 1e-9

    def test_rectangular_too_many_rows(self):
        with pytest.raises(ValueError):
            assign_rectangular(np.zeros((3, 2)))


def _fq(emb):
    n = len(emb)
    return FrameQueries(np.asarray(emb, dtype=float), np.zeros((n, 3)), np.zeros((n, 2)))


class TestPrematch:
    def test_single_frame_passthrough(self):
        f = _fq(np.random.default_rng(0).normal(size=(3, 4)))
        seq = prematch_chain([f])
        assert np.array_equal(seq.queries[0], f.embeddings) and seq.stage == "prematch"

    def test_recovers_inverse_permutation(self):
        rng = np.random.default_rng(1)
        e = rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        aligned, orders = prematch_frames([_fq(e), _fq(e[perm])])
        assert np.array_equal(aligned[1].embeddings, e)
        assert np.array_equal(perm[orders[1]], np.arange(5))

    def test_orthonormal_identity_alignment(self):
        e = np.eye(4)
        _, orders = prematch_frames([_fq(e)] * 3)
        assert all(np.array_equal(o, np.arange(4)) for o in orders)

    def test_shuffle_equivariance(self):
        rng = np.random.default_rng(2)
        frames = [_fq(rng.normal(size=(4, 6))) for _ in range(4)]
        base = prematch_chain(frames).queries
        shuffled = [frames[0]] + [f.permuted(rng.permutation(4)) for f in frames[1:]]
        assert np.array_equal(prematch_chain(shuffled).queries, base)

    def test_mismatched_n(self):
        with pytest.raises(ValueError):
            prematch_frames([_fq(np.eye(3)), _fq(np.eye(4))])

    def test_cosine_range(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(6, 5))
        c = cosine_cost(a, a)
        assert np.all(c >= 0) and np.all(c <= 2)
        assert np.allclose(np.diag(c), 0.0, atol=1e-12)


class TestMatchCost:
    def test_half_overlap_hand_computed(self):
        probs = np.full(4, 0.25)
        logits = np.array([[2.0, -2.0], [2.0, -2.0]])
        gt = np.array([[1, 1], [0, 0]], dtype=bool)
        # bce = mean(sp(2)-2, sp(-2)+2, sp(2), sp(-2)) = 1 + log(1+e^-2); dice = 1 - 3/5
        want = 2 * -0.25 + 5 * (1.0 + math.log1p(math.exp(-2))) + 5 * 0.4
        assert abs(match_cost(probs, logits, 0, gt) - want) <= 1e-12

    def test_perfect_prediction_minimum(self):
        probs = np.array([0.0, 1.0, 0.0])
        gt = np.array([[1, 0], [1, 1]], dtype=bool)
        logits = np.where(gt, 200.0, -200.0)
        assert abs(match_cost(probs, logits, 1, gt) - (-2.0)) <= 1e-12

    def test_zero_weights(self):
        rng = np.random.default_rng(0)
        c = match_cost(rng.random(4), rng.normal(size=(3, 3)), 2, rng.random((3, 3)) > 0.5, CostWeights(0, 0, 0))
        assert c == 0.0

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            match_cost(np.ones(3), np.zeros((2, 2)), 0, np.zeros((3, 3), bool))

    def test_matrix_agrees_with_pairwise(self):
        rng = np.random.default_rng(1)
        probs, logits = rng.dirichlet(np.ones(4), size=3), rng.normal(size=(3, 4, 4))
        masks = rng.random((2, 4, 4)) > 0.5
        m = cost_matrix(probs, logits, [0, 2], masks)
        for g in range(2):
            for p in range(3):
                assert abs(m[g, p] - match_cost(probs[p], logits[p], [0, 2][g], masks[g])) <= 1e-12


def _track(i, cls, masks):
    present = np.flatnonzero(masks.reshape(len(masks), -1).any(axis=1))
    return GroundTruthTrack(i, cls, True, int(present[0]), masks)


class TestTrainingMatch:
    def test_source_switch(self):
        assert not use_own_predictions(0, 10)
        assert not use_own_predictions(4, 10)
        assert use_own_predictions(5, 10)
        assert use_own_predictions(3, 5)  # 3 >= 2.5

    def _clip(self, rng, t=3, n=3, h=4, w=4, k=3):
        return ClipPredictions(rng.dirichlet(np.ones(k + 1), size=(t, n)), rng.normal(size=(t, n, h, w)) * 3)

    def test_tracker_sources(self):
        rng = np.random.default_rng(2)
        seg, trk = self._clip(rng), self._clip(rng)
        gts = [_track(1, 0, rng.random((3, 4, 4)) > 0.5)]
        assert match_tracker(gts, 0, 10, segmenter=seg, tracker=trk).source == "segmenter"
        assert match_tracker(gts, 5, 10, segmenter=seg, tracker=trk).source == "tracker"

    def test_first_frame_only(self):
        masks_a = np.zeros((3, 2, 2), bool)
        masks_a[1:, 0, :] = True  # appears at frame 1
        masks_b = np.zeros((3, 2, 2), bool)
        masks_b[:, 1, :] = True
        gts = [_track(1, 0, masks_a), _track(2, 1, masks_b)]
        assert gts[0].first_frame == 1 and gts[1].first_frame == 0
        probs = np.full((3, 2, 3), 1 / 3)
        logits = np.zeros((3, 2, 2, 2))
        # at frame 1 slot 1 covers row 0 and slot 0 covers row 1; other frames say the opposite
        logits[1, 1] = np.where(masks_a[1], 9.0, -9.0)
        logits[1, 0] = np.where(masks_b[1], 9.0, -9.0)
        logits[0, 0] = np.where(masks_b[0], 9.0, -9.0)
        logits[[0, 2], 1] = -9.0
        logits[2, 0] = np.where(masks_a[2], 9.0, -9.0)
        preds = ClipPredictions(probs, logits)
        a = match_tracker(gts, 0, 10, segmenter=preds, tracker=preds)
        # track a judged at frame 1 -> slot 1; track b at frame 0 -> slot 0
        assert list(a.perm) == [1, 0]

    def test_two_by_two_costs(self):
        # first-frame costs [[0,1],[1,0]] -> identity
        masks = [np.zeros((1, 1, 2), bool), np.zeros((1, 1, 2), bool)]
        masks[0][0, 0, 0] = True
        masks[1][0, 0, 1] = True
        gts = [_track(1, 0, masks[0]), _track(2, 0, masks[1])]
        logits = np.array([[[[50.0, -50.0]], [[-50.0, 50.0]]]])
        preds = ClipPredictions(np.full((1, 2, 2), 0.5), logits)
        assert list(match_tracker(gts, 0, 2, segmenter=preds, tracker=preds).perm) == [0, 1]

    def test_too_many_tracks(self):
        rng = np.random.default_rng(3)
        preds = self._clip(rng, n=1)
        gts = [_track(i, 0, rng.random((3, 4, 4)) > 0.3) for i in range(2)]
        with pytest.raises(ValueError):
            match_tracker(gts, 0, 10, segmenter=preds, tracker=preds)

    def test_refiner_sources_and_single(self):
        rng = np.random.default_rng(4)
        trk, ref = self._clip(rng, n=1), self._clip(rng, n=1)
        gts = [_track(1, 0, rng.random((3, 4, 4)) > 0.5)]
        a = match_refiner(gts, 1, 10, tracker=trk, refiner=ref)
        assert a.source == "tracker" and list(a.perm) == [0]
        assert match_refiner(gts, 5, 10, tracker=trk, refiner=ref).source == "refiner"

    def test_refiner_video_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            preds = self._clip(rng, t=4, n=3)
            gts = [_track(i, int(rng.integers(0, 3)), rng.random((4, 4, 4)) > 0.5) for i in range(3)]
            a = match_refiner(gts, 0, 10, tracker=preds, refiner=preds)
            best = math.inf
            for p in itertools.permutations(range(3)):
                s = sum(match_cost(preds.class_probs[t, p[i]], preds.mask_logits[t, p[i]], g.class_id, g.masks[t])
                        for i, g in enumerate(gts) for t in range(4))
                best = min(best, s)
            assert abs(a.cost - best) <= 1e-9

    def test_video_cost_sums_frames(self):
        rng = np.random.default_rng(6)
        preds = self._clip(rng, t=2, n=2)
        gts = [_track(1, 1, rng.random((2, 4, 4)) > 0.5)]
        total = video_cost_matrix(gts, preds)
        parts = sum(cost_matrix(preds.class_probs[t], preds.mask_logits[t], [1], gts[0].masks[t][None])
                    for t in range(2))
        assert np.allclose(total, parts, atol=1e-12)

    def test_ground_truth_tracks_first_frame(self):
        maps = np.array([[[1, 1]], [[1, 2]], [[2, 2]]])
        v = PanopticVideo(maps, {1: Track(4, False), 2: Track(0, True)})
        tr = {g.track_id: g for g in ground_truth_tracks(v)}
        assert tr[1].first_frame == 0 and tr[2].first_frame == 1
        assert tr[2].masks.shape == (3, 1, 2)
