import numpy as np
import pytest

from dvps.datamodel import (FrameQueries, FuseConfig, PanopticVideo, Track, TrackedQuerySequence, VideoClip,
                            assemble_video, clip_features, panoptic_fuse, rasterize_clip, rasterize_masks,
                            segment_id)
from dvps.errors import IntegrityError
from dvps.numerics import Tensor

THINGS = [True, True, False]  # classes 0, 1 are things, 2 is stuff


def _logits(cls, n_classes=3, peak=10.0):
    z = np.zeros(n_classes + 1)
    z[cls] = peak
    return z


class TestRasterize:
    def test_zero_embeddings_half_probability(self):
        feats = np.random.default_rng(0).normal(size=(4, 2, 3))
        logits = rasterize_masks(np.zeros((2, 4)), feats).data
        assert np.array_equal(logits, np.zeros((2, 2, 3)))
        assert np.all(1 / (1 + np.exp(-logits)) == 0.5)

    def test_one_hot_selects_channel(self):
        feats = np.random.default_rng(1).normal(size=(3, 4, 5))
        emb = np.zeros((1, 3))
        emb[0, 2] = 1.0
        assert np.array_equal(rasterize_masks(emb, feats).data[0], feats[2])

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        emb, feats = rng.normal(size=(3, 4)), rng.normal(size=(4, 2, 3))
        want = np.zeros((3, 2, 3))
        for n in range(3):
            for h in range(2):
                for w in range(3):
                    want[n, h, w] = sum(emb[n, d] * feats[d, h, w] for d in range(4))
        assert np.max(np.abs(rasterize_masks(emb, feats).data - want)) <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            rasterize_masks(np.zeros((2, 3)), np.zeros((4, 2, 2)))

    def test_clip_matches_per_frame(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(3, 4, 2, 2))
        emb = rng.normal(size=(3, 5, 4))
        got = rasterize_clip(emb, feats).data
        for t in range(3):
            assert np.allclose(got[t], rasterize_masks(emb[t], feats[t]).data, atol=1e-12)

    def test_clip_batch_axis(self):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(2, 3, 4, 2, 2))
        emb = rng.normal(size=(2, 3, 5, 4))
        got = rasterize_clip(Tensor(emb), feats).data
        assert got.shape == (2, 3, 5, 2, 2)
        assert np.allclose(got[:, 1], rasterize_clip(emb[:, 1], feats[:, 1]).data, atol=1e-12)


class TestFuse:
    def test_single_query_takes_everything(self):
        # score 0.9 and mask prob 0.9 everywhere
        cls = np.log(np.array([0.9, 0.05, 0.03, 0.02]))
        mask = np.full((1, 3, 3), np.log(9.0))
        ids, tracks = panoptic_fuse(mask, cls[None], THINGS)
        sid = segment_id(0, 0, 1, 3, True)
        assert np.all(ids == sid)
        assert tracks == {sid: Track(0, True, 0)}

    def test_two_disjoint_queries_hand_fused(self):
        mask = np.full((2, 4, 4), -8.0)
        mask[0, :, :2] = 8.0
        mask[1, :, 2:] = 8.0
        cls = np.stack([_logits(0), _logits(1)])
        ids, tracks = panoptic_fuse(mask, cls, THINGS)
        a, b = segment_id(0, 0, 2, 3, True), segment_id(1, 1, 2, 3, True)
        want = np.array([[a, a, b, b]] * 4)
        assert np.array_equal(ids, want)
        assert set(tracks) == {a, b}

    def test_low_scores_all_void(self):
        cls = np.zeros((3, 4))  # uniform: score 0.25 < 0.5
        ids, tracks = panoptic_fuse(np.full((3, 2, 2), 5.0), cls, THINGS)
        assert np.all(ids == 0) and tracks == {}

    def test_no_object_argmax_dropped(self):
        cls = np.array([[0.0, 0.0, 0.0, 10.0]])
        ids, _ = panoptic_fuse(np.full((1, 2, 2), 5.0), cls, THINGS)
        assert np.all(ids == 0)

    def test_mostly_covered_query_dropped(self):
        mask = np.full((2, 4, 4), -8.0)
        mask[0] = 8.0  # everywhere, strong class
        mask[1, :2, :2] = 2.0  # small, weaker mask inside query 0's area
        cls = np.stack([_logits(0), _logits(1, peak=3.0)])
        ids, tracks = panoptic_fuse(mask, cls, THINGS)
        assert set(np.unique(ids)) == {segment_id(0, 0, 2, 3, True)}
        assert len(tracks) == 1

    def test_stuff_merged_by_class(self):
        mask = np.full((2, 2, 4), -8.0)
        mask[0, :, :2] = 8.0
        mask[1, :, 2:] = 8.0
        cls = np.stack([_logits(2), _logits(2)])
        ids, tracks = panoptic_fuse(mask, cls, THINGS)
        assert len(np.unique(ids)) == 1 and ids[0, 0] != 0
        assert list(tracks.values()) == [Track(2, False)]

    def test_total_function(self):
        rng = np.random.default_rng(5)
        ids, tracks = panoptic_fuse(rng.normal(size=(5, 6, 6)) * 4, rng.normal(size=(5, 4)) * 4, THINGS,
                                    FuseConfig(0.3, 0.5))
        assert ids.shape == (6, 6)
        assert set(np.unique(ids).tolist()) - {0} <= set(tracks)

    def test_ids_stable_per_slot(self):
        mask = np.full((2, 2, 2), -8.0)
        mask[1] = 8.0
        cls = np.stack([_logits(0), _logits(1)])
        a, _ = panoptic_fuse(mask, cls, THINGS)
        b, _ = panoptic_fuse(mask[::-1].copy(), cls[::-1].copy(), THINGS)
        assert a[0, 0] == segment_id(1, 1, 2, 3, True)
        assert b[0, 0] == segment_id(0, 1, 2, 3, True)

    def test_assemble_video(self):
        mask = np.full((1, 2, 2), 8.0)
        f = panoptic_fuse(mask, _logits(0)[None], THINGS)
        v = assemble_video([f, f])
        assert v.T == 2 and len(v.tracks) == 1


class TestTypes:
    def test_frame_queries_mismatch(self):
        with pytest.raises(IntegrityError):
            FrameQueries(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 2)))

    def test_frame_queries_empty(self):
        with pytest.raises(IntegrityError):
            FrameQueries(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)))

    def test_permuted(self):
        q = FrameQueries(np.arange(6.0).reshape(3, 2), np.zeros((3, 2)), np.zeros((3, 1)))
        assert np.array_equal(q.permuted([2, 0, 1]).embeddings[:, 0], [4.0, 0.0, 2.0])

    def test_missing_track_entry(self):
        maps = np.zeros((1, 2, 2), dtype=np.int64)
        maps[0, 0, 0] = 7
        with pytest.raises(IntegrityError, match="7"):
            PanopticVideo(maps, {})

    def test_empty_video(self):
        with pytest.raises(IntegrityError):
            PanopticVideo(np.zeros((0, 2, 2), dtype=np.int64), {})

    def test_two_ids_for_one_stuff_class(self):
        maps = np.array([[[1, 2]]])
        with pytest.raises(IntegrityError, match="stuff class"):
            PanopticVideo(maps, {1: Track(2, False), 2: Track(2, False)})

    def test_clip_features(self):
        codebook = np.array([[1.0, 0.0], [0.0, 1.0]])
        clip = VideoClip(codebook, np.array([[[0, 1]]]))
        assert np.array_equal(clip_features(clip)[0], [[[1.0, 0.0]], [[0.0, 1.0]]])
        assert np.array_equal(clip.features(0), clip_features(clip)[0])

    def test_clip_bad_index(self):
        with pytest.raises(IntegrityError):
            VideoClip(np.zeros((2, 2)), np.array([[[2]]]))

    def test_stage_tag(self):
        with pytest.raises(ValueError):
            TrackedQuerySequence(np.zeros((1, 2, 3)), "segmenter")

    def test_frames_slice_keeps_table_consistent(self):
        maps = np.array([[[1, 2]], [[1, 1]]])
        v = PanopticVideo(maps, {1: Track(2, False), 2: Track(0, True)})
        assert set(v.frames(1, 2).tracks) == {1}
