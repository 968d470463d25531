"""Decoding, top-K, crop tiling, multi-crop merging, context scoring, ensembling."""

import numpy as np
import pytest

from multibox.geometry import BBox, ScoredBox, iou
from multibox.inference import (
    CropWindow,
    Detection,
    MultiCropConfig,
    classify_detections,
    decode_slot_arrays,
    decode_slots,
    default_context_windows,
    ensemble_multibox,
    ensemble_scores,
    multi_crop_propose,
    propose,
    select_topk,
    tile_crops,
)
from multibox.priors import PriorSet, build_grid_priors, default_grid_specs
from multibox.synthdata import SceneConfig, generate_scene
from multibox.toynet import (
    PostClassifierConfig,
    PostClassifierNet,
    ProposerConfig,
    ProposerNet,
    SlotPredictions,
)

TINY = ProposerConfig(
    input_size=8, grids=(4, 2), templates_per_cell=2, include_global=True,
    block_channels=(2, 3), reduce_channels=(2,), taper_channels=3, seed=5,
)
TINY_PC = PostClassifierConfig(
    num_classes=2, input_size=8, block_channels=(2, 3), reduce_channels=(2,),
    feature_width=4, context_width=3, seed=5,
)


def tiny_priors():
    return build_grid_priors(default_grid_specs(TINY.grids, TINY.templates_per_cell))


class TestDecode:
    def test_zero_residuals_return_priors(self):
        priors = tiny_priors()
        preds = SlotPredictions(np.zeros((len(priors), 4)), np.zeros(len(priors)))
        boxes, scores = decode_slot_arrays(preds, priors)
        np.testing.assert_array_equal(boxes, priors.boxes)
        np.testing.assert_allclose(scores, 0.5)

    def test_componentwise_addition(self):
        priors = PriorSet(np.array([[0.1, 0.1, 0.3, 0.3]]), ("p",))
        preds = SlotPredictions(np.array([[0.05, 0.0, 0.05, 0.0]]), np.zeros(1))
        out = decode_slots(preds, priors)
        np.testing.assert_allclose(out[0].box.as_array(), [0.15, 0.1, 0.35, 0.3])

    def test_clipping(self):
        priors = PriorSet(np.array([[0.7, 0.7, 1.0, 1.0]]), ("p",))
        preds = SlotPredictions(np.array([[0.0, 0.0, 0.2, 0.0]]), np.zeros(1))
        out = decode_slots(preds, priors)
        assert out[0].box.xmax == 1.0  # 1.2 before clipping

    def test_encode_decode_roundtrip(self):
        rng = np.random.default_rng(151)
        priors = tiny_priors()
        x = np.sort(rng.uniform(0, 1, (len(priors), 2, 2)), axis=2)
        gts = np.stack([x[:, 0, 0], x[:, 1, 0], x[:, 0, 1], x[:, 1, 1]], axis=1)
        residuals = gts - priors.boxes
        boxes, _ = decode_slot_arrays(SlotPredictions(residuals, np.zeros(len(priors))), priors)
        np.testing.assert_allclose(boxes, gts, atol=1e-12)

    def test_count_mismatch_rejected(self):
        priors = tiny_priors()
        with pytest.raises(ValueError):
            decode_slots(SlotPredictions(np.zeros((3, 4)), np.zeros(3)), priors)


class TestSelectTopK:
    BOXES = [
        ScoredBox(BBox(0.0, 0.0, 0.1, 0.1), 0.3),
        ScoredBox(BBox(0.2, 0.2, 0.4, 0.4), 0.9),
        ScoredBox(BBox(0.5, 0.5, 0.7, 0.7), 0.6),
    ]

    def test_k_at_least_n_is_identity(self):
        assert select_topk(self.BOXES, 3) == self.BOXES
        assert select_topk(self.BOXES, 10) == self.BOXES

    def test_k_one_is_argmax(self):
        assert select_topk(self.BOXES, 1) == [self.BOXES[1]]

    def test_preserves_input_order(self):
        assert select_topk(self.BOXES, 2) == [self.BOXES[1], self.BOXES[2]]

    def test_k_zero(self):
        assert select_topk(self.BOXES, 0) == []


class TestTileCrops:
    def test_crop_covering_image_gives_single_window(self):
        crops = tile_crops(1.0, 1.0, 0.5)
        assert len(crops) == 1
        assert crops[0].window == BBox(0.0, 0.0, 1.0, 1.0)

    def test_double_extent_half_overlap_gives_three(self):
        # landscape 2:1 image, window = the full height
        crops = tile_crops(2.0, 1.0, 0.5)
        assert len(crops) == 3
        xs = sorted(c.window.xmin for c in crops)
        np.testing.assert_allclose(xs, [0.0, 0.25, 0.5])  # in [0,1] x-units of a 2-wide axis

    def test_double_extent_tighter_overlap_gives_four(self):
        crops = tile_crops(2.0, 1.0, 0.625)
        assert len(crops) == 4

    def test_minimal_count_oracle(self):
        rng = np.random.default_rng(157)
        for _ in range(50):
            aspect = float(rng.uniform(1.0, 3.0))
            scale = float(rng.uniform(0.3, 1.0))
            overlap = float(rng.uniform(0.0, 0.8))
            crops = tile_crops(aspect, scale, overlap)
            xs = sorted({round(c.window.xmin * aspect, 12) for c in crops})
            extent, side = aspect, scale
            if side >= extent:
                assert xs == [0.0]
                continue
            n = len(xs)
            # constraint: uniform stride <= side*(1-overlap), ends pinned
            stride = (extent - side) / (n - 1)
            assert stride <= side * (1 - overlap) + 1e-9
            if n > 2:  # minimality: one fewer window would violate the stride bound
                assert (extent - side) / (n - 2) > side * (1 - overlap) + 1e-12
            assert xs[0] == 0.0
            assert xs[-1] == pytest.approx(extent - side, abs=1e-12)

    def test_adjacent_overlap_invariant(self):
        crops = tile_crops(2.5, 0.8, 0.55)
        xs = sorted({c.window.xmin * 2.5 for c in crops})
        for a, b in zip(xs, xs[1:]):
            assert (a + 0.8) - b >= 0.55 * 0.8 - 1e-9  # shared-axis overlap

    def test_windows_inside_unit_square(self):
        for c in tile_crops(1.7, 0.62, 0.5):
            w = c.window
            assert 0.0 <= w.xmin <= w.xmax <= 1.0
            assert 0.0 <= w.ymin <= w.ymax <= 1.0


class TestMultiCropPropose:
    def setup_method(self):
        self.net = ProposerNet(TINY)
        self.priors = tiny_priors()
        cfg = SceneConfig(image_size=8, min_objects=1, max_objects=2, noise_level=0.02)
        self.image = generate_scene(cfg, 3).image

    def test_whole_image_only_equals_single_crop(self):
        single = propose(self.net, self.priors, self.image, nms_threshold=0.85)
        multi = multi_crop_propose(
            self.net, self.priors, self.image,
            MultiCropConfig(scales=(), nms_threshold=0.85),
        )
        assert single == multi

    def test_containment_filter_drops_border_proposal(self):
        from multibox.inference import _contained

        boxes = np.array([[0.02, 0.5, 0.15, 0.6], [0.3, 0.3, 0.7, 0.7]])
        keep = _contained(boxes, 0.1)
        assert keep.tolist() == [False, True]

    def test_merged_set_pairwise_iou_bound(self):
        out = multi_crop_propose(
            self.net, self.priors, self.image,
            MultiCropConfig(scales=(1.0, 0.62), min_overlap=0.5, nms_threshold=0.85),
        )
        assert len(out) > 0
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                assert iou(out[i].box, out[j].box) <= 0.85

    def test_output_within_unit_square(self):
        out = multi_crop_propose(
            self.net, self.priors, self.image,
            MultiCropConfig(scales=(0.62,), min_overlap=0.5),
        )
        for sb in out:
            b = sb.box
            assert 0.0 <= b.xmin <= b.xmax <= 1.0
            assert 0.0 <= b.ymin <= b.ymax <= 1.0


class TestContextWindows:
    def test_six_default_windows(self):
        wins = default_context_windows()
        assert len(wins) == 6
        assert wins[0] == BBox(0.0, 0.0, 1.0, 1.0)
        for w in wins[1:]:
            assert w.width == pytest.approx(0.8)
            assert w.height == pytest.approx(0.8)
        np.testing.assert_allclose(wins[5].as_array(), [0.1, 0.1, 0.9, 0.9], atol=1e-12)
        corners = {(round(w.xmin, 6), round(w.ymin, 6)) for w in wins[1:5]}
        assert corners == {(0.0, 0.0), (0.2, 0.0), (0.0, 0.2), (0.2, 0.2)}


class TestClassifyDetections:
    def setup_method(self):
        self.pc = PostClassifierNet(TINY_PC)
        self.ctx = PostClassifierNet(
            PostClassifierConfig(**{**TINY_PC.__dict__, "feature_width": 3, "seed": 9})
        )
        rng = np.random.default_rng(163)
        self.image = rng.uniform(0.2, 0.8, (16, 16, 3))
        self.proposals = [
            ScoredBox(BBox(0.1, 0.1, 0.6, 0.6), 0.9),
            ScoredBox(BBox(0.4, 0.3, 0.9, 0.8), 0.7),
        ]

    def test_single_context_crop_equals_direct_evaluation(self):
        win = [BBox(0.0, 0.0, 1.0, 1.0)]
        dets = classify_detections(self.pc, self.ctx, self.image, self.proposals, win)
        from multibox.imageops import sample_window

        ctx_feat = self.ctx.crop_features(sample_window(self.image, win[0], 8, 8))[0]
        crop = sample_window(self.image, self.proposals[0].box, 8, 8)
        feat, _ = self.pc.crop_features(crop)
        probs, _ = self.pc.classify(feat, ctx_feat)
        np.testing.assert_allclose(dets[0].class_scores, probs, atol=1e-15)

    def test_identical_context_crops_collapse_to_one(self):
        win = BBox(0.0, 0.0, 1.0, 1.0)
        one = classify_detections(self.pc, self.ctx, self.image, self.proposals, [win])
        three = classify_detections(self.pc, self.ctx, self.image, self.proposals, [win] * 3)
        for a, b in zip(one, three):
            np.testing.assert_allclose(a.class_scores, b.class_scores, atol=1e-12)

    def test_six_crop_average_matches_hand_average(self):
        from multibox.imageops import sample_window

        wins = default_context_windows()
        dets = classify_detections(self.pc, self.ctx, self.image, self.proposals, wins)
        crop = sample_window(self.image, self.proposals[1].box, 8, 8)
        feat, _ = self.pc.crop_features(crop)
        per_ctx = []
        for w in wins:
            cf = self.ctx.crop_features(sample_window(self.image, w, 8, 8))[0]
            per_ctx.append(self.pc.classify(feat, cf)[0])
        np.testing.assert_allclose(dets[1].class_scores, np.mean(per_ctx, axis=0), atol=1e-15)

    def test_order_invariance(self):
        fwd = classify_detections(self.pc, self.ctx, self.image, self.proposals)
        rev = classify_detections(self.pc, self.ctx, self.image, self.proposals[::-1])
        np.testing.assert_allclose(fwd[0].class_scores, rev[1].class_scores, atol=1e-15)

    def test_zero_area_proposal_skipped(self):
        degenerate = ScoredBox(BBox(0.5, 0.5, 0.5, 0.5), 0.4)
        dets = classify_detections(
            self.pc, None, self.image, [degenerate] + self.proposals
        )
        assert len(dets) == len(self.proposals)

    def test_probabilities_normalized(self):
        dets = classify_detections(self.pc, self.ctx, self.image, self.proposals)
        for d in dets:
            assert d.class_scores.sum() == pytest.approx(1.0, abs=1e-9)


def make_detection(box, scores, source=""):
    return Detection(box, max(scores), np.asarray(scores, dtype=np.float64), source)


class TestEnsemble:
    def test_single_model_returns_input_scores(self):
        dets = [
            make_detection(BBox(0.1, 0.1, 0.4, 0.4), [0.1, 0.7, 0.2]),
            make_detection(BBox(0.5, 0.5, 0.9, 0.9), [0.2, 0.3, 0.5]),
        ]
        scored = ensemble_scores([dets])
        for d, s in zip(dets, scored[0]):
            np.testing.assert_array_equal(s, d.class_scores)

    def test_identical_duplicate_across_two_models(self):
        box = BBox(0.2, 0.2, 0.6, 0.6)
        scores = [0.1, 0.6, 0.3]
        scored = ensemble_scores([[make_detection(box, scores)], [make_detection(box, scores)]])
        np.testing.assert_allclose(scored[0][0], scores, atol=1e-12)
        np.testing.assert_allclose(scored[1][0], scores, atol=1e-12)

    def test_disjoint_boxes_halve_scores(self):
        a = make_detection(BBox(0.0, 0.0, 0.2, 0.2), [0.1, 0.8, 0.1])
        b = make_detection(BBox(0.7, 0.7, 0.9, 0.9), [0.3, 0.2, 0.5])
        scored = ensemble_scores([[a], [b]])
        np.testing.assert_allclose(scored[0][0], np.array(a.class_scores) / 2, atol=1e-12)
        np.testing.assert_allclose(scored[1][0], np.array(b.class_scores) / 2, atol=1e-12)

    def test_scores_never_exceed_max_input(self):
        rng = np.random.default_rng(167)
        models = []
        for _ in range(3):
            dets = []
            for _ in range(5):
                x, y = rng.uniform(0, 0.5, 2)
                w, h = rng.uniform(0.1, 0.5, 2)
                dets.append(
                    make_detection(BBox(x, y, min(x + w, 1), min(y + h, 1)), rng.uniform(0, 1, 4))
                )
            models.append(dets)
        cmax = max(float(d.class_scores.max()) for m in models for d in m)
        scored = ensemble_scores(models)
        smax = max(float(np.max(s)) for m in scored for s in m)
        assert smax <= cmax + 1e-12

    def test_full_ensemble_with_nms_dedups(self):
        box = BBox(0.2, 0.2, 0.6, 0.6)
        scores = [0.1, 0.6, 0.3]
        out = ensemble_multibox(
            [[make_detection(box, scores, "m0")], [make_detection(box, scores, "m1")]],
            nms_threshold=0.5,
        )
        assert len(out) == 1
        np.testing.assert_allclose(out[0].class_scores, scores, atol=1e-12)

    def test_empty_model_contributes_zero(self):
        a = make_detection(BBox(0.0, 0.0, 0.2, 0.2), [0.1, 0.8])
        scored = ensemble_scores([[a], []])
        np.testing.assert_allclose(scored[0][0], np.array([0.1, 0.8]) / 2, atol=1e-12)
        assert scored[1] == []
