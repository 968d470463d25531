"""Recall/AP measurement: hand-enumerated PR oracle, monotonicity, determinism."""

import numpy as np
import pytest

from multibox.evaluation import (
    EvalReport,
    average_precision,
    default_score_cutoffs,
    evaluate_detections,
    recall_table,
    recall_table_csv,
    report_csv,
    svg_curve,
    sweep_budget,
    sweep_csv,
)
from multibox.geometry import BBox, ScoredBox
from multibox.inference import Detection


def det(box, conf, scores):
    return Detection(box, conf, np.asarray(scores, dtype=np.float64))


def boxes_grid(n, size=0.1):
    out = []
    for i in range(n):
        x = 0.05 + (i % 3) * 0.3
        y = 0.05 + (i // 3) * 0.3
        out.append(BBox(x, y, x + size, y + size))
    return out


class TestRecallTable:
    def test_perfect_proposals_full_recall(self):
        gts = [[(b, 1 + i % 2) for i, b in enumerate(boxes_grid(4))]]
        props = [[ScoredBox(b, 1.0) for b, _ in gts[0]]]
        table = recall_table(props, gts, score_cutoffs=(0.5,))
        np.testing.assert_array_equal(table.cells, 1.0)
        np.testing.assert_array_equal(table.agnostic, 1.0)

    def test_no_kept_proposals_zero_recall(self):
        gts = [[(b, 1) for b in boxes_grid(3)]]
        props = [[ScoredBox(b, 0.1) for b, _ in gts[0]]]
        table = recall_table(props, gts, score_cutoffs=(0.9,))
        np.testing.assert_array_equal(table.cells, 0.0)
        assert table.budgets == (0.0,)

    def test_rows_non_increasing_in_iou_threshold(self):
        rng = np.random.default_rng(211)
        gts, props = [], []
        for img in range(10):
            g = []
            p = []
            for b in boxes_grid(4, size=0.15):
                g.append((b, int(rng.integers(1, 3))))
                jitter = rng.uniform(-0.05, 0.05, 4)
                shifted = np.clip(b.as_array() + jitter, 0, 1)
                if shifted[0] < shifted[2] and shifted[1] < shifted[3]:
                    p.append(ScoredBox(BBox(*shifted), float(rng.uniform())))
            gts.append(g)
            props.append(p)
        table = recall_table(props, gts)
        for row in np.concatenate([table.cells, table.agnostic], axis=0):
            assert all(a >= b - 1e-12 for a, b in zip(row, row[1:]))

    def test_budgets_ascending_and_monotone_recall(self):
        rng = np.random.default_rng(223)
        gts = [[(b, 1) for b in boxes_grid(5, 0.12)] for _ in range(5)]
        props = []
        for g in gts:
            p = [ScoredBox(b, float(rng.uniform())) for b, _ in g]
            p += [ScoredBox(BBox(0.7, 0.7, 0.9, 0.9), float(rng.uniform()))]
            props.append(p)
        table = recall_table(props, gts)
        assert list(table.budgets) == sorted(table.budgets)
        for col in table.agnostic.T:  # recall grows with budget
            assert all(a <= b + 1e-12 for a, b in zip(col, col[1:]))

    def test_each_gt_credited_once(self):
        # two coincident proposals, one gt: recall is 1 not 2; and with two
        # gts one proposal can only credit one of them
        gt_box = BBox(0.1, 0.1, 0.3, 0.3)
        gts = [[(gt_box, 1), (gt_box, 1)]]
        props = [[ScoredBox(gt_box, 0.9)]]
        table = recall_table(props, gts, thresholds=(0.5,), score_cutoffs=(0.0,))
        assert table.agnostic[0, 0] == 0.5

    def test_empty_gts_rejected(self):
        with pytest.raises(ValueError):
            recall_table([[ScoredBox(BBox(0, 0, 1, 1), 1.0)]], [[]])

    def test_default_cutoffs_from_presigmoid_range(self):
        cutoffs = default_score_cutoffs()
        assert len(cutoffs) == 15
        assert cutoffs[0] == pytest.approx(1 / (1 + np.exp(-2.0)))
        assert cutoffs[-1] == pytest.approx(1 / (1 + np.exp(12.0)))


class TestAveragePrecision:
    def test_perfect_detection_ap_one(self):
        gts = [[(b, 1) for b in boxes_grid(4)]]
        dets = [[det(b, 0.9, [0.05, 0.95]) for b, _ in gts[0]]]
        assert average_precision(dets, gts, 1, 0.5) == 1.0

    def test_zero_true_positives(self):
        gts = [[(BBox(0.0, 0.0, 0.2, 0.2), 1)]]
        dets = [[det(BBox(0.7, 0.7, 0.9, 0.9), 0.9, [0.1, 0.9])]]
        assert average_precision(dets, gts, 1, 0.5) == 0.0

    def test_three_detection_hand_case(self):
        """TP, FP, TP over 2 gts: PR points (1, 1/1), (1/2, 2/3) -> AP by hand.

        Ranked: det1 TP (p=1, r=0.5), det2 FP (p=0.5, r=0.5), det3 TP
        (p=2/3, r=1.0). All-points AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
        """
        g1, g2 = BBox(0.1, 0.1, 0.3, 0.3), BBox(0.6, 0.6, 0.8, 0.8)
        gts = [[(g1, 1), (g2, 1)]]
        dets = [[
            det(g1, 0.9, [0.1, 0.9]),
            det(BBox(0.4, 0.0, 0.5, 0.1), 0.8, [0.2, 0.8]),
            det(g2, 0.7, [0.3, 0.7]),
        ]]
        assert average_precision(dets, gts, 1, 0.5) == pytest.approx(5 / 6, abs=1e-12)

    def test_undefined_class_returns_none(self):
        gts = [[(BBox(0.1, 0.1, 0.3, 0.3), 1)]]
        dets = [[det(BBox(0.1, 0.1, 0.3, 0.3), 0.9, [0.1, 0.5, 0.4])]]
        assert average_precision(dets, gts, 2, 0.5) is None

    def test_invariant_under_monotone_score_rescaling(self):
        rng = np.random.default_rng(227)
        gts, dets = [], []
        for _ in range(6):
            g = [(b, 1) for b in boxes_grid(3, 0.14)]
            d = []
            for b, _ in g:
                # side 0.14 with +-0.04 jitter keeps corners ordered
                jitter = np.clip(b.as_array() + rng.uniform(-0.04, 0.04, 4), 0, 1)
                d.append(det(BBox(*jitter), float(rng.uniform(0.1, 0.9)), [0.5, 0.5]))
            gts.append(g)
            dets.append(d)
        base = average_precision(dets, gts, None, 0.5)
        rescaled = [
            [Detection(d.box, float(np.tanh(3 * d.confidence)), d.class_scores) for d in img]
            for img in dets
        ]
        assert average_precision(rescaled, gts, None, 0.5) == pytest.approx(base, abs=1e-12)

    def test_independent_of_image_ordering(self):
        rng = np.random.default_rng(229)
        gts = [[(b, 1) for b in boxes_grid(3)] for _ in range(4)]
        dets = [
            [det(b, float(rng.uniform()), [0.5, 0.5]) for b, _ in g] for g in gts
        ]
        base = average_precision(dets, gts, 1, 0.5)
        perm = [2, 0, 3, 1]
        assert average_precision(
            [dets[i] for i in perm], [gts[i] for i in perm], 1, 0.5
        ) == pytest.approx(base, abs=1e-15)


class TestSweep:
    def build(self, seed=233):
        rng = np.random.default_rng(seed)
        gts, props = [], []
        for _ in range(8):
            g = [(b, 1) for b in boxes_grid(5, 0.13)]
            p = []
            for b, _ in g:
                jitter = np.clip(b.as_array() + rng.uniform(-0.03, 0.03, 4), 0, 1)
                p.append(ScoredBox(BBox(*jitter), float(rng.uniform())))
            for _ in range(10):
                x, y = rng.uniform(0, 0.8, 2)
                p.append(ScoredBox(BBox(x, y, x + 0.1, y + 0.1), float(rng.uniform())))
            gts.append(g)
            props.append(p)
        return props, gts

    def test_recall_non_decreasing_in_k(self):
        props, gts = self.build()
        points = sweep_budget(props, gts, [1, 2, 5, 10, 20])
        recalls = [p.recall for p in points]
        assert recalls == sorted(recalls)

    def test_k_beyond_counts_equals_full_evaluation(self):
        props, gts = self.build()
        full = sweep_budget(props, gts, [10_000])[0]
        direct = recall_table(props, gts, thresholds=(0.5,), score_cutoffs=(0.0,))
        assert full.recall == pytest.approx(direct.agnostic[0, 0], abs=1e-15)


class TestReports:
    def build_report(self) -> EvalReport:
        gts = [[(b, 1 + i % 2) for i, b in enumerate(boxes_grid(4))]]
        dets = [[det(b, 0.9, [0.0, 0.6, 0.4]) for b, _ in gts[0]]]
        return evaluate_detections(dets, gts, classes=[1, 2], recall_cutoffs=(0.5,))

    def test_map_is_mean_of_defined_aps(self):
        report = self.build_report()
        defined = [v for v in report.ap_per_class.values() if v is not None]
        assert report.mean_ap == pytest.approx(float(np.mean(defined)), abs=1e-12)

    def test_csv_outputs_well_formed(self):
        report = self.build_report()
        table_csv = recall_table_csv(report.recall)
        assert table_csv.startswith("cutoff,budget,")
        long_csv = report_csv(report)
        assert long_csv.splitlines()[0] == "metric,budget,class,iou,value"
        assert any(line.startswith("map,") for line in long_csv.splitlines())
        sweep_text = sweep_csv(
            sweep_budget(
                [[ScoredBox(b, 0.5) for b in boxes_grid(3)]],
                [[(b, 1) for b in boxes_grid(3)]],
                [1, 5],
            )
        )
        assert sweep_text.splitlines()[0] == "k,mean_kept,recall,ap"

    def test_svg_curve_renders(self):
        text = svg_curve([(0.0, 1.0), (0.5, 0.8), (1.0, 0.2)], "pr")
        assert text.startswith("<svg") and "polyline" in text
