"""Unit tests for detection matching and average precision."""

import pytest

from fleetaug.detection import (
    EvalConfig,
    Metric,
    average_precision,
    evaluate_dataset,
    match_detections,
    precision_recall,
)
from fleetaug.geometry import Box3D, Detection


def car(x, y, z=-0.8):
    return Box3D(x, y, z, 3.9, 1.6, 1.56)


def det(box, score):
    return Detection(box, score, 1.0)


class TestMetric:
    """Test metric parsing."""

    def test_parse(self):
        """Test names are case- and space-insensitive."""
        assert Metric.parse(" BEV ") is Metric.BEV
        assert Metric.parse("3d") is Metric.IOU_3D

    def test_unknown(self):
        """Test unknown names raise ValueError."""
        with pytest.raises(ValueError):
            Metric.parse("2d")

    def test_config_range(self):
        """Test invalid thresholds and sample counts are rejected."""
        with pytest.raises(ValueError):
            EvalConfig(iou_threshold=0.0)
        with pytest.raises(ValueError):
            EvalConfig(ap_points=1)


class TestMatchDetections:
    """Test greedy matching."""

    def test_score_order(self):
        """Test the higher-scored duplicate takes the GT."""
        gt = car(5.0, 0.0)
        result = match_detections([det(gt, 0.3), det(gt, 0.8)], [gt], EvalConfig())
        assert result.scores.tolist() == [0.8, 0.3]
        assert result.tp.tolist() == [True, False]

    def test_threshold(self):
        """Test a shifted box matches at 0.5 but not at 0.7."""
        # shifted by 1 m along the length: IoU = 4.64 / 7.84
        shifted = car(6.0, 0.0)
        gts = [car(5.0, 0.0)]
        assert match_detections([det(shifted, 0.9)], gts, EvalConfig(0.7)).tp.tolist() == [False]
        assert match_detections([det(shifted, 0.9)], gts, EvalConfig(0.5)).tp.tolist() == [True]

    def test_metric_changes_overlap(self):
        """Test a z offset hurts 3D IoU but not BEV IoU."""
        gts = [car(5.0, 0.0)]
        raised = [det(car(5.0, 0.0, z=0.0), 0.9)]
        assert match_detections(raised, gts, EvalConfig(0.7, Metric.BEV)).tp.tolist() == [True]
        assert match_detections(raised, gts, EvalConfig(0.7, Metric.IOU_3D)).tp.tolist() == [False]

    def test_empty_inputs(self):
        """Test empty detections or labels."""
        assert match_detections([], [car(1, 0)], EvalConfig()).num_gts == 1
        result = match_detections([det(car(1, 0), 0.5)], [], EvalConfig())
        assert result.tp.tolist() == [False]


class TestAveragePrecision:
    """Test interpolated AP."""

    def test_perfect(self):
        """Test all true positives give AP 1."""
        assert average_precision([True, True], 2, EvalConfig()) == pytest.approx(1.0)

    def test_no_detections(self):
        """Test no detections against labels give AP 0."""
        assert average_precision([], 3, EvalConfig()) == 0.0

    def test_tp_fp_tp(self):
        """Test [TP, FP, TP] against two labels gives 5/6."""
        assert average_precision([True, False, True], 2, EvalConfig()) == pytest.approx(5 / 6)

    def test_no_labels(self):
        """Test AP with no labels is 1 without detections and 0 with some."""
        assert average_precision([], 0, EvalConfig()) == 1.0
        assert average_precision([False], 0, EvalConfig()) == 0.0

    def test_precision_recall(self):
        """Test cumulative precision and recall."""
        precision, recall = precision_recall([True, False, True], 2)
        assert precision.tolist() == pytest.approx([1.0, 0.5, 2 / 3])
        assert recall.tolist() == pytest.approx([0.5, 0.5, 1.0])

    def test_negative_labels(self):
        """Test a negative label count is rejected."""
        with pytest.raises(ValueError):
            average_precision([], -1, EvalConfig())


class TestEvaluateDataset:
    """Test dataset-level pooling."""

    def test_perfect(self):
        """Test detections equal to labels give AP 1."""
        gts = [[car(5, 0), car(12, 4)], [car(8, -3)]]
        dets = [[det(b, 0.9) for b in scene] for scene in gts]
        assert evaluate_dataset(dets, gts, EvalConfig()) == pytest.approx(1.0)

    def test_global_score_sort(self):
        """Test ranking is pooled across scenes."""
        gts = [[car(5, 0)], [car(8, -3)]]
        dets = [[det(car(5, 0), 0.9)], [det(car(20, 5), 0.95), det(car(8, -3), 0.5)]]
        # pooled order FP, TP, TP; the envelope is 2/3 at every recall
        expected = 2 / 3
        assert evaluate_dataset(dets, gts, EvalConfig()) == pytest.approx(expected)

    def test_length_mismatch(self):
        """Test mismatched scene counts are rejected."""
        with pytest.raises(ValueError):
            evaluate_dataset([[]], [[], []], EvalConfig())
