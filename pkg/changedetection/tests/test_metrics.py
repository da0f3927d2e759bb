import json
import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase
from hypothesis import given, settings as hsettings, strategies as st

from changedetection.exceptions import DataError, ShapeError
from changedetection.metrics import (
    ConfusionCounts, MetricReport, bcd_metrics, binary_counts, confusion_update, f1_from_precision_recall,
    iou_from_f1, kappa_coefficient, merge_counts, scd_metrics, score_from, semantic_confusion, write_report,
)

from .helpers import brute_force_confusion, brute_force_counts, brute_force_kappa


def counts_of(tp, fp, fn, tn, seg=None):
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn,
                           seg_confusion=None if seg is None else np.asarray(seg, dtype=np.int64))


class PublishedArithmeticTests(SimpleTestCase):
    def test_f1_and_iou_from_precision_recall(self):
        f1 = f1_from_precision_recall(0.9197, 0.8862)
        self.assertAlmostEqual(f1 * 100, 90.26, delta=0.01)
        self.assertAlmostEqual(iou_from_f1(f1) * 100, 82.25, delta=0.01)

    def test_score_weights(self):
        self.assertAlmostEqual(score_from(0.5269, 0.8399) * 100, 62.08, delta=0.005)


class BcdMetricTests(SimpleTestCase):
    def test_hand_counted_table(self):
        metrics = bcd_metrics(counts_of(2, 1, 1, 4))
        self.assertAlmostEqual(metrics.iou_c, 0.5)
        self.assertAlmostEqual(metrics.f1_c, 4 / 6)
        self.assertAlmostEqual(metrics.precision_c, 2 / 3)
        self.assertAlmostEqual(metrics.recall_c, 2 / 3)
        self.assertAlmostEqual(metrics.oa, 0.75)

    def test_single_perfect_pixel(self):
        self.assertEqual(tuple(bcd_metrics(counts_of(1, 0, 0, 0))), (1.0, 1.0, 1.0, 1.0, 1.0))

    def test_no_change_anywhere_counts_as_perfect(self):
        with self.assertLogs('changedetection.metrics', 'WARNING'):
            metrics = bcd_metrics(counts_of(0, 0, 0, 9))
        self.assertEqual((metrics.iou_c, metrics.f1_c), (1.0, 1.0))

    def test_empty_counts(self):
        with self.assertRaises(DataError):
            bcd_metrics(ConfusionCounts.empty())

    @hsettings(max_examples=200, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
    def test_iou_and_f1_relation(self, tp, fp, fn, tn):
        if tp + fp + fn + tn == 0:
            return
        metrics = bcd_metrics(counts_of(tp, fp, fn, tn))
        self.assertAlmostEqual(metrics.iou_c, iou_from_f1(metrics.f1_c), places=12)
        self.assertLessEqual(0.0, metrics.iou_c)
        self.assertLessEqual(metrics.iou_c, metrics.f1_c + 1e-12)
        self.assertLessEqual(metrics.f1_c, 1.0)
        for value in (metrics.oa, metrics.precision_c, metrics.recall_c):
            self.assertTrue(0.0 <= value <= 1.0)


class ConfusionTests(SimpleTestCase):
    def test_perfect_and_inverted(self):
        label = np.ones((2, 2), dtype=np.int64)
        self.assertEqual(binary_counts(label, label), counts_of(4, 0, 0, 0))
        inverted = binary_counts(1 - label, label)
        self.assertEqual((inverted.tp, inverted.tn, inverted.fp + inverted.fn), (0, 0, 4))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pred = rng.integers(0, 2, size=(16, 16))
            label = rng.choice([0, 1, 255], size=(16, 16), p=[0.45, 0.45, 0.1])
            k = int(rng.integers(2, 6))
            sem_pairs = [(rng.integers(0, k, size=(16, 16)), rng.integers(0, k, size=(16, 16))) for _ in range(2)]

            counts = binary_counts(pred, label)
            tp, fp, fn, tn = brute_force_counts(pred, label)
            self.assertEqual((counts.tp, counts.fp, counts.fn, counts.tn), (tp, fp, fn, tn))

            scd_counts = confusion_update(ConfusionCounts.empty(k), pred, label)
            matrix = [[0] * k for _ in range(k)]
            for sem_pred, sem_label in sem_pairs:
                scd_counts = confusion_update(scd_counts, sem_pred, sem_label, semantic=True)
                phase = brute_force_confusion(sem_pred, sem_label, k)
                matrix = [[a + b for a, b in zip(row, other)] for row, other in zip(matrix, phase)]
            report = MetricReport.from_counts(scd_counts, scd=True)

            iou_c = tp / (tp + fp + fn)
            iou_u = tn / (tn + fp + fn)
            miou = (iou_c + iou_u) / 2
            sek = math.exp(iou_c - 1) * brute_force_kappa(matrix)
            expected = {
                'iou_c': iou_c,
                'f1_c': 2 * tp / (2 * tp + fp + fn),
                'precision_c': tp / (tp + fp),
                'recall_c': tp / (tp + fn),
                'oa': (tp + tn) / (tp + fp + fn + tn),
                'miou': miou,
                'sek': sek,
                'score': 0.7 * sek + 0.3 * miou,
            }
            for name, value in expected.items():
                self.assertAlmostEqual(getattr(report, name), value, places=10, msg=name)

    def test_accepts_tensors(self):
        pred = torch.tensor([[1, 0], [1, 1]])
        self.assertEqual(binary_counts(pred, pred.clone()), counts_of(3, 0, 0, 1))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            binary_counts(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_semantic_confusion_and_kappa_match_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            pred = rng.integers(0, k, size=(8, 8))
            label = rng.integers(0, k, size=(8, 8))
            matrix = semantic_confusion(pred, label, k)
            expected = brute_force_confusion(pred, label, k)
            self.assertEqual(matrix.tolist(), expected)
            self.assertAlmostEqual(kappa_coefficient(matrix), brute_force_kappa(expected), places=10)

    def test_semantic_update_needs_matrix(self):
        with self.assertRaises(ShapeError):
            confusion_update(ConfusionCounts.empty(), np.zeros((2, 2)), np.zeros((2, 2)), semantic=True)

    def test_predicted_class_out_of_range(self):
        with self.assertRaises(DataError):
            semantic_confusion(np.full((2, 2), 7), np.zeros((2, 2)), 5)


class MergeTests(SimpleTestCase):
    def test_tiles_merge_to_whole_image(self):
        rng = np.random.default_rng(2)
        pred, label = rng.integers(0, 2, size=(32, 32)), rng.integers(0, 2, size=(32, 32))
        sem_pred, sem_label = rng.integers(0, 4, size=(32, 32)), rng.integers(0, 4, size=(32, 32))
        whole = confusion_update(ConfusionCounts.empty(4), pred, label)
        whole = confusion_update(whole, sem_pred, sem_label, semantic=True)
        merged = ConfusionCounts.empty(4)
        for rows in (slice(0, 16), slice(16, 32)):
            for cols in (slice(0, 16), slice(16, 32)):
                tile = confusion_update(ConfusionCounts.empty(4), pred[rows, cols], label[rows, cols])
                tile = confusion_update(tile, sem_pred[rows, cols], sem_label[rows, cols], semantic=True)
                merged = merge_counts(merged, tile)
        self.assertEqual((merged.tp, merged.fp, merged.fn, merged.tn), (whole.tp, whole.fp, whole.fn, whole.tn))
        self.assertTrue(np.array_equal(merged.seg_confusion, whole.seg_confusion))
        self.assertEqual(MetricReport.from_counts(merged, scd=True), MetricReport.from_counts(whole, scd=True))

    def test_identity_and_commutativity(self):
        a = counts_of(1, 2, 3, 4, [[1, 0], [2, 3]])
        b = counts_of(5, 0, 1, 9, [[0, 4], [1, 1]])
        self.assertEqual(merge_counts(a, ConfusionCounts.empty(2)), a)
        self.assertEqual(merge_counts(ConfusionCounts.empty(), a), a)
        self.assertEqual(merge_counts(a, b), merge_counts(b, a))

    def test_class_count_mismatch(self):
        with self.assertRaises(ShapeError):
            merge_counts(ConfusionCounts.empty(2), ConfusionCounts.empty(3))

    def test_degenerate_images_add_up(self):
        empty = np.zeros((4, 4), dtype=np.int64)
        counts = ConfusionCounts.empty()
        for _ in range(3):
            counts = confusion_update(counts, empty, empty)
        self.assertEqual(counts.degenerate_images, 3)


class ScdMetricTests(SimpleTestCase):
    def test_toy_kappa(self):
        self.assertAlmostEqual(kappa_coefficient([[3, 1], [1, 3]]), 0.5)

    def test_kappa_without_no_change_cell(self):
        self.assertAlmostEqual(kappa_coefficient([[3, 1], [1, 3]], exclude_no_change=True), -0.25)

    def test_single_class_kappa_is_zero(self):
        with self.assertLogs('changedetection.metrics', 'WARNING'):
            self.assertEqual(kappa_coefficient([[5, 0], [0, 0]]), 0.0)

    def test_perfect_change_makes_sek_equal_kappa(self):
        metrics = scd_metrics(counts_of(4, 0, 0, 4, [[3, 1], [1, 3]]))
        self.assertEqual(metrics.sek, metrics.kappa)
        self.assertAlmostEqual(metrics.kappa, 0.5)
        self.assertAlmostEqual(metrics.miou, 1.0)
        self.assertAlmostEqual(metrics.score, 0.7 * 0.5 + 0.3 * 1.0)

    def test_sek_formula(self):
        metrics = scd_metrics(counts_of(2, 1, 1, 4, [[3, 1], [1, 3]]))
        self.assertAlmostEqual(metrics.sek, math.exp(0.5 - 1) * 0.5)

    def test_needs_segmentation_matrix(self):
        with self.assertRaises(DataError):
            scd_metrics(counts_of(1, 0, 0, 1))


class MetricReportTests(SimpleTestCase):
    def test_bcd_report(self):
        report = MetricReport.from_counts(counts_of(2, 1, 1, 4))
        self.assertFalse(report.is_scd)
        self.assertEqual(report.key_metric, report.f1_c)
        self.assertAlmostEqual(report.miou, (report.iou_u + report.iou_c) / 2)
        self.assertNotIn('kappa', report.as_dict())

    def test_scd_key_metric_is_score(self):
        report = MetricReport.from_counts(counts_of(2, 1, 1, 4, [[3, 1], [1, 3]]), scd=True)
        self.assertTrue(report.is_scd)
        self.assertEqual(report.key_metric, report.score)

    def test_write_report(self):
        report = MetricReport.from_counts(counts_of(2, 1, 1, 4))
        directory = Path(tempfile.mkdtemp())
        path = write_report(report, directory)
        values = json.loads(path.read_text())
        self.assertAlmostEqual(values['iou_c'], 0.5)
        self.assertEqual(values['pixel_total'], 8)
        table = (directory / 'metrics.txt').read_text()
        self.assertIn('iou_c', table)
        self.assertIn('50.00', table)
        self.assertIn('75.00', table)
