import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedloc.evaluation import aggregate, detection_metrics, distance_stats, evaluate, greedy_match


def brute_force_greedy(gt, det):
    """Literal simulation: scan every remaining pair, take the closest, repeat."""
    gt_left, det_left = list(range(len(gt))), list(range(len(det)))
    pairs = []
    while gt_left and det_left:
        best = None
        for g in gt_left:
            for d in det_left:
                dist = float(np.linalg.norm(np.asarray(gt[g], float) - np.asarray(det[d], float)))
                key = (dist, g, d)
                if best is None or key < best:
                    best = key
        dist, g, d = best
        pairs.append((g, d, dist))
        gt_left.remove(g)
        det_left.remove(d)
    return pairs


def optimal_detected(gt, det, thr=3.0):
    n, m = len(gt), len(det)
    best = 0
    for perm in itertools.permutations(range(m), min(n, m)):
        hits = sum(np.linalg.norm(np.subtract(gt[i], det[j])) < thr for i, j in enumerate(perm))
        best = max(best, hits)
    return best


def test_greedy_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n, m = rng.integers(0, 8, size=2)
        # a quarter of instances on an integer lattice to exercise distance ties
        if trial % 4 == 0:
            gt, det = rng.integers(0, 3, (n, 3)).astype(float), rng.integers(0, 3, (m, 3)).astype(float)
        else:
            gt, det = rng.uniform(0, 10, (n, 3)), rng.uniform(0, 10, (m, 3))
        assert_same_pairs(greedy_match(gt, det), brute_force_greedy(gt, det))


def assert_same_pairs(a, b):
    assert [(g, d) for g, d, _ in a] == [(g, d) for g, d, _ in b]
    assert np.allclose([x for _, _, x in a], [x for _, _, x in b], rtol=1e-14, atol=0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(*[st.integers(-3, 3)] * 3), max_size=7),
       st.lists(st.tuples(*[st.integers(-3, 3)] * 3), max_size=7))
def test_greedy_matches_brute_force_property(gt, det):
    assert_same_pairs(greedy_match(gt, det), brute_force_greedy(gt, det))


def test_divergence_case_greedy_vs_optimal():
    gt = [(0, 0, 0), (2.5, 0, 0)]
    det = [(1.4, 0, 0), (5.4, 0, 0)]
    pairs = greedy_match(gt, det)
    assert [(g, d) for g, d, _ in pairs] == [(1, 0), (0, 1)]
    assert pairs[0][2] == pytest.approx(1.1) and pairs[1][2] == pytest.approx(5.4)
    assert evaluate(gt, det).detected_count == 1
    assert optimal_detected(gt, det) == 2


def test_identical_sets_zero_distance():
    pts = [(1, 2, 3), (4, 5, 6)]
    rep = evaluate(pts, pts)
    assert [(g, d) for g, d, _ in rep.pairs] == [(0, 0), (1, 1)]
    assert rep.detection_rate == 1.0 and rep.distance_median == 0.0


def test_empty_detections():
    rep = evaluate([(0, 0, 0), (1, 1, 1)], np.zeros((0, 3)))
    assert rep.pairs == [] and rep.unmatched_gt == [0, 1] and rep.detection_rate == 0.0
    assert rep.distance_median is None


def test_empty_ground_truth_rate_convention():
    assert evaluate(np.zeros((0, 3)), np.zeros((0, 3))).detection_rate == 1.0
    assert evaluate(np.zeros((0, 3)), [(0, 0, 0)]).detection_rate == 0.0


def test_threshold_is_strict():
    rep = evaluate([(0, 0, 0)], [(3.0, 0, 0)])
    assert rep.detected_count == 0
    rep = evaluate([(0, 0, 0)], [(2.999999, 0, 0)])
    assert rep.detected_count == 1


def test_rate_rounds_to_one_decimal():
    pairs = [(i, i, 0.5) for i in range(2150)]
    rep = detection_metrics(pairs, 2286)
    assert round(100 * rep.detection_rate, 1) == 94.1


def test_no_pairs_rate_zero():
    assert detection_metrics([], 5).detection_rate == 0.0


@pytest.mark.parametrize("values,expected", [
    ([0.36, 0.70, 1.28], 0.70),
    ([1, 2, 3, 4], 2.5),
    ([2.2], 2.2),
])
def test_distance_median(values, expected):
    assert distance_stats(values)[1] == pytest.approx(expected)


def test_distance_stats_single_and_empty():
    assert distance_stats([1.7]) == (1.7, 1.7, 1.7)
    with pytest.raises(ValueError):
        distance_stats([])


@given(st.lists(st.floats(0, 100), min_size=1, max_size=40))
def test_quantiles_ordered_and_match_type7(values):
    q = distance_stats(values)
    assert q[0] <= q[1] <= q[2]
    assert np.allclose(q, np.percentile(values, [25, 50, 75]))


def test_aggregate_pools_counts():
    a = evaluate([(0, 0, 0), (10, 0, 0)], [(0.5, 0, 0)])
    b = evaluate([(0, 0, 0)], [(0, 1, 0)])
    s = aggregate([a, b])
    assert s["gt_count"] == 3 and s["detected_count"] == 2
    assert s["detection_rate"] == pytest.approx(2 / 3)
    assert s["distance_median"] == pytest.approx(0.75)


def test_report_writes_json_and_pairs_csv(tmp_path):
    rep = evaluate([(0, 0, 0), (9, 9, 9)], [(0, 0, 1), (9, 9, 5)])
    rep.write(tmp_path / "v.eval.json")
    doc = json.loads((tmp_path / "v.eval.json").read_text())
    assert doc["detected_count"] == 1 and doc["gt_count"] == 2
    lines = (tmp_path / "v.eval.pairs.csv").read_text().splitlines()
    assert lines[0] == "gt_index,det_index,distance_mm,detected"
    assert lines[1:] == ["0,0,1.0,1", "1,1,4.0,0"]
