import json

import numpy as np
import pytest

from oracles import reference_ap, reference_report
from twinattn import numerics as nx
from twinattn.decoder import BlockPrediction
from twinattn.inference import (
    AP_THRESHOLDS,
    InstancePrediction,
    PointInstances,
    confidence,
    evaluate,
    expand,
    select_instances,
    superpoint_mask_score,
)
from twinattn.scene import Scene, SuperpointPartition, partition_superpoints
from twinattn.training import mask_iou


def _mask(n, idx):
    m = np.zeros(n, bool)
    m[list(idx)] = True
    return m


def _ip(n, idx, cls, conf):
    m = _mask(n, idx)
    return InstancePrediction(m, m, cls, conf)


def _gt(n, instances):
    return PointInstances(np.array([_mask(n, idx) for idx, _ in instances]).reshape(len(instances), n), np.array([c for _, c in instances]))


def fixture():
    n = 10
    gts = [
        _gt(n, [(range(0, 4), 0), (range(5, 9), 1)]),
        _gt(n, [(range(0, 5), 0), (range(6, 10), 0)]),
        _gt(n, [(range(2, 8), 1)]),
    ]
    preds = [
        [_ip(n, range(0, 4), 0, 0.9), _ip(n, [5, 6], 1, 0.8), _ip(n, [4, 5, 6], 0, 0.3)],
        [_ip(n, [0, 1, 2], 0, 0.7), _ip(n, range(5, 10), 0, 0.6), _ip(n, range(0, 5), 1, 0.5)],
        [_ip(n, [2, 3], 1, 0.95), _ip(n, range(2, 8), 1, 0.4), _ip(n, range(10), 0, 0.2)],
    ]
    return preds, gts


# ------------------------------------------------------------------- scoring


@pytest.mark.parametrize("row, expected", [([0.9, 0.7, 0.1], 0.8), ([0.5, 0.2], 0.0), ([1.0, 1.0], 1.0)])
def test_superpoint_mask_score(row, expected):
    assert superpoint_mask_score(row) == pytest.approx(expected, abs=1e-15)


def _single(class_probs, box_score, mask_score, mask_prob, n_h=4):
    logit = np.log(mask_prob / (1 - mask_prob))
    return BlockPrediction(
        nx.Tensor(np.full((1, n_h), logit)),
        nx.Tensor(np.log(np.array([class_probs]))),
        nx.Tensor(np.array([mask_score])),
        nx.Tensor(np.zeros((1, 6))),
        nx.Tensor(np.array([box_score])),
    )


def test_confidence_is_product_of_factors():
    cid, score, factors = confidence(_single([0.8, 0.1, 0.1], 0.9, 0.5, 0.6), 0)
    assert cid == 0
    np.testing.assert_allclose(factors, (0.8, 0.9, 0.5, 0.6), atol=1e-12)
    assert score == pytest.approx(0.216, abs=1e-12)


def test_confidence_zero_factor():
    assert confidence(_single([0.8, 0.1, 0.1], 0.0, 0.5, 0.6), 0)[1] == 0.0
    assert confidence(_single([0.8, 0.1, 0.1], 0.9, 0.5, 0.4), 0)[1] == 0.0


def test_confidence_reports_best_foreground_class():
    cid, _, factors = confidence(_single([0.1, 0.2, 0.7], 1.0, 1.0, 0.9), 0)
    assert cid == 1 and factors[0] == pytest.approx(0.2, abs=1e-12)


def test_confidence_clamps_scores():
    _, _, factors = confidence(_single([0.8, 0.1, 0.1], 1.7, -0.3, 0.9), 0)
    assert factors[1] == 1.0 and factors[2] == 0.0


def _pred_with_scores(scores, n_h=3):
    n = len(scores)
    return BlockPrediction(
        nx.Tensor(np.where(np.eye(n, n_h) > 0, 5.0, -5.0)),
        nx.Tensor(np.log(np.tile([0.9, 0.05, 0.05], (n, 1)))),
        nx.Tensor(np.asarray(scores, float)),
        nx.Tensor(np.zeros((n, 6))),
        nx.Tensor(np.ones(n)),
    )


def test_select_instances():
    part = SuperpointPartition(np.zeros(5, int), np.array([0, 1, 1, 2, 0]), 1, 3)
    pred = _pred_with_scores([0.1, 0.9])
    top = select_instances(pred, 1, part)
    assert len(top) == 1 and top[0].proposal == 1
    assert np.array_equal(top[0].point_mask, [False, True, True, False, False])
    assert len(select_instances(pred, 10, part)) == 2


def test_select_instances_ties_by_index():
    part = SuperpointPartition(np.zeros(3, int), np.arange(3), 1, 3)
    assert [ip.proposal for ip in select_instances(_pred_with_scores([0.5, 0.5, 0.5]), 3, part)] == [0, 1, 2]


def test_expand_one_hot():
    part = SuperpointPartition(np.zeros(6, int), np.array([2, 0, 2, 1, 2, 0]), 1, 3)
    assert np.array_equal(expand(np.array([False, False, True]), part), part.assign_high == 2)


# ----------------------------------------------------------------- evaluation


def test_perfect_predictions_score_one():
    gts = [_gt(6, [([0, 1], 0), ([3, 4, 5], 1)])]
    preds = [[_ip(6, [0, 1], 0, 1.0), _ip(6, [3, 4, 5], 1, 1.0)]]
    assert evaluate(preds, gts, 2).summary() == {"mAP": 1.0, "mAP50": 1.0, "mAP25": 1.0}


def test_low_iou_prediction_threshold_semantics():
    gts = [_gt(10, [(range(10), 0)])]
    preds = [[_ip(10, [0, 1, 2], 0, 0.9)]]  # IoU 0.3
    rep = evaluate(preds, gts, 1)
    assert rep.mAP25 == 1.0 and rep.mAP50 == 0.0 and rep.mAP == 0.0
    assert rep.counts[0][0.5] == (0, 1, 1)


def test_class_without_ground_truth_is_skipped():
    gts = [_gt(4, [([0, 1], 0)])]
    preds = [[_ip(4, [0, 1], 0, 0.9), _ip(4, [2, 3], 2, 0.8)]]
    rep = evaluate(preds, gts, 3)
    assert set(rep.per_class_ap) == {0}
    assert rep.mAP == 1.0


def test_fixture_matches_reference():
    preds, gts = fixture()
    rep = evaluate(preds, gts, 2)
    m_ap, ap50, ap25 = reference_report(preds, gts, 2)
    assert (rep.mAP, rep.mAP50, rep.mAP25) == (float(m_ap), float(ap50), float(ap25))
    for c in (0, 1):
        for t in AP_THRESHOLDS + (0.25,):
            assert rep.per_class_ap[c][t] == float(reference_ap(preds, gts, c, t))


def _random_case(rng, n_scenes=3, n_points=30, n_classes=3):
    preds, gts = [], []
    for _ in range(n_scenes):
        inst = [(np.nonzero(rng.random(n_points) < 0.3)[0], int(rng.integers(n_classes))) for _ in range(rng.integers(1, 4))]
        gts.append(_gt(n_points, inst))
        ps = []
        for _ in range(rng.integers(0, 6)):
            ps.append(_ip(n_points, np.nonzero(rng.random(n_points) < 0.3)[0], int(rng.integers(n_classes)), float(rng.random())))
        preds.append(ps)
    return preds, gts


def test_random_cases_match_reference():
    rng = np.random.default_rng(0)
    for _ in range(15):
        preds, gts = _random_case(rng)
        rep = evaluate(preds, gts, 3)
        ref = reference_report(preds, gts, 3)
        np.testing.assert_allclose([rep.mAP, rep.mAP50, rep.mAP25], [float(x) for x in ref], rtol=0, atol=1e-12)


def test_monotonic_thresholds_on_random_runs():
    rng = np.random.default_rng(1)
    for _ in range(200):
        rep = evaluate(*_random_case(rng), 3)
        assert rep.mAP25 >= rep.mAP50 >= rep.mAP


def test_confidence_scaling_invariance():
    preds, gts = fixture()
    scaled = [[InstancePrediction(p.point_mask, p.superpoint_mask, p.class_id, 0.37 * p.confidence) for p in ps] for ps in preds]
    assert evaluate(preds, gts, 2).to_json() == evaluate(scaled, gts, 2).to_json()


def test_point_iou_equals_superpoint_iou_on_uniform_grid():
    # two points per fine cell, every fine cell occupied
    cells = np.array([[x, y, z] for x in range(4) for y in range(4) for z in range(2)], float) * 0.25 + 0.05
    xyz = np.concatenate([cells, cells + 0.1])
    scene = Scene(np.concatenate([xyz, np.full((len(xyz), 3), 0.5)], 1), np.full(len(xyz), -1), np.zeros(0, np.int64), 0)
    part = partition_superpoints(scene, 0.5, 0.25)
    assert np.all(np.bincount(part.assign_high) == 2)
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b = rng.random(part.n_high) < 0.5, rng.random(part.n_high) < 0.5
        pa, pb = expand(a, part), expand(b, part)
        inter, union = (pa & pb).sum(), (pa | pb).sum()
        assert (inter / union if union else 0.0) == pytest.approx(mask_iou(a, b), abs=1e-15)


def test_report_files():
    preds, gts = fixture()
    rep = evaluate(preds, gts, 2, class_names={0: "chair", 1: "table"})
    text = rep.to_text()
    assert text.splitlines()[1].startswith("chair") and "average" in text
    doc = json.loads(rep.to_json())
    assert doc["mAP50"] == rep.mAP50 and set(doc["per_class_ap"]) == {"0", "1"}
