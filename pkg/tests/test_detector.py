import itertools

import numpy as np
import pytest

from langdet import tensor as T
from langdet.detector import (BaselineDetector, DetectionOutput, GroundTruth, ModelConfig, box_iou,
                              build_detector, cxcywh_to_xyxy, detection_loss, extract_object_features,
                              hungarian_match, layer_detection_loss, match_all_layers, matching_cost,
                              predictions, spatial_prior, total_loss)
from langdet.gradcheck import end_to_end_suite
from langdet.nn import Linear
from langdet.reasoner import PROMPT_POOLS, SceneContextPrompt
from langdet.synth import generate_sample
from langdet.tensor import Tensor

PROMPT = SceneContextPrompt.from_text(PROMPT_POOLS["uavdt"][0])
SMALL = dict(dim=16, heads=2, enc_layers=1, dec_layers=2, queries=6, ffn_dim=16, backbone_channels=(4, 8, 16))


def images(n, seed=0):
    return np.stack([generate_sample(seed + k, "uavdt").chw() for k in range(n)])


def test_output_shapes_and_box_range():
    cfg = ModelConfig(**SMALL)
    out = build_detector(cfg, 0)(images(3), PROMPT)
    assert out.num_layers == 2
    for lg, bx, ft in zip(out.logits, out.boxes, out.features):
        assert lg.shape == (3, 6, 4) and bx.shape == (3, 6, 4) and ft.shape == (3, 6, 16)
        assert np.all(bx.data > 0) and np.all(bx.data < 1)


def test_wrong_resolution_rejected():
    with pytest.raises(T.ShapeError, match="64"):
        build_detector(ModelConfig(**SMALL), 0)(np.zeros((1, 3, 32, 32)), PROMPT)


def test_bad_mode_and_missing_prompt_rejected():
    model = build_detector(ModelConfig(**SMALL), 0)
    with pytest.raises(ValueError):
        model(images(1), PROMPT, mode="eval")
    with pytest.raises(ValueError, match="prompt"):
        model(images(1), None)


def test_both_flags_off_equals_baseline_build():
    cfg = ModelConfig(reasoner=False, relation=False)
    full = build_detector(cfg, 3)
    base = BaselineDetector(cfg, 3)
    assert [n for n, _ in full.named_parameters()] == [n for n, _ in base.named_parameters()]
    x = images(20, seed=40)
    a, b = full(x), base(x)
    for la, lb in zip(a.logits + a.boxes, b.logits + b.boxes):
        assert np.array_equal(la.data, lb.data)


@pytest.mark.parametrize("depth", [None, 0, 1])
def test_zero_initialised_reasoner_reproduces_baseline(depth):
    on = build_detector(ModelConfig(**SMALL, reasoner=True, relation=False, reasoner_after=depth), 5)
    off = build_detector(ModelConfig(**SMALL, reasoner=False, relation=False), 5)
    x = images(4)
    a, b = on(x, PROMPT), off(x)
    assert np.array_equal(a.memory.data, b.memory.data)
    assert np.array_equal(a.boxes[-1].data, b.boxes[-1].data)
    assert np.array_equal(a.logits[-1].data, b.logits[-1].data)
    assert on.num_parameters() > off.num_parameters()


def test_forward_is_deterministic():
    cfg = ModelConfig(**SMALL)
    x = images(2)
    a = build_detector(cfg, 1)(x, PROMPT)
    b = build_detector(cfg, 1)(x, PROMPT)
    assert np.array_equal(a.boxes[-1].data, b.boxes[-1].data)


def test_spatial_prior_peaks_at_box_centre():
    box = Tensor(np.array([[[0.3125, 0.5625, 0.1, 0.1]]]))  # centre of cell (x=2, y=4)
    prior = spatial_prior(box, (8, 8)).data[0, 0].reshape(8, 8)
    assert np.unravel_index(np.argmax(prior), prior.shape) == (4, 2)
    assert prior.max() == pytest.approx(0.0, abs=1e-15)


# matching ------------------------------------------------------------------------------------


def brute_force(cost):
    q, n = cost.shape
    best = min(itertools.permutations(range(q), n), key=lambda rows: cost[list(rows), range(n)].sum())
    return cost[list(best), range(n)].sum()


def test_hungarian_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        q = int(rng.integers(1, 7))
        n = int(rng.integers(0, q + 1))
        cost = rng.normal(size=(q, n))
        rows, cols = hungarian_match(cost)
        assert len(set(rows.tolist())) == n and np.array_equal(cols, np.arange(n))
        assert cost[rows, cols].sum() == pytest.approx(brute_force(cost) if n else 0.0, abs=1e-12)


def test_dominant_overlap_is_assigned():
    gt = np.array([[0.5, 0.5, 0.2, 0.2]])
    boxes = np.array([[0.1, 0.1, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.1, 0.1]])
    probs = np.full((3, 4), 0.25)
    rows, cols = hungarian_match(matching_cost(probs, boxes, gt, np.array([0])))
    assert rows.tolist() == [1] and cols.tolist() == [0]


def test_matching_edge_cases():
    rows, cols = hungarian_match(np.zeros((4, 0)))
    assert rows.size == 0 and cols.size == 0
    with pytest.raises(ValueError, match="exceed"):
        hungarian_match(np.zeros((2, 3)))


def test_matching_cost_terms():
    probs = np.array([[0.7, 0.1, 0.1, 0.1]])
    pred = np.array([[0.5, 0.5, 0.2, 0.2]])
    gt = np.array([[0.55, 0.5, 0.2, 0.2]])
    iou = (0.15 * 0.2) / (2 * 0.04 - 0.15 * 0.2)
    expected = -0.7 + 5 * 0.05 + 2 * (1 - iou)
    assert matching_cost(probs, pred, gt, np.array([0]))[0, 0] == pytest.approx(expected, abs=1e-12)


def test_box_iou_cases():
    a = np.array([[0.5, 0.5, 0.2, 0.2]])
    assert box_iou(a, a)[0, 0] == pytest.approx(1.0)
    assert box_iou(a, np.array([[0.9, 0.9, 0.1, 0.1]]))[0, 0] == 0.0
    assert np.allclose(cxcywh_to_xyxy(a), [[0.4, 0.4, 0.6, 0.6]])


# losses ----------------------------------------------------------------------------------------


def _output(logits, boxes):
    return DetectionOutput([Tensor(np.zeros((*np.shape(logits)[:2], 4)))], [Tensor(logits)], [Tensor(boxes)])


def test_perfect_predictions():
    gt = GroundTruth(np.array([[0.3, 0.3, 0.2, 0.1]]), np.array([2]))
    logits = np.full((1, 3, 4), -10.0)
    logits[0, 0, 2] = 10.0
    logits[0, 1:, 3] = 10.0
    boxes = np.tile([0.7, 0.7, 0.1, 0.1], (1, 3, 1)).astype(float)
    boxes[0, 0] = gt.boxes[0]
    out = _output(logits, boxes)
    l_cls, l_bbox = detection_loss(out, [gt], match_all_layers(out, [gt]), 3)
    assert l_bbox.item() == pytest.approx(0.0, abs=1e-12) and l_cls.item() < 0.01


def test_empty_scene_loss_is_mean_no_object_ce():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 5, 4))
    out = _output(logits, np.full((1, 5, 4), 0.5))
    gt = GroundTruth(np.zeros((0, 4)), np.zeros(0, dtype=int))
    l_cls, l_bbox = detection_loss(out, [gt], match_all_layers(out, [gt]), 3)
    lse = np.log(np.exp(logits[0]).sum(axis=1))
    assert l_bbox.item() == 0.0
    assert l_cls.item() == pytest.approx(np.mean(lse - logits[0, :, 3]), abs=1e-12)


def test_random_case_matches_termwise_evaluation():
    rng = np.random.default_rng(1)
    b, q, eos = 2, 4, 0.1
    logits = rng.normal(size=(b, q, 4))
    boxes = rng.uniform(0.2, 0.6, size=(b, q, 4))
    gts = [GroundTruth(rng.uniform(0.2, 0.6, (2, 4)), np.array([0, 2])),
           GroundTruth(rng.uniform(0.2, 0.6, (1, 4)), np.array([1]))]
    assignment = [(np.array([3, 1]), np.array([0, 1])), (np.array([0]), np.array([0]))]
    l_cls, l_bbox = layer_detection_loss(Tensor(logits), Tensor(boxes), gts, assignment, 3, eos)
    num = den = 0.0
    l1 = iou_term = 0.0
    for i in range(b):
        qi, gi = assignment[i]
        for k in range(q):
            target, w = 3, eos
            if k in qi.tolist():
                j = gi[qi.tolist().index(k)]
                target, w = gts[i].labels[j], 1.0
                l1 += np.abs(boxes[i, k] - gts[i].boxes[j]).sum()
                iou_term += 1 - box_iou(boxes[i, k:k + 1], gts[i].boxes[j:j + 1])[0, 0]
            row = logits[i, k]
            num += w * (np.log(np.exp(row).sum()) - row[target])
            den += w
    assert l_cls.item() == pytest.approx(num / den, abs=1e-12)
    assert l_bbox.item() == pytest.approx((5 * l1 + 2 * iou_term) / 3, abs=1e-12)


def test_single_layer_average_equals_layer_loss():
    rng = np.random.default_rng(2)
    out = _output(rng.normal(size=(1, 3, 4)), rng.uniform(0.2, 0.7, (1, 3, 4)))
    gt = [GroundTruth(np.array([[0.4, 0.4, 0.2, 0.2]]), np.array([1]))]
    asg = match_all_layers(out, gt)
    a = detection_loss(out, gt, asg, 3)
    b = layer_detection_loss(out.logits[0], out.boxes[0], gt, asg[0], 3)
    assert a[0].item() == b[0].item() and a[1].item() == b[1].item()


def test_extract_object_features():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(2, 3, 4))
    proj = Linear(rng, 4, 5)
    gts = [GroundTruth(np.zeros((2, 4)), np.array([0, 1])), GroundTruth(np.zeros((2, 4)), np.array([1, 1]))]
    asg = [(np.array([2, 0]), np.array([0, 1])), (np.array([1, 2]), np.array([0, 1]))]
    out = extract_object_features(Tensor(feats), asg, gts, proj, category_ids=[10, 11, 12])
    assert sorted(out) == [10, 11]
    w, bias = proj.weight.data, proj.bias.data
    assert np.allclose(out[10].data, feats[0, 2] @ w + bias, atol=1e-12)
    mean = (feats[0, 0] + feats[1, 1] + feats[1, 2]) / 3
    assert np.allclose(out[11].data, mean @ w + bias, atol=1e-12)


def test_extract_identical_features_mean_equals_either():
    feats = np.zeros((1, 2, 3))
    feats[0, 0] = feats[0, 1] = [1.0, -2.0, 0.5]
    proj = Linear(np.random.default_rng(0), 3, 3)
    gts = [GroundTruth(np.zeros((2, 4)), np.array([2, 2]))]
    out = extract_object_features(Tensor(feats), [(np.array([0, 1]), np.array([0, 1]))], gts, proj, [0, 1, 2])
    assert np.allclose(out[2].data, feats[0, 0] @ proj.weight.data + proj.bias.data, atol=1e-15)


def test_unmatched_present_class_is_internal_error():
    gts = [GroundTruth(np.zeros((1, 4)), np.array([1]))]
    with pytest.raises(RuntimeError):
        extract_object_features(Tensor(np.zeros((1, 2, 3))), [(np.zeros(0, int), np.zeros(0, int))],
                                gts, Linear(np.random.default_rng(0), 3, 3), [0, 1, 2])


def test_total_loss_arithmetic():
    one, two, half = Tensor(1.0), Tensor(2.0), Tensor(0.5)
    assert total_loss(one, two, half, Tensor(7.0), lambda_guidance=0.0).item() == 3.5
    assert total_loss(one, two, half, Tensor(2.0), lambda_guidance=0.25).item() == 4.0
    assert total_loss(one, two).item() == 3.0


def test_predictions_use_max_foreground_probability():
    logits = np.array([[[0.0, 1.0, 0.0, 3.0], [2.0, 0.0, 0.0, 0.0]]])
    out = _output(logits, np.full((1, 2, 4), 0.5))
    boxes, scores, labels = predictions(out)[0]
    p = np.exp(logits[0]) / np.exp(logits[0]).sum(axis=1, keepdims=True)
    assert labels.tolist() == [1, 0]
    assert np.allclose(scores, p[:, :3].max(axis=1), atol=1e-15)


def test_tiny_end_to_end_gradient():
    result = end_to_end_suite(seed=1)
    assert result.max_error < 1e-3, result.line()
