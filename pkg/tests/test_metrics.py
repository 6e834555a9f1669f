import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langdet.metrics import ap_from_records, class_ap, evaluate_ap, match_image, match_records, voc_ap

G1 = [0.2, 0.2, 0.1, 0.1]
G2 = [0.5, 0.5, 0.1, 0.1]
G3 = [0.8, 0.8, 0.1, 0.1]
G2_SHIFTED = [0.525, 0.5, 0.1, 0.1]  # IoU 0.75 / 1.25 = 0.6 with G2
FAR = [0.8, 0.2, 0.1, 0.1]


def _img(dets, gts):
    """dets: [(box, score, label)], gts: [(box, label)] -> prediction / ground-truth tuples."""
    boxes = np.array([d[0] for d in dets]).reshape(-1, 4)
    scores = np.array([d[1] for d in dets], dtype=float)
    labels = np.array([d[2] for d in dets], dtype=int)
    return (boxes, scores, labels), (np.array([g[0] for g in gts]).reshape(-1, 4),
                                     np.array([g[1] for g in gts], dtype=int))


def _scenario(images):
    preds, gts = zip(*[_img(d, g) for d, g in images])
    return list(preds), list(gts)


SCENARIOS = {
    # one class, 3 GT, 5 detections; TP pattern T F T F T at 0.7 and T T F F T at 0.5
    #   0.7: recall steps 1/3 (p 1), 2/3 (p 2/3), 1 (p 3/5) -> 1/3 + 2/9 + 1/5 = 34/45
    #   0.5: recall steps 1/3 (p 1), 2/3 (p 1), 1 (p 3/5) -> 2/3 + 1/5 = 13/15
    "ranked": ([([(G1, .9, 0), (G2_SHIFTED, .8, 0), (G2, .7, 0), (FAR, .6, 0), (G3, .5, 0)],
                 [(G1, 0), (G2, 0), (G3, 0)])], 34 / 45, 13 / 15),
    # two images, two classes; class 0 AP 1, class 1: FP at .8 then TP at .3 of 2 GT -> 1/2 * 1/2
    "two_images": ([([(G1, .9, 0), (G2, .3, 1)], [(G1, 0), (G2, 1)]),
                    ([(FAR, .8, 1)], [(G3, 1)])], (1 + 1 / 4) / 2, (1 + 1 / 4) / 2),
    # no detections at all
    "empty": ([([], [(G1, 0), (G2, 2)])], 0.0, 0.0),
    # duplicate detection is a false positive; class 2 is never detected
    "duplicates": ([([(G1, .9, 0), (G1, .8, 0)], [(G1, 0), (G3, 2)])], 0.5, 0.5),
    # localisation between the thresholds; a detection of a class without GT is ignored
    "boundary": ([([(G2, .95, 1), (G2_SHIFTED, .4, 0)], [(G2, 0)])], 0.0, 1.0),
}


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_hand_tabulated_scenarios(name):
    images, ap70, ap50 = SCENARIOS[name]
    preds, gts = _scenario(images)
    assert abs(evaluate_ap(preds, gts, 0.7) - ap70) < 1e-9
    assert abs(evaluate_ap(preds, gts, 0.5) - ap50) < 1e-9


def test_perfect_detections_give_one():
    preds, gts = _scenario([([(G1, .9, 0), (G2, .8, 1)], [(G1, 0), (G2, 1)])])
    assert evaluate_ap(preds, gts) == 1.0


def test_voc_ap_envelope():
    assert voc_ap(np.array([0.5, 1.0]), np.array([1.0, 0.5])) == pytest.approx(0.75)
    assert voc_ap(np.array([0.5, 0.5, 1.0]), np.array([0.5, 1 / 3, 0.5])) == pytest.approx(0.5)


def test_no_ground_truth_gives_nan():
    preds, gts = _scenario([([(G1, .9, 0)], [])])
    assert np.isnan(evaluate_ap(preds, gts))
    records = match_records(preds, gts, 0.7)
    assert np.isnan(class_ap(records, 0))


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        match_records([], [(np.zeros((0, 4)), np.zeros(0))], 0.7)


def test_records_support_subset_recomputation():
    images, _, _ = SCENARIOS["two_images"]
    preds, gts = _scenario(images)
    records = match_records(preds, gts, 0.7)
    direct = evaluate_ap(preds[:1], gts[:1], 0.7)
    assert ap_from_records(records[:1]) == pytest.approx(direct, abs=1e-15)


def _random_case(seed, n_gt, n_det):
    rng = np.random.default_rng(seed)
    gt = np.column_stack([rng.uniform(.2, .8, (n_gt, 2)), rng.uniform(.05, .3, (n_gt, 2))])
    src = rng.integers(0, n_gt, n_det)
    det = gt[src] + rng.normal(0, 0.03, (n_det, 4))
    det[:, 2:] = np.abs(det[:, 2:]) + 0.01
    return (det, rng.random(n_det), rng.integers(0, 2, n_det)), (gt, rng.integers(0, 2, n_gt))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5), st.integers(1, 8))
def test_lowering_threshold_never_decreases_ap(seed, n_gt, n_det):
    pred, gt = _random_case(seed, n_gt, n_det)
    hi = evaluate_ap([pred], [gt], 0.7)
    lo = evaluate_ap([pred], [gt], 0.5)
    assert lo >= hi - 1e-12


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5), st.integers(1, 8))
def test_removing_a_false_positive_never_decreases_ap(seed, n_gt, n_det):
    pred, gt = _random_case(seed, n_gt, n_det)
    rec = match_image(0, *pred, *gt, 0.7)
    fps = np.nonzero(~rec.true_positive)[0]
    if fps.size == 0:
        return
    keep = np.ones(n_det, dtype=bool)
    keep[fps[0]] = False
    reduced = tuple(a[keep] for a in pred)
    assert evaluate_ap([reduced], [gt], 0.7) >= evaluate_ap([pred], [gt], 0.7) - 1e-12
