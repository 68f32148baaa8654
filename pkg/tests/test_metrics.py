import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compseg import metrics as M
from compseg.errors import ContractError, DimensionError, UndefinedMetricError


def box(h, w, y0, x0, y1, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


# --- IoU ---------------------------------------------------------------------

def test_iou_examples():
    a = box(6, 6, 0, 0, 2, 2)
    assert M.mask_iou(a, a) == 1.0
    assert M.mask_iou(a, box(6, 6, 4, 4, 6, 6)) == 0.0
    # 4 px + 4 px masks sharing 2 px
    b = box(6, 6, 0, 1, 2, 3)
    assert M.mask_iou(a, b) == pytest.approx(2 / 6)
    assert M.mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0


def test_iou_dim_mismatch():
    with pytest.raises(DimensionError):
        M.mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    d = rng.random((4, 5, 5)) > 0.5
    g = rng.random((3, 5, 5)) > 0.5
    mat = M.iou_matrix(d, g)
    for i in range(4):
        for j in range(3):
            assert mat[i, j] == pytest.approx(M.mask_iou(d[i], g[j]), abs=1e-15)


# --- brute-force AP oracle ------------------------------------------------------

def oracle_ap(dets, gts, thresholds=M.IOU_THRESHOLDS):
    """Direct transcription: per-image greedy matching by pixel counting, then the
    101-point envelope by explicit max over the PR list."""
    num_gt = sum(len(v) for v in gts.values())
    per_tau = []
    for tau in thresholds:
        flagged = []
        for img in sorted({d.image_id for d in dets}):
            mine = sorted([d for d in dets if d.image_id == img], key=lambda d: -d.score)[: M.MAX_DETECTIONS]
            used = set()
            for d in mine:
                best, best_j = -1.0, None
                for j, g in enumerate(gts.get(img, [])):
                    if j in used:
                        continue
                    inter = int(np.sum(d.mask & g))
                    union = int(np.sum(d.mask | g))
                    iou = inter / union if union else 0.0
                    if iou > best:
                        best, best_j = iou, j
                ok = best_j is not None and best >= tau
                if ok:
                    used.add(best_j)
                flagged.append((d.score, ok))
        flagged.sort(key=lambda t: -t[0])
        pts = []
        tp = fp = 0
        for _, ok in flagged:
            tp += ok
            fp += not ok
            pts.append((tp / num_gt, tp / (tp + fp)))
        total = 0.0
        for k in range(101):
            r = k / 100
            cands = [p for rr, p in pts if rr >= r - 1e-12]
            total += max(cands) if cands else 0.0
        per_tau.append(total / 101)
    return 100.0 * sum(per_tau) / len(per_tau)


def random_case(rng, n_img=3, size=8):
    gts, dets = {}, []
    for i in range(n_img):
        img = f"im{i}"
        g = []
        for _ in range(int(rng.integers(0, 3))):
            y, x = rng.integers(0, size - 3, 2)
            g.append(box(size, size, y, x, y + int(rng.integers(2, 4)), x + int(rng.integers(2, 4))))
        gts[img] = np.array(g, dtype=bool).reshape(-1, size, size)
        for _ in range(int(rng.integers(0, 4))):
            if g and rng.random() < 0.7:
                m = g[int(rng.integers(len(g)))].copy()
                # jitter so IoUs spread over the threshold ladder
                m ^= rng.random((size, size)) < 0.08
            else:
                m = rng.random((size, size)) < 0.2
            dets.append(M.DetectionRecord(img, float(rng.random() * 0.98 + 0.01), m))
    return dets, gts


def test_hand_evaluated_three_dets_two_gt():
    g1, g2 = box(8, 8, 0, 0, 3, 3), box(8, 8, 5, 5, 8, 8)
    gts = {"a": np.stack([g1, g2])}
    dets = [M.DetectionRecord("a", 0.9, g1), M.DetectionRecord("a", 0.8, box(8, 8, 0, 5, 2, 8)),
            M.DetectionRecord("a", 0.7, g2)]
    # recall .5,.5,1 / precision 1,.5,2/3 -> 51 points at 1 and 50 at 2/3
    expected = 100.0 * (51 + 50 * 2 / 3) / 101
    assert M.average_precision(dets, gts) == pytest.approx(expected, abs=1e-9)
    assert oracle_ap(dets, gts) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("seed", range(50))
def test_ap_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng)
    if sum(len(v) for v in gts.values()) == 0:
        assert math.isnan(M.average_precision(dets, gts))
        return
    assert abs(M.average_precision(dets, gts) - oracle_ap(dets, gts)) <= 1e-9


def test_ap_trivial_cases():
    g = box(8, 8, 1, 1, 4, 4)
    gts = {"a": g[None], "b": box(8, 8, 2, 2, 6, 6)[None]}
    perfect = [M.DetectionRecord("a", 0.9, g), M.DetectionRecord("b", 0.8, gts["b"][0])]
    assert M.average_precision(perfect, gts) == 100.0
    assert M.average_precision([], gts) == 0.0
    assert math.isnan(M.average_precision([], {"a": np.zeros((0, 8, 8), bool)}))


def test_detections_on_empty_image_are_false_positives():
    g = box(8, 8, 1, 1, 4, 4)
    gts = {"a": g[None], "b": np.zeros((0, 8, 8), bool)}
    dets = [M.DetectionRecord("b", 0.95, g), M.DetectionRecord("a", 0.9, g)]
    # FP then TP: precision envelope 1/2 everywhere
    assert M.average_precision(dets, gts) == pytest.approx(50.0)


def test_score_must_be_positive():
    with pytest.raises(ContractError):
        M.DetectionRecord("a", 0.0, np.zeros((2, 2), bool))


@pytest.mark.parametrize("seed", range(10))
def test_ap_rank_invariance(seed):
    rng = np.random.default_rng(100 + seed)
    dets, gts = random_case(rng, n_img=4)
    if not sum(len(v) for v in gts.values()):
        return
    warped = [M.DetectionRecord(d.image_id, d.score ** 3 * 0.5, d.mask) for d in dets]
    assert M.average_precision(warped, gts) == M.average_precision(dets, gts)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_top_true_positive_never_hurts(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng, n_img=3)
    imgs = [k for k, v in gts.items() if len(v)]
    if not imgs:
        return
    # a fresh GT instance plus its exact detection at the top score
    img = imgs[0]
    free = ~gts[img].any(0)
    extra = np.zeros_like(free)
    extra[np.argwhere(free)[0][0], np.argwhere(free)[0][1]] = True
    gts2 = dict(gts)
    gts2[img] = np.concatenate([gts[img], extra[None]])
    # the baseline must score the same GT set, so the new GT is unmatched before
    before = M.average_precision(dets, gts2)
    after = M.average_precision(dets + [M.DetectionRecord(img, 0.999, extra)], gts2)
    assert after >= before - 1e-12


def test_greedy_never_double_assigns():
    g = box(8, 8, 0, 0, 4, 4)
    gts = {"a": g[None]}
    dets = [M.DetectionRecord("a", 0.9 - 0.1 * i, g) for i in range(3)]
    for tau in M.IOU_THRESHOLDS:
        _, tp = M.match_detections(dets, gts, tau)
        assert tp.tolist() == [1.0, 0.0, 0.0]


def test_greedy_prefers_highest_iou():
    g1 = box(8, 8, 0, 0, 4, 4)
    g2 = box(8, 8, 0, 0, 4, 5)
    gts = {"a": np.stack([g1, g2])}
    d = M.DetectionRecord("a", 0.9, g2)
    _, tp = M.match_detections([d, M.DetectionRecord("a", 0.8, g1)], gts, 0.95)
    assert tp.tolist() == [1.0, 1.0]


# --- arithmetic metrics ---------------------------------------------------------

@pytest.mark.parametrize("seen,unseen,expected", [(15.0, 4.0, 0.733), (16.8, 7.1, 0.577), (10.0, 10.0, 0.0)])
def test_relative_drop(seen, unseen, expected):
    assert M.relative_drop(seen, unseen) == pytest.approx(expected, abs=1e-3)


def test_relative_drop_zero_seen():
    assert M.relative_drop(0.0, 0.0) == 1.0


@pytest.mark.parametrize("unseen,groups,expected", [
    (4.0, {"g": 7.5}, 4.0 / 7.5),
    (6.0, {"a": 6.0, "b": 9.0}, 1.0),
    (3.0, {"g1": 8.0, "g2": 6.0}, 0.5),
])
def test_and_efficiency(unseen, groups, expected):
    assert M.and_efficiency(unseen, groups) == pytest.approx(expected, abs=1e-12)


def test_and_efficiency_undefined():
    with pytest.raises(UndefinedMetricError):
        M.and_efficiency(1.0, {"a": 0.0, "b": 3.0})
    with pytest.raises(ContractError):
        M.and_efficiency(1.0, {})
