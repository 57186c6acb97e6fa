import numpy as np
import pytest
import torch

from occludet import evalkit
from occludet.boxes import Detections
from occludet.memory_cells import MemoryState
from occludet.synthdata import ObjectAnnotation


# --- brute-force PR-enumeration oracle for AP ------------------------------------------


def _iou_pair(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ap_oracle(dets_by_frame, gts_by_frame, iou_threshold):
    """Re-match every score prefix from scratch and integrate the PR curve directly."""
    n_gt = sum(len(g) for g in gts_by_frame)
    if n_gt == 0:
        return None
    entries = []
    for t, (boxes, scores) in enumerate(dets_by_frame):
        for i, s in enumerate(scores):
            entries.append((float(s), t, i))
    if not entries:
        return 0.0
    order = sorted(range(len(entries)), key=lambda k: -entries[k][0])

    precisions, recalls = [], []
    for k in range(1, len(order) + 1):
        taken = [[False] * len(g) for g in gts_by_frame]
        tp = 0
        for rank in order[:k]:
            _, t, i = entries[rank]
            box = dets_by_frame[t][0][i]
            best_iou, best_j = -1.0, -1
            for j, gt in enumerate(gts_by_frame[t]):
                if taken[t][j]:
                    continue
                v = _iou_pair(box, gt)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_threshold:
                taken[t][best_j] = True
                tp += 1
        precisions.append(tp / k)
        recalls.append(tp / n_gt)

    # area under the interpolated envelope, evaluated at every recall step
    ap = 0.0
    prev_r = 0.0
    for r in sorted(set(recalls)):
        if r <= prev_r:
            continue
        best_p = max(p for p, rr in zip(precisions, recalls) if rr >= r)
        ap += (r - prev_r) * best_p
        prev_r = r
    return ap


def _random_instance(rng):
    frames = int(rng.integers(1, 4))
    dets, gts = [], []
    for _ in range(frames):
        n_gt = int(rng.integers(0, 3))
        g = []
        for _ in range(n_gt):
            x, y = rng.uniform(0, 60, 2)
            w, h = rng.uniform(8, 30, 2)
            g.append([x, y, x + w, y + h])
        gts.append(np.array(g).reshape(-1, 4))
        n_det = int(rng.integers(0, 5))
        boxes, scores = [], []
        for _ in range(n_det):
            if n_gt and rng.random() < 0.6:  # jittered copy of a GT box
                base = g[int(rng.integers(n_gt))]
                jitter = rng.uniform(-6, 6, 4)
                boxes.append(np.array(base) + jitter)
            else:
                x, y = rng.uniform(0, 60, 2)
                w, h = rng.uniform(8, 30, 2)
                boxes.append(np.array([x, y, x + w, y + h]))
            scores.append(rng.uniform(0, 1))
        dets.append((np.array(boxes).reshape(-1, 4), np.array(scores)))
    return dets, gts


# --- iou ----------------------------------------------------------------------------


def test_iou_identical():
    assert evalkit.iou([0, 0, 10, 10], [0, 0, 10, 10]) == pytest.approx(1.0)


def test_iou_disjoint():
    assert evalkit.iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0


def test_iou_half_overlap():
    assert evalkit.iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(50.0 / 150.0)


def test_iou_symmetric_and_one_iff_identical():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.uniform(0, 50, 2)
        b = a + rng.uniform(5, 20, 2)
        box1 = [a[0], a[1], b[0], b[1]]
        c = rng.uniform(0, 50, 2)
        d = c + rng.uniform(5, 20, 2)
        box2 = [c[0], c[1], d[0], d[1]]
        assert evalkit.iou(box1, box2) == pytest.approx(evalkit.iou(box2, box1))
        if evalkit.iou(box1, box2) == pytest.approx(1.0, abs=1e-12):
            np.testing.assert_allclose(box1, box2)


# --- average precision ------------------------------------------------------------------


def test_ap_perfect_detections():
    gts = [np.array([[0, 0, 10, 10], [30, 30, 50, 50]]), np.array([[5, 5, 15, 15]])]
    dets = [
        (gts[0].astype(float), np.array([0.9, 0.8])),
        (gts[1].astype(float), np.array([0.7])),
    ]
    assert evalkit.average_precision(dets, gts) == pytest.approx(1.0)


def test_ap_zero_detections():
    gts = [np.array([[0, 0, 10, 10]])]
    dets = [(np.zeros((0, 4)), np.zeros(0))]
    assert evalkit.average_precision(dets, gts) == pytest.approx(0.0)


def test_ap_no_ground_truth_is_undefined():
    dets = [(np.array([[0.0, 0, 10, 10]]), np.array([0.5]))]
    assert evalkit.average_precision(dets, [np.zeros((0, 4))]) is None


def test_ap_hand_constructed_case_matches_oracle():
    # 3 GT in one frame, 5 detections: hits at ranks 1, 3, 5; misses at 2, 4
    gts = [np.array([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10]], dtype=float)]
    dets = [
        (
            np.array(
                [
                    [0, 0, 10, 10],  # tp
                    [60, 60, 70, 70],  # fp
                    [20, 0, 30, 10],  # tp
                    [0, 0, 10, 10],  # fp (gt already matched)
                    [40, 0, 50, 10],  # tp
                ],
                dtype=float,
            ),
            np.array([0.95, 0.9, 0.8, 0.7, 0.6]),
        )
    ]
    # precision at the three recall steps: 1/1, 2/3, 3/5
    expected = (1 / 3) * 1.0 + (1 / 3) * (2 / 3) + (1 / 3) * (3 / 5)
    got = evalkit.average_precision(dets, gts)
    assert got == pytest.approx(expected)
    assert got == pytest.approx(ap_oracle(dets, gts, 0.5))


def test_ap_matches_bruteforce_oracle_randomized():
    rng = np.random.default_rng(11)
    for _ in range(300):
        dets, gts = _random_instance(rng)
        expected = ap_oracle(dets, gts, 0.5)
        got = evalkit.average_precision(dets, gts, 0.5)
        if expected is None:
            assert got is None
        else:
            assert got == pytest.approx(expected, abs=1e-9)


def test_mean_average_precision_warns_on_empty_class():
    dets = [Detections(np.array([[0, 0, 10, 10]]), np.array([0.9]), np.array([1]))]
    gts = [(np.array([[0.0, 0, 10, 10]]), np.array([1]))]
    with pytest.warns(UserWarning):
        per_class, mean = evalkit.mean_average_precision(dets, gts, num_classes=2)
    assert set(per_class) == {1}
    assert mean == pytest.approx(1.0)


# --- occlusion-aware recall ----------------------------------------------------------------


def _ann(box, label=1, occluded=False):
    return ObjectAnnotation(np.asarray(box, dtype=np.float32), label, occluded, 0.0 if occluded else 1.0)


def test_occluded_recall_absent_without_occluded_gt():
    dets = [Detections()]
    anns = [[_ann([0, 0, 10, 10], occluded=False)]]
    assert evalkit.occluded_recall(dets, anns) is None


def test_occluded_recall_all_matched():
    anns = [[_ann([0, 0, 10, 10], occluded=True)], [_ann([5, 5, 15, 15], occluded=True)]]
    dets = [
        Detections(np.array([[0, 0, 10, 10]]), np.array([0.9]), np.array([1])),
        Detections(np.array([[5, 5, 15, 15]]), np.array([0.8]), np.array([1])),
    ]
    assert evalkit.occluded_recall(dets, anns) == pytest.approx(1.0)


def test_occluded_recall_counts_only_occluded():
    anns = [[_ann([0, 0, 10, 10], occluded=True), _ann([50, 50, 60, 60], occluded=False)]]
    dets = [Detections(np.array([[50, 50, 60, 60]]), np.array([0.9]), np.array([1]))]
    assert evalkit.occluded_recall(dets, anns) == pytest.approx(0.0)
    assert evalkit.visible_recall(dets, anns) == pytest.approx(1.0)


def test_recall_respects_score_threshold():
    anns = [[_ann([0, 0, 10, 10], occluded=True)]]
    dets = [Detections(np.array([[0, 0, 10, 10]]), np.array([0.3]), np.array([1]))]
    assert evalkit.occluded_recall(dets, anns, score_threshold=0.5) == pytest.approx(0.0)
    assert evalkit.occluded_recall(dets, anns, score_threshold=0.2) == pytest.approx(1.0)


# --- memory persistence -------------------------------------------------------------------


def _trace_from(arrays):
    return [MemoryState(torch.as_tensor(a, dtype=torch.float32), t) for t, a in enumerate(arrays)]


def test_persistence_is_one_at_onset():
    rng = np.random.default_rng(1)
    trace = _trace_from([rng.uniform(0.1, 1, (1, 4, 8, 8)) for _ in range(5)])
    boxes = np.tile([8.0, 8.0, 40.0, 40.0], (5, 1))
    curve = evalkit.memory_persistence(trace, boxes, onset=2)
    assert curve[2] == pytest.approx(1.0)
    assert curve.shape == (5,)


def test_persistence_zero_memory_gives_zero_curve():
    trace = _trace_from([np.zeros((1, 4, 8, 8)) for _ in range(4)])
    boxes = np.tile([0.0, 0.0, 16.0, 16.0], (4, 1))
    curve = evalkit.memory_persistence(trace, boxes, onset=0)
    np.testing.assert_allclose(curve, 0.0)


def test_persistence_tracks_decay():
    base = np.ones((1, 4, 8, 8))
    trace = _trace_from([base, base * 0.5, base * 0.25])
    boxes = np.tile([0.0, 0.0, 64.0, 64.0], (3, 1))
    curve = evalkit.memory_persistence(trace, boxes, onset=0)
    np.testing.assert_allclose(curve, [1.0, 0.5, 0.25], atol=1e-6)


# --- memory heatmap ----------------------------------------------------------------------


def test_heatmap_zero_memory_black():
    m = MemoryState(torch.zeros(1, 8, 4, 4), 0)
    heat = evalkit.memory_heatmap(m, (32, 32))
    assert heat.shape == (32, 32)
    assert heat.dtype == np.uint8
    assert heat.max() == 0


def test_heatmap_single_hot_cell():
    m = torch.zeros(1, 2, 4, 4)
    m[0, :, 1, 2] = 3.0
    heat = evalkit.memory_heatmap(MemoryState(m, 0), (16, 16))
    assert heat[4:8, 8:12].min() == 255
    assert heat[0:4, 0:4].max() == 0


def test_heatmap_scale_invariant_and_argmax_consistent():
    rng = np.random.default_rng(2)
    m = torch.as_tensor(rng.uniform(0, 1, (1, 8, 5, 7)), dtype=torch.float32)
    h1 = evalkit.memory_heatmap(MemoryState(m, 0), (40, 56))
    h2 = evalkit.memory_heatmap(MemoryState(m * 7.5, 0), (40, 56))
    np.testing.assert_array_equal(h1, h2)
    norms = torch.linalg.vector_norm(m[0], dim=0).numpy()
    cell = np.unravel_index(np.argmax(norms), norms.shape)
    heat_cell = np.unravel_index(np.argmax(h1), h1.shape)
    assert heat_cell[0] // 8 == cell[0] and heat_cell[1] // 8 == cell[1]


# --- track linking -----------------------------------------------------------------------


def _det(box, label=1, score=0.9):
    return Detections(np.array([box], dtype=float), np.array([score]), np.array([label]))


def test_single_chain_single_track():
    dets = [_det([i, 0, i + 10, 10]) for i in range(5)]
    tracks = evalkit.link_tracks(dets)
    assert len(tracks) == 1
    assert tracks[0].frames == [0, 1, 2, 3, 4]


def test_two_separate_tracks():
    dets = []
    for i in range(4):
        d = Detections(
            np.array([[i, 0, i + 10, 10], [80, 80, 95, 95]], dtype=float),
            np.array([0.9, 0.8]),
            np.array([1, 1]),
        )
        dets.append(d)
    tracks = evalkit.link_tracks(dets)
    assert len(tracks) == 2


def test_gap_bridging_with_max_gap():
    dets = [_det([0, 0, 10, 10]), _det([1, 0, 11, 10]), Detections(), _det([2, 0, 12, 10])]
    tracks = evalkit.link_tracks(dets, max_gap=2)
    assert len(tracks) == 1
    assert tracks[0].frames == [0, 1, 3]
    tracks = evalkit.link_tracks(dets, max_gap=0)
    assert len(tracks) == 2
