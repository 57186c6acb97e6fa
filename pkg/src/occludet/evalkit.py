"""Metrics and analysis: AP/mAP, occlusion-aware recall, memory diagnostics.

Conventions: AP uses greedy score-ranked matching with all-points
interpolation of the precision-recall curve; fully occluded ground-truth
boxes are matchable just like visible ones (that is the point of annotating
through occlusion); classes with zero ground truth are excluded from mAP with
a warning.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import Detections, iou_matrix
from .errors import ContractViolation
from .frame_detector import BACKBONE_STRIDE
from .memory_cells import MemoryState


def iou(a, b) -> float:
    """IoU of two boxes (x1, y1, x2, y2); symmetric, 1 iff identical."""
    return float(iou_matrix(np.asarray(a).reshape(1, 4), np.asarray(b).reshape(1, 4))[0, 0])


# --- average precision -----------------------------------------------------------


def average_precision(
    dets_by_frame: list[tuple[np.ndarray, np.ndarray]],
    gts_by_frame: list[np.ndarray],
    iou_threshold: float = 0.5,
) -> float | None:
    """AP for one class. ``dets_by_frame[t] = (boxes, scores)``, ``gts_by_frame[t] = boxes``.

    Detections are ranked globally by score (ties keep frame/index order) and
    greedily matched to the highest-IoU unmatched GT of their frame at
    ``iou_threshold``. Returns None when there is no ground truth (AP
    undefined for the class).
    """
    if len(dets_by_frame) != len(gts_by_frame):
        raise ContractViolation("detections and ground truth must cover the same frames")
    n_gt = sum(len(g) for g in gts_by_frame)
    if n_gt == 0:
        return None

    entries = []  # (score, frame, det index within frame)
    for t, (boxes, scores) in enumerate(dets_by_frame):
        for i in range(len(scores)):
            entries.append((float(scores[i]), t, i))
    if not entries:
        return 0.0
    order = sorted(range(len(entries)), key=lambda k: -entries[k][0])

    matched = [np.zeros(len(g), dtype=bool) for g in gts_by_frame]
    tp = np.zeros(len(entries))
    fp = np.zeros(len(entries))
    for rank, k in enumerate(order):
        _, t, i = entries[k]
        gts = np.asarray(gts_by_frame[t]).reshape(-1, 4)
        if len(gts) == 0:
            fp[rank] = 1
            continue
        box = np.asarray(dets_by_frame[t][0][i]).reshape(1, 4)
        ious = iou_matrix(box, gts)[0]
        ious[matched[t]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            matched[t][best] = True
            tp[rank] = 1
        else:
            fp[rank] = 1

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def mean_average_precision(
    dets_by_frame: list[Detections],
    gts_by_frame: list[tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean. ``gts_by_frame[t] = (boxes, labels)``.

    Classes with no ground truth anywhere are excluded (with a warning).
    """
    per_class: dict[int, float] = {}
    for c in range(1, num_classes + 1):
        class_dets = []
        class_gts = []
        for det, (gt_boxes, gt_labels) in zip(dets_by_frame, gts_by_frame):
            d = det.for_label(c)
            class_dets.append((d.boxes, d.scores))
            class_gts.append(np.asarray(gt_boxes).reshape(-1, 4)[np.asarray(gt_labels) == c])
        ap = average_precision(class_dets, class_gts, iou_threshold)
        if ap is None:
            warnings.warn(f"class {c} has no ground truth; excluded from mAP")
            continue
        per_class[c] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


# --- occlusion-aware recall --------------------------------------------------------


def _recall_over_flag(
    dets_by_frame: list[Detections],
    anns_by_frame: list[list],
    want_occluded: bool,
    iou_threshold: float,
    score_threshold: float,
) -> float | None:
    """Greedy per-frame matching over all GT; recall counted on the flagged subset."""
    total = 0
    hit = 0
    for det, anns in zip(dets_by_frame, anns_by_frame):
        det = det.above_score(score_threshold)
        if anns:
            gt_boxes = np.stack([a.box for a in anns])
            gt_labels = np.array([a.label for a in anns])
        else:
            gt_boxes = np.zeros((0, 4))
            gt_labels = np.zeros((0,), dtype=np.int64)
        matched = np.zeros(len(anns), dtype=bool)
        order = np.argsort(-det.scores, kind="stable")
        for i in order:
            same = (gt_labels == det.labels[i]) & ~matched
            if not same.any():
                continue
            ious = iou_matrix(det.boxes[i : i + 1], gt_boxes)[0]
            ious[~same] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[best] = True
        for j, a in enumerate(anns):
            if a.occluded == want_occluded:
                total += 1
                hit += int(matched[j])
    if total == 0:
        return None
    return hit / total


def occluded_recall(
    dets_by_frame: list[Detections],
    anns_by_frame: list[list],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
) -> float | None:
    """Recall over GT boxes flagged occluded; None when there are none."""
    return _recall_over_flag(dets_by_frame, anns_by_frame, True, iou_threshold, score_threshold)


def visible_recall(
    dets_by_frame: list[Detections],
    anns_by_frame: list[list],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
) -> float | None:
    return _recall_over_flag(dets_by_frame, anns_by_frame, False, iou_threshold, score_threshold)


# --- memory diagnostics ---------------------------------------------------------------


def _cell_bounds(box: np.ndarray, fh: int, fw: int, stride: int) -> tuple[int, int, int, int]:
    x1 = min(max(int(np.floor(box[0] / stride)), 0), fw - 1)
    y1 = min(max(int(np.floor(box[1] / stride)), 0), fh - 1)
    x2 = min(max(int(np.ceil(box[2] / stride)), x1 + 1), fw)
    y2 = min(max(int(np.ceil(box[3] / stride)), y1 + 1), fh)
    return x1, y1, x2, y2


def memory_persistence(
    trace: list[MemoryState],
    boxes_by_frame: np.ndarray,
    onset: int,
    stride: int = BACKBONE_STRIDE,
) -> np.ndarray:
    """Mean in-box channel L2 norm of the memory per frame, normalized at onset.

    ``boxes_by_frame`` is the (T, 4) ground-truth track of one object. The
    curve value at ``onset`` is 1 by construction; an identically zero memory
    at onset yields an all-zero curve.
    """
    boxes = np.asarray(boxes_by_frame, dtype=np.float64).reshape(-1, 4)
    if len(trace) != len(boxes):
        raise ContractViolation(f"{len(trace)} memory states but {len(boxes)} boxes")
    if not 0 <= onset < len(trace):
        raise ContractViolation(f"onset {onset} outside sequence of length {len(trace)}")
    raw = np.empty(len(trace))
    for t, state in enumerate(trace):
        m = state.M if isinstance(state, MemoryState) else state
        _, _, fh, fw = m.shape
        x1, y1, x2, y2 = _cell_bounds(boxes[t], fh, fw, stride)
        norms = torch.linalg.vector_norm(m[0, :, y1:y2, x1:x2], dim=0)
        raw[t] = float(norms.mean())
    if raw[onset] <= 1e-12:
        return np.zeros_like(raw)
    return raw / raw[onset]


def memory_heatmap(state: MemoryState | torch.Tensor, frame_hw: tuple[int, int]) -> np.ndarray:
    """Per-cell channel L2 norm, min-max scaled to [0, 255], nearest-upscaled.

    Constant memory maps (max == min) produce an all-zero image by convention.
    """
    m = state.M if isinstance(state, MemoryState) else state
    norms = torch.linalg.vector_norm(m[0], dim=0).detach().numpy()
    lo, hi = float(norms.min()), float(norms.max())
    if hi - lo <= 0:
        scaled = np.zeros_like(norms)
    else:
        scaled = (norms - lo) / (hi - lo) * 255.0
    fh, fw = norms.shape
    h, w = frame_hw
    rows = (np.arange(h) * fh // h).clip(0, fh - 1)
    cols = (np.arange(w) * fw // w).clip(0, fw - 1)
    return scaled[rows][:, cols].astype(np.uint8)


# --- track linking -----------------------------------------------------------------


@dataclass
class Track:
    label: int
    entries: list = field(default_factory=list)  # (frame, box (4,), score)

    @property
    def frames(self) -> list[int]:
        return [f for f, _, _ in self.entries]


def link_tracks(
    dets_by_frame: list[Detections],
    iou_threshold: float = 0.3,
    max_gap: int = 2,
) -> list[Track]:
    """Greedy frame-to-frame IoU association into tracks.

    Per frame, (track, detection) pairs of the same class are matched in
    descending IoU order; unmatched detections open new tracks; a track ends
    once it has missed more than ``max_gap`` consecutive frames.
    """
    finished: list[Track] = []
    active: list[Track] = []
    for t, det in enumerate(dets_by_frame):
        still_active = [tr for tr in active if t - tr.entries[-1][0] - 1 <= max_gap]
        finished.extend(tr for tr in active if t - tr.entries[-1][0] - 1 > max_gap)
        active = still_active
        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        pairs = []
        for ti, tr in enumerate(active):
            last_box = tr.entries[-1][1]
            for di in range(len(det)):
                if det.labels[di] != tr.label:
                    continue
                value = iou(last_box, det.boxes[di])
                if value >= iou_threshold:
                    pairs.append((value, ti, di))
        for value, ti, di in sorted(pairs, key=lambda p: -p[0]):
            if ti in used_tracks or di in used_dets:
                continue
            used_tracks.add(ti)
            used_dets.add(di)
            active[ti].entries.append((t, det.boxes[di].copy(), float(det.scores[di])))
        for di in range(len(det)):
            if di not in used_dets:
                active.append(
                    Track(label=int(det.labels[di]), entries=[(t, det.boxes[di].copy(), float(det.scores[di]))])
                )
    return finished + active


# --- report ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    occluded_recall: float | None
    visible_recall: float | None
    persistence_curves: list  # one list[float] per occluded object track
    num_sequences: int = 0
    num_frames: int = 0

    def to_json(self) -> str:
        payload = {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map": self.map,
            "occluded_recall": self.occluded_recall,
            "visible_recall": self.visible_recall,
            "persistence_curves": self.persistence_curves,
            "num_sequences": self.num_sequences,
            "num_frames": self.num_frames,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def evaluate_detector(
    net,
    dataset,
    cfg=None,
    iou_threshold: float = 0.5,
    recall_score_threshold: float = 0.5,
) -> EvalReport:
    """Run the video detector over a dataset and assemble the standard report."""
    from .video_detector import video_forward  # local import to avoid a cycle

    cfg = net.cfg if cfg is None else cfg
    all_dets: list[Detections] = []
    all_gts: list[tuple[np.ndarray, np.ndarray]] = []
    all_anns: list[list] = []
    curves: list[list[float]] = []
    for sample in dataset:
        detections, trace = video_forward(sample.frames, net, cfg)
        all_dets.extend(detections)
        for t in range(len(sample.frames)):
            all_gts.append(sample.gt_arrays(t))
            all_anns.append(sample.annotations[t])
        n_objects = len(sample.annotations[0]) if sample.annotations else 0
        for obj in range(n_objects):
            flags = [anns[obj].occluded for anns in sample.annotations]
            if not any(flags):
                continue
            onset = flags.index(True)
            track = np.stack([anns[obj].box for anns in sample.annotations])
            curve = memory_persistence(trace, track, onset)
            curves.append([float(v) for v in curve])
    per_class, mean_ap = mean_average_precision(all_dets, all_gts, cfg.num_classes, iou_threshold)
    return EvalReport(
        per_class_ap=per_class,
        map=mean_ap,
        occluded_recall=occluded_recall(all_dets, all_anns, iou_threshold, recall_score_threshold),
        visible_recall=visible_recall(all_dets, all_anns, iou_threshold, recall_score_threshold),
        persistence_curves=curves,
        num_sequences=len(dataset),
        num_frames=len(all_dets),
    )
