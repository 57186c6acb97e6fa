"""Frame-level region-based object detector.

Structure: a small stride-8 convolutional backbone feeds a region proposal
network; proposals are ROI-pooled and classified with class-specific box
refinement. The backbone/RPN/head triple is deliberately seam-separated so the
video detector can insert a recurrent memory between backbone and RPN and
reuse everything else unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nnkit
from .boxes import (
    Detections,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    iou_matrix,
    nms,
)
from .errors import ContractViolation, NumericError
from .validation import check_gt_boxes, to_tensor

BACKBONE_STRIDE = 8


@dataclass
class DetectorConfig:
    """All model/inference hyperparameters, shared by frame and video detectors."""

    num_classes: int = 3
    channels: int = 64
    backbone_widths: tuple = (16, 32, 64)
    anchor_scales: tuple = (16.0, 32.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_pre_nms_k: int = 200
    rpn_post_nms_k: int = 40
    rpn_nms_threshold: float = 0.7
    roi_size: int = 7
    head_hidden: int = 128
    rois_per_image: int = 32
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    anchor_positive_iou: float = 0.7
    anchor_negative_iou: float = 0.3
    anchors_per_image: int = 64
    nms_threshold: float = 0.3
    score_threshold: float = 0.05
    max_detections: int = 20
    # memory-cell knobs, consumed only by the video detector
    cell: str = "none"
    direction: str = "forward"
    pyramid_levels: int = 3
    match_radius: int = 2
    gate: str = "sigmoid"

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("backbone_widths", "anchor_scales", "anchor_ratios"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        for key in ("backbone_widths", "anchor_scales", "anchor_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# --- networks ----------------------------------------------------------------


class Backbone(nn.Module):
    """Four 3x3 conv blocks with three 2x2 poolings: overall stride 8."""

    def __init__(self, cfg: DetectorConfig, generator: torch.Generator | None = None):
        super().__init__()
        widths = list(cfg.backbone_widths) + [cfg.channels]
        chans = [3] + widths
        self.convs = nn.ModuleList(
            nnkit.Conv2d(cin, cout, 3, generator=generator) for cin, cout in zip(chans, chans[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = nnkit.relu(conv(x))
            if i < len(self.convs) - 1:
                x = nnkit.maxpool2x2(x)
        return x

    def graph_ops(self) -> list[nnkit.GraphOp]:
        ops = []
        for i, conv in enumerate(self.convs):
            ops.append(conv.graph_op())
            if i < len(self.convs) - 1:
                ops.append(nnkit.pool_op(conv.out_channels))
        return ops


class RpnHead(nn.Module):
    """Objectness + box-delta predictor over anchors.

    Channel layouts: objectness logits are (1, A, h, w); deltas are
    (1, 4A, h, w) with output channel ``a * 4 + d`` holding delta component d
    of anchor slot a.
    """

    def __init__(self, cfg: DetectorConfig, generator: torch.Generator | None = None):
        super().__init__()
        c, a = cfg.channels, cfg.num_anchors
        self.conv = nnkit.Conv2d(c, c, 3, generator=generator)
        self.cls = nnkit.Conv2d(c, a, 1, generator=generator)
        self.reg = nnkit.Conv2d(c, 4 * a, 1, generator=generator)

    def forward(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = nnkit.relu(self.conv(feature))
        return self.cls(h), self.reg(h)


class RoiHead(nn.Module):
    """Per-ROI classifier and class-specific box regressor.

    Implemented fully convolutionally: a valid ``roi_size`` x ``roi_size``
    conv collapses the pooled grid (equivalent to a dense layer), then 1x1
    convs emit (K+1) class logits and 4(K+1) deltas per ROI.
    """

    def __init__(self, cfg: DetectorConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.fc = nnkit.Conv2d(cfg.channels, cfg.head_hidden, cfg.roi_size, pad=0, generator=generator)
        self.cls = nnkit.Conv2d(cfg.head_hidden, cfg.num_classes + 1, 1, generator=generator)
        self.reg = nnkit.Conv2d(cfg.head_hidden, 4 * (cfg.num_classes + 1), 1, generator=generator)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if pooled.shape[0] == 0:
            k = self.num_classes + 1
            return pooled.new_zeros((0, k)), pooled.new_zeros((0, k, 4))
        h = nnkit.relu(self.fc(pooled))
        logits = self.cls(h).flatten(1)
        deltas = self.reg(h).flatten(1).view(-1, self.num_classes + 1, 4)
        return logits, deltas


class FrameDetectorNet(nn.Module):
    def __init__(self, cfg: DetectorConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.backbone = Backbone(cfg, generator)
        self.rpn = RpnHead(cfg, generator)
        self.head = RoiHead(cfg, generator)


# --- anchors and proposals ----------------------------------------------------


def generate_anchors(
    feature_hw: tuple[int, int],
    stride: int = BACKBONE_STRIDE,
    scales: Sequence[float] = (16.0, 32.0),
    ratios: Sequence[float] = (0.5, 1.0, 2.0),
) -> np.ndarray:
    """One anchor per (cell, scale, ratio), centered on the cell's image-space center.

    A scale-s, ratio-r anchor has width s / sqrt(r) and height s * sqrt(r)
    (so height/width == r exactly and the area stays s^2; no rounding).
    Anchor index layout: ((row * W + col) * n_scales + si) * n_ratios + ri.
    """
    if not scales or not ratios:
        raise ContractViolation("need at least one scale and one ratio")
    h, w = feature_hw
    shapes = np.array(
        [(s / math.sqrt(r), s * math.sqrt(r)) for s in scales for r in ratios], dtype=np.float64
    )  # (A, 2) as (width, height)
    cx = (np.arange(w, dtype=np.float64) + 0.5) * stride
    cy = (np.arange(h, dtype=np.float64) + 0.5) * stride
    centers = np.stack(np.meshgrid(cy, cx, indexing="ij"), axis=-1).reshape(-1, 2)  # (HW, 2) as (cy, cx)
    boxes = np.empty((len(centers), len(shapes), 4), dtype=np.float64)
    boxes[:, :, 0] = centers[:, None, 1] - shapes[None, :, 0] / 2
    boxes[:, :, 1] = centers[:, None, 0] - shapes[None, :, 1] / 2
    boxes[:, :, 2] = centers[:, None, 1] + shapes[None, :, 0] / 2
    boxes[:, :, 3] = centers[:, None, 0] + shapes[None, :, 1] / 2
    return boxes.reshape(-1, 4)


def _flatten_rpn_outputs(
    obj_logits: torch.Tensor, deltas: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(1,A,h,w)/(1,4A,h,w) -> (N,), (N,4) in anchor index order."""
    _, a, h, w = obj_logits.shape
    flat_logits = obj_logits.permute(0, 2, 3, 1).reshape(-1)
    flat_deltas = deltas.view(1, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(-1, 4)
    return flat_logits, flat_deltas


def rpn_propose(
    feature: torch.Tensor,
    rpn: RpnHead,
    cfg: DetectorConfig,
    pre_nms_k: int | None = None,
    post_nms_k: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip and NMS-filter RPN outputs into at most post_nms_k proposals.

    Returns (boxes, scores) as numpy arrays; proposal selection is treated as
    non-differentiable (standard practice), so this runs under no_grad.
    """
    pre_nms_k = cfg.rpn_pre_nms_k if pre_nms_k is None else pre_nms_k
    post_nms_k = cfg.rpn_post_nms_k if post_nms_k is None else post_nms_k
    h, w = feature.shape[2], feature.shape[3]
    image_h, image_w = h * BACKBONE_STRIDE, w * BACKBONE_STRIDE
    anchors = generate_anchors((h, w), BACKBONE_STRIDE, cfg.anchor_scales, cfg.anchor_ratios)
    with torch.no_grad():
        obj_logits, delta_map = rpn(feature)
        flat_logits, flat_deltas = _flatten_rpn_outputs(obj_logits, delta_map)
        scores = torch.sigmoid(flat_logits).numpy().astype(np.float64)
        deltas = flat_deltas.numpy()
    boxes = clip_boxes(decode_boxes(deltas, anchors), image_h, image_w)
    valid = (boxes[:, 2] - boxes[:, 0] > 1.0) & (boxes[:, 3] - boxes[:, 1] > 1.0)
    boxes, scores = boxes[valid], scores[valid]
    if len(boxes) == 0:
        return np.zeros((0, 4)), np.zeros((0,))
    order = np.argsort(-scores, kind="stable")[:pre_nms_k]
    boxes, scores = boxes[order], scores[order]
    keep = nms(boxes, scores, cfg.rpn_nms_threshold)[:post_nms_k]
    return boxes[keep], scores[keep]


def roi_pool(
    feature: torch.Tensor,
    rois: np.ndarray,
    out_size: int = 7,
    stride: int = BACKBONE_STRIDE,
) -> torch.Tensor:
    """Max-pool each ROI into a fixed (C, out_size, out_size) grid.

    The ROI is snapped outward onto the feature grid (floor/ceil of the box
    divided by the stride, at least one cell), then bin b of the crop covers
    cells [floor(b*n/out), ceil((b+1)*n/out)). Differentiable w.r.t. the
    feature map.
    """
    nnkit.check_feature_map(feature)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    _, c, fh, fw = feature.shape
    if len(rois) == 0:
        return feature.new_zeros((0, c, out_size, out_size))
    crops = []
    for x1, y1, x2, y2 in rois:
        cx1 = min(max(int(math.floor(x1 / stride)), 0), fw - 1)
        cy1 = min(max(int(math.floor(y1 / stride)), 0), fh - 1)
        cx2 = min(max(int(math.ceil(x2 / stride)), cx1 + 1), fw)
        cy2 = min(max(int(math.ceil(y2 / stride)), cy1 + 1), fh)
        crop = feature[0:1, :, cy1:cy2, cx1:cx2]
        crops.append(F.adaptive_max_pool2d(crop, out_size)[0])
    return torch.stack(crops, dim=0)


def head_forward(head: RoiHead, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Class probabilities (softmax over K+1) and class-specific deltas per ROI."""
    logits, deltas = head(pooled)
    return F.softmax(logits, dim=1), deltas


# --- training targets and losses ----------------------------------------------


@dataclass
class RoiSample:
    boxes: np.ndarray  # (S, 4)
    labels: np.ndarray  # (S,) 0 = background
    reg_targets: np.ndarray  # (S, 4), valid where labels > 0


@dataclass
class Predictions:
    """Everything the loss needs, with GT-derived targets baked in."""

    obj_logits_flat: torch.Tensor
    rpn_deltas_flat: torch.Tensor
    anchor_sample: np.ndarray  # indices of sampled anchors
    anchor_cls_targets: np.ndarray  # 0/1 per sampled anchor
    anchor_pos: np.ndarray  # indices of positive anchors
    anchor_reg_targets: np.ndarray  # (len(anchor_pos), 4)
    rois: RoiSample
    roi_logits: torch.Tensor
    roi_deltas: torch.Tensor


@dataclass
class LossBundle:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    head_cls: torch.Tensor
    head_reg: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg

    def detail(self) -> dict:
        return {
            "rpn_cls": float(self.rpn_cls),
            "rpn_reg": float(self.rpn_reg),
            "head_cls": float(self.head_cls),
            "head_reg": float(self.head_reg),
            "total": float(self.total),
        }


def assign_anchors(
    anchors: np.ndarray, gt_boxes: np.ndarray, cfg: DetectorConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor labels (1 pos / 0 neg / -1 ignore) and matched GT index per anchor.

    IoU >= anchor_positive_iou is positive, <= anchor_negative_iou negative,
    in between ignored; additionally the highest-IoU anchor of every GT box is
    positive so small objects always have at least one positive anchor.
    """
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    ious = iou_matrix(anchors, gt_boxes)
    best_iou = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels[best_iou <= cfg.anchor_negative_iou] = 0
    labels[best_iou >= cfg.anchor_positive_iou] = 1
    labels[ious.argmax(axis=0)] = 1
    return labels, matched


def sample_rois(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    cfg: DetectorConfig,
    rng: np.random.Generator,
) -> RoiSample:
    """Random 1:3 foreground/background ROI sample; GT boxes join the candidate pool."""
    candidates = np.concatenate([proposals.reshape(-1, 4), gt_boxes.reshape(-1, 4)], axis=0)
    if len(candidates) == 0:
        return RoiSample(np.zeros((0, 4)), np.zeros((0,), np.int64), np.zeros((0, 4)))
    if len(gt_boxes) == 0:
        labels = np.zeros(len(candidates), dtype=np.int64)
        matched = np.zeros(len(candidates), dtype=np.int64)
        best_iou = np.zeros(len(candidates))
    else:
        ious = iou_matrix(candidates, gt_boxes)
        best_iou = ious.max(axis=1)
        matched = ious.argmax(axis=1)
        labels = np.where(best_iou >= cfg.roi_fg_iou, gt_labels[matched], 0).astype(np.int64)
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(round(cfg.rois_per_image * cfg.roi_positive_fraction)))
    n_bg = min(len(bg), cfg.rois_per_image - n_fg)
    fg = rng.choice(fg, size=n_fg, replace=False) if n_fg else fg[:0]
    bg = rng.choice(bg, size=n_bg, replace=False) if n_bg else bg[:0]
    pick = np.concatenate([fg, bg])
    boxes = candidates[pick]
    roi_labels = labels[pick]
    targets = np.zeros((len(pick), 4))
    if len(gt_boxes) and len(fg):
        is_fg = roi_labels > 0
        targets[is_fg] = encode_boxes(gt_boxes[matched[pick][is_fg]], boxes[is_fg])
    return RoiSample(boxes, roi_labels, targets)


def forward_train(
    feature: torch.Tensor,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    rpn: RpnHead,
    head: RoiHead,
    cfg: DetectorConfig,
    rng: np.random.Generator,
    rois: RoiSample | None = None,
) -> Predictions:
    """Run the trainable paths and attach sampled targets.

    ``rois`` can be passed explicitly (the gradient checker does, to keep the
    sampled set fixed under parameter perturbations).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    h, w = feature.shape[2], feature.shape[3]
    anchors = generate_anchors((h, w), BACKBONE_STRIDE, cfg.anchor_scales, cfg.anchor_ratios)

    obj_logits, delta_map = rpn(feature)
    flat_logits, flat_deltas = _flatten_rpn_outputs(obj_logits, delta_map)

    labels, matched = assign_anchors(anchors, gt_boxes, cfg)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), cfg.anchors_per_image // 2)
    n_neg = min(len(neg), cfg.anchors_per_image - n_pos)
    pos_pick = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    neg_pick = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    sample = np.concatenate([pos_pick, neg_pick])
    cls_targets = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    reg_targets = (
        encode_boxes(gt_boxes[matched[pos_pick]], anchors[pos_pick])
        if len(gt_boxes) and n_pos
        else np.zeros((0, 4))
    )

    if rois is None:
        proposals, _ = rpn_propose(feature, rpn, cfg)
        rois = sample_rois(proposals, gt_boxes, gt_labels, cfg, rng)
    pooled = roi_pool(feature, rois.boxes, cfg.roi_size)
    roi_logits, roi_deltas = head(pooled)

    return Predictions(
        obj_logits_flat=flat_logits,
        rpn_deltas_flat=flat_deltas,
        anchor_sample=sample,
        anchor_cls_targets=cls_targets,
        anchor_pos=pos_pick,
        anchor_reg_targets=reg_targets,
        rois=rois,
        roi_logits=roi_logits,
        roi_deltas=roi_deltas,
    )


def detector_loss(pred: Predictions, cfg: DetectorConfig) -> LossBundle:
    """Four-part detection loss; each part is a mean, absent parts are zero."""
    dtype = pred.obj_logits_flat.dtype
    zero = pred.obj_logits_flat.new_zeros(())

    if len(pred.anchor_sample):
        logits = pred.obj_logits_flat[torch.from_numpy(pred.anchor_sample)]
        targets = torch.as_tensor(pred.anchor_cls_targets, dtype=dtype)
        rpn_cls = F.binary_cross_entropy_with_logits(logits, targets)
    else:
        rpn_cls = zero

    if len(pred.anchor_pos):
        deltas = pred.rpn_deltas_flat[torch.from_numpy(pred.anchor_pos)]
        targets = torch.as_tensor(pred.anchor_reg_targets, dtype=dtype)
        rpn_reg = F.smooth_l1_loss(deltas, targets)
    else:
        rpn_reg = zero

    if len(pred.rois.labels):
        labels = torch.from_numpy(pred.rois.labels)
        head_cls = F.cross_entropy(pred.roi_logits, labels)
        fg = np.flatnonzero(pred.rois.labels > 0)
        if len(fg):
            fg_t = torch.from_numpy(fg)
            picked = pred.roi_deltas[fg_t, labels[fg_t]]
            targets = torch.as_tensor(pred.rois.reg_targets[fg], dtype=dtype)
            head_reg = F.smooth_l1_loss(picked, targets)
        else:
            head_reg = zero
    else:
        head_cls = zero
        head_reg = zero

    return LossBundle(rpn_cls=rpn_cls, rpn_reg=rpn_reg, head_cls=head_cls, head_reg=head_reg)


# --- inference -----------------------------------------------------------------


def detect_from_feature(
    feature: torch.Tensor,
    rpn: RpnHead,
    head: RoiHead,
    cfg: DetectorConfig,
    score_threshold: float | None = None,
) -> Detections:
    """Shared tail of the frame and video pipelines: propose, pool, classify, NMS."""
    score_threshold = cfg.score_threshold if score_threshold is None else score_threshold
    image_h = feature.shape[2] * BACKBONE_STRIDE
    image_w = feature.shape[3] * BACKBONE_STRIDE
    proposals, _ = rpn_propose(feature, rpn, cfg)
    if len(proposals) == 0:
        return Detections()
    with torch.no_grad():
        pooled = roi_pool(feature, proposals, cfg.roi_size)
        probs, deltas = head_forward(head, pooled)
        probs = probs.numpy().astype(np.float64)
        deltas = deltas.numpy().astype(np.float64)

    all_boxes, all_scores, all_labels = [], [], []
    for c in range(1, cfg.num_classes + 1):
        boxes_c = clip_boxes(decode_boxes(deltas[:, c, :], proposals), image_h, image_w)
        scores_c = probs[:, c]
        ok = (
            (scores_c >= score_threshold)
            & (boxes_c[:, 2] - boxes_c[:, 0] > 1.0)
            & (boxes_c[:, 3] - boxes_c[:, 1] > 1.0)
        )
        boxes_c, scores_c = boxes_c[ok], scores_c[ok]
        if len(boxes_c) == 0:
            continue
        keep = nms(boxes_c, scores_c, cfg.nms_threshold)
        all_boxes.append(boxes_c[keep])
        all_scores.append(scores_c[keep])
        all_labels.append(np.full(len(keep), c, dtype=np.int64))
    if not all_boxes:
        return Detections()
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    order = np.argsort(-scores, kind="stable")[: cfg.max_detections]
    return Detections(boxes[order], scores[order], labels[order])


def detect_frame(
    image: np.ndarray,
    net: FrameDetectorNet,
    cfg: DetectorConfig,
    score_threshold: float | None = None,
) -> Detections:
    with torch.no_grad():
        feature = net.backbone(to_tensor(image))
    return detect_from_feature(feature, net.rpn, net.head, cfg, score_threshold)


# --- training loop helpers -------------------------------------------------------


class PlateauScheduler:
    """Drops the learning rate exactly once when the tracked loss plateaus.

    A plateau is `patience` consecutive updates without a relative improvement
    of at least `min_rel_improvement` over the best value seen so far.
    """

    def __init__(
        self,
        optimizer: torch.optim.Optimizer | None,
        drop_to: float,
        patience: int = 5,
        min_rel_improvement: float = 0.01,
    ):
        self.optimizer = optimizer
        self.drop_to = drop_to
        self.patience = patience
        self.min_rel_improvement = min_rel_improvement
        self.best = math.inf
        self.bad_count = 0
        self.dropped = False

    def update(self, value: float) -> bool:
        """Record one loss evaluation; returns True when this update drops the LR."""
        if value < self.best * (1.0 - self.min_rel_improvement) or self.best == math.inf:
            self.best = min(self.best, value)
            self.bad_count = 0
            return False
        self.bad_count += 1
        if not self.dropped and self.bad_count >= self.patience:
            self.dropped = True
            if self.optimizer is not None:
                for group in self.optimizer.param_groups:
                    group["lr"] = self.drop_to
            return True
        return False

    def state_dict(self) -> dict:
        return {
            "best": self.best if self.best != math.inf else None,
            "bad_count": self.bad_count,
            "dropped": self.dropped,
        }

    def load_state_dict(self, state: dict) -> None:
        self.best = math.inf if state["best"] is None else state["best"]
        self.bad_count = state["bad_count"]
        self.dropped = state["dropped"]


def check_finite_loss(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite training loss at {context}")


# --- estimator --------------------------------------------------------------------


from .base import ParamsMixin  # noqa: E402  (kept near the class that uses it)


class FrameDetector(ParamsMixin):
    """Single-image detector with a scikit-learn style fit/predict surface.

    fit() consumes (image, gt_boxes, gt_labels) triples, e.g. the synthetic
    composites from :mod:`occludet.synthdata`.
    """

    def __init__(
        self,
        num_classes: int = 3,
        channels: int = 64,
        anchor_scales: tuple = (16.0, 32.0),
        anchor_ratios: tuple = (0.5, 1.0, 2.0),
        learning_rate: float = 1e-3,
        plateau_lr: float = 1e-4,
        momentum: float = 0.9,
        epochs: int = 4,
        score_threshold: float = 0.05,
        nms_threshold: float = 0.3,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.channels = channels
        self.anchor_scales = anchor_scales
        self.anchor_ratios = anchor_ratios
        self.learning_rate = learning_rate
        self.plateau_lr = plateau_lr
        self.momentum = momentum
        self.epochs = epochs
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.seed = seed

    def build_config(self) -> DetectorConfig:
        return DetectorConfig(
            num_classes=self.num_classes,
            channels=self.channels,
            anchor_scales=tuple(self.anchor_scales),
            anchor_ratios=tuple(self.anchor_ratios),
            score_threshold=self.score_threshold,
            nms_threshold=self.nms_threshold,
        )

    def fit(self, samples: Sequence[tuple], epochs: int | None = None) -> "FrameDetector":
        epochs = self.epochs if epochs is None else epochs
        cfg = self.build_config()
        gen = torch.Generator().manual_seed(self.seed)
        net = FrameDetectorNet(cfg, gen)
        rng = np.random.default_rng(self.seed)
        opt = torch.optim.SGD(net.parameters(), lr=self.learning_rate, momentum=self.momentum)
        sched = PlateauScheduler(opt, self.plateau_lr)
        history = train_frame_epochs(net, samples, cfg, opt, sched, rng, epochs)
        self.net_ = net
        self.config_ = cfg
        self.history_ = history
        return self

    def predict(self, image: np.ndarray, score_threshold: float | None = None) -> Detections:
        if not hasattr(self, "net_"):
            raise RuntimeError("FrameDetector.predict called before fit")
        return detect_frame(image, self.net_, self.config_, score_threshold)


def train_frame_epochs(
    net: FrameDetectorNet,
    samples: Sequence[tuple],
    cfg: DetectorConfig,
    opt: torch.optim.Optimizer,
    sched: PlateauScheduler,
    rng: np.random.Generator,
    epochs: int,
    start_epoch: int = 0,
    history: list[dict] | None = None,
    epoch_callback=None,
) -> list[dict]:
    """SGD over single images; one plateau evaluation per epoch (mean loss)."""
    history = [] if history is None else history
    for epoch in range(start_epoch, epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for idx in order:
            image, gt_boxes, gt_labels = samples[idx]
            gt_boxes, gt_labels = check_gt_boxes(gt_boxes, gt_labels)
            opt.zero_grad()
            feature = net.backbone(to_tensor(image))
            pred = forward_train(feature, gt_boxes, gt_labels, net.rpn, net.head, cfg, rng)
            loss = detector_loss(pred, cfg).total
            check_finite_loss(loss, f"pretrain epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss)
        mean = total / max(1, len(samples))
        dropped = sched.update(mean)
        record = {"epoch": epoch, "loss": mean, "lr": opt.param_groups[0]["lr"], "lr_dropped": dropped}
        history.append(record)
        if epoch_callback is not None:
            epoch_callback(epoch, net, opt, sched, rng, history)
    return history
