"""Video-level detector: a memory cell between the shared backbone and the heads.

The per-frame pipeline is ``F_t = backbone(frame_t)``, ``M_t = cell(M_{t-1},
F_t)``, ``detections_t = heads(M_t)``. With ``cell="none"`` the memory is the
backbone feature itself and the model reduces exactly to the frame detector.
Training unrolls truncated BPTT windows: memory values are carried across
window boundaries within a sequence but gradients are cut there.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import nnkit
from .base import ParamsMixin
from .boxes import Detections, flip_boxes_lr
from .errors import ContractViolation, NumericError
from .frame_detector import (
    Backbone,
    DetectorConfig,
    FrameDetectorNet,
    PlateauScheduler,
    RoiHead,
    RpnHead,
    detect_from_feature,
    detector_loss,
    forward_train,
)
from .memory_cells import (
    CELL_KINDS,
    LearnedAlignCell,
    MemoryState,
    StmmCell,
    init_pass_through,
    learned_align_step,
    matchtrans_warp,
    stmm_step,
)
from .synthdata import SequenceSample
from .validation import check_frames, check_gt_boxes, flip_image_lr, to_tensor


class VideoDetectorNet(nn.Module):
    def __init__(self, cfg: DetectorConfig, generator: torch.Generator | None = None):
        super().__init__()
        if cfg.cell not in CELL_KINDS:
            raise ContractViolation(f"unknown cell kind {cfg.cell!r}; choose from {CELL_KINDS}")
        if cfg.direction not in ("forward", "bidirectional"):
            raise ContractViolation(f"unknown direction {cfg.direction!r}")
        self.cfg = cfg
        self.backbone = Backbone(cfg, generator)
        self.rpn = RpnHead(cfg, generator)
        self.head = RoiHead(cfg, generator)
        self.cell = _make_cell(cfg, generator)
        if cfg.direction == "bidirectional":
            self.cell_bwd = _make_cell(cfg, generator)
            self.merge = nnkit.Conv2d(2 * cfg.channels, cfg.channels, 1, generator=generator)
        else:
            self.cell_bwd = None
            self.merge = None

    @property
    def cell_kind(self) -> str:
        return self.cfg.cell


def _make_cell(cfg: DetectorConfig, generator: torch.Generator | None) -> nn.Module | None:
    if cfg.cell == "none":
        return None
    if cfg.cell in ("stmm", "matchtrans"):
        return StmmCell(cfg.channels, cfg.gate, generator)
    return LearnedAlignCell(cfg.channels, cfg.pyramid_levels, cfg.gate, generator)


def memory_step(
    cell: nn.Module | None,
    cell_kind: str,
    f_t: torch.Tensor,
    m_prev: MemoryState | None,
    f_prev: torch.Tensor | None,
    cfg: DetectorConfig,
) -> MemoryState:
    """One recurrence step; memory starts from zeros when m_prev is None."""
    if m_prev is None:
        m_prev = MemoryState(torch.zeros_like(f_t), -1)
    if cell_kind == "none":
        return MemoryState(f_t, m_prev.timestep + 1)
    if cell_kind == "stmm":
        return stmm_step(m_prev, f_t, cell)
    if cell_kind == "matchtrans":
        if f_prev is not None:
            m_prev = matchtrans_warp(m_prev, f_prev, f_t, cfg.match_radius)
        return stmm_step(m_prev, f_t, cell)
    if cell_kind == "learned_align":
        return learned_align_step(m_prev, f_t, cell)
    raise ContractViolation(f"unknown cell kind {cell_kind!r}")


def bidirectional_merge(m_fwd: MemoryState, m_bwd: MemoryState, merge: nnkit.Conv2d) -> MemoryState:
    """Channel-concatenate the two traces and project back to C channels (linear 1x1)."""
    if m_fwd.M.shape != m_bwd.M.shape:
        raise ContractViolation(
            f"merge shape mismatch: {tuple(m_fwd.M.shape)} vs {tuple(m_bwd.M.shape)}"
        )
    return MemoryState(merge(torch.cat([m_fwd.M, m_bwd.M], dim=1)), m_fwd.timestep)


def averaging_merge_init(merge: nnkit.Conv2d) -> None:
    """Initialize the 1x1 merge conv to average its two C-channel halves."""
    c = merge.out_channels
    with torch.no_grad():
        merge.weight.zero_()
        merge.bias.zero_()
        for i in range(c):
            merge.weight[i, i, 0, 0] = 0.5
            merge.weight[i, c + i, 0, 0] = 0.5


def _trace(
    features: list[torch.Tensor],
    cell: nn.Module | None,
    cell_kind: str,
    cfg: DetectorConfig,
    m_init: MemoryState | None = None,
) -> list[MemoryState]:
    states: list[MemoryState] = []
    m_prev = m_init
    f_prev = None
    for f_t in features:
        m_prev = memory_step(cell, cell_kind, f_t, m_prev, f_prev, cfg)
        f_prev = f_t
        states.append(m_prev)
    return states


def video_forward(
    frames: Sequence[np.ndarray],
    net: VideoDetectorNet,
    cfg: DetectorConfig | None = None,
    score_threshold: float | None = None,
) -> tuple[list[Detections], list[MemoryState]]:
    """Detections and the memory trace for a full sequence (inference only).

    Unidirectional models are strictly causal. Bidirectional models run a
    second cell over the reversed sequence and the heads consume the merged
    memory, which is also the trace returned.
    """
    cfg = net.cfg if cfg is None else cfg
    frames = check_frames(frames)
    with torch.no_grad():
        features = [net.backbone(to_tensor(f)) for f in frames]
        trace = _trace(features, net.cell, net.cell_kind, cfg)
        if net.cfg.direction == "bidirectional":
            bwd = _trace(features[::-1], net.cell_bwd, net.cell_kind, cfg)[::-1]
            trace = [bidirectional_merge(f, b, net.merge) for f, b in zip(trace, bwd)]
        detections = [
            detect_from_feature(m.M, net.rpn, net.head, cfg, score_threshold) for m in trace
        ]
    return detections, trace


def init_from_frame_detector(
    frame_net: FrameDetectorNet,
    cfg: DetectorConfig,
    seed: int = 0,
) -> VideoDetectorNet:
    """Transfer backbone/RPN/head weights; memory cells start as pass-through.

    With a pass-through cell the day-one video detections approximate the
    frame detector's; with ``cell="none"`` the transfer is exact.
    """
    gen = torch.Generator().manual_seed(seed)
    net = VideoDetectorNet(cfg, gen)
    try:
        net.backbone.load_state_dict(frame_net.backbone.state_dict())
        net.rpn.load_state_dict(frame_net.rpn.state_dict())
        net.head.load_state_dict(frame_net.head.state_dict())
    except RuntimeError as exc:
        raise ContractViolation(f"frame detector weights incompatible with config: {exc}") from exc
    if net.cell is not None:
        init_pass_through(net.cell)
    if net.cell_bwd is not None:
        init_pass_through(net.cell_bwd)
    if net.merge is not None:
        averaging_merge_init(net.merge)
    return net


# --- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    bptt_steps: int = 5
    learning_rate: float = 1e-3
    plateau_lr: float = 1e-4
    plateau_patience: int = 5
    plateau_min_rel_improvement: float = 0.01
    momentum: float = 0.9
    epochs: int = 3
    flip_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.bptt_steps < 1:
            raise ContractViolation(f"bptt_steps must be >= 1, got {self.bptt_steps}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _sequence_gt(sample: SequenceSample, flip: bool, width: int):
    frames, gt = [], []
    for t, frame in enumerate(sample.frames):
        boxes, labels = sample.gt_arrays(t)
        if flip:
            frame = flip_image_lr(frame)
            boxes = flip_boxes_lr(boxes, width).astype(np.float32)
        frames.append(frame)
        gt.append((boxes, labels))
    return frames, gt


def train(
    net: VideoDetectorNet,
    sequences: Sequence[SequenceSample],
    tcfg: TrainConfig,
    dcfg: DetectorConfig | None = None,
    rng: np.random.Generator | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    scheduler: PlateauScheduler | None = None,
    start_epoch: int = 0,
    history: list[dict] | None = None,
    epoch_callback=None,
) -> list[dict]:
    """Truncated-BPTT fine-tuning; returns the per-epoch metric log.

    Loss is applied at every unrolled frame, occluded ones included (that is
    the signal that teaches the memory to retain hidden objects). Memory and
    the previous feature are carried detached across window boundaries. The
    optimizer/scheduler/rng/history arguments allow exact resumption from a
    checkpoint; by default fresh ones are created from ``tcfg``.
    """
    dcfg = net.cfg if dcfg is None else dcfg
    rng = np.random.default_rng(tcfg.seed) if rng is None else rng
    if optimizer is None:
        optimizer = torch.optim.SGD(net.parameters(), lr=tcfg.learning_rate, momentum=tcfg.momentum)
    if scheduler is None:
        scheduler = PlateauScheduler(
            optimizer, tcfg.plateau_lr, tcfg.plateau_patience, tcfg.plateau_min_rel_improvement
        )
    history = [] if history is None else history
    last_finite = "none"
    for epoch in range(start_epoch, tcfg.epochs):
        order = rng.permutation(len(sequences))
        total, frame_count = 0.0, 0
        for order_pos, seq_idx in enumerate(order):
            sample = sequences[seq_idx]
            width = sample.frames[0].shape[1]
            flip = bool(tcfg.flip_augment and rng.random() < 0.5)
            frames, gt = _sequence_gt(sample, flip, width)
            m_prev: MemoryState | None = None
            f_prev: torch.Tensor | None = None
            for start in range(0, len(frames), tcfg.bptt_steps):
                window = range(start, min(start + tcfg.bptt_steps, len(frames)))
                optimizer.zero_grad()
                features = [net.backbone(to_tensor(frames[t])) for t in window]
                bwd_states = None
                if net.cfg.direction == "bidirectional":
                    # backward trace restarts from zeros inside each window
                    bwd_states = _trace(features[::-1], net.cell_bwd, net.cell_kind, dcfg)[::-1]
                window_loss = features[0].new_zeros(())
                for k, t in enumerate(window):
                    m_prev = memory_step(net.cell, net.cell_kind, features[k], m_prev, f_prev, dcfg)
                    f_prev = features[k]
                    m_for_heads = m_prev
                    if bwd_states is not None:
                        m_for_heads = bidirectional_merge(m_prev, bwd_states[k], net.merge)
                    boxes, labels = gt[t]
                    boxes, labels = check_gt_boxes(boxes, labels)
                    pred = forward_train(m_for_heads.M, boxes, labels, net.rpn, net.head, dcfg, rng)
                    window_loss = window_loss + detector_loss(pred, dcfg).total
                loss = window_loss / len(window)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, sequence {seq_idx}, "
                        f"frames {window.start}-{window.stop - 1}; last finite step: {last_finite}"
                    )
                last_finite = f"epoch {epoch}, sequence {seq_idx}, loss {float(loss):.4f}"
                loss.backward()
                optimizer.step()
                total += float(loss) * len(window)
                frame_count += len(window)
                m_prev = m_prev.detached()
                f_prev = f_prev.detach()
        mean = total / max(1, frame_count)
        dropped = scheduler.update(mean)
        history.append(
            {
                "epoch": epoch,
                "loss": mean,
                "lr": optimizer.param_groups[0]["lr"],
                "lr_dropped": dropped,
            }
        )
        if epoch_callback is not None:
            epoch_callback(epoch, net, optimizer, scheduler, rng, history)
    return history


# --- estimator ------------------------------------------------------------------


class VideoDetector(ParamsMixin):
    """Sequence detector with a scikit-learn style fit/predict surface."""

    def __init__(
        self,
        cell: str = "learned_align",
        direction: str = "forward",
        num_classes: int = 3,
        channels: int = 64,
        pyramid_levels: int = 3,
        match_radius: int = 2,
        gate: str = "sigmoid",
        bptt_steps: int = 5,
        learning_rate: float = 1e-3,
        plateau_lr: float = 1e-4,
        momentum: float = 0.9,
        epochs: int = 3,
        flip_augment: bool = True,
        anchor_scales: tuple = (16.0, 32.0),
        anchor_ratios: tuple = (0.5, 1.0, 2.0),
        score_threshold: float = 0.05,
        nms_threshold: float = 0.3,
        seed: int = 0,
    ):
        self.cell = cell
        self.direction = direction
        self.num_classes = num_classes
        self.channels = channels
        self.pyramid_levels = pyramid_levels
        self.match_radius = match_radius
        self.gate = gate
        self.bptt_steps = bptt_steps
        self.learning_rate = learning_rate
        self.plateau_lr = plateau_lr
        self.momentum = momentum
        self.epochs = epochs
        self.flip_augment = flip_augment
        self.anchor_scales = anchor_scales
        self.anchor_ratios = anchor_ratios
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
            cell=self.cell,
            direction=self.direction,
            pyramid_levels=self.pyramid_levels,
            match_radius=self.match_radius,
            gate=self.gate,
        )

    def build_train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            bptt_steps=self.bptt_steps,
            learning_rate=self.learning_rate,
            plateau_lr=self.plateau_lr,
            momentum=self.momentum,
            epochs=self.epochs if epochs is None else epochs,
            flip_augment=self.flip_augment,
            seed=self.seed,
        )

    @classmethod
    def from_frame_detector(cls, frame_detector, **overrides) -> "VideoDetector":
        """Build an estimator whose net starts from transferred frame weights."""
        params = {
            k: v
            for k, v in frame_detector.get_params().items()
            if k in cls._param_names()
        }
        params.update(overrides)
        est = cls(**params)
        cfg = est.build_config()
        est.net_ = init_from_frame_detector(frame_detector.net_, cfg, seed=est.seed)
        est.config_ = cfg
        return est

    def fit(
        self,
        sequences: Sequence[SequenceSample],
        epochs: int | None = None,
        warm_start: bool = False,
    ) -> "VideoDetector":
        cfg = self.build_config()
        tcfg = self.build_train_config(epochs)
        if warm_start:
            if not hasattr(self, "net_"):
                raise RuntimeError("warm_start requires an existing net (fit or from_frame_detector)")
            net = self.net_
        else:
            net = VideoDetectorNet(cfg, torch.Generator().manual_seed(self.seed))
        self.history_ = train(net, sequences, tcfg, cfg)
        self.net_ = net
        self.config_ = cfg
        return self

    def predict(self, frames: Sequence[np.ndarray], score_threshold: float | None = None) -> list[Detections]:
        detections, _ = self.forward_trace(frames, score_threshold)
        return detections

    def forward_trace(
        self, frames: Sequence[np.ndarray], score_threshold: float | None = None
    ) -> tuple[list[Detections], list[MemoryState]]:
        if not hasattr(self, "net_"):
            raise RuntimeError("VideoDetector used before fit/from_frame_detector")
        return video_forward(frames, self.net_, self.config_, score_threshold)
