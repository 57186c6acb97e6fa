"""Recurrent memory cells that aggregate backbone features over time.

Three alignment strategies are provided:

* :class:`StmmCell` — gated convolutional recurrence applied cell-by-cell,
  with no spatial alignment between consecutive frames.
* :func:`matchtrans_warp` — parameter-free warping of the previous memory
  using correlation between consecutive backbone features, applied before the
  gated update.
* :class:`LearnedAlignCell` — the gated recurrence runs only at the coarsest
  level of a max-pool pyramid (wider effective receptive field per added
  parameter), and the updated memory is decoded back to full resolution with
  bilinear upsampling and skip connections from the current frame's feature
  pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nnkit
from .errors import ContractViolation

CELL_KINDS = ("none", "stmm", "matchtrans", "learned_align")


@dataclass
class MemoryState:
    """Memory feature map plus the timestep it belongs to."""

    M: torch.Tensor
    timestep: int

    def detached(self) -> "MemoryState":
        return MemoryState(self.M.detach(), self.timestep)


def _check_same_dims(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# --- gated recurrence ---------------------------------------------------------


class StmmCell(nn.Module):
    """Convolutional gated memory update.

    z and r gates combine the incoming feature and the previous memory; the
    candidate memory is ReLU of a reset-modulated combination; the output
    interpolates previous memory and candidate through z. Gate nonlinearity is
    sigmoid by default; ``gate="relu_norm"`` uses ReLU rescaled by the
    per-sample max (clamped to at least 1), which also lands in [0, 1].
    """

    def __init__(
        self,
        channels: int,
        gate: str = "sigmoid",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if gate not in ("sigmoid", "relu_norm"):
            raise ContractViolation(f"unknown gate kind {gate!r}")
        self.channels = channels
        self.gate_kind = gate
        self.wz = nnkit.Conv2d(channels, channels, 3, generator=generator)
        self.uz = nnkit.Conv2d(channels, channels, 3, generator=generator)
        self.wr = nnkit.Conv2d(channels, channels, 3, generator=generator)
        self.ur = nnkit.Conv2d(channels, channels, 3, generator=generator)
        self.wc = nnkit.Conv2d(channels, channels, 3, generator=generator)
        self.uc = nnkit.Conv2d(channels, channels, 3, generator=generator)

    def _gate(self, x: torch.Tensor) -> torch.Tensor:
        if self.gate_kind == "sigmoid":
            return torch.sigmoid(x)
        g = nnkit.relu(x)
        peak = g.amax(dim=(1, 2, 3), keepdim=True)
        return g / peak.clamp(min=1.0)

    def gates(self, f_t: torch.Tensor, m_prev: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self._gate(self.wz(f_t) + self.uz(m_prev))
        r = self._gate(self.wr(f_t) + self.ur(m_prev))
        return z, r

    def forward(self, f_t: torch.Tensor, m_prev: torch.Tensor) -> torch.Tensor:
        _check_same_dims(f_t, m_prev, "stmm inputs")
        z, r = self.gates(f_t, m_prev)
        candidate = nnkit.relu(self.wc(f_t) + self.uc(r * m_prev))
        return (1.0 - z) * m_prev + z * candidate


def stmm_step(m_prev: MemoryState, f_t: torch.Tensor, cell: StmmCell) -> MemoryState:
    nnkit.check_feature_map(f_t)
    return MemoryState(cell(f_t, m_prev.M), m_prev.timestep + 1)


# --- correlation-based warping -------------------------------------------------


def compute_affinity(f_prev: torch.Tensor, f_t: torch.Tensor, radius: int = 2) -> torch.Tensor:
    """Convex combination weights over each cell's (2r+1)^2 neighborhood.

    The weight of previous-frame neighbor (i, j) at output cell (y, x) is the
    softmax (over the neighborhood, scaled by 1/sqrt(C)) of the feature
    correlation <f_t(y, x), f_prev(y+i, x+j)>. Out-of-bounds neighbors are
    excluded from the normalization. Shape: (B, (2r+1)^2, H, W); each cell's
    weights are nonnegative and sum to 1.
    """
    nnkit.check_feature_map(f_prev)
    nnkit.check_feature_map(f_t)
    _check_same_dims(f_prev, f_t, "affinity inputs")
    if radius < 1:
        raise ContractViolation(f"radius must be >= 1, got {radius}")
    b, c, h, w = f_prev.shape
    k = 2 * radius + 1
    n = k * k
    patches = F.unfold(f_prev, k, padding=radius).view(b, c, n, h * w)
    scores = (f_t.view(b, c, 1, h * w) * patches).sum(dim=1) / math.sqrt(c)
    valid = F.unfold(f_prev.new_ones((b, 1, h, w)), k, padding=radius).view(b, n, h * w) > 0.5
    scores = scores.masked_fill(~valid, float("-inf"))
    return torch.softmax(scores, dim=1).view(b, n, h, w)


def matchtrans_warp(
    m_prev: MemoryState,
    f_prev: torch.Tensor,
    f_t: torch.Tensor,
    radius: int = 2,
) -> MemoryState:
    """Warp the previous memory along correlation-derived affinity weights.

    Each output cell is a convex combination of the previous memory over the
    neighborhood, so values never leave the local min/max envelope. Parameter
    free; the timestep is unchanged (warping aligns, it does not advance time).
    """
    _check_same_dims(m_prev.M, f_prev, "matchtrans memory/feature")
    aff = compute_affinity(f_prev, f_t, radius)
    b, c, h, w = m_prev.M.shape
    k = 2 * radius + 1
    n = k * k
    patches = F.unfold(m_prev.M, k, padding=radius).view(b, c, n, h * w)
    warped = (aff.view(b, 1, n, h * w) * patches).sum(dim=2).view(b, c, h, w)
    return MemoryState(warped, m_prev.timestep)


# --- pyramid encoder/decoder ----------------------------------------------------


def build_pyramid(x: torch.Tensor, levels: int = 3) -> list[torch.Tensor]:
    """Level 0 is the input; each further level is a ceil-semantics 2x2 max pool.

    Requires min(H, W) >= 2^(levels-1) so that every pooling actually halves.
    """
    nnkit.check_feature_map(x)
    if levels < 1:
        raise ContractViolation(f"levels must be >= 1, got {levels}")
    if min(x.shape[2], x.shape[3]) < 2 ** (levels - 1):
        raise ContractViolation(
            f"input {x.shape[2]}x{x.shape[3]} too small for a {levels}-level pyramid"
        )
    pyramid = [x]
    for _ in range(levels - 1):
        pyramid.append(nnkit.maxpool2x2(pyramid[-1]))
    return pyramid


def _fit_spatial(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Match x to (height, width) by a 0/1 crop or zero pad per axis.

    With ceil-semantics pyramids, 2x upsampling overshoots odd targets by one
    row/column, so the parity fix here is a right/bottom crop; the zero-pad
    branch covers the complementary convention and keeps the contract total.
    """
    dh = x.shape[2] - height
    dw = x.shape[3] - width
    if abs(dh) > 1 or abs(dw) > 1:
        raise ContractViolation(f"cannot fit {tuple(x.shape[2:])} to {(height, width)}: gap exceeds 1")
    if dh > 0 or dw > 0:
        x = x[:, :, : min(x.shape[2], height), : min(x.shape[3], width)]
    if x.shape[2] < height or x.shape[3] < width:
        x = nnkit.zero_pad(x, pad_right=width - x.shape[3], pad_bottom=height - x.shape[2])
    return x


def decode_upsample(
    coarse: torch.Tensor,
    skips: list[torch.Tensor],
    skip_convs: nn.ModuleList | list[nn.Module],
) -> torch.Tensor:
    """Climb from the coarsest pyramid level back to full resolution.

    ``skips`` is the fine-to-coarse pyramid of the current frame's backbone
    feature; ``skip_convs`` holds one 3x3 conv (2C -> C, ReLU) per level above
    the coarsest. Each stage: bilinear 2x upsample, 0/1 spatial fit to the
    skip level's dims, channel-concatenate with the skip, convolve. With one
    level this is the identity.
    """
    _check_same_dims(coarse, skips[-1], "decoder coarse level")
    if len(skip_convs) != len(skips) - 1:
        raise ContractViolation(
            f"need {len(skips) - 1} skip convs for {len(skips)} levels, got {len(skip_convs)}"
        )
    x = coarse
    for level in range(len(skips) - 2, -1, -1):
        skip = skips[level]
        x = nnkit.bilinear_upsample2x(x)
        x = _fit_spatial(x, skip.shape[2], skip.shape[3])
        x = nnkit.relu(skip_convs[level](torch.cat([x, skip], dim=1)))
    return x


class LearnedAlignCell(nn.Module):
    """Gated recurrence at the coarsest pyramid level, decoded with skips."""

    def __init__(
        self,
        channels: int,
        levels: int = 3,
        gate: str = "sigmoid",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if levels < 1:
            raise ContractViolation(f"levels must be >= 1, got {levels}")
        self.channels = channels
        self.levels = levels
        self.stmm = StmmCell(channels, gate, generator)
        self.skip_convs = nn.ModuleList(
            nnkit.Conv2d(2 * channels, channels, 3, generator=generator) for _ in range(levels - 1)
        )

    def forward(self, f_t: torch.Tensor, m_prev: torch.Tensor) -> torch.Tensor:
        _check_same_dims(f_t, m_prev, "learned-align inputs")
        skips = build_pyramid(f_t, self.levels)
        memory_pyramid = build_pyramid(m_prev, self.levels)
        coarse = self.stmm(skips[-1], memory_pyramid[-1])
        return decode_upsample(coarse, skips, self.skip_convs)


def learned_align_step(m_prev: MemoryState, f_t: torch.Tensor, cell: LearnedAlignCell) -> MemoryState:
    nnkit.check_feature_map(f_t)
    return MemoryState(cell(f_t, m_prev.M), m_prev.timestep + 1)


def cell_param_delta(channels: int, levels: int) -> tuple[int, int]:
    """Parameters added vs a single-level cell, and the receptive-field multiplier.

    The only additions for a deeper pyramid are the per-level skip convs
    (each 3x3, 2C -> C, with bias), so the parameter delta is linear in the
    level count, while the coarse recurrence's reach doubles per level.
    """
    if channels < 1 or levels < 1:
        raise ContractViolation(f"need channels, levels >= 1, got {channels}, {levels}")
    per_skip = nnkit.count_parameters([nnkit.conv_op(3, 2 * channels, channels, padding=1)])
    delta_params = (levels - 1) * per_skip
    graph = [nnkit.pool_op(channels)] * (levels - 1) + [nnkit.conv_op(3, channels, channels, padding=1)]
    rf = nnkit.receptive_field(graph)
    multiplier = (rf.receptive_field - 1) // 2
    return delta_params, multiplier


# --- initialization helpers ------------------------------------------------------


def _identity_kernel_(conv: nnkit.Conv2d, in_offset: int = 0) -> None:
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        center = conv.kernel_size // 2
        for c in range(conv.out_channels):
            conv.weight[c, in_offset + c, center, center] = 1.0


def _zero_conv_(conv: nnkit.Conv2d, bias: float = 0.0) -> None:
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.fill_(bias)


def init_pass_through(cell: nn.Module, z_bias: float = 6.0) -> None:
    """Initialize a cell so its first output approximates the incoming feature.

    The update gate is biased open (sigmoid(z_bias) ~ 1), the candidate path
    is the identity on the incoming feature, and decoder skip convs (when
    present) copy the skip branch. Used when transferring frame-detector
    weights so the video model starts out behaving like the frame model.
    """
    if isinstance(cell, LearnedAlignCell):
        init_pass_through(cell.stmm, z_bias)
        for conv in cell.skip_convs:
            _identity_kernel_(conv, in_offset=cell.channels)
        return
    if not isinstance(cell, StmmCell):
        raise ContractViolation(f"cannot pass-through initialize {type(cell).__name__}")
    _zero_conv_(cell.wz, bias=z_bias)
    _zero_conv_(cell.uz)
    _zero_conv_(cell.wr)
    _zero_conv_(cell.ur)
    _identity_kernel_(cell.wc)
    _zero_conv_(cell.uc)
