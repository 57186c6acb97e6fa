"""Differentiable building blocks and bookkeeping for the detector.

Everything downstream (backbone, proposal heads, recurrent memory cells) is
composed from the handful of ops in this module, so their conventions are
pinned here once:

* feature maps are rank-4 tensors laid out ``(batch, channels, height, width)``
* convolution weights are laid out ``(out_channels, in_channels, k, k)``
* pooling uses ceil semantics: odd trailing rows/columns form partial windows
  and contribute the max of whatever cells exist
* bilinear upsampling uses the half-pixel-centers convention (sampling
  coordinate ``(i + 0.5) / 2 - 0.5``, edges clamped), which preserves constant
  maps exactly

The module also provides parameter counting and receptive-field arithmetic
over a declarative op graph, and a central-difference gradient checker used by
the test suite against every parameterized op in the package.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation

__all__ = [
    "check_feature_map",
    "conv2d",
    "maxpool2x2",
    "bilinear_upsample2x",
    "zero_pad",
    "relu",
    "sigmoid",
    "Conv2d",
    "init_conv_weight",
    "GraphOp",
    "conv_op",
    "pool_op",
    "check_op_graph",
    "count_parameters",
    "receptive_field",
    "RFSpec",
    "grad_check",
    "grad_check_module",
]


def check_feature_map(x: torch.Tensor, *, finite: bool = False) -> torch.Tensor:
    """Validate the rank-4 ``(batch, channels, height, width)`` contract."""
    if not isinstance(x, torch.Tensor):
        raise ContractViolation(f"feature map must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() != 4:
        raise ContractViolation(f"feature map must be rank 4 (B,C,H,W), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ContractViolation(f"all feature map dims must be >= 1, got {tuple(x.shape)}")
    if finite and not torch.isfinite(x).all():
        raise ContractViolation("feature map contains non-finite values")
    return x


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """2D convolution. Output spatial dims: floor((H + 2*pad - K) / stride) + 1."""
    check_feature_map(x)
    if weight.dim() != 4:
        raise ContractViolation(f"conv weight must be rank 4 (Cout,Cin,K,K), got {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ContractViolation(
            f"channel mismatch: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )
    if stride < 1 or pad < 0:
        raise ContractViolation(f"need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def maxpool2x2(x: torch.Tensor) -> torch.Tensor:
    """2x2 stride-2 max pooling with ceil semantics: output is ceil(H/2) x ceil(W/2)."""
    check_feature_map(x)
    return F.max_pool2d(x, kernel_size=2, stride=2, ceil_mode=True)


def bilinear_upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling (half-pixel centers); output is exactly 2H x 2W."""
    check_feature_map(x)
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def zero_pad(x: torch.Tensor, pad_right: int = 0, pad_bottom: int = 0) -> torch.Tensor:
    """Append `pad_right` zero columns and `pad_bottom` zero rows."""
    check_feature_map(x)
    if pad_right not in (0, 1) or pad_bottom not in (0, 1):
        raise ContractViolation(f"pads must be 0 or 1, got right={pad_right}, bottom={pad_bottom}")
    if pad_right == 0 and pad_bottom == 0:
        return x
    return F.pad(x, (0, pad_right, 0, pad_bottom))


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def init_conv_weight(
    out_channels: int,
    in_channels: int,
    kernel_size: int,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Kaiming-uniform conv weight drawn from an explicit generator (reproducible)."""
    fan_in = in_channels * kernel_size * kernel_size
    bound = (6.0 / fan_in) ** 0.5
    w = torch.rand(out_channels, in_channels, kernel_size, kernel_size, generator=generator)
    return (w * 2.0 - 1.0) * bound


class Conv2d(nn.Module):
    """Convolution layer holding its parameters, evaluated through :func:`conv2d`.

    ``pad=None`` means "same" padding for odd kernels ((K-1)//2).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        pad: int | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.pad = (kernel_size - 1) // 2 if pad is None else pad
        self.weight = nn.Parameter(init_conv_weight(out_channels, in_channels, kernel_size, generator))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def graph_op(self) -> "GraphOp":
        return conv_op(self.kernel_size, self.in_channels, self.out_channels, self.stride, self.pad)


# --- op-graph arithmetic ---------------------------------------------------


@dataclass(frozen=True)
class GraphOp:
    """One node of a declarative op graph, enough to do parameter/RF arithmetic."""

    kind: str  # "conv" | "pool"
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    padding: int = 0


def conv_op(kernel_size: int, in_channels: int, out_channels: int, stride: int = 1, padding: int = 0) -> GraphOp:
    return GraphOp("conv", kernel_size, stride, in_channels, out_channels, padding)


def pool_op(channels: int) -> GraphOp:
    return GraphOp("pool", 2, 2, channels, channels)


@dataclass(frozen=True)
class RFSpec:
    """Receptive field of one output cell, measured at input resolution."""

    receptive_field: int
    stride: int
    offset: float


def check_op_graph(graph: Sequence[GraphOp]) -> Sequence[GraphOp]:
    for op in graph:
        if op.kind not in ("conv", "pool"):
            raise ContractViolation(f"unknown op kind {op.kind!r}")
        if op.kernel_size < 1 or op.stride < 1:
            raise ContractViolation(f"kernel and stride must be >= 1, got {op}")
        if op.kind == "pool" and op.in_channels != op.out_channels:
            raise ContractViolation(f"pooling cannot change channel count: {op}")
    for prev, cur in zip(graph, graph[1:]):
        if prev.out_channels != cur.in_channels:
            raise ContractViolation(
                f"channel mismatch between adjacent ops: {prev.out_channels} -> {cur.in_channels}"
            )
    return graph


def count_parameters(graph: Sequence[GraphOp]) -> int:
    """Weights + biases of every conv in the graph; pooling contributes nothing."""
    check_op_graph(graph)
    total = 0
    for op in graph:
        if op.kind == "conv":
            total += op.kernel_size * op.kernel_size * op.in_channels * op.out_channels + op.out_channels
    return total


def receptive_field(graph: Sequence[GraphOp]) -> RFSpec:
    """Theoretical receptive field via the recurrence RF += (K-1) * stride_product.

    Pooling is treated as pure downsampling: it doubles the stride product and
    contributes no kernel extent of its own, so the numbers quantify how far a
    conv placed after the poolings reaches, which is the quantity the
    coarse-scale recurrence trades on.
    """
    check_op_graph(graph)
    rf = 1
    stride_product = 1
    offset = 0.0
    for op in graph:
        if op.kind == "conv":
            rf += (op.kernel_size - 1) * stride_product
            offset += ((op.kernel_size - 1) / 2.0 - op.padding) * stride_product
        stride_product *= op.stride
    return RFSpec(receptive_field=rf, stride=stride_product, offset=offset)


# --- gradient checking -----------------------------------------------------


def _as_output_tuple(out) -> tuple[torch.Tensor, ...]:
    if isinstance(out, torch.Tensor):
        return (out,)
    return tuple(out)


def grad_check(
    fn: Callable[..., torch.Tensor | tuple[torch.Tensor, ...]],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    All inputs are promoted to float64 leaves. The output is contracted
    against a fixed random probe so every output element participates. The
    relative error for one parameter is |analytic - numeric| / max(1, |analytic|);
    the max over all elements of all inputs is returned. Non-finite gradients
    yield ``inf`` rather than raising.
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    leaves = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    probe_gen = torch.Generator().manual_seed(0)

    outs = _as_output_tuple(fn(*leaves))
    probes = [torch.randn(o.shape, generator=probe_gen, dtype=torch.float64) for o in outs]

    def objective() -> torch.Tensor:
        vals = _as_output_tuple(fn(*leaves))
        return sum((v * p).sum() for v, p in zip(vals, probes))

    scalar = sum((o * p).sum() for o, p in zip(outs, probes))
    grads = torch.autograd.grad(scalar, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, grads):
            if grad is None:
                grad = torch.zeros_like(leaf)
            if not torch.isfinite(grad).all():
                return float("inf")
            flat = leaf.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = objective().item()
                flat[i] = orig - eps
                f_minus = objective().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                analytic = gflat[i].item()
                err = abs(analytic - numeric) / max(1.0, abs(analytic))
                worst = max(worst, err)
    return worst


def grad_check_module(
    module: nn.Module,
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
) -> float:
    """Run :func:`grad_check` over a module's inputs and all its parameters."""
    m = copy.deepcopy(module).double()
    names = [name for name, _ in m.named_parameters()]
    params = [p.detach() for _, p in m.named_parameters()]
    n_inputs = len(inputs)

    def fn(*tensors: torch.Tensor):
        xs = tensors[:n_inputs]
        overrides = dict(zip(names, tensors[n_inputs:]))
        return torch.func.functional_call(m, overrides, tuple(xs))

    all_inputs = [x.detach().double() for x in inputs] + list(params)
    return grad_check(fn, all_inputs, eps)
