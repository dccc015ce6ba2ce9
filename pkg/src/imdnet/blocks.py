"""Neural building blocks: gating, channel attention, the decoupling encoder
block (DIDBlock), the gated-branch decoder block (TABlock) and the
cross-level degradation fusion (FBlock).

All blocks take and return ``(B, C, H, W)`` tensors and are dtype-agnostic,
so gradient checks can run them in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def conv1x1(in_ch: int, out_ch: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=1, bias=bias)


def conv3x3(in_ch: int, out_ch: int, stride: int = 1, groups: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, groups=groups)


def init_conv_(conv: nn.Conv2d) -> None:
    """Fan-in scaled normal weights, zero bias."""
    fan_in = conv.in_channels // conv.groups * conv.kernel_size[0] * conv.kernel_size[1]
    nn.init.normal_(conv.weight, 0.0, 1.0 / math.sqrt(fan_in))
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def zero_conv_(conv: nn.Conv2d) -> None:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels in half and multiply the halves elementwise."""
    if x.shape[1] % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {x.shape[1]}")
    a, b = x.chunk(2, dim=1)
    return a * b


class SimpleGate(nn.Module):
    def forward(self, x):
        return simple_gate(x)


def spatial_std(x: torch.Tensor) -> torch.Tensor:
    """Population standard deviation over H, W, shape (B, C, 1, 1).

    Returns exactly 0 (with zero gradient) where the variance vanishes,
    e.g. for a 1x1 spatial input.
    """
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    positive = var > 0
    safe = torch.where(positive, var, torch.ones_like(var))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(var))


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dimension of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, (x.shape[-1],), self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class SimplifiedChannelAttention(nn.Module):
    """GAP -> 1x1 conv -> channel-wise rescale."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv1x1(channels, channels)

    def forward(self, x):
        return x * self.conv(x.mean(dim=(2, 3), keepdim=True))


class NAFBlock(nn.Module):
    """Activation-free residual block.

    LN -> 1x1 -> 3x3 depthwise -> SG -> SCA -> 1x1, residual; then
    LN -> 1x1 -> SG -> 1x1, residual.
    """

    def __init__(self, channels: int, expand: int = 2):
        super().__init__()
        hidden = channels * expand
        self.norm1 = LayerNorm2d(channels)
        self.conv1 = conv1x1(channels, hidden)
        self.conv2 = conv3x3(hidden, hidden, groups=hidden)
        self.sg = SimpleGate()
        self.sca = SimplifiedChannelAttention(hidden // 2)
        self.conv3 = conv1x1(hidden // 2, channels)
        self.norm2 = LayerNorm2d(channels)
        self.conv4 = conv1x1(channels, hidden)
        self.conv5 = conv1x1(hidden // 2, channels)

    def forward(self, x):
        y = self.conv1(self.norm1(x))
        y = self.sg(self.conv2(y))
        y = self.conv3(self.sca(y))
        x = x + y
        y = self.conv5(self.sg(self.conv4(self.norm2(x))))
        return x + y


class Branch(nn.Module):
    """Functional branch 1x1 -> SG -> 1x1, shape preserving."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv1x1(channels, 2 * channels)
        self.sg = SimpleGate()
        self.conv2 = conv1x1(channels, channels)

    def forward(self, x):
        return self.conv2(self.sg(self.conv1(x)))


# ---------------------------------------------------------------------------
# encoder side
# ---------------------------------------------------------------------------


def apply_dynamic_kernel(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Groupwise per-sample convolution with reflect padding.

    ``kernel`` has shape (B, G, k*k); channel c uses group c // (C // G).
    """
    b, c, h, w = x.shape
    groups, taps = kernel.shape[1], kernel.shape[2]
    k = int(round(math.sqrt(taps)))
    if k * k != taps or k % 2 == 0:
        raise ShapeError(f"kernel must hold an odd square number of taps, got {taps}")
    if c % groups:
        raise ShapeError(f"{c} channels cannot be split into {groups} groups")
    if h < k or w < k:
        raise ShapeError(f"spatial dims {h}x{w} smaller than kernel size {k}")
    pad = k // 2
    patches = F.unfold(F.pad(x, (pad, pad, pad, pad), mode="reflect"), k)
    patches = patches.view(b, groups, c // groups, taps, h * w)
    out = (patches * kernel.view(b, groups, 1, taps, 1)).sum(dim=3)
    return out.view(b, c, h, w)


class DynamicFilter(nn.Module):
    """Sample-adaptive low-pass filter; the residual is the high band.

    A small generator (GAP -> 1x1 -> SG -> 1x1) predicts one k x k kernel
    per channel group.  Softmax over the taps keeps the DC gain at 1.
    """

    def __init__(self, channels: int, kernel_size: int = 3, group_size: int = 8):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError("dynamic filter kernel size must be odd")
        self.kernel_size = kernel_size
        self.groups = max(1, channels // group_size)
        if channels % self.groups:
            raise ConfigError(f"{channels} channels not divisible into {self.groups} groups")
        self.conv1 = conv1x1(channels, 2 * channels)
        self.sg = SimpleGate()
        self.conv2 = conv1x1(channels, self.groups * kernel_size * kernel_size)

    def predict_kernel(self, x):
        logits = self.conv2(self.sg(self.conv1(x.mean(dim=(2, 3), keepdim=True))))
        logits = logits.view(x.shape[0], self.groups, self.kernel_size**2)
        return torch.softmax(logits, dim=-1)

    def forward(self, x, kernel: Optional[torch.Tensor] = None):
        if kernel is None:
            kernel = self.predict_kernel(x)
        low = apply_dynamic_kernel(x, kernel)
        return x - low, low

    def partition(self, x, kernel: Optional[torch.Tensor] = None):
        """(E, F_H, F_L) with E re-anchored to the rounded sum F_H + F_L.

        ``x - low`` is rounded, so ``(x - low) + low`` can miss ``x`` by an
        ulp; returning the re-anchored E makes the partition bit-exact.
        """
        high, low = self(x, kernel)
        return high + low, high, low


class StatisticalCoefficient(nn.Module):
    """Channel coefficient from mean and std pooling.

    Each pooled vector goes through its own 1x1 -> SG -> 1x1 stack and a
    sigmoid; the two gates are summed, so the output lies in (0, 2).
    Output shape (B, C, 1, 1).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.mean_path = Branch(channels)
        self.std_path = Branch(channels)

    def forward(self, x):
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError("statistical coefficient needs non-empty spatial dims")
        mean = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.mean_path(mean)) + torch.sigmoid(self.std_path(spatial_std(x)))


class ImageInjection(nn.Module):
    """Shallow features of a pyramid image: two gated 3x3 convs whose outputs
    are concatenated with the image and squeezed by a 1x1 conv."""

    def __init__(self, channels: int, in_ch: int = 3):
        super().__init__()
        if channels % 2:
            raise ConfigError("image injection width must be even")
        half = channels // 2
        self.conv1 = conv3x3(in_ch, channels)
        self.conv2 = conv3x3(half, channels)
        self.merge = conv1x1(in_ch + 2 * half, channels)

    def forward(self, image):
        a = simple_gate(self.conv1(image))
        b = simple_gate(self.conv2(a))
        return self.merge(torch.cat([image, a, b], dim=1))


@dataclass
class EncoderLevelOutput:
    """``E`` feeds the next level, ``DI`` carries degradation information and
    ``CF`` the clean skip feature.  ``high``/``low`` are the frequency bands
    of ``E`` when the block computed them."""

    E: torch.Tensor
    DI: Optional[torch.Tensor]
    CF: torch.Tensor
    high: Optional[torch.Tensor] = None
    low: Optional[torch.Tensor] = None


def decouple(e: torch.Tensor, coefficient: torch.Tensor):
    """Split ``e`` into (DI, CF) with DI = coefficient * e and CF = e - DI.

    DI is re-derived as ``e - CF`` so that the subtraction is error free
    and ``CF + DI`` reproduces ``e`` bit-exactly whenever ``|coefficient| <= 1``.
    """
    cf = e - coefficient * e
    di = e - cf
    return di, cf


class DIDBlock(nn.Module):
    """Decoupling encoder block.

    ``inject=True`` for the first block of a level: the pyramid image is
    encoded, concatenated with the incoming feature and squeezed by a 1x1
    conv before the NAFBlock.
    """

    def __init__(self, channels: int, inject: bool = False, kernel_size: int = 3,
                 group_size: int = 8):
        super().__init__()
        self.inject = ImageInjection(channels) if inject else None
        self.fuse = conv1x1(2 * channels, channels) if inject else None
        self.naf = NAFBlock(channels)
        self.dyn_filter = DynamicFilter(channels, kernel_size, group_size)
        self.sc_high = StatisticalCoefficient(channels)
        self.sc_low = StatisticalCoefficient(channels)
        self.sc_spatial = StatisticalCoefficient(channels)

    def forward(self, e_prev, image=None) -> EncoderLevelOutput:
        if self.inject is not None:
            if image is None:
                raise ShapeError("this block expects a pyramid image")
            if image.shape[-2:] != e_prev.shape[-2:]:
                raise ShapeError(
                    f"image {tuple(image.shape[-2:])} does not match feature "
                    f"{tuple(e_prev.shape[-2:])}")
            e_prev = self.fuse(torch.cat([e_prev, self.inject(image)], dim=1))
        e = self.naf(e_prev)
        e, high, low = self.dyn_filter.partition(e)
        coef = (self.sc_high(high) + self.sc_low(low) + self.sc_spatial(e)) / 6
        di, cf = decouple(e, coef)
        return EncoderLevelOutput(e, di, cf, high, low)


class PlainEncoderBlock(nn.Module):
    """NAFBlock with the same image-injection entry; emits no DI."""

    def __init__(self, channels: int, inject: bool = False, **_):
        super().__init__()
        self.inject = ImageInjection(channels) if inject else None
        self.fuse = conv1x1(2 * channels, channels) if inject else None
        self.naf = NAFBlock(channels)

    def forward(self, e_prev, image=None) -> EncoderLevelOutput:
        if self.inject is not None:
            if image is None or image.shape[-2:] != e_prev.shape[-2:]:
                raise ShapeError("pyramid image missing or mismatched")
            e_prev = self.fuse(torch.cat([e_prev, self.inject(image)], dim=1))
        e = self.naf(e_prev)
        return EncoderLevelOutput(e, None, e)


# ---------------------------------------------------------------------------
# decoder side
# ---------------------------------------------------------------------------


def fblock_fuse(di: torch.Tensor, di_hat_prev: torch.Tensor, weight) -> torch.Tensor:
    """DI_l + W * DI_hat_prev, after the caller has aligned the shapes."""
    if di.shape != di_hat_prev.shape:
        raise ShapeError(f"cannot fuse {tuple(di.shape)} with {tuple(di_hat_prev.shape)}")
    return di + weight * di_hat_prev


FUSION_MODES = ("fblock", "sum", "concat")


class FBlock(nn.Module):
    """Fuses the running degradation stream from a deeper level into the
    current level's DI.  The deeper tensor is bilinearly resized when the
    spatial size differs and projected by a 1x1 conv.

    ``mode`` selects the aggregation: learnable scalar (``fblock``, W
    initialised to 1), plain sum, or concatenation + 1x1 conv.
    """

    def __init__(self, in_ch: int, out_ch: int, mode: str = "fblock"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.project = conv1x1(in_ch, out_ch, bias=False)
        if mode == "fblock":
            self.weight = nn.Parameter(torch.ones(()))
        elif mode == "concat":
            self.merge = conv1x1(2 * out_ch, out_ch)

    def align(self, prev, size):
        if prev.shape[-2:] != size:
            prev = F.interpolate(prev, size=size, mode="bilinear", align_corners=False)
        return self.project(prev)

    def forward(self, di, di_hat_prev):
        aligned = self.align(di_hat_prev, di.shape[-2:])
        if self.mode == "fblock":
            return fblock_fuse(di, aligned, self.weight)
        if self.mode == "sum":
            return fblock_fuse(di, aligned, 1)
        return self.merge(torch.cat([di, aligned], dim=1))


def gate_weights(dc: torch.Tensor, gate_conv: nn.Conv2d) -> torch.Tensor:
    """Sigmoid(1x1 conv(GAP(dc))) as a (B, n) matrix."""
    return torch.sigmoid(gate_conv(dc.mean(dim=(2, 3), keepdim=True))).flatten(1)


def sparse_branch_chain(dx0: torch.Tensor, weights: torch.Tensor, tau: float,
                        branches: Sequence[nn.Module]) -> torch.Tensor:
    """Run the gated branches in sequence.

    For each sample and branch k: ``dx = w_k * branch_k(dx)`` if
    ``w_k >= tau`` else ``dx`` is passed through untouched.  Branches with
    no active sample are not evaluated at all.
    """
    if weights.dim() != 2 or weights.shape[1] != len(branches):
        raise ConfigError(
            f"got {tuple(weights.shape)} gate weights for {len(branches)} branches")
    dx = dx0
    for k, branch in enumerate(branches):
        w = weights[:, k]
        active = w >= tau
        if not bool(active.any()):
            continue
        if bool(active.all()):
            dx = w.view(-1, 1, 1, 1) * branch(dx)
        else:
            idx = active.nonzero().squeeze(1)
            update = w[idx].view(-1, 1, 1, 1) * branch(dx[idx])
            dx = dx.index_copy(0, idx, update)
    return dx


class TABlock(nn.Module):
    """Gated-branch decoder block.

    The context path (LN -> 1x1 -> 3x3 dw -> SG, + projected DI_hat -> SCA
    -> 1x1) yields DC.  A general branch runs on LN(DC + input); DC also
    drives the sigmoid gate over ``n_branches`` sparsely activated branches.
    """

    def __init__(self, channels: int, n_branches: int = 3, tau: float = 0.2,
                 di_channels: Optional[int] = None):
        super().__init__()
        hidden = 2 * channels
        self.tau = float(tau)
        self.norm = LayerNorm2d(channels)
        self.conv1 = conv1x1(channels, hidden)
        self.dwconv = conv3x3(hidden, hidden, groups=hidden)
        self.sg = SimpleGate()
        self.di_proj = conv1x1(di_channels or channels, channels, bias=False)
        self.sca = SimplifiedChannelAttention(channels)
        self.conv2 = conv1x1(channels, channels)
        self.norm_general = LayerNorm2d(channels)
        self.general = Branch(channels)
        self.gate = conv1x1(channels, n_branches) if n_branches > 0 else None
        self.branches = nn.ModuleList(Branch(channels) for _ in range(n_branches))

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def context(self, d_hat, di_hat=None):
        y = self.sg(self.dwconv(self.conv1(self.norm(d_hat))))
        if di_hat is not None:
            di_hat = self.di_proj(di_hat)
            if di_hat.shape != y.shape:
                raise ShapeError(
                    f"DI_hat {tuple(di_hat.shape)} incompatible with {tuple(y.shape)}")
            y = y + di_hat
        return self.conv2(self.sca(y))

    def forward(self, d_hat, di_hat=None):
        """Returns ``(output, gate_weights)``; gate weights are (B, n)."""
        dc = self.context(d_hat, di_hat)
        dx0 = self.general(self.norm_general(dc + d_hat))
        if self.gate is None:
            return dx0, dx0.new_zeros(dx0.shape[0], 0)
        weights = gate_weights(dc, self.gate)
        return sparse_branch_chain(dx0, weights, self.tau, self.branches), weights


def initialize(module: nn.Module) -> None:
    """Fan-in normal init for every conv, then zero the TABlock gate convs."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            init_conv_(m)
    for m in module.modules():
        if isinstance(m, TABlock) and m.gate is not None:
            zero_conv_(m.gate)
