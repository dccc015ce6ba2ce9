"""End-to-end multi-scale restoration network."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    DIDBlock,
    EncoderLevelOutput,
    FBlock,
    FUSION_MODES,
    NAFBlock,
    PlainEncoderBlock,
    TABlock,
    conv1x1,
    conv3x3,
    initialize,
    zero_conv_,
)
from .errors import ConfigError, ShapeError

VARIANTS = ("baseline", "did_only", "tab_only", "did_tab", "full")
SKIP_MODES = ("cf", "e")


@dataclass
class ModelConfig:
    base_width: int = 16
    enc_blocks: Tuple[int, ...] = (4, 4, 4, 8)
    mid_blocks: int = 8
    dec_blocks: Tuple[int, ...] = (2, 2, 2, 2)
    gated_branches: int = 3
    tau: float = 0.2
    scales: int = 4
    kernel_size: int = 3
    df_group: int = 8
    variant: str = "full"
    fusion: str = "fblock"
    skip: str = "cf"

    def __post_init__(self):
        self.enc_blocks = tuple(int(b) for b in self.enc_blocks)
        self.dec_blocks = tuple(int(b) for b in self.dec_blocks)
        self.validate()

    def validate(self):
        if self.base_width < 2 or self.base_width % 2:
            raise ConfigError("base_width must be an even integer >= 2")
        if len(self.enc_blocks) != self.scales or len(self.dec_blocks) != self.scales:
            raise ConfigError("enc_blocks and dec_blocks need one entry per scale")
        if min(self.enc_blocks + self.dec_blocks) < 1 or self.mid_blocks < 1:
            raise ConfigError("block counts must be >= 1")
        if self.gated_branches < 0:
            raise ConfigError("gated_branches must be >= 0")
        if not 0.0 <= self.tau <= 1.01:
            raise ConfigError("tau must lie in [0, 1] (1.01 disables every branch)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"unknown skip mode {self.skip!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["enc_blocks"] = list(self.enc_blocks)
        d["dec_blocks"] = list(self.dec_blocks)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class NetworkOutput:
    """Lists are ordered full scale first."""

    restored: List[torch.Tensor]
    residuals: List[torch.Tensor]
    level_outputs: List[EncoderLevelOutput]
    gate_log: List[torch.Tensor] = field(default_factory=list)

    def decoupling_pairs(self):
        return [(lo.CF, lo.DI) for lo in self.level_outputs if lo.DI is not None]


def degradation_stream(level_dis: Sequence[torch.Tensor],
                       fusers: Sequence[nn.Module]) -> List[torch.Tensor]:
    """Running cross-level fusion of DI tensors, deepest first.

    ``fusers[j]`` folds the running stream into ``level_dis[j + 1]``.
    Returns the fused DI_hat for every level after the deepest; a single
    input is returned unchanged.
    """
    if len(level_dis) == 0:
        raise ConfigError("degradation stream needs at least one DI tensor")
    if len(fusers) != len(level_dis) - 1:
        raise ConfigError(f"{len(fusers)} fusers for {len(level_dis)} DI tensors")
    running = level_dis[0]
    if len(level_dis) == 1:
        return [running]
    fused = []
    for di, fuser in zip(level_dis[1:], fusers):
        running = fuser(di, running)
        fused.append(running)
    return fused


def _stack(blocks) -> nn.ModuleDict:
    return nn.ModuleDict((f"block{b}", blk) for b, blk in enumerate(blocks))


class Upsample(nn.Module):
    """1x1 conv doubling channels, then 2x pixel shuffle (net: channels / 2)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv1x1(channels, 2 * channels, bias=False)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), 2)


class IMDNet(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        n = cfg.scales
        widths = [cfg.base_width * 2**i for i in range(n)]
        self.widths = widths
        did_encoder = cfg.variant in ("did_only", "did_tab", "full")
        tab_decoder = cfg.variant in ("tab_only", "did_tab", "full")
        self.emits_di = did_encoder
        self.injects_di = did_encoder and tab_decoder
        self.tab_decoder = tab_decoder
        enc_cls = DIDBlock if did_encoder else PlainEncoderBlock
        block_kw = dict(kernel_size=cfg.kernel_size, group_size=cfg.df_group)

        self.stem = conv3x3(3, widths[0])
        self.encoder = nn.ModuleDict(
            (f"level{i}", _stack(enc_cls(widths[i], inject=(b == 0), **block_kw)
                                 for b in range(cfg.enc_blocks[i])))
            for i in range(n))
        self.down = nn.ModuleList(conv3x3(widths[i], widths[i + 1], stride=2)
                                  for i in range(n - 1))
        self.middle = _stack(enc_cls(widths[-1], **block_kw) for _ in range(cfg.mid_blocks))

        # decoder level j runs at encoder scale n-1-j
        self.up = nn.ModuleList()
        self.skip_fuse = nn.ModuleList()
        self.decoder = nn.ModuleDict()
        self.heads = nn.ModuleList()
        self.fusers = nn.ModuleList()
        for j in range(n):
            i = n - 1 - j
            w = widths[i]
            if j > 0:
                self.up.append(Upsample(widths[i + 1]))
            self.skip_fuse.append(conv1x1(2 * w, w))
            if tab_decoder:
                stage = [TABlock(w, cfg.gated_branches, cfg.tau) for _ in range(cfg.dec_blocks[j])]
            else:
                stage = [NAFBlock(w) for _ in range(cfg.dec_blocks[j])]
            self.decoder[f"level{j}"] = _stack(stage)
            self.heads.append(conv3x3(w, 3))
            if self.injects_di and cfg.variant == "full":
                deeper = widths[-1] if j == 0 else widths[i + 1]
                self.fusers.append(FBlock(deeper, w, cfg.fusion))
        initialize(self)

    # -- helpers -----------------------------------------------------------

    def tab_blocks(self) -> List[TABlock]:
        return [m for m in self.decoder.modules() if isinstance(m, TABlock)]

    def set_tau(self, tau: float) -> None:
        self.cfg.tau = float(tau)
        for blk in self.tab_blocks():
            blk.tau = float(tau)

    def zero_heads(self) -> None:
        for head in self.heads:
            zero_conv_(head)

    def total_gated_branches(self) -> int:
        return sum(b.n_branches for b in self.tab_blocks())

    def check_pyramid(self, pyramid):
        n = self.cfg.scales
        if len(pyramid) != n:
            raise ConfigError(f"expected a {n}-level pyramid, got {len(pyramid)}")
        b, c, h, w = pyramid[0].shape
        if c != 3:
            raise ShapeError(f"expected 3 image channels, got {c}")
        d = self.cfg.divisor
        if h % d or w % d:
            raise ShapeError(f"image dims {h}x{w} not divisible by {d}")
        for k, img in enumerate(pyramid):
            if tuple(img.shape) != (b, 3, h >> k, w >> k):
                raise ShapeError(f"pyramid level {k} has shape {tuple(img.shape)}")

    # -- forward -----------------------------------------------------------

    def encode(self, pyramid) -> List[EncoderLevelOutput]:
        """Returns the per-level outputs, shallow first, middle block last."""
        outputs = []
        e = self.stem(pyramid[0])
        for i, stack in enumerate(self.encoder.values()):
            if i > 0:
                e = self.down[i - 1](e)
            out = None
            for b, blk in enumerate(stack.values()):
                out = blk(e, pyramid[i] if b == 0 else None)
                e = out.E
            outputs.append(out)
        for blk in self.middle.values():
            out = blk(e)
            e = out.E
        outputs.append(out)
        return outputs

    def _skip(self, out: EncoderLevelOutput):
        return out.CF if self.cfg.skip == "cf" else out.E

    def decoder_di(self, levels: List[EncoderLevelOutput]) -> List[Optional[torch.Tensor]]:
        """DI_hat for each decoder level (deepest first)."""
        n = self.cfg.scales
        if not self.injects_di:
            return [None] * n
        # deepest first: middle, level n-1, ..., level 0
        dis = [levels[-1].DI] + [levels[i].DI for i in reversed(range(n))]
        if self.cfg.variant == "did_tab":
            return dis[1:]
        return degradation_stream(dis, self.fusers)

    def forward(self, pyramid) -> NetworkOutput:
        self.check_pyramid(pyramid)
        n = self.cfg.scales
        levels = self.encode(pyramid)
        di_hats = self.decoder_di(levels)
        d = self._skip(levels[-1])
        residuals = [None] * n
        gate_log = []
        for j in range(n):
            i = n - 1 - j
            if j > 0:
                d = self.up[j - 1](d)
            d = self.skip_fuse[j](torch.cat([d, self._skip(levels[i])], dim=1))
            for blk in self.decoder[f"level{j}"].values():
                if isinstance(blk, TABlock):
                    d, gates = blk(d, di_hats[j])
                    gate_log.append(gates)
                else:
                    d = blk(d)
            residuals[i] = self.heads[j](d)
        restored = [r + img for r, img in zip(residuals, pyramid)]
        return NetworkOutput(restored, residuals, levels, gate_log)

    @torch.no_grad()
    def extract_embeddings(self, pyramid) -> torch.Tensor:
        """GAP-pooled middle-block DI, one vector per sample.

        Falls back to the middle-block feature for variants without DI.
        """
        self.check_pyramid(pyramid)
        mid = self.encode(pyramid)[-1]
        src = mid.DI if mid.DI is not None else mid.E
        return src.mean(dim=(2, 3))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def summary(model: IMDNet) -> str:
    cfg = model.cfg
    lines = [f"IMDNet variant={cfg.variant} fusion={cfg.fusion} skip={cfg.skip}",
             f"  widths      {model.widths}",
             f"  enc_blocks  {list(cfg.enc_blocks)}  mid_blocks {cfg.mid_blocks}",
             f"  dec_blocks  {list(cfg.dec_blocks)}  gated_branches {cfg.gated_branches}"
             f"  tau {cfg.tau}"]
    for name, child in model.named_children():
        lines.append(f"  {name:<11} {count_parameters(child):>10,d} params")
    lines.append(f"  total       {count_parameters(model):>10,d} params")
    return "\n".join(lines)
