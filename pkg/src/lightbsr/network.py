"""LightBSR network: feature extractor, IDR estimation and adaptation, upscaler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

ESTIMATOR_STRIDES = (1, 2, 1, 2, 1, 1)
IDR_SHUFFLE = 4


class IDRPair(NamedTuple):
    spatial: torch.Tensor  # (B, 8, H, W)
    channel: torch.Tensor  # (B, 48)


def conv(cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="reflect", bias=bias)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    return F.pixel_shuffle(x, r)


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvNeXtBlock(nn.Module):
    """Depthwise 7x7 -> LN -> 1x1 expand -> GELU -> 1x1 contract (+ skip).

    ``residual=False`` returns the body only, for callers that provide the
    skip connection themselves.
    """

    def __init__(self, channels: int, expansion: int = 2, residual: bool = True):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 7, padding=3, groups=channels, padding_mode="reflect")
        self.norm = LayerNorm2d(channels)
        self.pw1 = nn.Conv2d(channels, channels * expansion, 1)
        self.pw2 = nn.Conv2d(channels * expansion, channels, 1)
        self.residual = residual

    def forward(self, x):
        y = self.pw2(F.gelu(self.pw1(self.norm(self.dw(x)))))
        return x + y if self.residual else y


class IDREstimator(nn.Module):
    """Six 3x3 convs, LeakyReLU(0.1) in between, stride 2 at layers 2 and 4."""

    min_size = 8

    def __init__(self, in_channels: int, widths=(16, 32, 32, 64, 64, 128)):
        super().__init__()
        layers = []
        cin = in_channels
        for i, (w, s) in enumerate(zip(widths, ESTIMATOR_STRIDES)):
            layers.append(conv(cin, w, 3, stride=s))
            if i < len(widths) - 1:
                layers.append(nn.LeakyReLU(0.1))
            cin = w
        self.body = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.out_channels = widths[-1]

    def forward(self, x):
        if x.shape[-2] < self.min_size or x.shape[-1] < self.min_size:
            raise ValueError(f"estimator input {tuple(x.shape[-2:])} smaller than 8x8")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"estimator expects {self.in_channels} channels, got {x.shape[1]}")
        return self.body(x)


class IDRConverter(nn.Module):
    """Raw IDR -> (spatial IDR at LR resolution, channel IDR vector)."""

    def __init__(self, raw_channels: int, spatial: int = 8, channel: int = 48):
        super().__init__()
        if raw_channels % (IDR_SHUFFLE ** 2):
            raise ValueError("raw IDR channels must be divisible by 16")
        self.spatial_conv = conv(raw_channels // IDR_SHUFFLE ** 2, spatial)
        self.fc = nn.Linear(raw_channels, channel)

    def forward(self, raw: torch.Tensor, size: tuple[int, int]) -> IDRPair:
        h, w = size
        s = pixel_shuffle(raw, IDR_SHUFFLE)[..., :h, :w]
        spatial = self.spatial_conv(s)
        channel = self.fc(raw.mean(dim=(2, 3)))
        return IDRPair(spatial, channel)


class IDRCorrector(nn.Module):
    """IDR-CB: residual two-layer GELU refinement of both IDRs."""

    def __init__(self, spatial: int = 8, channel: int = 48):
        super().__init__()
        self.s1 = conv(spatial, spatial)
        self.s2 = conv(spatial, spatial)
        self.c1 = nn.Linear(channel, channel)
        self.c2 = nn.Linear(channel, channel)

    def forward(self, idr: IDRPair) -> IDRPair:
        s = idr.spatial + self.s2(F.gelu(self.s1(idr.spatial)))
        c = idr.channel + self.c2(F.gelu(self.c1(idr.channel)))
        return IDRPair(s, c)


class AdaptBlock(nn.Module):
    """IDR-AB.  Splits features 1:3 into a spatially and a channel-wise gated part."""

    def __init__(self, cfg: ModelConfig, spatial_mod: bool = True, channel_mod: bool = True):
        super().__init__()
        c = cfg.trunk_width
        self.cs = c // 4
        self.cc = c - self.cs
        self.spatial_mod = spatial_mod
        self.channel_mod = channel_mod
        if spatial_mod:
            hidden = cfg.gate_hidden or c // 2
            self.sg1 = conv(self.cs + cfg.spatial_idr, hidden)
            self.sg2 = conv(hidden, self.cs)
            self.fuse = conv(self.cs, self.cs, 5)
        if channel_mod:
            cin = self.cc + cfg.channel_idr
            hidden = max(1, cin // cfg.fc_reduction)
            self.cg1 = nn.Linear(cin, hidden)
            self.cg2 = nn.Linear(hidden, self.cc)
        self.mix = ConvNeXtBlock(c, cfg.convnext_expansion, residual=False)
        self.last_gates: Optional[tuple] = None

    def forward(self, f: torch.Tensor, idr: IDRPair) -> torch.Tensor:
        if f.shape[1] != self.cs + self.cc:
            raise ValueError(f"expected {self.cs + self.cc} feature channels, got {f.shape[1]}")
        fs, fc = f[:, : self.cs], f[:, self.cs :]
        gate_s = gate_c = None
        if self.spatial_mod:
            gate_s = torch.sigmoid(self.sg2(F.gelu(self.sg1(torch.cat([fs, idr.spatial], 1)))))
            fs = self.fuse(fs * gate_s)
        if self.channel_mod:
            z = torch.cat([fc.mean(dim=(2, 3)), idr.channel], 1)
            gate_c = torch.sigmoid(self.cg2(F.gelu(self.cg1(z))))
            fc = fc * gate_c[:, :, None, None]
        self.last_gates = (gate_s, gate_c)
        return f + self.mix(torch.cat([fs, fc], 1))


class AdaptGroup(nn.Module):
    """IDR-AG: n adaptation blocks, ConvNeXt block, 3x3 conv, group residual."""

    def __init__(self, cfg: ModelConfig, n_blocks: int, spatial_mod=True, channel_mod=True):
        super().__init__()
        self.blocks = nn.ModuleList(AdaptBlock(cfg, spatial_mod, channel_mod) for _ in range(n_blocks))
        self.mix = ConvNeXtBlock(cfg.trunk_width, cfg.convnext_expansion)
        self.conv = conv(cfg.trunk_width, cfg.trunk_width)

    def forward(self, f, idr: IDRPair):
        x = f
        for blk in self.blocks:
            x = blk(x, idr)
        return f + self.conv(self.mix(x))


class AdaptModule(nn.Module):
    """IDR-AM: chain of (corrector, group) stages, final conv, global residual.

    Each corrector refines the pair handed over by the previous stage, so the
    corrections accumulate along the chain.
    """

    def __init__(self, cfg: ModelConfig, spatial_mod=True, channel_mod=True, correction=True):
        super().__init__()
        self.groups = nn.ModuleList(
            AdaptGroup(cfg, cfg.n_blocks, spatial_mod, channel_mod) for _ in range(cfg.n_groups)
        )
        self.correctors = (
            nn.ModuleList(IDRCorrector(cfg.spatial_idr, cfg.channel_idr) for _ in range(cfg.n_groups))
            if correction
            else None
        )
        self.conv = conv(cfg.trunk_width, cfg.trunk_width)

    def forward(self, f, idr: IDRPair):
        x = f
        for i, group in enumerate(self.groups):
            if self.correctors is not None:
                idr = self.correctors[i](idr)
            x = group(x, idr)
        return f + self.conv(x)


class Upscaler(nn.Module):
    def __init__(self, channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.pre = conv(channels, 3 * scale * scale)
        self.post = conv(3, 3)

    def forward(self, f):
        return self.post(pixel_shuffle(self.pre(f), self.scale))


@dataclass(frozen=True)
class Branches:
    """Which inputs/branches a model instance actually uses."""

    estimator_in_channels: int
    spatial_modulation: bool
    channel_modulation: bool
    idr_correction: bool

    @property
    def uses_idr(self) -> bool:
        return self.spatial_modulation or self.channel_modulation


class LightBSR(nn.Module):
    """Blind SR network.

    The feature extractor always sees the 3-channel LR image.  The estimator
    sees ``estimator_input`` (LR image, or LR image + degradation prior for
    the teacher); an externally supplied :class:`IDRPair` bypasses it.
    """

    def __init__(
        self,
        cfg: ModelConfig = ModelConfig(),
        spatial_mod: bool = True,
        channel_mod: bool = True,
        correction: bool = True,
    ):
        super().__init__()
        self.cfg = cfg
        self.branches = Branches(cfg.in_channels, spatial_mod, channel_mod, correction)
        c = cfg.trunk_width
        self.extractor = conv(3, c)
        self.estimator = IDREstimator(cfg.in_channels, cfg.estimator_widths)
        self.converter = IDRConverter(cfg.estimator_widths[-1], cfg.spatial_idr, cfg.channel_idr)
        self.body = AdaptModule(cfg, spatial_mod, channel_mod, correction)
        self.upscaler = Upscaler(c, cfg.scale)
        init_weights(self)

    def estimate(self, est_input: torch.Tensor, raw_noise: Optional[torch.Tensor] = None) -> IDRPair:
        raw = self.estimator(est_input)
        if raw_noise is not None:
            raw = raw + raw_noise
        return self.converter(raw, est_input.shape[-2:])

    def forward(
        self,
        lr: torch.Tensor,
        est_input: Optional[torch.Tensor] = None,
        idr: Optional[IDRPair] = None,
    ) -> torch.Tensor:
        if idr is None:
            idr = self.estimate(lr if est_input is None else est_input)
        f = self.extractor(lr)
        f = self.body(f, idr)
        return self.upscaler(f)

    def sr_parameters(self):
        """Parameters of the deployed SR path (estimator included)."""
        return list(self.parameters())

    def idr_parameters(self):
        return list(self.estimator.parameters()) + list(self.converter.parameters())


def init_weights(model: nn.Module) -> None:
    """Fan-in scaled uniform init; gate output layers start at zero (gates = 0.5)."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / fan_in ** 0.5
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in model.modules():
        if isinstance(m, AdaptBlock):
            for layer in (getattr(m, "sg2", None), getattr(m, "cg2", None)):
                if layer is not None:
                    nn.init.zeros_(layer.weight)
                    nn.init.zeros_(layer.bias)


def zero_weights(model: nn.Module) -> None:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def count_flops(model: LightBSR, height: int = 256, width: int = 256) -> int:
    """Multiply-accumulates of all conv/linear layers for one LR input.

    Bias additions count one op per output element, LayerNorm two per
    element; this is the usual profiler convention behind published
    GFLOPs figures.
    """
    total = 0

    def conv_hook(m, inp, out):
        nonlocal total
        per_out = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
        total += out.numel() * (per_out + (1 if m.bias is not None else 0))

    def linear_hook(m, inp, out):
        nonlocal total
        total += out.numel() * (m.in_features + (1 if m.bias is not None else 0))

    def norm_hook(m, inp, out):
        nonlocal total
        total += 2 * out.numel()

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
        elif isinstance(m, LayerNorm2d):
            handles.append(m.register_forward_hook(norm_hook))
    try:
        x = torch.zeros(1, model.cfg.in_channels, height, width)
        with torch.no_grad():
            model(x[:, :3], est_input=x)
    finally:
        for h in handles:
            h.remove()
    return total
