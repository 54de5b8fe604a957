"""AdvancedUnet: one RSU encoder feeding a mask decoder and an image decoder.

Every stage is a residual U-block (RSU).  The mask decoder emits a side
output per stage plus one from the bottleneck, and a fused map combining all
of them; the image decoder emits a 3-channel side output per stage, the
shallowest of which is the reconstructed image.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class RsuConfig:
    depth: int
    c_in: int
    c_mid: int
    c_out: int
    dilated: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"RSU depth must be >= 2, got {self.depth}")
        if min(self.c_in, self.c_mid, self.c_out) < 1:
            raise ConfigError(f"RSU channel counts must be >= 1: {self}")

    @property
    def divisor(self) -> int:
        """Spatial divisibility the block needs (dilated blocks never pool)."""
        return 1 if self.dilated else 2 ** (self.depth - 2)


def _stage_list(items):
    return tuple(r if isinstance(r, RsuConfig) else RsuConfig(**r) for r in items)


@dataclass(frozen=True)
class NetConfig:
    """Stage plan.  ``encoder`` has ``num_stages + 1`` entries, the last being
    the bottleneck shared by both decoders; each decoder has ``num_stages``
    entries ordered shallow (full resolution) to deep."""

    encoder: tuple[RsuConfig, ...]
    mask_decoder: tuple[RsuConfig, ...]
    image_decoder: tuple[RsuConfig, ...]
    input_hw: tuple[int, int] = (512, 512)
    in_channels: int = 3
    mask_channels: int = 1
    image_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder", _stage_list(self.encoder))
        object.__setattr__(self, "mask_decoder", _stage_list(self.mask_decoder))
        object.__setattr__(self, "image_decoder", _stage_list(self.image_decoder))
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.mask_decoder)

    @property
    def divisor(self) -> int:
        """Input height/width must be a multiple of this."""
        return max(2**s * r.divisor for s, r in enumerate(self.encoder))

    def validate(self):
        enc = self.encoder
        n = len(enc) - 1
        if n < 1:
            raise ConfigError("encoder needs at least two stages")
        if enc[0].c_in != self.in_channels:
            raise ConfigError(f"encoder stage 0 expects {enc[0].c_in} channels, input has {self.in_channels}")
        for s in range(1, len(enc)):
            if enc[s].c_in != enc[s - 1].c_out:
                raise ConfigError(f"encoder stage {s} c_in {enc[s].c_in} != stage {s - 1} c_out {enc[s - 1].c_out}")
        depths = [r.depth for r in enc]
        if any(a < b for a, b in zip(depths, depths[1:])):
            raise ConfigError(f"RSU depth must not increase with stage depth, got {depths}")
        for name, dec in (("mask_decoder", self.mask_decoder), ("image_decoder", self.image_decoder)):
            if len(dec) != n:
                raise ConfigError(f"{name} has {len(dec)} stages, encoder has {n} plus bottleneck")
            for s in range(n):
                below = enc[n].c_out if s == n - 1 else dec[s + 1].c_out
                want = below + enc[s].c_out
                if dec[s].c_in != want:
                    raise ConfigError(
                        f"{name} stage {s} c_in {dec[s].c_in} != {below} (from below) + {enc[s].c_out} (skip)"
                    )
        h, w = self.input_hw
        if h % self.divisor or w % self.divisor:
            raise ConfigError(f"input_hw {self.input_hw} must be divisible by {self.divisor}")

    @classmethod
    def from_widths(cls, mids, outs, depths=(7, 6, 5, 4, 4, 4), dilated=(False,) * 4 + (True, True),
                    input_hw=(512, 512)) -> "NetConfig":
        """Build a symmetric plan from per-encoder-stage widths (shallow first)."""
        n = len(depths) - 1
        enc, c_in = [], 3
        for d, m, o, dil in zip(depths, mids, outs, dilated):
            enc.append(RsuConfig(d, c_in, m, o, dil))
            c_in = o
        dec = []
        for s in range(n):
            # decoder stage s emits the width of encoder stage s-1, so the
            # next-shallower concat sees matching halves
            below = outs[n] if s == n - 1 else outs[s]
            c_out = outs[max(s - 1, 0)]
            dec.append(RsuConfig(depths[s], below + outs[s], mids[s], c_out, dilated[s]))
        return cls(encoder=tuple(enc), mask_decoder=tuple(dec), image_decoder=tuple(dec),
                   input_hw=tuple(input_hw))

    @classmethod
    def default(cls, input_hw=(512, 512)) -> "NetConfig":
        """Full-width plan: depths 7,6,5,4,4F,4F; widths 64..512."""
        return cls.from_widths(
            mids=(32, 32, 64, 128, 256, 256),
            outs=(64, 128, 256, 512, 512, 512),
            input_hw=input_hw,
        )

    @classmethod
    def small(cls, input_hw=(128, 128), width=16) -> "NetConfig":
        """Same topology at reduced width, for CPU-scale training."""
        return cls.from_widths(
            mids=(width // 2,) * 6,
            outs=(width,) * 6,
            input_hw=input_hw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


class ConvBnRelu(nn.Module):
    def __init__(self, c_in, c_out, dilation=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=dilation, dilation=dilation)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def _upsample_to(x, hw):
    return F.interpolate(x, size=hw, mode="bilinear", align_corners=False)


class RSU(nn.Module):
    """Residual U-block of depth L.

    The input is mapped to ``c_out`` channels (the residual branch), then run
    through an L-level internal U: L-1 encoder convs with 2x max-pooling
    between them, a dilated bottom conv, and L-1 decoder convs on
    concatenated skips.  The dilated variant replaces pooling by growing
    dilation rates and keeps resolution fixed throughout.
    """

    def __init__(self, cfg: RsuConfig):
        super().__init__()
        self.cfg = cfg
        L, m = cfg.depth, cfg.c_mid
        self.conv_in = ConvBnRelu(cfg.c_in, cfg.c_out)
        if cfg.dilated:
            rates = [2**i for i in range(L)]
        else:
            rates = [1] * (L - 1) + [2]
        self.enc = nn.ModuleList(
            [ConvBnRelu(cfg.c_out, m, rates[0])] + [ConvBnRelu(m, m, r) for r in rates[1:]]
        )
        self.dec = nn.ModuleList(
            [ConvBnRelu(2 * m, m, rates[i]) for i in range(L - 2, 0, -1)] + [ConvBnRelu(2 * m, cfg.c_out, rates[0])]
        )

    def forward(self, x):
        if x.shape[1] != self.cfg.c_in:
            raise ShapeError(f"RSU expects {self.cfg.c_in} input channels, got {x.shape[1]}")
        d = self.cfg.divisor
        if x.shape[-2] % d or x.shape[-1] % d:
            raise ShapeError(
                f"RSU-{self.cfg.depth} needs spatial size divisible by {d}, got {tuple(x.shape[-2:])}"
            )
        residual = self.conv_in(x)
        pool = not self.cfg.dilated
        skips = []
        h = residual
        for i, conv in enumerate(self.enc[:-1]):
            h = conv(h)
            skips.append(h)
            if pool and i < len(self.enc) - 2:
                h = F.max_pool2d(h, 2)
        h = self.enc[-1](h)
        for conv, skip in zip(self.dec, reversed(skips)):
            if h.shape[-2:] != skip.shape[-2:]:
                h = _upsample_to(h, skip.shape[-2:])
            h = conv(torch.cat([h, skip], dim=1))
        return h + residual


@dataclass
class ModelOutputs:
    """Network predictions at input resolution, side outputs deepest first."""

    mask_side: list[torch.Tensor]
    mask_fused: torch.Tensor
    image_side: list[torch.Tensor] = field(default_factory=list)

    @property
    def image_final(self) -> torch.Tensor:
        return self.image_side[-1]


class AdvancedUnet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        config.validate()
        self.config = config
        n = config.num_stages
        self.encoder = nn.ModuleList([RSU(r) for r in config.encoder])
        self.mask_decoder = nn.ModuleList([RSU(r) for r in config.mask_decoder])
        self.image_decoder = nn.ModuleList([RSU(r) for r in config.image_decoder])
        # mask heads: one per decoder stage + bottleneck, listed deepest first
        mask_src = [config.encoder[n].c_out] + [config.mask_decoder[s].c_out for s in range(n - 1, -1, -1)]
        self.mask_heads = nn.ModuleList([nn.Conv2d(c, config.mask_channels, 3, padding=1) for c in mask_src])
        self.fuse = nn.Conv2d(len(mask_src) * config.mask_channels, config.mask_channels, 1)
        image_src = [config.image_decoder[s].c_out for s in range(n - 1, -1, -1)]
        self.image_heads = nn.ModuleList([nn.Conv2d(c, config.image_channels, 3, padding=1) for c in image_src])

    def _decode(self, stages, bottom, skips, ablate_skip):
        feats = []
        h = bottom
        for s in range(len(stages) - 1, -1, -1):
            skip = skips[s]
            if ablate_skip == s:
                skip = torch.zeros_like(skip)
            h = _upsample_to(h, skip.shape[-2:])
            h = stages[s](torch.cat([h, skip], dim=1))
            feats.append(h)
        return feats  # deepest first

    def forward(self, x: torch.Tensor, ablate_skip: int | None = None) -> ModelOutputs:
        """``ablate_skip=s`` zeroes the encoder-to-decoder skip at stage ``s``
        (diagnostic only)."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        hw = tuple(x.shape[-2:])
        if hw[0] % cfg.divisor or hw[1] % cfg.divisor:
            raise ShapeError(f"input size {hw} must be divisible by {cfg.divisor}")
        skips = []
        h = x
        for s, stage in enumerate(self.encoder):
            if s > 0:
                h = F.max_pool2d(h, 2)
            h = stage(h)
            skips.append(h)
        bottom = skips.pop()

        mask_feats = [bottom] + self._decode(self.mask_decoder, bottom, skips, ablate_skip)
        mask_logits = [_upsample_to(head(f), hw) for head, f in zip(self.mask_heads, mask_feats)]
        fused = self.fuse(torch.cat(mask_logits, dim=1))

        image_feats = self._decode(self.image_decoder, bottom, skips, ablate_skip)
        image_side = [torch.sigmoid(_upsample_to(head(f), hw)) for head, f in zip(self.image_heads, image_feats)]
        return ModelOutputs(
            mask_side=[torch.sigmoid(m) for m in mask_logits],
            mask_fused=torch.sigmoid(fused),
            image_side=image_side,
        )


def build_model(config: NetConfig, rng_seed: int = 0) -> AdvancedUnet:
    """Construct with seed-deterministic initialization (global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        return AdvancedUnet(config)
