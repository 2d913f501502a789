"""Full segmentation model: conv stem, mutual-inclusion block, transformer
bottleneck, attention-refined skip connections with an optional global
residue path, and an upsampling decoder."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import (
    DEFAULT_VARIANT,
    DaBlock,
    MipcBlock,
    MipcVariant,
    init_block_parameters,
    require_feature_map,
)

GL_PLACEMENTS = ("none", "1", "2", "3", "all")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    hidden_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    in_channels: int = 3
    num_classes: int = 9
    stem_base_width: int = 64
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    token_stride: int = 16
    mipc_variant: MipcVariant = DEFAULT_VARIANT
    mutual_inclusion: bool = True
    use_encoder_mipc: bool = True
    use_da_skips: bool = True
    gl_placement: str = "1"
    preset: str = "custom"

    def __post_init__(self):
        if self.gl_placement not in GL_PLACEMENTS:
            raise ConfigError(f"gl_placement must be one of {GL_PLACEMENTS}, got {self.gl_placement!r}")
        if self.input_size % self.token_stride != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by token_stride {self.token_stride}"
            )
        if self.input_size // self.token_stride < 1:
            raise ConfigError("token grid would be empty")
        if self.input_size % 8 != 0:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 8 for the stem")
        for name in ("input_size", "in_channels", "num_classes", "stem_base_width", "token_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.input_size // self.token_stride

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def skip_widths(self) -> tuple[int, int, int]:
        w = self.stem_base_width
        return (w, 2 * w, 4 * w)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["transformer"] = dataclasses.asdict(self.transformer)
        d["mipc_variant"] = dataclasses.asdict(self.mipc_variant)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config key: {sorted(unknown)[0]!r}")
        if "transformer" in d and isinstance(d["transformer"], dict):
            d["transformer"] = TransformerConfig(**d["transformer"])
        if "mipc_variant" in d and isinstance(d["mipc_variant"], dict):
            d["mipc_variant"] = MipcVariant(**d["mipc_variant"])
        return cls(**d)


def paper_config(**overrides) -> ModelConfig:
    """224x224 inputs, 16x16 token patches, ViT-Base-sized bottleneck."""
    base = dict(
        input_size=224, in_channels=3, num_classes=9, stem_base_width=64,
        transformer=TransformerConfig(hidden_dim=768, depth=12, heads=12, mlp_ratio=4),
        preset="paper",
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """64x64 inputs, 4x4 token grid; small enough for CPU training."""
    base = dict(
        input_size=64, in_channels=1, num_classes=4, stem_base_width=16,
        transformer=TransformerConfig(hidden_dim=64, depth=2, heads=4, mlp_ratio=4),
        preset="tiny",
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_config(**overrides) -> ModelConfig:
    """Smallest sane config, used by the finite-difference suite."""
    base = dict(
        input_size=32, in_channels=1, num_classes=2, stem_base_width=4,
        transformer=TransformerConfig(hidden_dim=16, depth=1, heads=2, mlp_ratio=2),
        preset="micro",
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"paper": paper_config, "tiny": tiny_config, "micro": micro_config}


@dataclass
class EncoderOutput:
    tokens: torch.Tensor                 # (B, N, hidden_dim)
    skips: list[torch.Tensor]            # strides 2, 4, 8; widths w, 2w, 4w


class StemStage(nn.Module):
    """One downsampling stage: strided conv halves H/W, channels double."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )
        init_block_parameters(self)

    def forward(self, x):
        return self.body(x)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        init_block_parameters(self)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]                      # (B, heads, N, hd)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        if return_attention:
            return out, attn
        return out


class TransformerLayer(nn.Module):
    """Pre-norm self-attention and MLP, both with residual connections."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )
        init_block_parameters(self.mlp)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        if return_attention:
            attended, attn = self.attn(self.norm1(x), return_attention=True)
            x = x + attended
            x = x + self.mlp(self.norm2(x))
            return x, attn
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Encoder(nn.Module):
    """Three halving/doubling conv stages, an optional mutual-inclusion
    block on the stride-8 feature, then patch embedding and transformer
    layers. Skips are the three stem outputs (taken before the block)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.stem_base_width
        t = cfg.transformer
        self.cfg = cfg
        self.stages = nn.ModuleList([
            StemStage(cfg.in_channels, w),
            StemStage(w, 2 * w),
            StemStage(2 * w, 4 * w),
        ])
        if cfg.use_encoder_mipc:
            self.mipc = MipcBlock(4 * w, variant=cfg.mipc_variant, gated=cfg.mutual_inclusion)
        else:
            self.mipc = None
        self.embed = nn.Conv2d(4 * w, t.hidden_dim, kernel_size=2, stride=2)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, t.hidden_dim))
        self.layers = nn.ModuleList(
            TransformerLayer(t.hidden_dim, t.heads, t.mlp_ratio) for _ in range(t.depth)
        )
        self.final_norm = nn.LayerNorm(t.hidden_dim)
        init_block_parameters(self.embed)

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        require_feature_map(image, "image")
        expected = (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        if tuple(image.shape[1:]) != expected:
            raise ValueError(f"image shape {tuple(image.shape[1:])} does not match config {expected}")
        skips = []
        x = image
        for stage in self.stages:
            prev = x.shape
            x = stage(x)
            assert x.shape[2] * 2 == prev[2] and x.shape[3] * 2 == prev[3], "stage must halve H and W"
            skips.append(x)
        if self.mipc is not None:
            x = self.mipc(x)
        grid = self.embed(x)                                   # (B, hidden, g, g)
        tokens = grid.flatten(2).transpose(1, 2) + self.pos_embed
        for layer in self.layers:
            tokens = layer(tokens)
        tokens = self.final_norm(tokens)
        return EncoderOutput(tokens=tokens, skips=skips)


class DecoderBlock(nn.Module):
    """x2 bilinear upsample, concatenate the skip, then a conv pair."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )
        init_block_parameters(self)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if x.shape[2:] != skip.shape[2:]:
            raise ValueError(
                f"skip spatial size {tuple(skip.shape[2:])} does not match "
                f"upsampled feature {tuple(x.shape[2:])}"
            )
        return self.body(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    """Token grid back to full resolution through three skip-fused blocks
    and a 1x1 segmentation head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, w2, w4 = cfg.skip_widths
        hidden = cfg.transformer.hidden_dim
        self.cfg = cfg
        self.blocks = nn.ModuleList([
            DecoderBlock(hidden, w4, w4),   # stride 16 -> 8
            DecoderBlock(w4, w2, w2),       # stride 8 -> 4
            DecoderBlock(w2, w, w),         # stride 4 -> 2
        ])
        self.head = nn.Conv2d(w, cfg.num_classes, kernel_size=1)
        init_block_parameters(self.head)

    def forward(self, tokens: torch.Tensor, skips: list[torch.Tensor]):
        b, n, d = tokens.shape
        g = self.cfg.grid_side
        if n != g * g:
            raise ValueError(f"token count {n} does not match grid {g}x{g}")
        x = tokens.transpose(1, 2).reshape(b, d, g, g)
        for i, block in enumerate(self.blocks):
            skip = skips[2 - i]                      # deepest skip first
            try:
                x = block(x, skip)
            except ValueError as e:
                raise ValueError(f"decoder stage {i + 1}: {e}") from e
        post_up3 = x                                  # stride-2 feature
        full = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        logits = self.head(full)
        return logits, post_up3


class SkipPipeline(nn.Module):
    """Per-level attention refinement plus optional injection of the
    purified global feature into the selected skip level(s)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.skip_widths
        if cfg.use_da_skips:
            self.da_blocks = nn.ModuleList(DaBlock(c) for c in widths)
        else:
            self.da_blocks = None
        self.gl_levels = self._levels(cfg.gl_placement)
        if self.gl_levels:
            # the global feature arrives at stride 2 with the base width
            self.gl_adapters = nn.ModuleDict({
                str(lv): nn.Conv2d(widths[0], widths[lv - 1], kernel_size=1)
                for lv in self.gl_levels
            })
            init_block_parameters(self.gl_adapters)
        else:
            self.gl_adapters = None

    @staticmethod
    def _levels(placement: str) -> tuple[int, ...]:
        if placement == "none":
            return ()
        if placement == "all":
            return (1, 2, 3)
        return (int(placement),)

    def forward(
        self,
        skips: list[torch.Tensor],
        global_feat: torch.Tensor | None = None,
        use_global: bool = True,
    ) -> list[torch.Tensor]:
        if len(skips) != 3:
            raise ValueError(f"expected 3 skip levels, got {len(skips)}")
        refined = list(skips)
        if self.da_blocks is not None:
            refined = [blk(s) for blk, s in zip(self.da_blocks, refined)]
        if use_global and self.gl_levels:
            if global_feat is None:
                raise ValueError(
                    f"gl_placement={self.cfg.gl_placement!r} requires a global feature"
                )
            for lv in self.gl_levels:
                target = refined[lv - 1]
                resized = F.interpolate(
                    global_feat, size=target.shape[2:], mode="bilinear", align_corners=False
                )
                refined[lv - 1] = target + self.gl_adapters[str(lv)](resized)
        return refined


class MipcNet(nn.Module):
    """Encoder, refined skips, decoder; the global-residue configuration
    runs the decoder twice: the first pass produces the stride-2 feature
    that a dedicated mutual-inclusion block purifies, the second pass
    consumes the skips re-refined with that injection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.skip_pipeline = SkipPipeline(cfg)
        self.decoder = Decoder(cfg)
        if cfg.gl_placement != "none":
            self.gl_mipc = MipcBlock(
                cfg.stem_base_width, variant=cfg.mipc_variant, gated=cfg.mutual_inclusion
            )
        else:
            self.gl_mipc = None

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        enc = self.encoder(image)
        if self.gl_mipc is None:
            skips = self.skip_pipeline(enc.skips, use_global=False)
            logits, _ = self.decoder(enc.tokens, skips)
            return logits
        first_skips = self.skip_pipeline(enc.skips, use_global=False)
        _, post_up3 = self.decoder(enc.tokens, first_skips)
        purified = self.gl_mipc(post_up3)
        second_skips = self.skip_pipeline(enc.skips, global_feat=purified)
        logits, _ = self.decoder(enc.tokens, second_skips)
        return logits

    def refine_skips(
        self, enc: EncoderOutput, global_feat: torch.Tensor | None
    ) -> list[torch.Tensor]:
        """Public skip-pipeline surface: injects iff configured."""
        return self.skip_pipeline(enc.skips, global_feat=global_feat)


def build_model(cfg: ModelConfig, seed: int = 0) -> MipcNet:
    """Construct with a deterministic parameter draw for the given seed."""
    torch.manual_seed(seed)
    return MipcNet(cfg)
