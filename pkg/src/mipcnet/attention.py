"""Attention primitives and the blocks assembled from them.

All blocks map a (B, C, H, W) feature map to the same shape. The two
attention modules carry a learnable mixing scalar initialised to zero, so
a freshly built block is an exact identity on its attention paths. The
gate heads produce pre-sigmoid logits; `channel_gate` / `position_gate`
expose the squashed [0, 1] gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

# Above this many spatial positions the position-affinity matrix is built
# in row chunks to bound peak memory (the matrix is HW x HW).
_CHUNK_THRESHOLD = 4096
_CHUNK_ROWS = 2048

PART_A_CHOICES = ("pam", "channel_pool")
PART_C_CHOICES = ("cam", "position_pool")


def require_finite(x: torch.Tensor, name: str = "input") -> torch.Tensor:
    """Reject tensors with NaN/Inf, naming the first offending element."""
    finite = torch.isfinite(x)
    if not bool(finite.all()):
        idx = tuple(int(i) for i in (~finite).nonzero()[0])
        axes = ("batch", "channel", "height", "width")
        where = ", ".join(f"{a}={i}" for a, i in zip(axes, idx)) if x.ndim == 4 else str(idx)
        raise ValueError(f"{name} contains a non-finite value at ({where})")
    return x


def require_feature_map(x: torch.Tensor, name: str = "input") -> torch.Tensor:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (B, C, H, W), got shape {tuple(x.shape)}")
    return require_finite(x, name)


def init_block_parameters(module: nn.Module) -> None:
    """Kaiming-uniform conv/linear weights, zero biases, default norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class MipcVariant:
    """Which sub-branch is primary (feature-carrying) in each gated part."""

    part_a_primary: str = "pam"
    part_c_primary: str = "cam"

    def __post_init__(self):
        if self.part_a_primary not in PART_A_CHOICES:
            raise ValueError(f"part_a_primary must be one of {PART_A_CHOICES}")
        if self.part_c_primary not in PART_C_CHOICES:
            raise ValueError(f"part_c_primary must be one of {PART_C_CHOICES}")

    @property
    def name(self) -> str:
        a = "pam" if self.part_a_primary == "pam" else "chpool"
        c = "cam" if self.part_c_primary == "cam" else "pospool"
        return f"a-{a}_c-{c}"


DEFAULT_VARIANT = MipcVariant()
ALL_VARIANTS = tuple(
    MipcVariant(part_a_primary=a, part_c_primary=c)
    for a in PART_A_CHOICES
    for c in PART_C_CHOICES
)


class PositionAttention(nn.Module):
    """Self-attention over spatial positions with a residual mixing scalar.

    Query/key projections reduce channels to max(1, C // 8); the affinity
    matrix is row-softmaxed so each output position is a convex combination
    of value projections.
    """

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, kernel_size=1)
        self.key = nn.Conv2d(channels, inner, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.gamma = nn.Parameter(torch.zeros(()))
        init_block_parameters(self)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        require_feature_map(x)
        b, c, h, w = x.shape
        n = h * w
        q = self.query(x).reshape(b, -1, n).permute(0, 2, 1)  # (B, N, Cq)
        k = self.key(x).reshape(b, -1, n)                     # (B, Cq, N)
        v = self.value(x).reshape(b, c, n).permute(0, 2, 1)   # (B, N, C)
        if return_attention or n <= _CHUNK_THRESHOLD:
            attn = torch.softmax(torch.bmm(q, k), dim=-1)     # (B, N, N)
            mixed = torch.bmm(attn, v)                        # (B, N, C)
        else:
            attn = None
            pieces = []
            for start in range(0, n, _CHUNK_ROWS):
                rows = torch.softmax(torch.bmm(q[:, start : start + _CHUNK_ROWS], k), dim=-1)
                pieces.append(torch.bmm(rows, v))
            mixed = torch.cat(pieces, dim=1)
        out = x + self.gamma * mixed.permute(0, 2, 1).reshape(b, c, h, w)
        if return_attention:
            return out, attn
        return out


class ChannelAttention(nn.Module):
    """Self-attention over channels computed from raw reshaped features."""

    def __init__(self):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        require_feature_map(x)
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w)
        attn = torch.softmax(torch.bmm(flat, flat.permute(0, 2, 1)), dim=-1)  # (B, C, C)
        out = x + self.gamma * torch.bmm(attn, flat).reshape(b, c, h, w)
        if return_attention:
            return out, attn
        return out


class ChannelSummary(nn.Module):
    """Per-channel spatial mean through a bottleneck FC pair (pre-sigmoid).

    Output shape (B, C, 1, 1); reduction ratio is clamped so the hidden
    width is at least one.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, channels)
        init_block_parameters(self)

    @staticmethod
    def pool(x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        require_feature_map(x)
        y = self.fc2(self.act(self.fc1(self.pool(x))))
        return y.reshape(x.shape[0], x.shape[1], 1, 1)


class PositionSummary(nn.Module):
    """Channel-axis max+mean maps through a padded k x k conv (pre-sigmoid).

    Output shape (B, 1, H, W).
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        init_block_parameters(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        require_feature_map(x)
        pooled = torch.cat([x.max(dim=1, keepdim=True).values, x.mean(dim=1, keepdim=True)], dim=1)
        return self.conv(pooled)


def channel_gate(x: torch.Tensor, summary: ChannelSummary) -> torch.Tensor:
    """Sigmoid channel gate in [0, 1], shape (B, C, 1, 1)."""
    return torch.sigmoid(summary(x))


def position_gate(x: torch.Tensor, summary: PositionSummary) -> torch.Tensor:
    """Sigmoid position gate in [0, 1], shape (B, 1, H, W)."""
    return torch.sigmoid(summary(x))


class ResidualTail(nn.Module):
    """conv-norm-relu-conv-norm with an identity shortcut, relu after add."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(channels)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.BatchNorm2d(channels)
        self.act_out = nn.ReLU()
        init_block_parameters(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        require_feature_map(x)
        y = self.norm1(self.conv1(x))
        y = self.norm2(self.conv2(self.act1(y)))
        return self.act_out(x + y)


class MipcBlock(nn.Module):
    """Three-branch block summing position-dominant, channel-dominant and
    convolutional-mix features, closed by a residual tail.

    With ``gated=True`` each attention part is modulated by a compact
    summary of the other view (the mutual-inclusion wiring); the variant
    chooses which sub-branch carries features and which one gates. With
    ``gated=False`` the summaries are dropped entirely and the two
    attention outputs pass through unmodulated (the position+channel
    ablation baseline).
    """

    def __init__(
        self,
        channels: int,
        variant: MipcVariant = DEFAULT_VARIANT,
        gated: bool = True,
        reduction: int = 16,
        gate_kernel: int = 7,
    ):
        super().__init__()
        self.variant = variant
        self.gated = gated
        self.pam = PositionAttention(channels)
        self.cam = ChannelAttention()
        if gated:
            self.channel_summary = ChannelSummary(channels, reduction)
            self.position_summary = PositionSummary(gate_kernel)
        self.mix_a = nn.Conv2d(channels, channels, 3, padding=1)
        self.mix_c = nn.Conv2d(channels, channels, 3, padding=1)
        self.mix_out = nn.Conv2d(channels, channels, 3, padding=1)
        self.tail = ResidualTail(channels)
        init_block_parameters(self.mix_a)
        init_block_parameters(self.mix_c)
        init_block_parameters(self.mix_out)

    def branches(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(position-dominant, channel-dominant, conv-mix) pre-tail maps."""
        require_feature_map(x)
        pam_out = self.pam(x)
        cam_out = self.cam(x)
        if not self.gated:
            pos_branch = pam_out
            chan_branch = cam_out
        else:
            chan_logits = self.channel_summary(x)    # (B, C, 1, 1)
            pos_logits = self.position_summary(x)    # (B, 1, H, W)
            if self.variant.part_a_primary == "pam":
                pos_branch = torch.sigmoid(chan_logits) * pam_out
            else:
                pos_branch = torch.sigmoid(pam_out) * chan_logits
            if self.variant.part_c_primary == "cam":
                chan_branch = torch.sigmoid(pos_logits) * cam_out
            else:
                chan_branch = torch.sigmoid(cam_out) * pos_logits
        mix_branch = self.mix_out(self.mix_a(x) * self.mix_c(x))
        if not (pos_branch.shape == chan_branch.shape == mix_branch.shape == x.shape):
            raise ValueError(
                "mis-wired variant: branch shapes "
                f"{tuple(pos_branch.shape)}, {tuple(chan_branch.shape)}, "
                f"{tuple(mix_branch.shape)} must all equal input {tuple(x.shape)}"
            )
        return pos_branch, chan_branch, mix_branch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pos_branch, chan_branch, mix_branch = self.branches(x)
        return self.tail(pos_branch + chan_branch + mix_branch)


class PcBlock(MipcBlock):
    """Mutual-inclusion block with both gates removed (ablation baseline)."""

    def __init__(self, channels: int, variant: MipcVariant = DEFAULT_VARIANT):
        super().__init__(channels, variant=variant, gated=False)


class DaBlock(nn.Module):
    """Skip-connection refiner: conv-PAM-conv and conv-CAM-conv branches
    fused by elementwise sum."""

    def __init__(self, channels: int):
        super().__init__()
        self.pos_in = nn.Conv2d(channels, channels, 3, padding=1)
        self.pam = PositionAttention(channels)
        self.pos_out = nn.Conv2d(channels, channels, 3, padding=1)
        self.chan_in = nn.Conv2d(channels, channels, 3, padding=1)
        self.cam = ChannelAttention()
        self.chan_out = nn.Conv2d(channels, channels, 3, padding=1)
        init_block_parameters(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        require_feature_map(x)
        pos = self.pos_out(self.pam(self.pos_in(x)))
        chan = self.chan_out(self.cam(self.chan_in(x)))
        return pos + chan


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
