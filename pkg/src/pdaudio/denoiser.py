"""1D U-Net denoiser over mel-spectrogram slices.

Every (packed channel, mel bin) pair of a ``C x M x L`` slice is one input
channel of a 1-D network running along the ``L`` time frames.  The encoder
stacks ResNet blocks (conv, batch norm, ReLU, time-embedding injection) with
max-pool halving; the decoder upsamples with transposed convolutions and
concatenates the matching encoder output.  One self-attention block sits at
the bottleneck.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidArgument
from .param import ParamKind


@dataclass
class UNetConfig:
    n_channels: int = 3
    n_mels: int = 128
    length: int = 128
    base_width: int = 64
    depth: int = 3
    channel_mult: tuple = ()
    kernel_sizes: tuple = (3, 5)
    time_embed_dim: int = 64
    use_attention: bool = True
    attention_heads: int = 4
    zero_init_out: bool = True
    input_skip: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult) or tuple(min(2**k, 2) for k in range(self.depth))
        self.kernel_sizes = tuple(self.kernel_sizes)
        if self.depth < 1:
            raise InvalidArgument("depth must be >= 1")
        if self.length % (2**self.depth):
            raise InvalidArgument(f"length {self.length} not divisible by 2**depth={2**self.depth}")
        if self.base_width < 4:
            raise InvalidArgument("base_width must be >= 4")
        if len(self.channel_mult) != self.depth:
            raise InvalidArgument("channel_mult needs one entry per level")
        if self.time_embed_dim % 2:
            raise InvalidArgument("time_embed_dim must be even")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise InvalidArgument("kernel sizes must be odd to preserve length")

    @property
    def in_features(self) -> int:
        return self.n_channels * self.n_mels

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mult]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def time_embedding(t, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> torch.Tensor:
    """Sinusoidal embedding of fractional times ``t`` (shape ``(B,)``) -> ``(B, dim)``.

    The first half holds sines, the second cosines, over a geometric
    frequency ladder; ``t`` is multiplied by ``scale`` first so the unit
    interval spans many periods.
    """
    if dim % 2:
        raise InvalidArgument(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """Two conv-BN-ReLU layers with different kernel sizes and a residual path."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, kernel_sizes=(3, 5)):
        super().__init__()
        k1, k2 = kernel_sizes
        self.conv1 = nn.Conv1d(in_ch, out_ch, k1, padding=k1 // 2)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, k2, padding=k2 // 2)
        self.bn2 = nn.BatchNorm1d(out_ch)
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = F.relu(self.bn1(self.conv1(x)))
        h = h + self.temb(temb)[:, :, None]
        h = F.relu(self.bn2(self.conv2(h)))
        return h + self.skip(x)


class SelfAttention1d(nn.Module):
    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        if ch % heads:
            heads = 1
        self.heads = heads
        self.norm = nn.BatchNorm1d(ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = nn.Conv1d(ch, ch, 1)

    def forward(self, x):
        b, c, n = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, n).unbind(1)
        w = torch.softmax(torch.einsum("bhcn,bhcm->bhnm", q, k) / math.sqrt(c // self.heads), -1)
        out = torch.einsum("bhnm,bhcm->bhcn", w, v).reshape(b, c, n)
        return x + self.proj(out)


class Upsample(nn.Module):
    """2x transposed convolution followed by ReLU."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.ConvTranspose1d(ch, ch, 2, stride=2)

    def forward(self, x):
        return F.relu(self.conv(x))


class DenoiserModel(nn.Module):
    """The U-Net plus the metadata needed to interpret its output.

    ``forward(z, t)`` takes ``z`` of shape ``(B, C, M, L)`` and fractional
    times ``t`` of shape ``(B,)`` and returns the raw prediction in
    ``param_kind`` (channels doubled for ``XEPS``).
    """

    def __init__(self, config: UNetConfig, param_kind=ParamKind.V, schedule_T: int = 1000):
        super().__init__()
        self.config = config
        self.param_kind = ParamKind(param_kind)
        self.schedule_T = int(schedule_T)
        cfg = config
        temb = cfg.time_embed_dim * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, temb), nn.ReLU(), nn.Linear(temb, temb)
        )
        widths = cfg.widths
        self.inp = nn.Conv1d(cfg.in_features, widths[0], 1)
        self.down = nn.ModuleList()
        ch = widths[0]
        for w in widths:
            self.down.append(ResBlock(ch, w, temb, cfg.kernel_sizes))
            ch = w
        self.pool = nn.MaxPool1d(2)
        self.mid1 = ResBlock(ch, ch, temb, cfg.kernel_sizes)
        self.attn = SelfAttention1d(ch, cfg.attention_heads) if cfg.use_attention else None
        self.mid2 = ResBlock(ch, ch, temb, cfg.kernel_sizes)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for w in reversed(widths):
            self.ups.append(Upsample(ch))
            self.up_blocks.append(ResBlock(ch + w, w, temb, cfg.kernel_sizes))
            ch = w
        n_out = cfg.in_features * self.param_kind.out_multiplier
        self.out = nn.Conv1d(ch, n_out, 1)
        # time-conditioned per-feature gain and offset on the raw input, bypassing the bottleneck
        self.input_skip = nn.Linear(temb, 2 * n_out) if cfg.input_skip else None
        if cfg.zero_init_out:
            for layer in (self.out, self.input_skip):
                if layer is not None:
                    nn.init.zeros_(layer.weight)
                    nn.init.zeros_(layer.bias)

    @property
    def sample_shape(self):
        c = self.config
        return (c.n_channels, c.n_mels, c.length)

    def forward(self, z, t):
        c = self.config
        if z.ndim != 4 or tuple(z.shape[1:]) != self.sample_shape:
            raise InvalidArgument(
                f"expected input of shape (B, {c.n_channels}, {c.n_mels}, {c.length}), "
                f"got {tuple(z.shape)}"
            )
        b = z.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        emb = self.time_mlp(time_embedding(t, c.time_embed_dim).to(z.dtype))
        h = self.inp(z.reshape(b, c.in_features, c.length))
        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
            h = self.pool(h)
        h = self.mid1(h, emb)
        if self.attn is not None:
            h = self.attn(h)
        h = self.mid2(h, emb)
        for up, block in zip(self.ups, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        out = self.out(h)
        if self.input_skip is not None:
            gain, offset = self.input_skip(emb)[:, :, None].chunk(2, dim=1)
            zin = z.reshape(b, c.in_features, c.length)
            if self.param_kind.out_multiplier == 2:
                zin = torch.cat([zin, zin], dim=1)
            out = out + gain * zin + offset
        return out.reshape(b, c.n_channels * self.param_kind.out_multiplier, c.n_mels, c.length)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(
    config: UNetConfig | None = None,
    param_kind=ParamKind.V,
    schedule_T: int = 1000,
    seed: int = 0,
    dtype=torch.float32,
) -> DenoiserModel:
    """Construct a freshly initialized model; initialization depends only on ``seed``."""
    config = config or UNetConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = DenoiserModel(config, param_kind, schedule_T)
    return model.to(dtype)
