"""
Neural network building blocks.

A DDPM++-style U-Net (sinusoidal time embedding, group normalization, rescaled
skip connections, optional self-attention), a small dense score network for
toy vector data, the convolutional VAE encoder/decoder, and the evaluation
classifier.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import OddDimension


def time_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """
    Sinusoidal embedding of continuous times.

    Args:
        t: Times shaped [B] (or a scalar)
        dim: Embedding width, must be even
        scale: Factor mapping t in [tau, 1] onto the discrete step index range

    Returns:
        torch.Tensor: [B, dim] with sine half followed by cosine half
    """
    if dim % 2:
        raise OddDimension(f"time embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    exponent = math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(-exponent * torch.arange(half, dtype=torch.float32, device=t.device))
    args = (t.float() * scale)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """Pre-activation residual block with an optional time-embedding injection."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, temb_dim: int | None = None,
                 dropout: float = 0.0, skip_rescale: float = 1.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.skip_rescale = skip_rescale

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return (self.skip(x) + h) * self.skip_rescale


class AttnBlock(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, ch: int, groups: int, skip_rescale: float = 1.0):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        self.skip_rescale = skip_rescale

    def forward(self, x, temb=None):
        b, c, hgt, wid = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, hgt * wid).unbind(1)
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        h = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, hgt, wid)
        return (x + self.proj(h)) * self.skip_rescale


class ResAttn(nn.Module):
    """A residual block, followed by attention when the resolution asks for it."""

    def __init__(self, in_ch, out_ch, groups, temb_dim, dropout, skip_rescale, attention: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, groups, temb_dim, dropout, skip_rescale)
        self.attn = AttnBlock(out_ch, groups, skip_rescale) if attention else None

    def forward(self, x, temb=None):
        h = self.res(x, temb)
        return self.attn(h) if self.attn is not None else h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour resize to an explicit size (odd sizes such as 7 -> 4 -> 7 round-trip)."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, size=None):
        size = size or (x.shape[-2] * 2, x.shape[-1] * 2)
        return self.conv(F.interpolate(x, size=tuple(size), mode="nearest"))


class ScoreUNet(nn.Module):
    """
    Time-conditioned U-Net predicting the noise added to x_t.

    Built from a ScoreNetConfig; works for any [C, H, W] input (pixels 1x28x28,
    latents 2x7x7).
    """

    def __init__(self, net_config):
        super().__init__()
        in_ch, height, _ = net_config.input_shape
        ch = net_config.base_channels
        groups = net_config.norm_groups
        rescale = net_config.skip_rescale
        dropout = net_config.dropout
        temb_dim = 4 * ch
        self.embedding_dim = ch
        self.embedding_scale = net_config.embedding_scale
        self.temb = nn.Sequential(nn.Linear(ch, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_ch, ch, 3, padding=1)

        attention_at = set(net_config.attention_resolutions)
        levels = len(net_config.channel_multipliers)
        self.down = nn.ModuleList()
        skip_channels = [ch]
        level_resolution = []
        current, resolution = ch, height
        for level, mult in enumerate(net_config.channel_multipliers):
            out = ch * mult
            level_resolution.append(resolution)
            for _ in range(net_config.blocks_per_resolution):
                self.down.append(ResAttn(current, out, groups, temb_dim, dropout, rescale, resolution in attention_at))
                current = out
                skip_channels.append(current)
            if level != levels - 1:
                self.down.append(Downsample(current))
                skip_channels.append(current)
                resolution = (resolution + 1) // 2

        self.mid = nn.ModuleList([
            ResAttn(current, current, groups, temb_dim, dropout, rescale, bool(attention_at)),
            ResAttn(current, current, groups, temb_dim, dropout, rescale, False),
        ])

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(net_config.channel_multipliers))):
            out = ch * mult
            resolution = level_resolution[level]
            for _ in range(net_config.blocks_per_resolution + 1):
                skip = skip_channels.pop()
                self.up.append(ResAttn(current + skip, out, groups, temb_dim, dropout, rescale, resolution in attention_at))
                current = out
            if level != 0:
                self.up.append(Upsample(current))

        self.norm_out = nn.GroupNorm(min(groups, current), current)
        self.conv_out = nn.Conv2d(current, in_ch, 3, padding=1)

    def forward(self, x, t):
        temb = self.temb(time_embedding(t, self.embedding_dim, self.embedding_scale).to(x))
        h = self.conv_in(x)
        hs = [h]
        for module in self.down:
            h = module(h) if isinstance(module, Downsample) else module(h, temb)
            hs.append(h)
        for module in self.mid:
            h = module(h, temb)
        for module in self.up:
            if isinstance(module, Upsample):
                h = module(h, size=hs[-1].shape[-2:])
            else:
                h = module(torch.cat([h, hs.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ScoreMLP(nn.Module):
    """Dense noise-prediction network for flat vector data (toy Gaussians)."""

    def __init__(self, net_config):
        super().__init__()
        dim = math.prod(net_config.input_shape)
        width = net_config.base_channels * max(net_config.channel_multipliers)
        self.embedding_dim = net_config.base_channels
        self.embedding_scale = net_config.embedding_scale
        layers = [nn.Linear(dim + self.embedding_dim, width), nn.SiLU()]
        for _ in range(net_config.blocks_per_resolution):
            layers += [nn.Linear(width, width), nn.SiLU(), nn.Dropout(net_config.dropout)]
        layers.append(nn.Linear(width, dim))
        self.body = nn.Sequential(*layers)

    def forward(self, x, t):
        emb = time_embedding(t, self.embedding_dim, self.embedding_scale).to(x)
        flat = x.reshape(x.shape[0], -1)
        return self.body(torch.cat([flat, emb], dim=1)).reshape(x.shape)


class Encoder(nn.Module):
    """Convolutional encoder 1x28x28 -> (mu, logvar), each latent_channels x 7 x 7."""

    def __init__(self, vae_config, in_channels: int = 1):
        super().__init__()
        ch, groups = vae_config.base_channels, vae_config.norm_groups
        if vae_config.mask_as_input:
            in_channels *= 2
        self.conv_in = nn.Conv2d(in_channels, ch, 3, padding=1)
        blocks = []
        current = ch
        mults = vae_config.channel_multipliers
        for level, mult in enumerate(mults):
            blocks.append(ResBlock(current, ch * mult, groups))
            current = ch * mult
            if level != len(mults) - 1:
                blocks.append(Downsample(current))
        self.blocks = nn.ModuleList(blocks)
        self.norm_out = nn.GroupNorm(min(groups, current), current)
        self.conv_out = nn.Conv2d(current, 2 * vae_config.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for block in self.blocks:
            h = block(h)
        mu, logvar = self.conv_out(F.silu(self.norm_out(h))).chunk(2, dim=1)
        return mu, logvar


class Decoder(nn.Module):
    """Convolutional decoder latent_channels x 7 x 7 -> 1 x 28 x 28 in (0, 1)."""

    def __init__(self, vae_config, out_channels: int = 1):
        super().__init__()
        ch, groups = vae_config.base_channels, vae_config.norm_groups
        mults = list(reversed(vae_config.channel_multipliers))
        current = ch * mults[0]
        self.conv_in = nn.Conv2d(vae_config.latent_channels, current, 3, padding=1)
        blocks = []
        for level, mult in enumerate(mults):
            blocks.append(ResBlock(current, ch * mult, groups))
            current = ch * mult
            if level != len(mults) - 1:
                blocks.append(Upsample(current))
        self.blocks = nn.ModuleList(blocks)
        self.norm_out = nn.GroupNorm(min(groups, current), current)
        self.conv_out = nn.Conv2d(current, out_channels, 3, padding=1)

    def forward(self, z):
        h = self.conv_in(z)
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


class Classifier(nn.Module):
    """Two 3x3 conv layers (32, 64), max pooling, then 64 hidden units and 10 logits."""

    def __init__(self, hidden: int = 64, num_classes: int = 10):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, 32, 3), nn.ReLU(),
            nn.Conv2d(32, 64, 3), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.fc1 = nn.Linear(64 * 12 * 12, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def features(self, x):
        return F.relu(self.fc1(self.conv(x).flatten(1)))

    def forward(self, x):
        return self.fc2(self.features(x))
