"""The three parameterized networks: a shared dual-branch denoiser (U-Net),
an attention-based synthesizer, and a transmission discriminator.

All forward passes are deterministic functions of (parameters, inputs).
Sampling randomness is injected explicitly through seeds or generators.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule, respace_schedule, reverse_step

__all__ = [
    "ArchConfig",
    "ARCH_PRESETS",
    "DivergenceError",
    "DenoiserUNet",
    "SynthesisNet",
    "TransmissionDiscriminator",
    "fuse_components",
    "decompose",
    "build_models",
]


class DivergenceError(RuntimeError):
    """A network produced non-finite activations."""


@dataclass(frozen=True)
class ArchConfig:
    """Desk-scale by default; the paper-scale preset is in ARCH_PRESETS."""

    channels: tuple = (32, 64, 128, 128)
    time_embed_dim: int = 128
    attention_resolutions: tuple = (16,)
    image_channels: int = 3
    heads: int = 4
    attention_softmax: str = "heads"  # "heads": per-pixel over the K maps; "spatial": per map
    synth_hidden: tuple = (32, 32)
    disc_channels: tuple = (32, 64, 128, 256)

    @property
    def depth(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("channels", "attention_resolutions", "synth_hidden", "disc_channels"):
            d[k] = tuple(d[k])
        return ArchConfig(**d)


ARCH_PRESETS = {
    "desk": ArchConfig(),
    "paper": ArchConfig(
        channels=(128, 256, 512, 512, 512, 512, 512, 512),
        time_embed_dim=512,
        attention_resolutions=(16, 32),
        heads=4,
        synth_hidden=(64, 128, 256, 512),
        disc_channels=(64, 128, 256, 512),
    ),
}


def timestep_embedding(t, dim: int, dtype, device) -> torch.Tensor:
    """Sinusoidal embedding of (1-based) timesteps, shape [B, dim]."""
    if isinstance(t, (int, np.integer)):
        t = torch.tensor([int(t)], device=device)
    t = t.to(device=device, dtype=dtype)
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head spatial self-attention; zero-init projection so the block
    starts as the identity."""

    def __init__(self, ch):
        super().__init__()
        self.norm = _norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class DenoiserUNet(nn.Module):
    """Shared noise predictor for both decomposition branches.

    Consumes the channel concatenation [s_t, r_t, x] of the two noisy branch
    states and the camera image, and emits one noise prediction per branch.
    Spatial size must be divisible by 2**depth.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        ch = arch.channels
        c_img = arch.image_channels
        tdim = arch.time_embed_dim
        if tdim % 2 != 0:
            raise ValueError("time_embed_dim must be even")

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.stem = nn.Conv2d(3 * c_img, ch[0], 3, padding=1)

        self.down_pool = nn.ModuleList()
        self.down_block = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        prev = ch[0]
        for c in ch:
            self.down_pool.append(nn.Conv2d(prev, prev, 3, stride=2, padding=1))
            self.down_block.append(ResidualBlock(prev, c, tdim))
            self.down_attn.append(SelfAttention2d(c))
            prev = c

        self.mid = ResidualBlock(prev, prev, tdim)

        self.up_block = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for i in reversed(range(len(ch))):
            self.up_block.append(ResidualBlock(prev + ch[i], ch[i], tdim))
            self.up_attn.append(SelfAttention2d(ch[i]))
            self.up_conv.append(nn.Conv2d(ch[i], ch[i], 3, padding=1))
            prev = ch[i]

        self.final = ResidualBlock(prev + ch[0], ch[0], tdim)
        self.head_norm = _norm(ch[0])
        self.head = nn.Conv2d(ch[0], 2 * c_img, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _use_attn(self, h):
        return min(h.shape[-2], h.shape[-1]) in self.arch.attention_resolutions

    def forward(self, s_t, r_t, x, t):
        if s_t.shape != r_t.shape or s_t.shape != x.shape:
            raise ValueError(
                f"branch/image shape mismatch: {tuple(s_t.shape)} vs "
                f"{tuple(r_t.shape)} vs {tuple(x.shape)}"
            )
        height, width = s_t.shape[-2:]
        factor = 2 ** self.arch.depth
        if height % factor or width % factor:
            raise ValueError(
                f"spatial size {height}x{width} not divisible by 2**depth = {factor}; "
                "reflect-pad the input (pad_mode='reflect') or choose a shallower model"
            )
        temb = self.time_mlp(
            timestep_embedding(t, self.arch.time_embed_dim, s_t.dtype, s_t.device)
        )

        h = self.stem(torch.cat([s_t, r_t, x], dim=1))
        skips = [h]
        for pool, block, attn in zip(self.down_pool, self.down_block, self.down_attn):
            h = block(pool(h), temb)
            if self._use_attn(h):
                h = attn(h)
            skips.append(h)

        h = self.mid(h, temb)

        for block, attn, conv in zip(self.up_block, self.up_attn, self.up_conv):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if self._use_attn(h):
                h = attn(h)
            h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))

        h = self.final(torch.cat([h, skips.pop()], dim=1), temb)
        out = self.head(F.silu(self.head_norm(h)))
        if not torch.isfinite(out).all():
            raise DivergenceError("denoiser produced non-finite outputs")
        c = self.arch.image_channels
        return out[:, :c], out[:, c:]


class SynthesisNet(nn.Module):
    """Re-synthesizes the camera image from the two recovered components.

    A 1x1 convolution produces K per-pixel gates from [s, r]; the gated
    components are fused as weighted sums and a small conv stack with a 1x1
    output layer synthesizes the result. With `use_attention` off the module
    degrades to plain superposition s + r.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        if arch.heads < 1:
            raise ValueError("need at least one attention map")
        if arch.attention_softmax not in ("heads", "spatial"):
            raise ValueError(f"unknown softmax mode {arch.attention_softmax!r}")
        self.arch = arch
        self.use_attention = True
        c = arch.image_channels
        self.gate = nn.Conv2d(2 * c, arch.heads, 1)
        layers = []
        prev = 2 * c
        for hdim in arch.synth_hidden:
            layers += [nn.Conv2d(prev, hdim, 3, padding=1), nn.SiLU()]
            prev = hdim
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(prev, c, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attention(self, s, r) -> torch.Tensor:
        """K nonnegative maps [B, K, H, W]; in "heads" mode they sum to 1 at
        every pixel."""
        if s.shape != r.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(r.shape)}")
        logits = self.gate(torch.cat([s, r], dim=1))
        if self.arch.attention_softmax == "heads":
            return torch.softmax(logits, dim=1)
        b, k, hh, ww = logits.shape
        return torch.softmax(logits.reshape(b, k, -1), dim=-1).reshape(b, k, hh, ww)

    def synthesize(self, s_att, r_att) -> torch.Tensor:
        if s_att.shape != r_att.shape:
            raise ValueError(
                f"shape mismatch {tuple(s_att.shape)} vs {tuple(r_att.shape)}"
            )
        return self.out(self.body(torch.cat([s_att, r_att], dim=1)))

    def forward(self, s, r) -> torch.Tensor:
        if not self.use_attention:
            return s + r
        maps = self.attention(s, r)
        s_att, r_att = fuse_components(maps, s, r)
        return self.synthesize(s_att, r_att)


def fuse_components(maps, s, r):
    """Weighted-sum fusion: s_att = sum_k a_k * s, r_att = sum_k (1 - a_k) * r.

    `maps` has shape [B, K, H, W]; each map broadcasts across channels.
    """
    if s.shape != r.shape:
        raise ValueError(f"component shape mismatch {tuple(s.shape)} vs {tuple(r.shape)}")
    if maps.shape[0] != s.shape[0] or maps.shape[-2:] != s.shape[-2:]:
        raise ValueError(
            f"attention maps {tuple(maps.shape)} inconsistent with images {tuple(s.shape)}"
        )
    s_att = maps.sum(dim=1, keepdim=True) * s
    r_att = (1.0 - maps).sum(dim=1, keepdim=True) * r
    return s_att, r_att


class TransmissionDiscriminator(nn.Module):
    """Strided conv classifier with a global-average-pooled scalar logit head."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers = []
        prev = arch.image_channels
        for c in arch.disc_channels:
            # smooth activation keeps the classifier differentiable everywhere
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.SiLU()]
            prev = c
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, 1)

    def forward(self, img) -> torch.Tensor:
        """Scalar logit per image, shape [B]."""
        h = self.convs(img).mean(dim=(2, 3))
        return self.fc(h).squeeze(1)

    def score(self, img) -> torch.Tensor:
        """Probability of being a real transmission image, strictly in (0, 1)."""
        return torch.sigmoid(self.forward(img))


def decompose(
    denoiser,
    x: torch.Tensor,
    sched: NoiseSchedule,
    steps: int,
    seed: int = 0,
    deterministic: bool = False,
):
    """Jointly sample both component layers for camera images x (standardized,
    [B, C, H, W]) by ancestral sampling from Gaussian noise.

    When steps < T the chain runs on a uniformly respaced sub-schedule; the
    denoiser is always called with original timesteps. `deterministic` drops
    the per-step noise (mean-only sampling). Returns (s0_hat, r0_hat).
    """
    sub, taus = respace_schedule(sched, steps)
    gen = torch.Generator().manual_seed(seed & (2**63 - 1))

    def randn():
        return torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device)

    with torch.no_grad():
        z_s, z_r = randn(), randn()
        for i in range(sub.T, 0, -1):
            eps_s, eps_r = denoiser(z_s, z_r, x, int(taus[i - 1]))
            if i == 1 or deterministic:
                n_s = n_r = torch.zeros_like(x)
            else:
                n_s, n_r = randn(), randn()
            z_s = reverse_step(z_s, eps_s, i, n_s, sub)
            z_r = reverse_step(z_r, eps_r, i, n_r, sub)
    return z_s, z_r


def build_models(arch: ArchConfig):
    """Fresh (denoiser, synthesizer, discriminator) triple for one config."""
    return DenoiserUNet(arch), SynthesisNet(arch), TransmissionDiscriminator(arch)
