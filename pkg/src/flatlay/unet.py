"""Miniature denoising U-Net and the trainable-parameter selector.

Parameter paths follow the module tree, e.g.::

    conv_in.weight
    time_embed.0.weight
    down.1.res.0.conv1.weight
    down.1.transformer.0.blocks.0.attn1.to_q.weight
    mid.transformer.blocks.0.ff.net.0.weight
    up.0.res.1.skip.weight
    out_conv.weight

Every transformer sits under a ``transformer`` segment; self-attention
projections are ``attn1.to_{q,k,v,out}``; cross-attention (when present) lives
in ``attn2`` with its own ``norm2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ShapeError

# Trainable parameters of the full-size StableDiffusion v1.5 inpainting U-Net under
# each selector, in millions. Reference values only; the toy model is far smaller.
FULL_SIZE_PARAM_COUNTS_M = {"full": 815.45, "transformer": 267.24, "attention": 49.57}


PARAMETERIZATIONS = ("eps", "v")


class ParamGroupSelector(str, enum.Enum):
    FULL = "full"
    TRANSFORMER_BLOCKS = "transformer"
    ATTENTION_LAYERS = "attention"


@dataclass
class UNetConfig:
    in_channels: int = 9
    out_channels: int = 4
    base_channels: int = 32
    channel_multipliers: list = field(default_factory=lambda: [1, 2, 4])
    res_blocks_per_level: int = 1
    attention_levels: list = field(default_factory=lambda: [1, 2])
    transformer_depth: int = 1
    attention_heads: int = 4
    # None means cross-attention removed; an int is the context dimension.
    cross_attention_dim: int | None = None
    norm_groups: int = 8
    seed: int = 0
    # "eps": the last convolution is the noise estimate. "v": its output F is read
    # as a velocity and forward returns the implied noise sqrt(ab_t) F + sqrt(1 - ab_t) z_t.
    parameterization: str = "eps"

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def validate(self) -> None:
        if self.in_channels != 2 * self.out_channels + 1:
            raise ConfigError(
                f"unet.in_channels must equal 2*out_channels+1 = {2 * self.out_channels + 1}, "
                f"got {self.in_channels}"
            )
        if self.base_channels % self.norm_groups:
            raise ConfigError(
                f"unet.base_channels ({self.base_channels}) not divisible by norm_groups ({self.norm_groups})"
            )
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ConfigError("unet.channel_multipliers must be a non-empty list of positive integers")
        for lvl in self.attention_levels:
            if not 0 <= lvl < self.levels:
                raise ConfigError(f"unet.attention_levels: level {lvl} outside [0, {self.levels})")
            ch = self.base_channels * self.channel_multipliers[lvl]
            if ch % self.attention_heads:
                raise ConfigError(
                    f"unet.attention_heads: {ch} channels at level {lvl} not divisible by {self.attention_heads} heads"
                )
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"unet.parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}")
        if self.res_blocks_per_level < 1 or self.transformer_depth < 1:
            raise ConfigError("unet.res_blocks_per_level and unet.transformer_depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        self.heads = heads
        kv_dim = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        ctx = x if context is None else context
        b, n, d = x.shape
        q = self.to_q(x).reshape(b, n, self.heads, -1).transpose(1, 2)
        k = self.to_k(ctx).reshape(b, ctx.shape[1], self.heads, -1).transpose(1, 2)
        v = self.to_v(ctx).reshape(b, ctx.shape[1], self.heads, -1).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads)
        if context_dim is not None:
            self.norm2 = nn.LayerNorm(dim)
            self.attn2 = Attention(dim, heads, context_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.has_cross = context_dim is not None

    def forward(self, x, context=None):
        x = x + self.attn1(self.norm1(x))
        if self.has_cross:
            if context is None:
                raise ValueError("cross-attention model requires a context input")
            x = x + self.attn2(self.norm2(x), context)
        return x + self.ff(self.norm3(x))


class SpatialTransformer(nn.Module):
    """GroupNorm, 1x1 projection in, transformer blocks over pixels, 1x1 projection out."""

    def __init__(self, ch: int, heads: int, depth: int, groups: int, context_dim: int | None):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.blocks = nn.ModuleList([TransformerBlock(ch, heads, context_dim) for _ in range(depth)])
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context=None):
        b, c, h, w = x.shape
        y = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            y = blk(y, context)
        y = y.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(y)


class DownLevel(nn.Module):
    def __init__(self, in_ch, out_ch, n_res, emb_dim, cfg: UNetConfig, attn: bool, downsample: bool):
        super().__init__()
        self.res = nn.ModuleList(
            [ResBlock(in_ch if i == 0 else out_ch, out_ch, emb_dim, cfg.norm_groups) for i in range(n_res)]
        )
        if attn:
            self.transformer = nn.ModuleList(
                [
                    SpatialTransformer(out_ch, cfg.attention_heads, cfg.transformer_depth, cfg.norm_groups,
                                       cfg.cross_attention_dim)
                    for _ in range(n_res)
                ]
            )
        self.downsample = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None


class UpLevel(nn.Module):
    def __init__(self, in_chs, out_ch, emb_dim, cfg: UNetConfig, attn: bool, upsample: bool):
        super().__init__()
        self.res = nn.ModuleList([ResBlock(c, out_ch, emb_dim, cfg.norm_groups) for c in in_chs])
        if attn:
            self.transformer = nn.ModuleList(
                [
                    SpatialTransformer(out_ch, cfg.attention_heads, cfg.transformer_depth, cfg.norm_groups,
                                       cfg.cross_attention_dim)
                    for _ in in_chs
                ]
            )
        self.upsample = nn.Conv2d(out_ch, out_ch, 3, padding=1) if upsample else None


class MidBlock(nn.Module):
    def __init__(self, ch, emb_dim, cfg: UNetConfig, attn: bool):
        super().__init__()
        self.res1 = ResBlock(ch, ch, emb_dim, cfg.norm_groups)
        if attn:
            self.transformer = SpatialTransformer(ch, cfg.attention_heads, cfg.transformer_depth, cfg.norm_groups,
                                                  cfg.cross_attention_dim)
        self.res2 = ResBlock(ch, ch, emb_dim, cfg.norm_groups)


class UNetModel(nn.Module):
    """Noise predictor over a ``[2c+1, h, w]`` conditioning canvas.

    Under the ``"v"`` parameterization the model keeps ``sqrt(alpha_bar)`` and
    ``sqrt(1 - alpha_bar)`` as non-persistent buffers; they are not parameters
    and are not written to checkpoints.
    """

    def __init__(self, config: UNetConfig, alpha_bars=None):
        super().__init__()
        config.validate()
        self.config = config
        cfg = config
        if cfg.parameterization == "v":
            if alpha_bars is None:
                raise ConfigError("unet.parameterization 'v' needs the noise schedule (pass sched to build_unet)")
            ab = torch.as_tensor(np.asarray(alpha_bars, dtype=np.float64))
            self.register_buffer("sqrt_ab", ab.sqrt(), persistent=False)
            self.register_buffer("sqrt_one_minus_ab", (1.0 - ab).sqrt(), persistent=False)
        base = cfg.base_channels
        emb_dim = 4 * base
        chans = [base * m for m in cfg.channel_multipliers]
        attn = set(cfg.attention_levels)

        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)
        self.time_embed = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

        self.down = nn.ModuleList()
        skip_chs = [base]
        ch = base
        for i, out_ch in enumerate(chans):
            last = i == len(chans) - 1
            self.down.append(DownLevel(ch, out_ch, cfg.res_blocks_per_level, emb_dim, cfg, i in attn, not last))
            ch = out_ch
            skip_chs += [ch] * cfg.res_blocks_per_level
            if not last:
                skip_chs.append(ch)

        self.mid = MidBlock(ch, emb_dim, cfg, (len(chans) - 1) in attn)

        self.up = nn.ModuleList()
        for i in reversed(range(len(chans))):
            out_ch = chans[i]
            in_chs = []
            for _ in range(cfg.res_blocks_per_level + 1):
                in_chs.append(ch + skip_chs.pop())
                ch = out_ch
            self.up.append(UpLevel(in_chs, out_ch, emb_dim, cfg, i in attn, i > 0))

        self.out_norm = nn.GroupNorm(cfg.norm_groups, ch)
        self.out_conv = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Seeded fan-in initialisation; zeros for the final convolution."""
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
                elif isinstance(m, (nn.Conv2d, nn.Linear)):
                    w = m.weight
                    fan_in = w[0].numel()
                    w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in))
                    if m.bias is not None:
                        m.bias.zero_()
            self.out_conv.weight.zero_()

    @property
    def levels(self) -> int:
        return self.config.levels

    def forward(self, x: torch.Tensor, t, context: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input [B, {cfg.in_channels}, h, w], got {tuple(x.shape)}")
        div = 2 ** (self.levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} not divisible by {div}")
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_embed(timestep_embedding(t, cfg.base_channels).to(x.dtype))

        h = self.conv_in(x)
        skips = [h]
        for level in self.down:
            for i, res in enumerate(level.res):
                h = res(h, emb)
                if hasattr(level, "transformer"):
                    h = level.transformer[i](h, context)
                skips.append(h)
            if level.downsample is not None:
                h = level.downsample(h)
                skips.append(h)

        h = self.mid.res1(h, emb)
        if hasattr(self.mid, "transformer"):
            h = self.mid.transformer(h, context)
        h = self.mid.res2(h, emb)

        for level in self.up:
            for i, res in enumerate(level.res):
                h = res(torch.cat([h, skips.pop()], dim=1), emb)
                if hasattr(level, "transformer"):
                    h = level.transformer[i](h, context)
            if level.upsample is not None:
                h = level.upsample(F.interpolate(h, scale_factor=2.0, mode="nearest"))

        out = self.out_conv(F.silu(self.out_norm(h)))
        if cfg.parameterization == "v":
            idx = t.long()
            if idx.min() < 0 or idx.max() >= len(self.sqrt_ab):
                raise ValueError(f"timestep outside [0, {len(self.sqrt_ab)})")
            a = self.sqrt_ab[idx].to(x.dtype).view(-1, 1, 1, 1)
            s = self.sqrt_one_minus_ab[idx].to(x.dtype).view(-1, 1, 1, 1)
            out = a * out + s * x[:, : cfg.out_channels]
        return out


def build_unet(config: UNetConfig, sched=None) -> UNetModel:
    """Build the model; ``sched`` (a NoiseSchedule) is required for the ``"v"`` parameterization."""
    return UNetModel(config, None if sched is None else sched.alpha_bars)


def check_schedule(model: nn.Module, sched) -> None:
    """Raise if a ``"v"`` model was built for a different schedule than ``sched``."""
    if getattr(model, "config", None) is None or model.config.parameterization != "v":
        return
    expect = np.sqrt(np.asarray(sched.alpha_bars, dtype=np.float64))
    have = model.sqrt_ab.detach().cpu().numpy()
    if have.shape != expect.shape or not np.allclose(have, expect, rtol=1e-12, atol=0):
        raise ConfigError("model was built for a different noise schedule than the one supplied")


def forward(model: nn.Module, canvas: torch.Tensor, t, context=None) -> torch.Tensor:
    """Evaluate the denoiser on one ``[2c+1, h, w]`` canvas or a batch of them.

    Raises :class:`NumericError` naming the first module whose output is non-finite.
    """
    single = canvas.ndim == 3
    x = canvas[None] if single else canvas
    kwargs = {} if context is None else {"context": context}
    out = model(x, t, **kwargs)
    if not torch.isfinite(out).all():
        raise NumericError(f"non-finite activation in layer {_first_nonfinite_layer(model, x, t, kwargs)!r}")
    return out[0] if single else out


def _first_nonfinite_layer(model, x, t, kwargs) -> str:
    found = []

    def hook(name):
        def fn(_mod, _inp, out):
            if not found and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                found.append(name)
        return fn

    handles = [m.register_forward_hook(hook(n)) for n, m in model.named_modules() if n]
    try:
        with torch.no_grad():
            model(x, t, **kwargs)
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else "<output>"


def _in_transformer(name: str) -> bool:
    parts = name.split(".")
    return "transformer" in parts


def _is_self_attention(name: str) -> bool:
    parts = name.split(".")
    return "attn1" in parts and any(p in ("to_q", "to_k", "to_v", "to_out") for p in parts)


def select_trainable(model: nn.Module, selector) -> dict[str, nn.Parameter]:
    """Named parameters trained under ``selector``, in module order."""
    selector = ParamGroupSelector(selector)
    named = dict(model.named_parameters())
    if selector is ParamGroupSelector.FULL:
        return named
    if selector is ParamGroupSelector.TRANSFORMER_BLOCKS:
        return {n: p for n, p in named.items() if _in_transformer(n)}
    return {n: p for n, p in named.items() if _is_self_attention(n)}


def count_params(model: nn.Module, selector=ParamGroupSelector.FULL) -> int:
    return sum(p.numel() for p in select_trainable(model, selector).values())
