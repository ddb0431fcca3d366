"""Windowed-attention reconstruction backbone on the Doppler-delay grid.

Tensors are channels-last, ``(B, N_nu, N_tau, C)``. Convolutions permute to
channels-first internally. All parameters are float64 by default.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 2
    blocks_per_module: int = 2
    module_count: int = 2
    window_size: int = 8
    patch_size: int = 1
    mlp_ratio: float = 2.0
    in_channels: int = 64
    conv_kernel: int = 3

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim={self.embed_dim} is not divisible by heads={self.heads}")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the positional encoding")
        if self.in_channels % 2:
            raise ValueError("in_channels must be even (real and imaginary planes)")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd for same padding")
        for name in ("blocks_per_module", "module_count", "window_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


SCALING_CONFIGS = {
    "small": ModelConfig(embed_dim=512, heads=4, blocks_per_module=6, module_count=4),
    "base": ModelConfig(embed_dim=640, heads=5, blocks_per_module=6, module_count=4),
    "large": ModelConfig(embed_dim=768, heads=6, blocks_per_module=6, module_count=4),
}


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`Backbone` for ``cfg``."""
    c, k2, cin, hid = cfg.embed_dim, cfg.conv_kernel ** 2, cfg.in_channels, cfg.hidden_dim
    block = (
        2 * c                                   # norm1
        + 3 * c * c + 3 * c                     # qkv
        + (2 * cfg.window_size - 1) ** 2 * cfg.heads  # relative position bias table
        + c * c + c                             # output projection
        + 2 * c                                 # norm2
        + c * hid + hid + hid * c + c           # mlp
    )
    module = cfg.blocks_per_module * block + k2 * c * c + c
    return (k2 * cin * c + c) + cfg.module_count * module + (k2 * c * cin + cin)


# ----------------------------------------------------------------------------
# attention op accounting


class _OpCounter:
    def __init__(self):
        self.score_ops = 0
        self.active = False


_COUNTER = _OpCounter()


@contextlib.contextmanager
def count_attention_ops():
    """Count multiply-adds spent forming Q K^T scores inside the block."""
    _COUNTER.score_ops = 0
    _COUNTER.active = True
    try:
        yield _COUNTER
    finally:
        _COUNTER.active = False


# ----------------------------------------------------------------------------
# windows


def window_partition(x: torch.Tensor, window: int, shift: int = 0) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window*window, C), after a cyclic shift of -shift on both grid axes."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"grid {h}x{w} is not divisible by window size {window}")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int, shift: int = 0) -> torch.Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x


@lru_cache(maxsize=None)
def _shift_regions(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Region labels of the cyclically shifted grid; tokens from different regions never attend."""
    img = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    return img


def shift_attention_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor | None:
    """(nW, M, M) additive mask for the shifted partition, or None when unshifted."""
    if not shift:
        return None
    img = torch.from_numpy(_shift_regions(h, w, window, shift)).to(torch.float64)
    # regions are already laid out in shifted coordinates, so partition without rolling
    win = window_partition(img[None, :, :, None], window).squeeze(-1)
    diff = win[:, :, None] - win[:, None, :]
    return torch.where(diff != 0, MASK_VALUE, 0.0)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


# ----------------------------------------------------------------------------
# layers


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows of M = window**2 tokens with relative position bias."""

    def __init__(self, dim: int, heads: int, window: int, dtype=torch.float64):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, dtype=dtype)
        self.proj = nn.Linear(dim, dim, dtype=dtype)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, heads, dtype=dtype))
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)

    def position_bias(self) -> torch.Tensor:
        m = self.window * self.window
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(m, m, self.heads).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B*nW, M, C); mask: additive, broadcastable to (B*nW, heads, M, M)."""
        bw, m, c = x.shape
        if m != self.window * self.window or c != self.dim:
            raise ValueError(f"expected windows of {self.window ** 2} tokens x {self.dim} channels, got {m}x{c}")
        dh = c // self.heads
        qkv = self.qkv(x).view(bw, m, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias()[None]
        if _COUNTER.active:
            _COUNTER.score_ops += bw * self.heads * m * m * dh
        if mask is not None:
            attn = attn + mask
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, m, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, dtype=torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, dim, dtype=dtype)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm attention + MLP; ``shift`` selects the cyclically shifted partition."""

    def __init__(self, cfg: ModelConfig, shift: int, dtype=torch.float64):
        super().__init__()
        c = cfg.embed_dim
        self.window = cfg.window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(c, dtype=dtype)
        self.attn = WindowAttention(c, cfg.heads, cfg.window_size, dtype=dtype)
        self.norm2 = nn.LayerNorm(c, dtype=dtype)
        self.mlp = Mlp(c, cfg.hidden_dim, dtype=dtype)

    def attention_mask(self, h: int, w: int, validity: torch.Tensor | None, like: torch.Tensor):
        """Additive mask (B*nW, 1, M, M) combining shift boundaries and padded keys."""
        mask = None
        boundary = shift_attention_mask(h, w, self.window, self.shift)
        if boundary is not None:
            b = like.shape[0]
            mask = boundary.to(like.dtype).repeat(b, 1, 1)[:, None]
        if validity is not None:
            keys = window_partition(validity[..., None].to(like.dtype), self.window, self.shift)[..., 0]
            key_mask = torch.where(keys > 0, 0.0, MASK_VALUE).to(like.dtype)[:, None, None, :]
            mask = key_mask if mask is None else mask + key_mask
        return mask

    def forward(self, x: torch.Tensor, validity: torch.Tensor | None = None) -> torch.Tensor:
        b, h, w, c = x.shape
        mask = self.attention_mask(h, w, validity, x)
        windows = window_partition(self.norm1(x), self.window, self.shift)
        attn = self.attn(windows, mask)
        x = x + window_reverse(attn, self.window, h, w, self.shift)
        x = x + self.mlp(self.norm2(x))
        if validity is not None:
            x = x * validity[..., None]
        return x


class Conv(nn.Module):
    """Same-padded 2-D convolution on channels-last tensors."""

    def __init__(self, cin: int, cout: int, k: int, dtype=torch.float64):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, padding=k // 2, dtype=dtype)

    def forward(self, x):
        return self.conv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class AttentionModule(nn.Module):
    """``blocks_per_module`` blocks (odd blocks shifted), a convolution, and a module residual."""

    def __init__(self, cfg: ModelConfig, dtype=torch.float64):
        super().__init__()
        half = cfg.window_size // 2
        self.blocks = nn.ModuleList(
            Block(cfg, shift=half if i % 2 else 0, dtype=dtype) for i in range(cfg.blocks_per_module))
        self.conv = Conv(cfg.embed_dim, cfg.embed_dim, cfg.conv_kernel, dtype=dtype)

    def forward(self, x, validity=None):
        z = x
        for blk in self.blocks:
            z = blk(z, validity)
        x = x + self.conv(z)
        if validity is not None:
            x = x * validity[..., None]
        return x


class Backbone(nn.Module):
    """Conv embedding, positional encoding injection, attention modules, conv projection."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float64, device=None):
        super().__init__()
        if cfg.patch_size != 1:
            raise ValueError("only patch_size=1 is implemented")
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            with torch.device(device or "cpu"):
                self.embed = Conv(cfg.in_channels, cfg.embed_dim, cfg.conv_kernel, dtype=dtype)
                self.body = nn.ModuleList(AttentionModule(cfg, dtype=dtype) for _ in range(cfg.module_count))
                self.proj = Conv(cfg.embed_dim, cfg.in_channels, cfg.conv_kernel, dtype=dtype)
            if str(device) != "meta":
                self.apply(_init_weights)

    def forward(self, x: torch.Tensor, pe: torch.Tensor | None = None,
                validity: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, N_nu, N_tau, 2*N_rx); pe: (B or 1, N_nu, N_tau, C); validity: (B, N_nu, N_tau)."""
        if x.shape[-1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[-1]}")
        w = self.cfg.window_size
        if x.shape[1] % w or x.shape[2] % w:
            raise ValueError(f"grid {x.shape[1]}x{x.shape[2]} is not divisible by window size {w}")
        vmask = None if validity is None else validity[..., None]
        if vmask is not None:
            x = x * vmask
        h = self.embed(x)
        if pe is not None:
            h = h + pe
        if vmask is not None:
            h = h * vmask
        for module in self.body:
            h = module(h, validity)
        out = self.proj(h)
        if vmask is not None:
            out = out * vmask
        return out


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def parameter_total(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
