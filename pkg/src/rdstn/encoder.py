"""Residual dense shifted-window transformer encoder.

Feature maps inside the blocks are channel-last ``(B, H, W, d)``; the
encoder's public input/output is channel-first ``(B, C, H, W)``. Every
stage keeps the input resolution so each LR pixel owns one latent code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MASK_VALUE = -1e4


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    dim: int = 120
    num_stages: int = 4
    blocks_per_stage: int = 6
    window_size: int = 8
    num_heads: int = 6
    mlp_ratio: float = 2.0
    use_lff: bool = True
    use_gff: bool = True

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {self.window_size}")
        if self.num_stages < 1 or self.blocks_per_stage < 1:
            raise ValueError("num_stages and blocks_per_stage must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Window plumbing


def linear_embed(img: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-pixel affine map ``(B, C, H, W) -> (B, d, H, W)`` with ``weight`` of shape (d, C)."""
    if img.shape[1] != weight.shape[1]:
        raise ValueError(f"image has {img.shape[1]} channels, embedding expects {weight.shape[1]}")
    return torch.einsum("dc,bchw->bdhw", weight, img) + bias[None, :, None, None]


def window_partition(x: torch.Tensor, m: int) -> torch.Tensor:
    """``(B, H, W, d) -> (B * H/m * W/m, m*m, d)``, windows row-major."""
    b, h, w, d = x.shape
    assert h % m == 0 and w % m == 0, f"{h}x{w} is not a multiple of window {m}"
    x = x.view(b, h // m, m, w // m, m, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, m * m, d)


def window_reverse(windows: torch.Tensor, m: int, h: int, w: int) -> torch.Tensor:
    if h % m or w % m or windows.shape[0] % ((h // m) * (w // m)) or windows.shape[1] != m * m:
        raise ValueError(f"window stack {tuple(windows.shape)} does not tile a {h}x{w} map with window {m}")
    d = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = windows.view(b, h // m, w // m, m, m, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, d)


def cyclic_shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Toroidal roll of the spatial axes of a channel-last ``(B, H, W, d)`` map."""
    if dy == 0 and dx == 0:
        return x
    return torch.roll(x, shifts=(dy, dx), dims=(1, 2))


def build_attention_mask(h: int, w: int, m: int, shift: int) -> torch.Tensor:
    """Additive ``(nW, m*m, m*m)`` mask for attention after a ``-shift`` roll.

    Tokens whose source regions were not adjacent before the roll get
    ``MASK_VALUE``; everything else 0.
    """
    if shift not in (0, m // 2):
        raise ValueError(f"shift must be 0 or {m // 2}, got {shift}")
    n_win = (h // m) * (w // m)
    if shift == 0:
        return torch.zeros(n_win, m * m, m * m)
    region = torch.zeros(1, h, w, 1)
    label = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            region[:, hs, ws, :] = label
            label += 1
    ids = window_partition(region, m).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.where(diff != 0, torch.tensor(MASK_VALUE), torch.tensor(0.0))


def relative_position_index(m: int) -> torch.Tensor:
    """``(m*m, m*m)`` lookup into a ``(2m-1)^2`` bias table."""
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    return (rel[..., 0] + m - 1) * (2 * m - 1) + (rel[..., 1] + m - 1)


def pad_to_multiple(x: torch.Tensor, m: int) -> torch.Tensor:
    """Reflect-pad a channel-last map on the bottom/right up to a multiple of ``m``.

    Uses half-sample symmetric indexing so pads wider than the map work.
    """
    _, h, w, _ = x.shape
    hp = -(-h // m) * m
    wp = -(-w // m) * m
    if (hp, wp) == (h, w):
        return x
    iy = _reflect(hp, h, x.device)
    ix = _reflect(wp, w, x.device)
    return x.index_select(1, iy).index_select(2, ix)


def _reflect(n_out: int, n: int, device) -> torch.Tensor:
    idx = np.mod(np.arange(n_out), 2 * n)
    idx = np.where(idx >= n, 2 * n - 1 - idx, idx)
    return torch.from_numpy(idx).to(device)


# ---------------------------------------------------------------------------
# Modules


class WindowAttention(nn.Module):
    """Multi-head self-attention within ``m x m`` windows plus relative-position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        self.register_buffer(
            "relative_position_index", relative_position_index(window_size), persistent=False
        )
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def position_bias(self) -> torch.Tensor:
        n = self.window_size**2
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        return bias.view(n, n, self.num_heads).permute(2, 0, 1)

    def attention_weights(self, windows: torch.Tensor, mask: torch.Tensor | None = None):
        """Softmax attention maps ``(B_, heads, N, N)`` and the value tensor."""
        b_, n, d = windows.shape
        if d != self.dim:
            raise ValueError(f"token dim {d} != attention dim {self.dim}")
        qkv = self.qkv(windows).view(b_, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias()[:, :n, :n].unsqueeze(0)
        if mask is not None:
            n_win = mask.shape[0]
            attn = attn.view(b_ // n_win, n_win, self.num_heads, n, n)
            attn = attn + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(b_, self.num_heads, n, n)
        return attn.softmax(dim=-1), v

    def forward(self, windows: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        attn, v = self.attention_weights(windows, mask)
        b_, n, d = windows.shape
        out = (attn @ v).transpose(1, 2).reshape(b_, n, d)
        return self.proj(out)


def window_attention(
    windows: torch.Tensor, params: WindowAttention, mask: torch.Tensor | None = None
) -> torch.Tensor:
    return params(windows, mask)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm block: ``x + W-MSA(LN(x))`` then ``x + MLP(LN(x))``.

    Inputs of any size are reflect-padded to a window multiple and cropped
    back afterwards.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, mlp_ratio: float, shifted: bool):
        super().__init__()
        self.window_size = window_size
        self.shift = window_size // 2 if shifted else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._masks: dict[tuple[int, int], torch.Tensor] = {}

    def mask_for(self, h: int, w: int, device) -> torch.Tensor | None:
        if not self.shift:
            return None
        key = (h, w)
        mask = self._masks.get(key)
        if mask is None:
            mask = build_attention_mask(h, w, self.window_size, self.shift)
            self._masks[key] = mask
        return mask.to(device)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        m = self.window_size
        xp = pad_to_multiple(x, m)
        hp, wp = xp.shape[1:3]

        y = self.norm1(xp)
        y = cyclic_shift(y, -self.shift, -self.shift)
        y = window_partition(y, m)
        y = self.attn(y, self.mask_for(hp, wp, x.device))
        y = window_reverse(y, m, hp, wp)
        y = cyclic_shift(y, self.shift, self.shift)
        xp = xp + y
        xp = xp + self.mlp(self.norm2(xp))
        return xp[:, :h, :w, :]


def swin_block(fm: torch.Tensor, params: SwinBlock) -> torch.Tensor:
    """Apply one block to a channel-first ``(B, d, H, W)`` map."""
    return params(fm.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class RSTBlock(nn.Module):
    """One stage: D swin blocks (odd ones shifted), optional local fusion.

    With ``use_lff`` the stage output is ``Conv1x1([F_prev, STB(F_prev)])``;
    otherwise it is ``STB(F_prev)``.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.dim
        self.blocks = nn.ModuleList(
            SwinBlock(d, config.num_heads, config.window_size, config.mlp_ratio, shifted=i % 2 == 1)
            for i in range(config.blocks_per_stage)
        )
        self.use_lff = config.use_lff
        self.lff = nn.Conv2d(2 * d, d, 1) if config.use_lff else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.permute(0, 2, 3, 1)
        for blk in self.blocks:
            y = blk(y)
        y = y.permute(0, 3, 1, 2)
        if self.lff is None:
            return y
        return self.lff(torch.cat([x, y], dim=1))


class RDSTEncoder(nn.Module):
    """Embedding, N stages and global fusion: ``F_in + Conv1x1([F_in, F_1..F_N])``.

    Without global fusion the output is ``F_in + F_N``.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.embed = nn.Conv2d(config.in_channels, d, 1)
        self.stages = nn.ModuleList(RSTBlock(config) for _ in range(config.num_stages))
        self.gff = nn.Conv2d((config.num_stages + 1) * d, d, 1) if config.use_gff else None
        self.apply(_init_weights)

    @property
    def out_dim(self) -> int:
        return self.config.dim

    def embed_features(self, img: torch.Tensor) -> torch.Tensor:
        return linear_embed(img, self.embed.weight[:, :, 0, 0], self.embed.bias)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        f_in = self.embed_features(img)
        feats = [f_in]
        f = f_in
        for stage in self.stages:
            f = stage(f)
            feats.append(f)
        if self.gff is None:
            return f_in + f
        return f_in + self.gff(torch.cat(feats, dim=1))


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
