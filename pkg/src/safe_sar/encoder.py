"""Variable-input-size ViT feature extractor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class EncoderConfig:
    token_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    n_heads: int = 3
    mlp_ratio: float = 4.0
    in_channels: int = 1

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the 2-D sinusoidal encoding")
        if self.in_channels not in (1, 4):
            raise ValueError("in_channels must be 1 or 4")

    @classmethod
    def from_config(cls, cfg) -> "EncoderConfig":
        return cls(**cfg.section("encoder"))

    def to_dict(self) -> dict:
        return asdict(self)


def kept_count(n: int, p: float) -> int:
    """Tokens left after dropping ``round(p * n)`` (halves round up)."""
    return n - int(math.floor(p * n + 0.5))


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int) -> Tensor:
    """Fixed 2-D sine/cosine encoding, shape (grid_h * grid_w, dim), row-major.

    Half of the channels encode the row index and half the column index.
    """
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    rows, cols = torch.meshgrid(
        torch.arange(grid_h, dtype=torch.float64), torch.arange(grid_w, dtype=torch.float64), indexing="ij"
    )
    out_r = rows.reshape(-1, 1) * omega
    out_c = cols.reshape(-1, 1) * omega
    return torch.cat([out_r.sin(), out_r.cos(), out_c.sin(), out_c.cos()], dim=1)


def mask_tokens(tokens: Tensor, p: float, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Drop a uniformly random ``round(p*n)`` tokens from each sequence.

    Returns the kept tokens and their original indices, in ascending order.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"masking fraction must be in [0, 1), got {p}")
    b, n, _ = tokens.shape
    keep = kept_count(n, p)
    idx = torch.arange(n, device=tokens.device).expand(b, n)
    if keep < n:
        noise = torch.rand(b, n, generator=generator)
        idx = noise.argsort(dim=1)[:, :keep].sort(dim=1).values
    kept = torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))
    return kept, idx


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class SafeEncoder(nn.Module):
    """Convolutional tokenizer, pre-norm transformer trunk, mean-pooled output.

    Accepts any ``(B, c, h, w)`` input whose sides are multiples of the
    token size and always returns ``(B, embed_dim)``.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_channels, d, kernel_size=cfg.token_size, stride=cfg.token_size)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self._pos_cache: dict[tuple[int, int], Tensor] = {}
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def _pos(self, gh: int, gw: int, like: Tensor) -> Tensor:
        key = (gh, gw)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_pos_embed(gh, gw, self.cfg.embed_dim)
        return self._pos_cache[key].to(dtype=like.dtype, device=like.device)

    def tokenize(self, x: Tensor, add_position: bool = True) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, h, w) input, got {tuple(x.shape)}")
        t = self.cfg.token_size
        if x.shape[-2] % t or x.shape[-1] % t:
            raise ValueError(f"input {x.shape[-2]}x{x.shape[-1]} is not divisible by token size {t}")
        tokens = self.patch_embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)
        if add_position:
            tokens = tokens + self._pos(gh, gw, tokens)
        return tokens

    def forward(self, x: Tensor, mask_p: float = 0.0, generator: torch.Generator | None = None) -> Tensor:
        tokens = self.tokenize(x)
        if mask_p > 0:
            tokens, _ = mask_tokens(tokens, mask_p, generator)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens).mean(dim=1)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def to_tensor(images: np.ndarray | Tensor) -> Tensor:
    """(h, w, c) or (B, h, w, c) channel-last arrays to a (B, c, h, w) tensor."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def encode(
    images: np.ndarray | Tensor, model: SafeEncoder, mask_p: float = 0.0, seed: int | None = None
) -> Tensor:
    """Feature vectors of channel-last images; ``mask_p=0`` is the inference setting."""
    generator = torch.Generator().manual_seed(seed) if seed is not None else None
    x = to_tensor(images).to(next(model.parameters()).dtype)
    return model.eval()(x, mask_p=mask_p, generator=generator)
