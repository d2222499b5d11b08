"""Hierarchical ViT encoder with masked-unit dropping, plus a plain ViT baseline.

The image is cut into stride-16 *units*.  Each unit holds a 4x4 grid of
4x4-pixel sub-patches.  The first two stages only see one unit at a time
(per-token MLP blocks and 2x2 merges inside the unit), so a masked unit can be
removed before any computation happens.  After both merges every unit is a
single token and the third stage runs global self-attention over the kept
units, with fixed 2-D sin-cos positions.

Shapes used throughout::

    images   (B, C, H, W)
    units    (B, N, 16, p*p*C)     N = G*G units, row-major over the unit grid
    ids      (B, M)                indices of kept units, M <= N
    tokens   (B, M, dim)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ParameterError, ShapeError

UNIT_SUBGRID = 4  # sub-patches per unit side (two 2x2 merges)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 128
    in_chans: int = 1
    patch_size: int = 4
    dims: tuple[int, int, int] = (32, 64, 128)
    depths: tuple[int, int, int] = (1, 1, 4)
    num_heads: int = 4
    mlp_ratio: float = 2.0
    variant: str = "hivit"
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.variant not in ("hivit", "vit"):
            raise ParameterError(f"variant must be 'hivit' or 'vit', got {self.variant!r}")
        if len(self.dims) != 3 or len(self.depths) != 3:
            raise ParameterError("dims and depths need exactly three entries")
        if self.input_size % self.stride:
            raise ParameterError(f"input_size {self.input_size} is not divisible by the token stride {self.stride}")
        if self.dims[2] % self.num_heads:
            raise ParameterError(f"final dim {self.dims[2]} is not divisible by {self.num_heads} heads")
        if self.depths[2] < 1 and self.variant == "vit":
            raise ParameterError("the ViT variant needs at least one transformer block")

    @property
    def stride(self) -> int:
        return self.patch_size * UNIT_SUBGRID

    @property
    def grid(self) -> int:
        return self.input_size // self.stride

    @property
    def num_units(self) -> int:
        return self.grid * self.grid

    @property
    def embed_dim(self) -> int:
        return self.dims[2]

    def to_dict(self):
        d = asdict(self)
        d["dims"], d["depths"] = list(self.dims), list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sincos_pos_embed(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin-cos embedding, ``(grid*grid, dim)``; half the channels encode rows."""
    if dim % 4:
        raise ParameterError(f"sin-cos positions need dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def enc(pos):
        out = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return torch.from_numpy(np.concatenate([enc(rows), enc(cols)], axis=1)).float()


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class MlpBlock(nn.Module):
    """Pre-norm residual MLP applied to each token independently."""

    def __init__(self, dim, mlp_ratio=2.0, eps=1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=eps)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        return x + self.mlp(self.norm(x))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.record = False
        self.last_attn = None

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        if self.record:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=2.0, eps=1e-6):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """Merge each 2x2 group of sub-patches inside a unit: ``(B, M, s*s, C) -> (B, M, s*s/4, C_out)``."""

    def __init__(self, dim, out_dim, eps=1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim, eps=eps)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):
        b, m, s2, c = x.shape
        s = math.isqrt(s2)
        h = s // 2
        x = x.reshape(b, m, h, 2, h, 2, c).permute(0, 1, 2, 4, 3, 5, 6).reshape(b, m, h * h, 4 * c)
        return self.reduction(self.norm(x))


def patchify_units(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, C, H, W) -> (B, N, 16, p*p*C)`` with units and sub-patches row-major."""
    b, c, h, w = images.shape
    unit = patch_size * UNIT_SUBGRID
    if h % unit or w % unit:
        raise ShapeError(f"image size {h}x{w} is not divisible by the unit size {unit}")
    gh, gw = h // unit, w // unit
    x = images.reshape(b, c, gh, UNIT_SUBGRID, patch_size, gw, UNIT_SUBGRID, patch_size)
    x = x.permute(0, 2, 5, 3, 6, 4, 7, 1)
    return x.reshape(b, gh * gw, UNIT_SUBGRID * UNIT_SUBGRID, patch_size * patch_size * c)


def gather_units(x: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Select units ``ids`` (B, M) along dim 1 of ``x`` (B, N, ...)."""
    shape = ids.shape + (1,) * (x.dim() - 2)
    index = ids.reshape(shape).expand(*ids.shape, *x.shape[2:])
    return torch.gather(x, 1, index)


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Encoder(nn.Module):
    """HiViT-style (``variant="hivit"``) or plain ViT (``variant="vit"``) encoder."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d1, d2, d3 = cfg.dims
        n1, n2, n3 = cfg.depths
        eps = cfg.ln_eps
        p2c = cfg.patch_size * cfg.patch_size * cfg.in_chans
        if cfg.variant == "hivit":
            self.patch_embed = nn.Linear(p2c, d1)
            self.stage1 = nn.ModuleList(MlpBlock(d1, cfg.mlp_ratio, eps) for _ in range(n1))
            self.merge1 = PatchMerge(d1, d2, eps)
            self.stage2 = nn.ModuleList(MlpBlock(d2, cfg.mlp_ratio, eps) for _ in range(n2))
            self.merge2 = PatchMerge(d2, d3, eps)
        else:
            self.patch_embed = nn.Linear(p2c * UNIT_SUBGRID * UNIT_SUBGRID, d3)
        self.blocks = nn.ModuleList(Block(d3, cfg.num_heads, cfg.mlp_ratio, eps) for _ in range(n3))
        self.norm = nn.LayerNorm(d3, eps=eps)
        self.register_buffer("pos_embed", sincos_pos_embed(cfg.grid, d3), persistent=False)
        self.apply(_init_weights)

    def units(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.dim() != 4 or images.shape[1] != cfg.in_chans or images.shape[-1] != cfg.input_size \
                or images.shape[-2] != cfg.input_size:
            raise ShapeError(f"expected images (B, {cfg.in_chans}, {cfg.input_size}, {cfg.input_size}), "
                             f"got {tuple(images.shape)}")
        return patchify_units(images, cfg.patch_size)

    def local_stages(self, units: torch.Tensor) -> torch.Tensor:
        """Token-local stages: ``(B, M, 16, p*p*C) -> (B, M, d3)``."""
        if self.cfg.variant == "vit":
            return self.patch_embed(units.flatten(2))
        x = self.patch_embed(units)
        for blk in self.stage1:
            x = blk(x)
        x = self.merge1(x)
        for blk in self.stage2:
            x = blk(x)
        return self.merge2(x).squeeze(2)

    def global_stage(self, x: torch.Tensor, ids: torch.Tensor, add_pos=True, upto=None) -> torch.Tensor:
        if add_pos:
            x = x + self.pos_embed[ids]
        for blk in self.blocks[:upto]:
            x = blk(x)
        return self.norm(x) if upto is None else x

    def default_ids(self, batch: int, device=None) -> torch.Tensor:
        return torch.arange(self.cfg.num_units, device=device).expand(batch, -1)

    def forward(self, images: torch.Tensor, ids_keep: torch.Tensor | None = None) -> torch.Tensor:
        """Encode ``images``; with ``ids_keep`` (B, M) only those units are processed."""
        units = self.units(images)
        b = units.shape[0]
        if ids_keep is None:
            ids_keep = self.default_ids(b, units.device)
        else:
            if ids_keep.dim() != 2 or ids_keep.shape[0] != b:
                raise ShapeError(f"ids_keep must be (B, M) with B={b}, got {tuple(ids_keep.shape)}")
            if ids_keep.numel() and (int(ids_keep.max()) >= self.cfg.num_units or int(ids_keep.min()) < 0):
                raise ShapeError(f"unit ids out of range for a {self.cfg.grid}x{self.cfg.grid} grid")
            units = gather_units(units, ids_keep)
        return self.global_stage(self.local_stages(units), ids_keep)

    def token_counts(self, num_visible: int) -> dict:
        """Tokens entering each stage for ``num_visible`` kept units."""
        if self.cfg.variant == "vit":
            return {"stage3": num_visible}
        s = UNIT_SUBGRID * UNIT_SUBGRID
        return {"stage1": num_visible * s, "stage2": num_visible * s // 4, "stage3": num_visible}

    def attention_modules(self) -> list[Attention]:
        return [blk.attn for blk in self.blocks]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class MimDecoder(nn.Module):
    """Light-weight decoder: visible latents plus mask tokens, sin-cos positions, linear head."""

    def __init__(self, enc_dim, grid, out_dim, width=64, depth=2, num_heads=4, mlp_ratio=2.0, eps=1e-6):
        super().__init__()
        self.grid = grid
        self.embed = nn.Linear(enc_dim, width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        self.blocks = nn.ModuleList(Block(width, num_heads, mlp_ratio, eps) for _ in range(depth))
        self.norm = nn.LayerNorm(width, eps=eps)
        self.head = nn.Linear(width, out_dim)
        self.register_buffer("pos_embed", sincos_pos_embed(grid, width), persistent=False)
        self.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, latent: torch.Tensor, ids_keep: torch.Tensor) -> torch.Tensor:
        b, m, _ = latent.shape
        n = self.grid * self.grid
        x = self.embed(latent)
        full = self.mask_token.expand(b, n, x.shape[-1])
        full = torch.scatter(full, 1, ids_keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        full = full + self.pos_embed
        for blk in self.blocks:
            full = blk(full)
        return self.head(self.norm(full))


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Encoder(cfg)


def token_centers(grid: int, stride: float) -> torch.Tensor:
    """Pixel coordinates ``(grid*grid, 2)`` of token centres, row-major."""
    r, c = torch.meshgrid(torch.arange(grid, dtype=torch.float64), torch.arange(grid, dtype=torch.float64),
                          indexing="ij")
    return torch.stack([(r.ravel() + 0.5) * stride, (c.ravel() + 0.5) * stride], dim=1)


def mean_attention_distance(attn: torch.Tensor, grid: int, stride: float) -> torch.Tensor:
    """Attention-weighted query-key distance, averaged over batch and queries.

    ``attn`` is ``(B, H, N, N)`` with rows summing to one; returns ``(H,)``
    distances in pixels.
    """
    attn = attn.to(torch.float64)
    if attn.shape[-1] != grid * grid or attn.shape[-2] != grid * grid:
        raise ShapeError(f"attention maps {tuple(attn.shape)} do not match a {grid}x{grid} grid")
    centers = token_centers(grid, stride)
    dist = torch.cdist(centers, centers)
    per_query = (attn * dist).sum(-1)
    return per_query.mean(dim=(0, 2))


@dataclass
class AttnDistanceReport:
    """Mean attention distance (pixels) per ``(layer, head)``."""

    distances: np.ndarray  # (layers, heads)
    count: int
    image_diagonal: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        for layer in range(self.distances.shape[0]):
            for head in range(self.distances.shape[1]):
                yield {"layer": layer, "head": head, "mean_distance_px": float(self.distances[layer, head]),
                       "count": self.count}

    def layer_means(self) -> np.ndarray:
        return self.distances.mean(axis=1)


@torch.no_grad()
def attention_distance(model: Encoder, images, batch_size=64, masked=False) -> AttnDistanceReport:
    """Per-layer, per-head mean attention distance over ``images`` (N, H, W) or (N, C, H, W)."""
    if masked:
        raise ParameterError("attention distance is only defined for unmasked forward passes")
    cfg = model.cfg
    if len(model.blocks) == 0:
        raise ParameterError("the model has no attention layers")
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    attn_mods = model.attention_modules()
    totals = torch.zeros(len(attn_mods), cfg.num_heads, dtype=torch.float64)
    was_training = model.training
    model.eval()
    try:
        for m in attn_mods:
            m.record = True
        for start in range(0, x.shape[0], batch_size):
            chunk = x[start:start + batch_size]
            model(chunk)
            for li, m in enumerate(attn_mods):
                totals[li] += mean_attention_distance(m.last_attn, cfg.grid, cfg.stride) * chunk.shape[0]
    finally:
        for m in attn_mods:
            m.record = False
            m.last_attn = None
        model.train(was_training)
    n = x.shape[0]
    return AttnDistanceReport((totals / n).numpy(), n, math.hypot(cfg.input_size, cfg.input_size),
                              {"config_hash": cfg.config_hash(), "variant": cfg.variant})
