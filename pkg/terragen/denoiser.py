"""
Toy U-Net noise predictor with multi-scale masked cross-attention injection
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, field_validator

from terragen import numerics as nx
from terragen.conditioning import ConditionBundle
from terragen.errors import ConfigError, ShapeError
from terragen.layout import Mask, UnifiedEntity, resample_mask

logger = logging.getLogger(__name__)

BLOCKED_LOGIT = -1e9
N_FIXED_COLUMNS = 2  # task, caption
INITIAL_SCALE_WEIGHTS = (0.1, 0.3, 0.6)


class UNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(32, ge=2)
    in_channels: int = Field(3, ge=1)
    base_channels: int = Field(32, ge=1)
    channel_mults: Tuple[int, ...] = (1, 2, 2, 2)
    levels: int = Field(4, ge=1)
    time_dim: int = Field(64, ge=2)
    cond_dim: int = Field(64, ge=1)
    attention_heads: int = Field(4, ge=1)
    injection_resolutions: Tuple[int, int, int] = (16, 8, 4)
    injection_mode: str = "coarse_two"
    mask_mode: str = "additive"

    @field_validator("injection_mode")
    @classmethod
    def _known_injection_mode(cls, value):
        if value not in ("all_levels", "coarse_two"):
            raise ValueError("injection_mode must be all_levels or coarse_two")
        return value

    @field_validator("mask_mode")
    @classmethod
    def _known_mask_mode(cls, value):
        if value not in ("additive", "multiplicative"):
            raise ValueError("mask_mode must be additive or multiplicative")
        return value

    def active_resolutions(self) -> Tuple[int, ...]:
        ordered = sorted(self.injection_resolutions)
        return tuple(ordered[:2]) if self.injection_mode == "coarse_two" else tuple(ordered)

# ============= MASK PYRAMID =============

@dataclass
class MaskPyramid:
    """Per scale a (H*W) x (n+2) binary matrix, columns [task, caption, entities]"""
    resolutions: Tuple[int, ...]
    matrices: List[np.ndarray]

    @property
    def n_columns(self) -> int:
        return self.matrices[0].shape[1]

    def column_grid(self, scale: int, column: int) -> np.ndarray:
        r = self.resolutions[scale]
        return self.matrices[scale][:, column].reshape(r, r)


def max_pool_mask(mask: Mask, resolution: int) -> np.ndarray:
    if mask.height != mask.width or mask.height % resolution != 0:
        bits = resample_mask(mask, resolution * max(1, mask.height // resolution),
                             resolution * max(1, mask.width // resolution)).bits
    else:
        bits = mask.bits
    factor = bits.shape[0] // resolution
    return bits.reshape(resolution, factor, resolution, factor).any(axis=(1, 3))


def build_mask_pyramid(entities: Sequence[UnifiedEntity], resolutions: Sequence[int]) -> MaskPyramid:
    matrices = []
    for r in resolutions:
        columns = [np.ones(r * r, dtype=bool), np.ones(r * r, dtype=bool)]
        columns += [max_pool_mask(entity.mask, r).reshape(-1) for entity in entities]
        matrices.append(np.stack(columns, axis=1))
    return MaskPyramid(tuple(resolutions), matrices)

# ============= ATTENTION =============

class ScaleWeights(nn.Module):
    """alpha = softmax(logits); starts at the given convex weights"""

    def __init__(self, initial: Sequence[float] = INITIAL_SCALE_WEIGHTS):
        super().__init__()
        self.logits = nn.Parameter(torch.log(torch.tensor(initial, dtype=torch.float64)).to(torch.get_default_dtype()))

    def alphas(self) -> torch.Tensor:
        return nx.softmax(self.logits, dim=0)


def masked_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                           masks: Sequence[torch.Tensor], alphas: torch.Tensor,
                           mask_mode: str = "additive", padding: Optional[torch.Tensor] = None,
                           return_weights: bool = False):
    """sum_k alpha_k softmax(mask_k(QK^T / sqrt(d))) V

    masks are {0,1} tensors broadcastable to (..., T, N); padding marks real
    key columns and is always applied additively.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"masked_cross_attention: head dims differ {list(q.shape)} vs {list(k.shape)}",
            details={"kernel": "masked_cross_attention"},
        )
    if len(masks) != alphas.shape[0]:
        raise ShapeError(
            f"masked_cross_attention: {len(masks)} masks for {alphas.shape[0]} scale weights",
            details={"kernel": "masked_cross_attention"},
        )
    logits = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    pad_bias = None
    if padding is not None:
        pad_bias = (~padding).to(logits.dtype)[..., None, :] * BLOCKED_LOGIT

    mixed = None
    for index, mask in enumerate(masks):
        mask = mask.to(logits.dtype)
        if mask_mode == "additive":
            scaled = logits + (1 - mask) * BLOCKED_LOGIT
        else:
            scaled = nx.mul(logits, mask)
        if pad_bias is not None:
            scaled = scaled + pad_bias
        weights = alphas[index] * nx.softmax(scaled, dim=-1)
        mixed = weights if mixed is None else mixed + weights

    out = nx.matmul(mixed, v)
    return (out, mixed) if return_weights else out


def _nearest_indices(source: int, target: int) -> torch.Tensor:
    return torch.clamp(((torch.arange(target) + 0.5) * source / target).long(), max=source - 1)


@dataclass
class ConditionBatch:
    """Padded condition tokens and per-scale column masks for a batch"""
    tokens: torch.Tensor          # (B, N, D)
    valid: torch.Tensor           # (B, N) bool
    scale_masks: List[torch.Tensor]  # per scale (B, N, r, r)
    n_entities: List[int]

    @property
    def n_columns(self) -> int:
        return self.tokens.shape[1]


def collate_bundles(bundles: Sequence[ConditionBundle], resolutions: Sequence[int]) -> ConditionBatch:
    width = N_FIXED_COLUMNS + max((bundle.n_entities for bundle in bundles), default=0)
    rows, valid, scale_masks = [], [], [[] for _ in resolutions]
    for bundle in bundles:
        tokens = bundle.tokens()
        pad = width - tokens.shape[0]
        if pad:
            tokens = nx.concat([tokens, tokens.new_zeros(pad, tokens.shape[1])], dim=0)
        rows.append(tokens)
        valid.append(torch.arange(width) < N_FIXED_COLUMNS + bundle.n_entities)

        pyramid = build_mask_pyramid(bundle.entities, resolutions)
        for scale, matrix in enumerate(pyramid.matrices):
            r = resolutions[scale]
            grid = np.zeros((width, r, r), dtype=bool)
            grid[:matrix.shape[1]] = matrix.T.reshape(-1, r, r)
            scale_masks[scale].append(torch.from_numpy(grid))
    return ConditionBatch(
        tokens=torch.stack(rows),
        valid=torch.stack(valid),
        scale_masks=[torch.stack(masks) for masks in scale_masks],
        n_entities=[bundle.n_entities for bundle in bundles],
    )


class InjectionBlock(nn.Module):
    """f_out = f_in + out(masked_cross_attention(q(f_in), k(h), v(h)))"""

    def __init__(self, channels: int, resolution: int, cond_dim: int, heads: int, mask_mode: str):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"{channels} channels are not divisible by {heads} attention heads")
        self.resolution = resolution
        self.heads = heads
        self.mask_mode = mask_mode
        self.norm = nx.GroupNorm(nx.norm_groups(channels), channels)
        self.to_q = nx.Linear(channels, channels)
        self.token_proj = nx.Linear(cond_dim, cond_dim)
        self.to_k = nx.Linear(cond_dim, channels)
        self.to_v = nx.Linear(cond_dim, channels)
        self.to_out = nx.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.scale_weights = ScaleWeights()

    def forward(self, f_in: torch.Tensor, cond: ConditionBatch, return_weights: bool = False):
        b, c, h, w = f_in.shape
        if h != self.resolution or w != self.resolution:
            raise ShapeError(
                f"inject: expected a {self.resolution}x{self.resolution} map, got {h}x{w}",
                details={"kernel": "inject"},
            )
        hd = c // self.heads
        queries = self.norm(f_in).flatten(2).transpose(1, 2)
        q = self.to_q(queries).view(b, h * w, self.heads, hd).transpose(1, 2)
        tokens = self.token_proj(cond.tokens)
        n = tokens.shape[1]
        k = self.to_k(tokens).view(b, n, self.heads, hd).transpose(1, 2)
        v = self.to_v(tokens).view(b, n, self.heads, hd).transpose(1, 2)

        masks = []
        for grid in cond.scale_masks:
            source = grid.shape[-1]
            index = _nearest_indices(source, h)
            resampled = grid[:, :, index][:, :, :, index]
            masks.append(resampled.flatten(2).transpose(1, 2)[:, None])  # (B, 1, T, N)

        out, weights = masked_cross_attention(
            q, k, v, masks, self.scale_weights.alphas(), self.mask_mode,
            padding=cond.valid[:, None, :], return_weights=True,
        )
        out = self.to_out(out.transpose(1, 2).reshape(b, h * w, c))
        f_out = nx.add(f_in, out.transpose(1, 2).reshape(b, c, h, w))
        return (f_out, weights) if return_weights else f_out

# ============= U-NET =============

class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(torch.arange(half, dtype=torch.float64) * -(math.log(10000) / max(half - 1, 1)))
        angles = t.to(torch.float64)[:, None] * freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).to(dtype)


class ConvBlock(nn.Module):
    """conv -> group norm -> SiLU -> + time projection"""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int, stride: int = 1):
        super().__init__()
        self.conv = nx.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm = nx.GroupNorm(nx.norm_groups(out_channels), out_channels)
        self.time = nx.Linear(time_dim, out_channels)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = nx.silu(self.norm(self.conv(x)))
        return nx.add(h, self.time(t_emb)[:, :, None, None])


@dataclass
class ForwardOutput:
    eps: torch.Tensor
    attention: Optional[torch.Tensor] = None  # (B, N_entities_max, H, W)


class UNet(nn.Module):
    def __init__(self, config: Optional[UNetConfig] = None):
        super().__init__()
        self.config = config = config or UNetConfig()
        if config.image_size % (2 ** config.levels) != 0:
            raise ConfigError(f"image_size {config.image_size} is not divisible by 2**{config.levels}")
        if config.image_size < 2 ** (config.levels + 1):
            raise ConfigError(
                f"image_size {config.image_size} leaves a bottleneck below 2x2 after {config.levels} levels"
            )
        if len(config.channel_mults) != config.levels:
            raise ConfigError(f"channel_mults needs {config.levels} entries, got {len(config.channel_mults)}")
        for r in config.injection_resolutions:
            if config.image_size % r != 0:
                raise ConfigError(f"injection resolution {r} does not divide image_size {config.image_size}")

        size = config.image_size
        active = set(config.active_resolutions())
        skip_channels = [config.base_channels]
        channels = config.base_channels

        self.time_embedding = SinusoidalTimeEmbedding(config.time_dim)
        self.time_mlp = nn.Sequential(nx.Linear(config.time_dim, config.time_dim), nn.SiLU(),
                                      nx.Linear(config.time_dim, config.time_dim))
        self.init_conv = nx.Conv2d(config.in_channels, config.base_channels, 3, padding=1)

        self.down = nn.ModuleList()
        self.down_inject = nn.ModuleDict()
        for i, mult in enumerate(config.channel_mults):
            out_channels = config.base_channels * mult
            self.down.append(ConvBlock(channels, out_channels, config.time_dim, stride=2))
            resolution = size // 2 ** (i + 1)
            if resolution in active:
                self.down_inject[str(i)] = self._injection(out_channels, resolution)
            channels = out_channels
            skip_channels.append(out_channels)

        self.mid = ConvBlock(channels, channels, config.time_dim)

        self.up = nn.ModuleList()
        self.up_inject = nn.ModuleDict()
        for j in reversed(range(config.levels)):
            out_channels = skip_channels[j]
            self.up.append(ConvBlock(channels + out_channels, out_channels, config.time_dim))
            resolution = size // 2 ** j
            if resolution in active:
                self.up_inject[str(j)] = self._injection(out_channels, resolution)
            channels = out_channels

        self.final = nx.Conv2d(channels, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def _injection(self, channels: int, resolution: int) -> InjectionBlock:
        return InjectionBlock(channels, resolution, self.config.cond_dim,
                              self.config.attention_heads, self.config.mask_mode)

    def injection_blocks(self) -> List[InjectionBlock]:
        return list(self.down_inject.values()) + list(self.up_inject.values())

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: ConditionBatch,
                return_attention: bool = False) -> ForwardOutput:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeError(
                f"unet: expected (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {list(x.shape)}",
                details={"kernel": "unet"},
            )
        t_emb = self.time_mlp(self.time_embedding(t, x.dtype))
        maps = []

        def inject(block: InjectionBlock, h: torch.Tensor) -> torch.Tensor:
            h, weights = block(h, cond, return_weights=True)
            if return_attention:
                entity = weights.mean(dim=1)[:, :, N_FIXED_COLUMNS:]  # (B, T, n)
                r = block.resolution
                grid = entity.transpose(1, 2).reshape(h.shape[0], entity.shape[-1], r, r)
                index = _nearest_indices(r, cfg.image_size)
                maps.append(grid[:, :, index][:, :, :, index])
            return h

        h = self.init_conv(x)
        skips = [h]
        for i, block in enumerate(self.down):
            h = block(h, t_emb)
            if str(i) in self.down_inject:
                h = inject(self.down_inject[str(i)], h)
            skips.append(h)

        h = self.mid(h, t_emb)
        skips.pop()

        for block, j in zip(self.up, reversed(range(cfg.levels))):
            h = nx.concat([nx.upsample2x(h), skips[j]], dim=1)
            h = block(h, t_emb)
            if str(j) in self.up_inject:
                h = inject(self.up_inject[str(j)], h)

        eps = self.final(h)
        attention = torch.stack(maps).mean(dim=0) if maps else None
        return ForwardOutput(eps=eps, attention=attention)
