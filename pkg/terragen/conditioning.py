"""
Layout and task conditioning
Box MLP, mask CNN, box-to-mask fusion attention, task FiLM, caption embedding
and the learned null bundle used for classifier-free guidance
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

from terragen import numerics as nx
from terragen.errors import ConfigError, ShapeError
from terragen.layout import (
    N_CATEGORIES, Layout, TaskId, UnifiedEntity, rasterize_box, resample_mask, tight_box, unify,
)

logger = logging.getLogger(__name__)

N_TASKS = len(TaskId)

# (alpha_box, alpha_mask) per inference preset
ALPHA_PRESETS: Dict[str, Tuple[float, float]] = {
    "detection": (0.8, 0.6),
    "segmentation": (0.6, 0.9),
    "balanced": (0.6, 0.6),
    "train": (1.0, 1.0),
}
LAYOUT_CONTROLS = ("box", "mask", "both")


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(64, ge=4)
    fusion_heads: int = Field(4, ge=1)
    fusion_key_dim: int = Field(16, ge=1)
    mask_cnn_channels: Tuple[int, int, int, int] = (8, 16, 32, 64)
    mask_input_size: int = Field(16, ge=1)
    n_categories: int = N_CATEGORIES
    alpha_box: float = 1.0
    alpha_mask: float = 1.0

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.dim % self.fusion_heads != 0:
            raise ValueError(f"dim {self.dim} is not divisible by fusion_heads {self.fusion_heads}")
        if self.mask_cnn_channels[-1] != self.dim:
            raise ValueError(f"mask_cnn_channels must end at dim {self.dim}")
        return self


def resolve_alphas(preset: str, task: TaskId) -> Tuple[float, float]:
    """'auto' follows the task: detection weights for T0, segmentation otherwise"""
    if preset == "auto":
        preset = "detection" if task == TaskId.DETECTION else "segmentation"
    if preset not in ALPHA_PRESETS:
        raise ConfigError(f"Unknown alpha preset '{preset}'")
    return ALPHA_PRESETS[preset]


def restrict_modality(entities: Sequence[UnifiedEntity], control: str) -> List[UnifiedEntity]:
    """Rebuild one modality from the other: 'box' rasterizes boxes, 'mask' re-derives tight boxes"""
    if control == "both":
        return list(entities)
    if control not in LAYOUT_CONTROLS:
        raise ConfigError(f"Unknown layout control '{control}'")

    restricted = []
    for entity in entities:
        if control == "box":
            mask = rasterize_box(entity.box, entity.mask.height, entity.mask.width)
            if mask.area == 0:
                continue
            restricted.append(UnifiedEntity(entity.category, entity.box, mask))
        else:
            restricted.append(UnifiedEntity(entity.category, tight_box(entity.mask), entity.mask))
    return restricted


@dataclass
class ConditionBundle:
    entity_tokens: torch.Tensor
    task_token: torch.Tensor
    caption_token: torch.Tensor
    null_flag: bool = False
    task: Optional[TaskId] = None
    entities: Tuple[UnifiedEntity, ...] = field(default_factory=tuple)

    @property
    def n_entities(self) -> int:
        return self.entity_tokens.shape[0]

    def tokens(self) -> torch.Tensor:
        """[task, caption, entity_1 .. entity_n] as an (n+2) x D matrix"""
        return nx.concat([self.task_token[None], self.caption_token[None], self.entity_tokens], dim=0)


class ConditionEncoder(nn.Module):
    def __init__(self, config: Optional[EncoderConfig] = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        d = config.dim
        inner = config.fusion_heads * config.fusion_key_dim

        # box branch
        self.category_embedding = nx.Embedding(config.n_categories, d)
        self.box_in = nx.Linear(4 + d, d)
        self.box_out = nx.Linear(d, d)

        # mask branch
        ladder = (1,) + tuple(config.mask_cnn_channels)
        self.mask_convs = nn.ModuleList(
            nx.Conv2d(ladder[i], ladder[i + 1], 3, stride=2, padding=1) for i in range(4)
        )

        # fusion
        self.fuse_q = nx.Linear(d, inner)
        self.fuse_k = nx.Linear(d, inner)
        self.fuse_v = nx.Linear(d, inner, bias=False)
        self.fuse_out = nx.Linear(inner, d, bias=False)
        self.residual = nx.Linear(d, d, bias=False)

        # task and caption
        self.task_embedding = nx.Embedding(N_TASKS, d)
        self.film = nx.Linear(d, 2 * d)
        self.caption = nx.Linear(config.n_categories, d)
        self.null_task = nn.Parameter(torch.randn(d) * 0.02)
        self.null_caption = nn.Parameter(torch.randn(d) * 0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.box_in.weight.dtype

    # ============= ENTITY ENCODERS =============

    def encode_boxes(self, entities: Sequence[UnifiedEntity]) -> torch.Tensor:
        d = self.config.dim
        if not entities:
            return torch.zeros(0, d, dtype=self.dtype)
        coords = torch.tensor([entity.box.as_tuple() for entity in entities], dtype=self.dtype)
        ids = torch.tensor([entity.category for entity in entities], dtype=torch.long)
        hidden = nx.concat([coords, self.category_embedding(ids)], dim=1)
        return self.box_out(nx.silu(self.box_in(hidden)))

    def encode_masks(self, entities: Sequence[UnifiedEntity]) -> torch.Tensor:
        d = self.config.dim
        if not entities:
            return torch.zeros(0, d, dtype=self.dtype)
        size = self.config.mask_input_size
        grids = np.stack([resample_mask(entity.mask, size, size).bits for entity in entities])
        x = torch.from_numpy(grids.astype(np.float64)).to(self.dtype)[:, None]
        for index, conv in enumerate(self.mask_convs):
            x = conv(x)
            if index < len(self.mask_convs) - 1:
                x = nx.silu(x)
        return nx.avg_pool_1x1(x).flatten(1)

    def fuse(self, box_feats: torch.Tensor, mask_feats: torch.Tensor,
             alpha_box: Optional[float] = None, alpha_mask: Optional[float] = None,
             return_weights: bool = False):
        """alpha_box * box + alpha_mask * attn(q=box, kv=mask) + residual(mask)"""
        if box_feats.shape != mask_feats.shape:
            raise ShapeError(
                f"fuse: box features {list(box_feats.shape)} and mask features {list(mask_feats.shape)} differ",
                details={"kernel": "fuse"},
            )
        alpha_box = self.config.alpha_box if alpha_box is None else alpha_box
        alpha_mask = self.config.alpha_mask if alpha_mask is None else alpha_mask
        n = box_feats.shape[0]
        heads, key_dim = self.config.fusion_heads, self.config.fusion_key_dim
        if n == 0:
            fused = box_feats
            return (fused, box_feats.new_zeros(heads, 0, 0)) if return_weights else fused

        q = self.fuse_q(box_feats).view(n, heads, key_dim).transpose(0, 1)
        k = self.fuse_k(mask_feats).view(n, heads, key_dim).transpose(0, 1)
        v = self.fuse_v(mask_feats).view(n, heads, key_dim).transpose(0, 1)
        weights = nx.softmax(nx.matmul(q, k.transpose(1, 2)) / math.sqrt(key_dim), dim=-1)
        attended = nx.matmul(weights, v).transpose(0, 1).reshape(n, heads * key_dim)
        fused = alpha_box * box_feats + alpha_mask * self.fuse_out(attended) + self.residual(mask_feats)
        return (fused, weights) if return_weights else fused

    # ============= TASK AND CAPTION =============

    def task_token(self, task: TaskId) -> torch.Tensor:
        return self.task_embedding(torch.tensor([int(task)], dtype=torch.long))[0]

    def modulate(self, tokens: torch.Tensor, task: TaskId) -> torch.Tensor:
        """Per-task FiLM: tokens * (1 + scale) + shift"""
        scale, shift = self.film(self.task_token(task)).chunk(2)
        return nx.add(nx.mul(tokens, 1 + scale), shift)

    def caption_token(self, caption: Dict[int, int]) -> torch.Tensor:
        counts = torch.zeros(self.config.n_categories, dtype=self.dtype)
        for cid, count in caption.items():
            counts[int(cid)] = float(count)
        counts = counts / max(float(counts.sum()), 1.0)
        return self.caption(counts)

    # ============= BUNDLES =============

    def null_bundle(self) -> ConditionBundle:
        return ConditionBundle(
            entity_tokens=torch.zeros(0, self.config.dim, dtype=self.dtype),
            task_token=self.null_task,
            caption_token=self.null_caption,
            null_flag=True,
        )

    def condition_unified(self, task: TaskId, entities: Sequence[UnifiedEntity],
                          caption: Dict[int, int], drop: bool = False,
                          alphas: Optional[Tuple[float, float]] = None) -> ConditionBundle:
        if drop:
            return self.null_bundle()
        task = TaskId.parse(task)
        alpha_box, alpha_mask = alphas if alphas is not None else (None, None)
        fused = self.fuse(self.encode_boxes(entities), self.encode_masks(entities), alpha_box, alpha_mask)
        return ConditionBundle(
            entity_tokens=self.modulate(fused, task),
            task_token=self.task_token(task),
            caption_token=self.caption_token(caption),
            task=task,
            entities=tuple(entities),
        )

    def condition(self, layout: Layout, grid_size: int, drop: bool = False,
                  alphas: Optional[Tuple[float, float]] = None,
                  layout_control: str = "both") -> ConditionBundle:
        """Encode a layout into condition tokens; drop gives the null bundle"""
        if drop:
            return self.null_bundle()
        entities = restrict_modality(unify(layout, grid_size, grid_size), layout_control)
        return self.condition_unified(layout.task, entities, layout.caption, alphas=alphas)
