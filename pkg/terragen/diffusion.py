"""
Diffusion process, adaptive mask-weighted objective, two-stage trainer and
DDIM sampling with task-negative classifier-free guidance
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from terragen import numerics as nx
from terragen.conditioning import (
    LAYOUT_CONTROLS, ConditionBundle, ConditionEncoder, EncoderConfig, resolve_alphas,
)
from terragen.denoiser import ForwardOutput, UNet, UNetConfig, collate_bundles
from terragen.errors import CheckpointError, ConfigError, SamplingError, ShapeError, TrainingDivergedError
from terragen.layout import Layout, TaskId

logger = logging.getLogger(__name__)

# ============= CONFIGURATION =============

class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_steps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(2e-2, gt=0, lt=1)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)


class StageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(ge=0)
    lr_peak: float = Field(gt=0)
    lr_min: float = Field(0.0, ge=0)
    warmup_steps: int = Field(100, ge=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    stage1: StageConfig = Field(default_factory=lambda: StageConfig(steps=2000, lr_peak=1e-4))
    stage2: StageConfig = Field(default_factory=lambda: StageConfig(steps=4000, lr_peak=5e-5))
    micro_batch: int = Field(8, ge=1)
    accumulation: int = Field(4, ge=1)
    weight_decay: float = Field(1e-2, ge=0)
    cond_dropout: float = Field(0.1, ge=0, le=1)
    beta: float = Field(0.5, ge=0, le=1)
    floor: float = Field(0.0, ge=0, le=1)
    mask_weighted_loss: bool = True
    layout_control: str = "both"
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(10, ge=1)
    seed: int = 0
    dtype: str = "float32"

    @field_validator("layout_control")
    @classmethod
    def _known_control(cls, value):
        if value not in LAYOUT_CONTROLS:
            raise ValueError(f"layout_control must be one of {LAYOUT_CONTROLS}")
        return value

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, value):
        if value not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return value

    def stage(self, index: int) -> StageConfig:
        return self.stage1 if index == 1 else self.stage2


class SampleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ddim_steps: int = Field(50, ge=1)
    guidance_scale: float = Field(5.5, ge=0)
    enhanced_layout: bool = False
    negative_mode: str = "null"
    alpha_preset: str = "auto"
    layout_control: str = "both"
    batch_size: int = Field(8, ge=1)
    seed: int = 0

    @field_validator("negative_mode")
    @classmethod
    def _known_negative(cls, value):
        if value not in ("null", "non_target_task"):
            raise ValueError("negative_mode must be null or non_target_task")
        return value

    @property
    def effective_scale(self) -> float:
        return 3.0 if self.enhanced_layout else self.guidance_scale


TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}

# ============= NOISE SCHEDULE =============

@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor

    @classmethod
    def linear(cls, config: Optional[ScheduleConfig] = None) -> "NoiseSchedule":
        config = config or ScheduleConfig()
        betas = torch.linspace(config.beta_start, config.beta_end, config.train_steps, dtype=torch.float64)
        return cls(betas=betas, alphas_cumprod=torch.cumprod(1 - betas, dim=0))

    @property
    def train_steps(self) -> int:
        return self.betas.shape[0]

    def check_timesteps(self, t: torch.Tensor) -> None:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.train_steps):
            raise ConfigError(
                f"timestep out of range [0, {self.train_steps})",
                details={"timesteps": t.tolist()},
            )

    def forward_noise(self, x0: torch.Tensor, t: Union[int, torch.Tensor], eps: torch.Tensor) -> torch.Tensor:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps"""
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        self.check_timesteps(t)
        abar = self.alphas_cumprod[t].to(x0.dtype)
        if abar.shape[0] == 1:
            abar = abar.expand(x0.shape[0] if x0.dim() > 0 else 1)
        shape = (-1,) + (1,) * (x0.dim() - 1)
        abar = abar.reshape(shape) if x0.dim() > 0 else abar[0]
        return torch.sqrt(abar) * x0 + torch.sqrt(1 - abar) * eps

# ============= ADAPTIVE WEIGHTS =============

@dataclass
class AdaptiveWeightMap:
    weights: torch.Tensor  # (B, H, W)
    beta: float
    floor: float


def adaptive_weight(layout_masks: torch.Tensor, attention_maps: Optional[torch.Tensor],
                    beta: float = 0.5, floor: float = 0.0,
                    n_entities: Optional[Sequence[int]] = None) -> AdaptiveWeightMap:
    """W = floor + (1 - floor) * (beta * union(M) + (1 - beta) * minmax(sum_i A_i))

    layout_masks and attention_maps are (B, n, H, W); attention is detached and a
    sample without entities gets W = 1.
    """
    if attention_maps is not None and attention_maps.shape != layout_masks.shape:
        raise ShapeError(
            f"adaptive_weight: masks {list(layout_masks.shape)} and attention {list(attention_maps.shape)} differ",
            details={"kernel": "adaptive_weight"},
        )
    b, _, h, w = layout_masks.shape
    dtype = attention_maps.dtype if attention_maps is not None else torch.get_default_dtype()

    union = layout_masks.to(torch.bool).any(dim=1).to(dtype)
    if attention_maps is None or attention_maps.shape[1] == 0:
        norm = torch.zeros(b, h, w, dtype=dtype)
    else:
        total = attention_maps.detach().sum(dim=1)
        low = total.flatten(1).min(dim=1).values[:, None, None]
        high = total.flatten(1).max(dim=1).values[:, None, None]
        span = high - low
        norm = torch.where(span > 0, (total - low) / torch.where(span > 0, span, torch.ones_like(span)),
                           torch.zeros_like(total))

    weights = beta * union + (1 - beta) * norm
    weights = floor + (1 - floor) * weights
    if n_entities is None:
        empty = ~layout_masks.to(torch.bool).flatten(1).any(dim=1)
    else:
        empty = torch.tensor([n == 0 for n in n_entities])
    weights = torch.where(empty[:, None, None], torch.ones_like(weights), weights)
    return AdaptiveWeightMap(weights=weights, beta=beta, floor=floor)


def weighted_mse(eps: torch.Tensor, eps_pred: torch.Tensor, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over every element of W * (eps - eps_pred)^2; W broadcasts over channels"""
    squared = (eps - eps_pred) ** 2
    if weights is not None:
        squared = nx.mul(squared, weights[:, None] if weights.dim() == 3 else weights)
    return squared.mean()

# ============= MODEL =============

class TerraGenModel(nn.Module):
    """Condition encoder plus U-Net noise predictor"""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        if config.encoder.dim != config.unet.cond_dim:
            raise ConfigError(
                f"encoder dim {config.encoder.dim} must equal unet cond_dim {config.unet.cond_dim}"
            )
        self.encoder = ConditionEncoder(config.encoder)
        self.unet = UNet(config.unet)

    @property
    def image_size(self) -> int:
        return self.config.unet.image_size

    @property
    def dtype(self) -> torch.dtype:
        return self.unet.final.weight.dtype

    def named_params(self) -> List[Tuple[str, torch.Tensor]]:
        return list(self.named_parameters())

    def predict(self, x: torch.Tensor, t: torch.Tensor, bundles: Sequence[ConditionBundle],
                return_attention: bool = False) -> ForwardOutput:
        cond = collate_bundles(bundles, self.config.unet.injection_resolutions)
        return self.unet(x, t, cond, return_attention=return_attention)


def model_tensors(model: TerraGenModel) -> Dict[str, torch.Tensor]:
    return {f"model.{name}": tensor.detach() for name, tensor in model.state_dict().items()}


def load_model(path: Union[str, Path]) -> Tuple[TerraGenModel, NoiseSchedule, Dict[str, object]]:
    checkpoint = nx.load_checkpoint(path)
    if "model_config" not in checkpoint.meta:
        raise CheckpointError(f"{path} carries no model configuration")
    config = ModelConfig.model_validate(checkpoint.meta["model_config"])
    model = TerraGenModel(config)
    state = {name[len("model."):]: tensor for name, tensor in checkpoint.tensors.items() if name.startswith("model.")}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"Checkpoint {path} does not match its model configuration: {exc}")
    model.eval()
    return model, NoiseSchedule.linear(config.schedule), checkpoint.meta

# ============= TRAINING OBJECTIVE =============

@dataclass
class NoisedBatch:
    t: torch.Tensor      # (B,) long
    eps: torch.Tensor    # image shape
    drop: torch.Tensor   # (B,) bool


def draw_noise(shape: Sequence[int], schedule: NoiseSchedule, rng: np.random.Generator,
               generator: torch.Generator, cond_dropout: float, dtype: torch.dtype) -> NoisedBatch:
    b = shape[0]
    t = torch.from_numpy(rng.integers(0, schedule.train_steps, size=b)).long()
    drop = torch.from_numpy(rng.random(b) < cond_dropout)
    eps = torch.randn(tuple(shape), generator=generator, dtype=torch.float64).to(dtype)
    return NoisedBatch(t=t, eps=eps, drop=drop)


def _entity_masks(bundles: Sequence[ConditionBundle], size: int, dtype: torch.dtype) -> torch.Tensor:
    width = max((bundle.n_entities for bundle in bundles), default=0)
    masks = torch.zeros(len(bundles), width, size, size, dtype=dtype)
    for b, bundle in enumerate(bundles):
        for i, entity in enumerate(bundle.entities):
            masks[b, i] = torch.from_numpy(entity.mask.bits.astype(np.float64)).to(dtype)
    return masks


def training_loss(model: TerraGenModel, schedule: NoiseSchedule, images: torch.Tensor,
                  layouts: Sequence[Layout], noise: NoisedBatch, stage: int,
                  config: Optional[TrainConfig] = None, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Stage 1: plain MSE with null bundles. Stage 2: adaptive mask-weighted MSE

    A given weights map replaces the adaptive one (it is a constant either way).
    """
    config = config or TrainConfig()
    x_t = schedule.forward_noise(images, noise.t, noise.eps)

    if stage == 1:
        bundles = [model.encoder.null_bundle() for _ in layouts]
        output = model.predict(x_t, noise.t, bundles)
        return weighted_mse(noise.eps, output.eps)
    if stage != 2:
        raise ConfigError(f"Unknown training stage {stage}")

    bundles = _stage2_bundles(model, layouts, noise, config)
    if not config.mask_weighted_loss:
        return weighted_mse(noise.eps, model.predict(x_t, noise.t, bundles).eps)
    output = model.predict(x_t, noise.t, bundles, return_attention=weights is None)
    if weights is None:
        weights = _weight_map(bundles, output, model.image_size, images.dtype, config).weights
    return weighted_mse(noise.eps, output.eps, weights)


def _stage2_bundles(model: TerraGenModel, layouts: Sequence[Layout], noise: NoisedBatch,
                    config: TrainConfig) -> List[ConditionBundle]:
    return [
        model.encoder.condition(layout, model.image_size, drop=bool(dropped),
                                layout_control=config.layout_control)
        for layout, dropped in zip(layouts, noise.drop.tolist())
    ]


def _weight_map(bundles: Sequence[ConditionBundle], output: ForwardOutput, size: int,
                dtype: torch.dtype, config: TrainConfig) -> AdaptiveWeightMap:
    masks = _entity_masks(bundles, size, dtype)
    return adaptive_weight(masks, output.attention, config.beta, config.floor,
                           n_entities=[bundle.n_entities for bundle in bundles])


@torch.no_grad()
def stage2_weight_map(model: TerraGenModel, schedule: NoiseSchedule, images: torch.Tensor,
                      layouts: Sequence[Layout], noise: NoisedBatch,
                      config: Optional[TrainConfig] = None) -> AdaptiveWeightMap:
    """The adaptive weight map a stage-2 loss would use for this batch"""
    config = config or TrainConfig()
    x_t = schedule.forward_noise(images, noise.t, noise.eps)
    bundles = _stage2_bundles(model, layouts, noise, config)
    output = model.predict(x_t, noise.t, bundles, return_attention=True)
    return _weight_map(bundles, output, model.image_size, images.dtype, config)


def accumulate_gradients(model: TerraGenModel, schedule: NoiseSchedule, images: torch.Tensor,
                         layouts: Sequence[Layout], noise: NoisedBatch, stage: int,
                         config: TrainConfig, chunks: int) -> float:
    """Backward the batch mean loss as `chunks` equal micro-batches; returns the mean loss"""
    size = images.shape[0]
    if size % chunks != 0:
        raise ConfigError(f"batch of {size} does not split into {chunks} micro-batches")
    step = size // chunks
    total = 0.0
    for start in range(0, size, step):
        part = slice(start, start + step)
        loss = training_loss(
            model, schedule, images[part], layouts[part],
            NoisedBatch(noise.t[part], noise.eps[part], noise.drop[part]), stage, config,
        )
        total += loss.item() / chunks
        if not math.isfinite(loss.item()):
            return float("nan")
        nx.backward(loss / chunks)
    return total

# ============= TRAINER =============

@dataclass
class TrainingExample:
    image: torch.Tensor  # (C, H, W) in [-1, 1]
    layout: Layout


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 HxWxC -> CxHxW in [-1, 1]"""
    return torch.from_numpy(image.astype(np.float64) / 127.5 - 1.0).permute(2, 0, 1).to(dtype)


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    array = ((tensor.detach().to(torch.float64).clamp(-1, 1) + 1) * 127.5).round()
    return array.permute(1, 2, 0).numpy().astype(np.uint8)


class Trainer:
    """Two-stage trainer: layout-free warm-up, then layout-guided training"""

    def __init__(self, config: TrainConfig, examples: Sequence[TrainingExample], out_dir: Union[str, Path]):
        if not examples:
            raise ConfigError("Training needs at least one example")
        self.config = config
        self.examples = list(examples)
        self.out_dir = Path(out_dir)
        self.dtype = TORCH_DTYPES[config.dtype]

        self.generator = nx.seed_everything(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.model = TerraGenModel(config.model).to(self.dtype)
        self.schedule = NoiseSchedule.linear(config.model.schedule)
        self.stage = 1
        self.step = 0
        self.optim = self._new_optim(1)

        self.checkpoint_dir = self.out_dir / "checkpoints"
        self.log_path = self.out_dir / "loss_log.csv"

    def _new_optim(self, stage: int) -> nx.OptimState:
        stage_config = self.config.stage(stage)
        return nx.OptimState(
            self.model.named_params(), lr_peak=stage_config.lr_peak,
            total_steps=max(stage_config.steps, 1), warmup_steps=stage_config.warmup_steps,
            lr_min=stage_config.lr_min, weight_decay=self.config.weight_decay,
        )

    # ============= CHECKPOINTS =============

    def save(self, path: Optional[Path] = None) -> Path:
        path = path or self.checkpoint_dir / f"ckpt_s{self.stage}_{self.step:06d}.ckpt"
        tensors = model_tensors(self.model)
        tensors.update(self.optim.export_tensors())
        meta = {
            "stage": self.stage,
            "step": self.step,
            "model_config": self.config.model.model_dump(mode="json"),
            "train_config": self.config.model_dump(mode="json"),
            "torch_rng": nx.generator_state_hex(self.generator),
            "numpy_rng": self.rng.bit_generator.state,
        }
        return nx.save_checkpoint(path, tensors, meta)

    def resume(self, path: Union[str, Path]) -> None:
        checkpoint = nx.load_checkpoint(path)
        meta = checkpoint.meta
        if "stage" not in meta or "numpy_rng" not in meta:
            raise CheckpointError(f"{path} is not a training checkpoint")
        state = {name[len("model."):]: tensor.to(self.dtype)
                 for name, tensor in checkpoint.tensors.items() if name.startswith("model.")}
        try:
            self.model.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"Checkpoint {path} does not match the model configuration: {exc}")
        self.stage = int(meta["stage"])
        self.step = int(meta["step"])
        self.optim = self._new_optim(self.stage)
        self.optim.import_tensors(checkpoint.tensors, self.step)
        nx.restore_generator(self.generator, meta["torch_rng"])
        self.rng.bit_generator.state = meta["numpy_rng"]
        logger.info(f"[TRAIN] Resumed from {path} at stage {self.stage}, step {self.step}")

    # ============= LOOP =============

    def _batch(self) -> Tuple[torch.Tensor, List[Layout]]:
        indices = self.rng.integers(0, len(self.examples), size=self.config.micro_batch)
        images = torch.stack([self.examples[i].image for i in indices]).to(self.dtype)
        return images, [self.examples[i].layout for i in indices]

    def train_step(self) -> float:
        config = self.config
        nx.zero_grads(self.optim.params)
        total = 0.0
        for _ in range(config.accumulation):
            images, layouts = self._batch()
            noise = draw_noise(images.shape, self.schedule, self.rng, self.generator,
                               config.cond_dropout if self.stage == 2 else 0.0, self.dtype)
            loss = training_loss(self.model, self.schedule, images, layouts, noise, self.stage, config)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(self.step, self.stage, value)
            nx.backward(loss / config.accumulation)
            total += value / config.accumulation
        nx.adamw_step(self.optim)
        self.step += 1
        return total

    def _log_row(self, writer, loss: float) -> None:
        writer.writerow([self.step, self.stage, f"{loss:.8g}", f"{self.optim.lr:.8g}"])

    def _trim_log(self) -> None:
        """Drop rows logged after the current (stage, step)"""
        with self.log_path.open(newline="") as handle:
            rows = list(csv.reader(handle))
        kept = [row for row in rows[1:] if (int(row[1]), int(row[0])) <= (self.stage, self.step)]
        with self.log_path.open("w", newline="") as handle:
            csv.writer(handle).writerows(rows[:1] + kept)

    def run(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        new_log = not self.log_path.exists() or (self.stage == 1 and self.step == 0)
        if not new_log:
            self._trim_log()
        with self.log_path.open("w" if new_log else "a", newline="") as handle:
            writer = csv.writer(handle)
            if new_log:
                writer.writerow(["step", "stage", "loss", "lr"])
            for stage in (1, 2):
                if stage < self.stage:
                    continue
                if stage != self.stage:
                    self.stage, self.step = stage, 0
                    self.optim = self._new_optim(stage)
                total = self.config.stage(stage).steps
                self.model.train()
                progress = tqdm(total=total, initial=self.step, desc=f"stage {stage}", leave=False)
                while self.step < total:
                    loss = self.train_step()
                    self._log_row(writer, loss)
                    progress.update(1)
                    if self.step % self.config.log_every == 0:
                        progress.set_postfix(loss=f"{loss:.4f}", lr=f"{self.optim.lr:.2e}")
                        handle.flush()
                    if self.step % self.config.checkpoint_every == 0 and self.step < total:
                        self.save()
                progress.close()
                logger.info(f"[TRAIN] Stage {stage} finished after {self.step} steps")
                self.save()

        final = self.save(self.out_dir / "model.ckpt")
        self.model.eval()
        return final


def train(config: TrainConfig, examples: Sequence[TrainingExample], out_dir: Union[str, Path],
          resume: Optional[Union[str, Path]] = None) -> Path:
    trainer = Trainer(config, examples, out_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()

# ============= SAMPLING =============

def ddim_timesteps(train_steps: int, ddim_steps: int) -> List[int]:
    """Evenly spaced timesteps, descending"""
    if not 1 <= ddim_steps <= train_steps:
        raise SamplingError(f"ddim_steps must lie in [1, {train_steps}], got {ddim_steps}")
    steps = np.unique(np.round(np.linspace(0, train_steps - 1, ddim_steps)).astype(int))
    return [int(t) for t in steps[::-1]]


def ddim_loop(x: torch.Tensor, eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
              alphas_cumprod: torch.Tensor, timesteps: Sequence[int], clamp: bool = True,
              progress: bool = False) -> torch.Tensor:
    """Deterministic DDIM (eta = 0); abar_prev is 1 after the last step"""
    steps = list(timesteps)
    iterator = tqdm(range(len(steps)), desc="ddim", leave=False) if progress else range(len(steps))
    for i in iterator:
        t = steps[i]
        abar = alphas_cumprod[t].to(x.dtype)
        abar_prev = alphas_cumprod[steps[i + 1]].to(x.dtype) if i + 1 < len(steps) else torch.ones((), dtype=x.dtype)
        eps = eps_fn(x, t)
        x0_pred = (x - torch.sqrt(1 - abar) * eps) / torch.sqrt(abar)
        x = torch.sqrt(abar_prev) * x0_pred + torch.sqrt(1 - abar_prev) * eps
    return x.clamp(-1, 1) if clamp else x


def guided_noise(eps_null: torch.Tensor, eps_cond: torch.Tensor, eps_neg: torch.Tensor, scale: float) -> torch.Tensor:
    return eps_null + scale * (eps_cond - eps_neg)


def non_target_task(task: TaskId, seed: int) -> TaskId:
    others = [candidate for candidate in TaskId if candidate != task]
    return others[int(np.random.default_rng(seed).integers(len(others)))]


def initial_noise(seed: int, shape: Sequence[int], dtype: torch.dtype) -> torch.Tensor:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return torch.randn(tuple(shape), generator=generator, dtype=torch.float64).to(dtype)


@torch.no_grad()
def ddim_sample(model: TerraGenModel, schedule: NoiseSchedule, layouts: Sequence[Layout],
                config: Optional[SampleConfig] = None, seeds: Optional[Sequence[int]] = None,
                progress: bool = False) -> torch.Tensor:
    """Generate one image per layout; sample i starts from noise seeded by seeds[i]"""
    config = config or SampleConfig()
    if model is None:
        raise SamplingError("No model loaded for sampling")
    timesteps = ddim_timesteps(schedule.train_steps, config.ddim_steps)
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(len(layouts))]
    if len(seeds) != len(layouts):
        raise SamplingError(f"{len(seeds)} seeds for {len(layouts)} layouts")
    if not layouts:
        size = model.image_size
        return torch.zeros(0, model.config.unet.in_channels, size, size, dtype=model.dtype)

    encoder, size, dtype = model.encoder, model.image_size, model.dtype
    scale = config.effective_scale
    null = [encoder.null_bundle() for _ in layouts]
    cond, negative = [], []
    for layout, seed in zip(layouts, seeds):
        alphas = resolve_alphas(config.alpha_preset, layout.task)
        bundle = encoder.condition(layout, size, alphas=alphas, layout_control=config.layout_control)
        cond.append(bundle)
        if config.negative_mode == "non_target_task":
            negative.append(encoder.condition_unified(
                non_target_task(layout.task, seed), bundle.entities, layout.caption, alphas=alphas,
            ))

    shape = (model.config.unet.in_channels, size, size)
    x = torch.stack([initial_noise(seed, shape, dtype) for seed in seeds])

    def eps_fn(x_t: torch.Tensor, t: int) -> torch.Tensor:
        steps = torch.full((x_t.shape[0],), t, dtype=torch.long)
        if scale == 0:
            return model.predict(x_t, steps, null).eps
        eps_cond = model.predict(x_t, steps, cond).eps
        if config.negative_mode == "null":
            if scale == 1:
                return eps_cond
            eps_null = model.predict(x_t, steps, null).eps
            return guided_noise(eps_null, eps_cond, eps_null, scale)
        eps_null = model.predict(x_t, steps, null).eps
        eps_neg = model.predict(x_t, steps, negative).eps
        return guided_noise(eps_null, eps_cond, eps_neg, scale)

    return ddim_loop(x, eps_fn, schedule.alphas_cumprod, timesteps, progress=progress)


def sample_batched(model: TerraGenModel, schedule: NoiseSchedule, layouts: Sequence[Layout],
                   config: Optional[SampleConfig] = None, first_index: int = 0) -> List[np.ndarray]:
    """Sample a whole layout list in batches; returns uint8 HxWxC images"""
    config = config or SampleConfig()
    images = []
    starts = range(0, len(layouts), config.batch_size)
    for start in tqdm(starts, desc="sampling", leave=False):
        chunk = layouts[start:start + config.batch_size]
        seeds = [config.seed + first_index + start + i for i in range(len(chunk))]
        batch = ddim_sample(model, schedule, chunk, config, seeds=seeds)
        images.extend(tensor_to_image(image) for image in batch)
    logger.info(f"[SAMPLE] Generated {len(images)} images")
    return images
