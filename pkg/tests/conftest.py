"""
Shared fixtures: tiny model configurations, parameter randomization and
small synthetic corpora written to tmp_path
"""
import numpy as np
import pytest
import torch

from terragen.conditioning import EncoderConfig
from terragen.denoiser import UNetConfig
from terragen.diffusion import ModelConfig, ScheduleConfig, TerraGenModel
from terragen.layout import BBox, Layout, LayoutEntity, Mask, TaskId, rasterize_box
from terragen.synthdata import DataConfig, write_dataset


def tiny_model_config(**unet_overrides) -> ModelConfig:
    unet = dict(
        image_size=16, in_channels=3, base_channels=8, channel_mults=(1, 1, 1), levels=3,
        time_dim=16, cond_dim=16, attention_heads=2, injection_resolutions=(8, 4, 2),
    )
    unet.update(unet_overrides)
    return ModelConfig(
        encoder=EncoderConfig(dim=16, fusion_heads=2, fusion_key_dim=8, mask_cnn_channels=(4, 8, 8, 16)),
        unet=UNetConfig(**unet),
        schedule=ScheduleConfig(train_steps=50),
    )


def gradcheck_model_config() -> ModelConfig:
    """8x8 single-channel configuration used for finite-difference checks"""
    return ModelConfig(
        encoder=EncoderConfig(dim=8, fusion_heads=2, fusion_key_dim=4, mask_cnn_channels=(2, 4, 4, 8)),
        unet=UNetConfig(
            image_size=8, in_channels=1, base_channels=4, channel_mults=(1, 1), levels=2,
            time_dim=8, cond_dim=8, attention_heads=2, injection_resolutions=(8, 4, 2),
        ),
        schedule=ScheduleConfig(train_steps=50),
    )


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter with seeded normal noise (zero-initialized heads included)"""
    generator = torch.Generator()
    generator.manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            noise = torch.randn(param.shape, generator=generator, dtype=torch.float64)
            param.copy_((noise * scale).to(param.dtype))
    return module


def box_entity(category: int, box, grid: int = 0) -> LayoutEntity:
    bbox = BBox(*box)
    mask = rasterize_box(bbox, grid, grid) if grid else None
    return LayoutEntity(category, bbox, mask)


def block_mask(size: int, rows: slice, cols: slice) -> Mask:
    bits = np.zeros((size, size), dtype=bool)
    bits[rows, cols] = True
    return Mask(bits)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config) -> TerraGenModel:
    torch.manual_seed(0)
    return randomize(TerraGenModel(tiny_config).to(torch.float64), seed=1)


@pytest.fixture
def gradcheck_model() -> TerraGenModel:
    torch.manual_seed(0)
    return randomize(TerraGenModel(gradcheck_model_config()).to(torch.float64), seed=2)


@pytest.fixture
def detection_layout() -> Layout:
    return Layout.build(TaskId.DETECTION, [
        box_entity(4, (0.0, 0.0, 0.25, 0.25)),
        box_entity(5, (0.5, 0.5, 0.875, 0.875)),
    ])


@pytest.fixture
def segmentation_layout() -> Layout:
    return Layout.build(TaskId.SEMANTIC_SEGMENTATION, [
        LayoutEntity(0, None, block_mask(16, slice(2, 7), slice(3, 9))),
        LayoutEntity(2, BBox(0.5, 0.0, 1.0, 0.5), None),
    ])


@pytest.fixture
def small_data_config() -> DataConfig:
    return DataConfig(train=6, val=2, test=4, image_size=16, seed=3)


@pytest.fixture
def small_dataset(tmp_path, small_data_config):
    root = tmp_path / "data"
    manifest = write_dataset(small_data_config, root)
    return root, manifest
