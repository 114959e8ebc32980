import numpy as np
import pytest
import torch

from terragen.conditioning import (
    ALPHA_PRESETS, ConditionEncoder, EncoderConfig, resolve_alphas, restrict_modality,
)
from terragen.errors import ConfigError, ShapeError
from terragen.layout import BUILDING, VEHICLE, BBox, Layout, LayoutEntity, Mask, TaskId, UnifiedEntity, unify
from conftest import block_mask, randomize


@pytest.fixture
def encoder() -> ConditionEncoder:
    torch.manual_seed(0)
    config = EncoderConfig(dim=16, fusion_heads=2, fusion_key_dim=8, mask_cnn_channels=(4, 8, 8, 16))
    return randomize(ConditionEncoder(config).to(torch.float64), seed=5)


def _entity(category, rows, cols, size=16):
    mask = block_mask(size, rows, cols)
    return UnifiedEntity(category, BBox(cols.start / size, rows.start / size, cols.stop / size, rows.stop / size), mask)


def test_config_shape_rules():
    with pytest.raises(ValueError):
        EncoderConfig(dim=10, fusion_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(dim=16, mask_cnn_channels=(4, 8, 8, 32))


def test_alpha_presets():
    assert resolve_alphas("auto", TaskId.DETECTION) == ALPHA_PRESETS["detection"] == (0.8, 0.6)
    assert resolve_alphas("auto", TaskId.ROAD_EXTRACTION) == (0.6, 0.9)
    assert resolve_alphas("balanced", TaskId.DETECTION) == (0.6, 0.6)
    with pytest.raises(ConfigError):
        resolve_alphas("loud", TaskId.DETECTION)


def test_empty_entity_encodings(encoder):
    assert encoder.encode_boxes([]).shape == (0, 16)
    assert encoder.encode_masks([]).shape == (0, 16)


def test_identical_entities_encode_identically(encoder):
    entity = _entity(VEHICLE, slice(2, 5), slice(3, 6))
    boxes = encoder.encode_boxes([entity, entity])
    masks = encoder.encode_masks([entity, entity])
    assert torch.equal(boxes[0], boxes[1])
    assert torch.equal(masks[0], masks[1])


def test_mask_encoder_separates_empty_and_full_masks(encoder):
    box = BBox(0, 0, 1, 1)
    empty = UnifiedEntity(BUILDING, box, Mask(np.zeros((16, 16), dtype=bool)))
    full = UnifiedEntity(BUILDING, box, Mask(np.ones((16, 16), dtype=bool)))
    feats = encoder.encode_masks([empty, full])
    assert torch.dist(feats[0], feats[1]) > 0


def test_mask_encoder_sees_translation(encoder):
    left = _entity(BUILDING, slice(4, 8), slice(0, 4))
    right = _entity(BUILDING, slice(4, 8), slice(4, 8))
    feats = encoder.encode_masks([left, right])
    assert torch.dist(feats[0], feats[1]) > 0


def test_single_entity_fusion_weight_is_one(encoder):
    entity = _entity(VEHICLE, slice(2, 5), slice(3, 6))
    _, weights = encoder.fuse(encoder.encode_boxes([entity]), encoder.encode_masks([entity]), return_weights=True)
    assert weights.shape == (2, 1, 1)
    assert torch.allclose(weights, torch.ones_like(weights))


def test_zero_mask_features_leave_scaled_box_features(encoder):
    box = torch.randn(3, 16, dtype=torch.float64)
    fused = encoder.fuse(box, torch.zeros(3, 16, dtype=torch.float64), alpha_box=0.8, alpha_mask=0.6)
    assert torch.allclose(fused, 0.8 * box, atol=1e-12)


def test_fuse_shape_mismatch(encoder):
    with pytest.raises(ShapeError):
        encoder.fuse(torch.zeros(2, 16, dtype=torch.float64), torch.zeros(3, 16, dtype=torch.float64))


def test_drop_returns_the_null_bundle(encoder, detection_layout, segmentation_layout):
    a = encoder.condition(detection_layout, 16, drop=True)
    b = encoder.condition(segmentation_layout, 16, drop=True)
    assert a.null_flag and b.null_flag
    assert torch.equal(a.tokens(), b.tokens())
    assert a.n_entities == 0 and a.tokens().shape == (2, 16)


def test_task_changes_entity_tokens(encoder):
    layout = Layout.build(TaskId.SEMANTIC_SEGMENTATION, [LayoutEntity(BUILDING, BBox(0.1, 0.1, 0.5, 0.5))])
    other = Layout(TaskId.BUILDING_EXTRACTION, layout.entities, layout.caption)
    a = encoder.condition(layout, 16)
    b = encoder.condition(other, 16)
    assert torch.dist(a.entity_tokens, b.entity_tokens) > 0
    assert not torch.equal(a.task_token, b.task_token)


def test_empty_layout_has_task_and_caption_only(encoder):
    bundle = encoder.condition(Layout.build(TaskId.FLOOD_DETECTION, []), 16)
    assert bundle.n_entities == 0
    assert torch.equal(bundle.tokens()[0], bundle.task_token)
    assert torch.equal(bundle.tokens()[1], bundle.caption_token)
    assert not bundle.null_flag


def test_bundle_token_order(encoder, detection_layout):
    bundle = encoder.condition(detection_layout, 16)
    tokens = bundle.tokens()
    assert tokens.shape == (bundle.n_entities + 2, 16)
    assert torch.equal(tokens[2:], bundle.entity_tokens)


def test_entity_permutation_permutes_tokens(encoder):
    entities = [
        _entity(BUILDING, slice(0, 4), slice(0, 6)),
        _entity(BUILDING, slice(8, 14), slice(2, 5)),
        _entity(BUILDING, slice(5, 7), slice(9, 16)),
    ]
    order = [2, 0, 1]
    a = encoder.condition_unified(TaskId.BUILDING_EXTRACTION, entities, {BUILDING: 3})
    b = encoder.condition_unified(TaskId.BUILDING_EXTRACTION, [entities[i] for i in order], {BUILDING: 3})
    assert torch.allclose(a.entity_tokens[order], b.entity_tokens, atol=1e-12)


def test_caption_token_normalizes_counts(encoder):
    assert torch.allclose(encoder.caption_token({VEHICLE: 2}), encoder.caption_token({VEHICLE: 5}), atol=1e-12)
    assert not torch.allclose(encoder.caption_token({VEHICLE: 1}), encoder.caption_token({BUILDING: 1}))


def test_restrict_modality(segmentation_layout):
    entities = unify(segmentation_layout, 16, 16)
    boxed = restrict_modality(entities, "box")
    for entity in boxed:
        assert entity.mask.area == round(entity.box.area * 256)
    masked = restrict_modality(entities, "mask")
    assert masked[0].box.as_tuple() == (3 / 16, 2 / 16, 9 / 16, 7 / 16)
    assert restrict_modality(entities, "both") == entities
    with pytest.raises(ConfigError):
        restrict_modality(entities, "neither")


def test_condition_is_differentiable(encoder, detection_layout):
    bundle = encoder.condition(detection_layout, 16)
    bundle.tokens().sum().backward()
    assert encoder.box_in.weight.grad is not None
    assert encoder.mask_convs[0].weight.grad is not None
    assert encoder.film.weight.grad is not None
    assert encoder.caption.weight.grad is not None
