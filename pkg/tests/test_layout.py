import json

import numpy as np
import pytest

from terragen.errors import LayoutError, TransformError
from terragen.layout import (
    BUILDING, FLOOD, ROAD, VEHICLE, BBox, GeoTransform, IssueKind, Layout, LayoutEntity, Mask, TaskId,
    TransformKind, ValidationConfig, category_id, iou, load_layout, random_transform, rasterize_box,
    resample_mask, save_layout, tight_box, transform_layout, unify, validate,
)
from conftest import block_mask


# ============= TYPES =============

def test_task_parsing():
    assert TaskId.parse("T3") == TaskId.ROAD_EXTRACTION
    assert TaskId.parse("flood_detection") == TaskId.FLOOD_DETECTION
    assert TaskId.parse(0) == TaskId.DETECTION
    assert TaskId.SEMANTIC_SEGMENTATION.code == "T1"
    assert len(TaskId) == 5
    with pytest.raises(LayoutError):
        TaskId.parse("segmentation-ish")


def test_category_lookup():
    assert category_id("storage_tank") == 5
    assert category_id("2") == 2
    with pytest.raises(LayoutError):
        category_id(6)
    with pytest.raises(LayoutError):
        category_id("tree")


@pytest.mark.parametrize("coords", [(0.5, 0.1, 0.5, 0.2), (0.1, 0.3, 0.2, 0.1), (-0.1, 0, 0.5, 0.5), (0, 0, 1.2, 1)])
def test_invalid_boxes(coords):
    with pytest.raises(LayoutError):
        BBox(*coords)


def test_mask_rejects_non_binary_values():
    with pytest.raises(LayoutError):
        Mask(np.array([[0, 2]]))
    with pytest.raises(LayoutError):
        Mask(np.zeros((0, 3)))


def test_entity_needs_box_or_mask():
    with pytest.raises(LayoutError):
        LayoutEntity(BUILDING)


def test_build_counts_caption():
    layout = Layout.build("detection", [
        LayoutEntity(VEHICLE, BBox(0, 0, 0.1, 0.1)),
        LayoutEntity(VEHICLE, BBox(0.5, 0.5, 0.6, 0.6)),
    ])
    assert layout.caption == {VEHICLE: 2}

# ============= GEOMETRY =============

def test_iou_cases():
    a = BBox(0.1, 0.1, 0.4, 0.4)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(0.5, 0.5, 0.9, 0.9)) == 0.0
    assert iou(BBox(0, 0, 2 / 8, 2 / 8), BBox(1 / 8, 1 / 8, 3 / 8, 3 / 8)) == pytest.approx(1 / 7, abs=1e-12)


def test_rasterize_central_block():
    mask = rasterize_box(BBox(0.25, 0.25, 0.75, 0.75), 8, 8)
    expected = np.zeros((8, 8), dtype=bool)
    expected[2:6, 2:6] = True
    assert np.array_equal(mask.bits, expected)


def test_tight_box_of_single_pixel():
    bits = np.zeros((8, 8), dtype=bool)
    bits[3, 5] = True
    assert tight_box(Mask(bits)).as_tuple() == (5 / 8, 3 / 8, 6 / 8, 4 / 8)
    assert tight_box(Mask(np.zeros((4, 4), dtype=bool))) is None


@pytest.mark.parametrize("grid", [8, 13, 32])
def test_rasterize_then_tight_box_within_one_pixel(grid):
    rng = np.random.default_rng(grid)
    for _ in range(20):
        x1, x2 = np.sort(rng.uniform(0, 1, 2))
        y1, y2 = np.sort(rng.uniform(0, 1, 2))
        if x2 - x1 < 2 / grid or y2 - y1 < 2 / grid:
            continue
        box = BBox(x1, y1, x2, y2)
        recovered = tight_box(rasterize_box(box, grid, grid))
        for a, b in zip(box.as_tuple(), recovered.as_tuple()):
            assert abs(a - b) <= 1 / grid + 1e-12


def test_resample_mask_nearest():
    mask = block_mask(4, slice(0, 2), slice(0, 2))
    up = resample_mask(mask, 8, 8)
    assert up.area == 16 and up.bits[:4, :4].all()
    assert resample_mask(up, 4, 4) == mask

# ============= UNIFY =============

def test_unify_fills_missing_modalities():
    bits = np.zeros((8, 8), dtype=bool)
    bits[3, 5] = True
    layout = Layout.build("semantic_segmentation", [
        LayoutEntity(BUILDING, BBox(0.25, 0.25, 0.75, 0.75)),
        LayoutEntity(ROAD, None, Mask(bits)),
    ])
    unified = unify(layout, 8, 8)
    assert unified[0].mask.area == 16
    assert unified[1].box.as_tuple() == (5 / 8, 3 / 8, 6 / 8, 4 / 8)


def test_unify_keeps_complete_entities_and_drops_empty_masks():
    mask = block_mask(8, slice(1, 3), slice(1, 4))
    box = BBox(0.1, 0.1, 0.5, 0.4)
    layout = Layout.build("semantic_segmentation", [
        LayoutEntity(BUILDING, box, mask),
        LayoutEntity(ROAD, None, Mask(np.zeros((8, 8), dtype=bool))),
        LayoutEntity(ROAD, BBox(0.0, 0.0, 0.01, 0.01)),
    ])
    unified = unify(layout, 8, 8)
    assert len(unified) == 1
    assert unified[0].box == box and unified[0].mask == mask


def test_unify_is_idempotent(segmentation_layout):
    once = unify(segmentation_layout, 16, 16)
    twice = unify(Layout.from_unified(segmentation_layout.task, once), 16, 16)
    assert [(u.category, u.box, u.mask) for u in once] == [(u.category, u.box, u.mask) for u in twice]


def test_unify_rejects_bad_grid(segmentation_layout):
    with pytest.raises(LayoutError):
        unify(segmentation_layout, 0, 8)

# ============= TRANSFORMS =============

def test_horizontal_flip_of_box():
    layout = Layout.build("detection", [LayoutEntity(VEHICLE, BBox(0.1, 0.2, 0.4, 0.5))])
    flipped = transform_layout(layout, GeoTransform.parse("hflip")).entities[0].box
    assert flipped.as_tuple() == pytest.approx((0.6, 0.2, 0.9, 0.5), abs=1e-12)


def test_double_half_turn_restores_layout():
    mask = block_mask(8, slice(1, 3), slice(2, 7))
    layout = Layout.build("building_extraction", [LayoutEntity(BUILDING, BBox(0.25, 0.125, 0.875, 0.375), mask)])
    turn = GeoTransform.rotation(180)
    back = transform_layout(transform_layout(layout, turn), turn)
    assert back.entities[0].box == layout.entities[0].box
    assert back.entities[0].mask == mask
    assert back.caption == layout.caption


@pytest.mark.parametrize("name", ["hflip", "vflip", "rot90", "rot180", "rot270"])
def test_exact_transforms_keep_box_and_mask_consistent(name):
    box = BBox(0.125, 0.25, 0.5, 0.875)
    mask = rasterize_box(box, 16, 16)
    layout = Layout.build("building_extraction", [LayoutEntity(BUILDING, box, mask)])
    moved = transform_layout(layout, GeoTransform.parse(name)).entities[0]
    assert moved.mask.area == mask.area
    assert tight_box(moved.mask).as_tuple() == pytest.approx(moved.box.as_tuple(), abs=1e-12)


def test_shear_preserves_rectangle_area():
    mask = block_mask(32, slice(10, 20), slice(12, 22))
    layout = Layout.build("building_extraction", [LayoutEntity(BUILDING, None, mask)])
    for factor in (0.2, -0.3):
        sheared = transform_layout(layout, GeoTransform(TransformKind.SHEAR, factor)).entities[0].mask
        assert abs(sheared.area - mask.area) <= 0.1 * mask.area


def test_scale_shrinks_mask_about_centre():
    mask = block_mask(16, slice(4, 12), slice(4, 12))
    layout = Layout.build("building_extraction", [LayoutEntity(BUILDING, BBox(0.25, 0.25, 0.75, 0.75), mask)])
    scaled = transform_layout(layout, GeoTransform.parse("scale:0.5")).entities[0]
    assert scaled.mask.area == 16
    assert scaled.box.as_tuple() == pytest.approx((0.375, 0.375, 0.625, 0.625))


def test_tiny_entities_are_dropped_and_caption_recounted():
    layout = Layout.build("detection", [
        LayoutEntity(VEHICLE, BBox(0.0, 0.0, 0.02, 0.02), block_mask(32, slice(0, 2), slice(0, 2))),
        LayoutEntity(VEHICLE, BBox(0.4, 0.4, 0.6, 0.6)),
    ])
    scaled = transform_layout(layout, GeoTransform.parse("scale:0.5"))
    assert len(scaled.entities) == 1
    assert scaled.caption == {VEHICLE: 1}


@pytest.mark.parametrize("text", ["scale:2.0", "shear:0.5", "rotate:45", "twirl"])
def test_unsupported_transforms(text):
    with pytest.raises(TransformError):
        GeoTransform.parse(text)


def test_arbitrary_rotation_rejected():
    with pytest.raises(TransformError):
        GeoTransform.rotation(45)


def test_random_transform_draws_every_kind():
    rng = np.random.default_rng(0)
    kinds = {random_transform(rng).kind for _ in range(200)}
    assert kinds == set(TransformKind)

# ============= VALIDATION =============

def test_identical_boxes_overlap():
    box = BBox(0.1, 0.1, 0.3, 0.3)
    issues = validate(Layout.build("detection", [LayoutEntity(VEHICLE, box), LayoutEntity(VEHICLE, box)]))
    assert [issue.kind for issue in issues] == [IssueKind.OVERLAPPING_BOXES]


def test_single_road_stripe_is_clean():
    stripe = block_mask(16, slice(6, 9), slice(0, 16))
    assert validate(Layout.build("road_extraction", [LayoutEntity(ROAD, None, stripe)])) == []


def test_broken_road():
    bits = np.zeros((16, 16), dtype=bool)
    for start in (0, 4, 8, 12):
        bits[start:start + 2, :] = True
    layout = Layout.build("road_extraction", [LayoutEntity(ROAD, None, Mask(bits))])
    issues = validate(layout)
    assert [issue.kind for issue in issues] == [IssueKind.BROKEN_ROAD]
    assert validate(layout, ValidationConfig(max_road_components=4)) == []


def test_semantic_conflict():
    layout = Layout.build("building_extraction", [
        LayoutEntity(BUILDING, BBox(0, 0, 0.2, 0.2)),
        LayoutEntity(VEHICLE, BBox(0.5, 0.5, 0.6, 0.6)),
    ])
    issues = validate(layout)
    assert [(issue.kind, issue.entities) for issue in issues] == [(IssueKind.SEMANTIC_CONFLICT, (1,))]


def test_validate_is_order_insensitive():
    box = BBox(0.1, 0.1, 0.3, 0.3)
    entities = [LayoutEntity(VEHICLE, box), LayoutEntity(FLOOD, BBox(0.5, 0.5, 0.9, 0.9)), LayoutEntity(VEHICLE, box)]
    forward = validate(Layout.build("detection", entities))
    backward = validate(Layout.build("detection", entities[::-1]))
    assert sorted(issue.kind for issue in forward) == sorted(issue.kind for issue in backward)

# ============= FILES =============

def test_layout_file_round_trip(tmp_path, segmentation_layout):
    path = save_layout(segmentation_layout, tmp_path / "layouts" / "s.json")
    document = json.loads(path.read_text())
    assert document["task"] == "semantic_segmentation"
    assert document["entities"][0]["mask_file"] == "s_m0.png"
    assert "mask_file" not in document["entities"][1]

    loaded = load_layout(path)
    assert loaded.task == segmentation_layout.task
    assert loaded.caption == segmentation_layout.caption
    for a, b in zip(loaded.entities, segmentation_layout.entities):
        assert a.category == b.category and a.box == b.box and a.mask == b.mask


def test_missing_mask_file(tmp_path, segmentation_layout):
    path = save_layout(segmentation_layout, tmp_path / "s.json")
    (tmp_path / "s_m0.png").unlink()
    with pytest.raises(LayoutError):
        load_layout(path)


def test_unreadable_mask_file(tmp_path, segmentation_layout):
    path = save_layout(segmentation_layout, tmp_path / "s.json")
    (tmp_path / "s_m0.png").write_bytes(b"garbage")
    with pytest.raises(LayoutError) as excinfo:
        load_layout(path)
    assert excinfo.value.details["path"] == str(tmp_path / "s_m0.png")


def test_invalid_layout_document(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"task": "detection", "entities": [{"category": "vehicle", "box": [0, 0, 1]}]}))
    with pytest.raises(LayoutError):
        load_layout(path)
    with pytest.raises(LayoutError):
        load_layout(tmp_path / "missing.json")
