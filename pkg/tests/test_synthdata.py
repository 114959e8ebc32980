from collections import Counter

import numpy as np
import pytest

from terragen.errors import DatasetError
from terragen.evaluation import oracle_detect
from terragen.layout import ROAD, STORAGE_TANK, TASK_CATEGORIES, VEHICLE, TaskId, validate
from terragen.synthdata import (
    BACKGROUND, MAX_ROAD_ENTITIES, PALETTE, DataConfig, SceneSpec, gen_scene, largest_component, load_manifest, read_dataset,
    sample_rng, write_dataset,
)


def test_scene_without_entities_is_plain_background():
    spec = SceneSpec(task=TaskId.DETECTION, n_entities=(0, 0), image_size=16)
    image, layout = gen_scene(np.random.default_rng(0), spec)
    assert image.shape == (16, 16, 3) and image.dtype == np.uint8
    assert layout.entities == [] and layout.caption == {}
    assert np.abs(image.astype(int) - np.array(BACKGROUND)).max() <= 24
    assert oracle_detect(image) == []


@pytest.mark.parametrize("task", list(TaskId))
def test_generated_layouts_are_clean(task):
    spec = SceneSpec(task=task, image_size=32)
    for index in range(50):
        _, layout = gen_scene(sample_rng(11, index), spec)
        assert layout.task == task
        assert all(entity.category in TASK_CATEGORIES[task] for entity in layout.entities)
        assert validate(layout) == []


@pytest.mark.parametrize("task", list(TaskId))
def test_oracle_recovers_noise_free_masks_exactly(task):
    spec = SceneSpec(task=task, image_size=32, noise_sigma=0.0)
    for index in range(10):
        image, layout = gen_scene(sample_rng(5, index), spec)
        found = sorted((d.category, d.mask.bits.tobytes()) for d in oracle_detect(image))
        expected = sorted((e.category, e.mask.bits.tobytes()) for e in layout.entities)
        assert found == expected


@pytest.mark.parametrize("task", [TaskId.ROAD_EXTRACTION, TaskId.SEMANTIC_SEGMENTATION])
def test_crowded_road_scenes_stay_within_the_component_cap(task):
    spec = SceneSpec(task=task, n_entities=(5, 6), categories=(ROAD,), image_size=32)
    for index in range(40):
        _, layout = gen_scene(sample_rng(13, index), spec)
        assert sum(entity.category == ROAD for entity in layout.entities) <= MAX_ROAD_ENTITIES
        assert validate(layout) == []


def test_road_cap_cannot_exceed_the_validator_limit():
    with pytest.raises(ValueError):
        SceneSpec(task=TaskId.ROAD_EXTRACTION, max_roads=MAX_ROAD_ENTITIES + 1)


def test_entities_have_matching_box_and_mask():
    spec = SceneSpec(task=TaskId.SEMANTIC_SEGMENTATION, image_size=32)
    _, layout = gen_scene(sample_rng(2, 0), spec)
    for entity in layout.entities:
        rows, cols = np.nonzero(entity.mask.bits)
        expected = (cols.min() / 32, rows.min() / 32, (cols.max() + 1) / 32, (rows.max() + 1) / 32)
        assert entity.box.as_tuple() == pytest.approx(expected)
        assert entity.mask.area >= 4


def test_detection_class_balance():
    spec = SceneSpec(task=TaskId.DETECTION, n_entities=(1, 2), image_size=32)
    counts = Counter()
    for index in range(1000):
        _, layout = gen_scene(sample_rng(21, index), spec)
        counts.update(entity.category for entity in layout.entities)
    total = counts[VEHICLE] + counts[STORAGE_TANK]
    for category in (VEHICLE, STORAGE_TANK):
        assert abs(counts[category] / total - 0.5) <= 0.1


def test_palette_colors_must_stay_apart():
    palette = dict(PALETTE)
    palette[VEHICLE] = (220, 80, 60)
    with pytest.raises(ValueError):
        SceneSpec(task=TaskId.DETECTION, palette=palette)
    with pytest.raises(ValueError):
        SceneSpec(task=TaskId.DETECTION, n_entities=(3, 1))


def test_palette_colors_must_stay_apart_from_the_background():
    palette = dict(PALETTE)
    palette[VEHICLE] = (30, 150, 100)
    with pytest.raises(ValueError, match="background"):
        SceneSpec(task=TaskId.DETECTION, palette=palette)


def test_largest_component():
    bits = np.zeros((6, 6), dtype=bool)
    bits[0, 0] = True
    bits[2:5, 2:5] = True
    kept = largest_component(bits)
    assert kept.sum() == 9 and not kept[0, 0]

# ============= DATASETS =============

def test_dataset_split_counts(small_dataset):
    root, manifest = small_dataset
    assert [len(manifest.records(split)) for split in ("train", "val", "test")] == [6, 2, 4]
    assert manifest.records("val")[0].id == "val_00000"
    assert (root / "images" / "test_00003.png").exists()
    assert load_manifest(root).content_hash == manifest.content_hash


def test_dataset_round_trip(small_dataset, small_data_config):
    root, manifest = small_dataset
    samples = read_dataset(root, split="train")
    tasks, probabilities = small_data_config.task_probabilities()
    rng = sample_rng(small_data_config.seed, 0)
    task = tasks[int(rng.choice(len(tasks), p=probabilities))]
    image, layout = gen_scene(rng, small_data_config.scene_spec(task))

    first = samples[0]
    assert np.array_equal(first.image, image)
    assert first.layout.task == layout.task
    assert [e.category for e in first.layout.entities] == [e.category for e in layout.entities]
    for loaded, generated in zip(first.layout.entities, layout.entities):
        assert loaded.mask == generated.mask
        assert loaded.box == generated.box


def test_same_seed_same_content_hash(tmp_path, small_data_config):
    a = write_dataset(small_data_config, tmp_path / "a")
    b = write_dataset(small_data_config, tmp_path / "b")
    c = write_dataset(small_data_config.model_copy(update={"seed": 4}), tmp_path / "c")
    assert a.content_hash == b.content_hash
    assert a.content_hash != c.content_hash


def test_read_dataset_limit_and_errors(tmp_path, small_dataset):
    root, _ = small_dataset
    assert len(read_dataset(root, split="test", limit=2)) == 2
    (root / "images" / "val_00001.png").unlink()
    with pytest.raises(DatasetError) as excinfo:
        read_dataset(root, split="val")
    assert excinfo.value.details["sample"] == "val_00001"
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "missing")


def test_corrupt_mask_names_the_sample(small_dataset):
    root, _ = small_dataset
    mask = sorted((root / "layouts").glob("*_m*.png"))[0]
    mask.write_bytes(b"not a png")
    with pytest.raises(DatasetError) as excinfo:
        read_dataset(root)
    assert excinfo.value.details["sample"] == mask.stem.rsplit("_m", 1)[0]
    assert excinfo.value.details["path"] == str(mask)


def test_task_mix_must_be_positive():
    with pytest.raises(DatasetError):
        DataConfig(task_mix={"detection": 0.0}).task_probabilities()
