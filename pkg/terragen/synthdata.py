"""
Procedural scene generator and dataset storage
Color-coded shapes over a textured background, with exact masks as ground truth
"""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import ndimage
from tqdm import tqdm

from terragen.config import config_hash
from terragen.errors import DatasetError, LayoutError
from terragen.layout import (
    BUILDING, FLOOD, ROAD, STORAGE_TANK, TASK_CATEGORIES, VEHICLE, WATER,
    Layout, LayoutEntity, Mask, TaskId, ValidationConfig, iou, load_layout, save_layout, tight_box,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# ============= PALETTE AND SHAPES =============

PALETTE: Dict[int, Tuple[int, int, int]] = {
    BUILDING: (220, 60, 60),
    ROAD: (230, 230, 230),
    WATER: (40, 80, 220),
    FLOOD: (140, 90, 30),
    VEHICLE: (240, 220, 40),
    STORAGE_TANK: (60, 220, 200),
}
BACKGROUND = (70, 110, 60)
MIN_PALETTE_DISTANCE = 64

SHAPE_KINDS = {
    BUILDING: "rectangle",
    ROAD: "stripe",
    WATER: "blob",
    FLOOD: "blob",
    VEHICLE: "small_square",
    STORAGE_TANK: "disc",
}
# large shapes are placed first so small ones fill the gaps
PLACEMENT_ORDER = {ROAD: 0, FLOOD: 1, WATER: 2, BUILDING: 3, STORAGE_TANK: 4, VEHICLE: 5}

DEFAULT_TASK_MIX = {
    "semantic_segmentation": 0.30,
    "detection": 0.25,
    "building_extraction": 0.20,
    "road_extraction": 0.15,
    "flood_detection": 0.10,
}
MAX_PLACEMENT_ATTEMPTS = 20
MAX_SAME_CATEGORY_IOU = 0.5
# one connected component per road stripe
MAX_ROAD_ENTITIES = ValidationConfig().max_road_components


def palette_distance(a: Sequence[int], b: Sequence[int]) -> int:
    return int(max(abs(int(x) - int(y)) for x, y in zip(a, b)))


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: TaskId
    n_entities: Tuple[int, int] = (1, 4)
    categories: Tuple[int, ...] = ()
    image_size: int = Field(32, ge=8)
    texture_amplitude: float = Field(12.0, ge=0)
    noise_sigma: float = Field(4.0, ge=0, le=8)
    palette: Dict[int, Tuple[int, int, int]] = Field(default_factory=lambda: dict(PALETTE))
    max_roads: int = Field(MAX_ROAD_ENTITIES, ge=0, le=MAX_ROAD_ENTITIES)

    @field_validator("task", mode="before")
    @classmethod
    def _parse_task(cls, value):
        return TaskId.parse(value)

    @model_validator(mode="after")
    def _check(self):
        if not self.categories:
            self.categories = TASK_CATEGORIES[self.task]
        low, high = self.n_entities
        if not 0 <= low <= high:
            raise ValueError(f"n_entities range {self.n_entities} is invalid")
        colors = list(self.palette.items())
        for i, (ca, a) in enumerate(colors):
            for cb, b in colors[i + 1:]:
                if palette_distance(a, b) < MIN_PALETTE_DISTANCE:
                    raise ValueError(f"palette colors of categories {ca} and {cb} are closer than {MIN_PALETTE_DISTANCE}")
        for category, color in colors:
            if palette_distance(color, BACKGROUND) < MIN_PALETTE_DISTANCE:
                raise ValueError(f"palette color of category {category} is closer than {MIN_PALETTE_DISTANCE} to the background")
        return self


def _draw_shape(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    canvas = np.zeros((size, size), dtype=np.uint8)
    if kind == "rectangle":
        w, h = rng.integers(4, 10, size=2)
        x, y = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
        cv2.rectangle(canvas, (int(x), int(y)), (int(x + w - 1), int(y + h - 1)), 1, -1)
    elif kind == "stripe":
        thickness = int(rng.integers(3, 5))
        start = int(rng.integers(4, size - 4))
        end = int(np.clip(start + rng.integers(-6, 7), 2, size - 3))
        if rng.random() < 0.5:
            cv2.line(canvas, (0, start), (size - 1, end), 1, thickness)
        else:
            cv2.line(canvas, (start, 0), (end, size - 1), 1, thickness)
    elif kind == "blob":
        axes = tuple(int(a) for a in rng.integers(3, 8, size=2))
        center = tuple(int(c) for c in rng.integers(3, size - 3, size=2))
        cv2.ellipse(canvas, center, axes, float(rng.integers(0, 180)), 0, 360, 1, -1)
    elif kind == "small_square":
        side = int(rng.integers(2, 4))
        x, y = rng.integers(0, size - side + 1, size=2)
        cv2.rectangle(canvas, (int(x), int(y)), (int(x + side - 1), int(y + side - 1)), 1, -1)
    elif kind == "disc":
        radius = int(rng.integers(2, 5))
        center = tuple(int(c) for c in rng.integers(radius, size - radius, size=2))
        cv2.circle(canvas, center, radius, 1, -1)
    else:
        raise DatasetError(f"Unknown shape kind '{kind}'")
    return canvas.astype(bool)


def largest_component(bits: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(bits)
    if count <= 1:
        return bits
    sizes = ndimage.sum(bits, labels, index=range(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def _background(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    coarse = rng.uniform(-1, 1, size=(4, 4)).astype(np.float32)
    texture = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)
    return np.asarray(BACKGROUND, dtype=np.float64)[None, None, :] + amplitude * np.clip(texture, -1, 1)[:, :, None]


def gen_scene(rng: np.random.Generator, spec: SceneSpec) -> Tuple[np.ndarray, Layout]:
    """Render one scene; entity masks are exactly the drawn pixels"""
    size = spec.image_size
    low, high = spec.n_entities
    count = int(rng.integers(low, high + 1))
    chosen = [spec.categories[int(rng.integers(len(spec.categories)))] for _ in range(count)]
    chosen.sort(key=lambda category: PLACEMENT_ORDER[category])

    occupied = np.zeros((size, size), dtype=bool)
    entities: List[LayoutEntity] = []
    for category in chosen:
        if category == ROAD and sum(e.category == ROAD for e in entities) >= spec.max_roads:
            continue
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            bits = largest_component(_draw_shape(SHAPE_KINDS[category], rng, size))
            if bits.sum() < 4 or (bits & occupied).any():
                continue
            mask = Mask(bits)
            box = tight_box(mask)
            if any(e.category == category and iou(e.box, box) > MAX_SAME_CATEGORY_IOU for e in entities):
                continue
            entities.append(LayoutEntity(category, box, mask))
            occupied |= ndimage.binary_dilation(bits, structure=np.ones((3, 3), dtype=bool))
            break

    image = _background(rng, size, spec.texture_amplitude)
    for entity in entities:
        image[entity.mask.bits] = spec.palette[entity.category]
    if spec.noise_sigma > 0:
        noise = np.clip(rng.normal(0.0, spec.noise_sigma, size=image.shape), -3 * spec.noise_sigma, 3 * spec.noise_sigma)
        image = image + noise
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return image, Layout.build(spec.task, entities)

# ============= DATASETS =============

class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: int = Field(2000, ge=0)
    val: int = Field(200, ge=0)
    test: int = Field(200, ge=0)
    image_size: int = Field(32, ge=8)
    min_entities: int = Field(1, ge=0)
    max_entities: int = Field(4, ge=0)
    texture_amplitude: float = Field(12.0, ge=0)
    noise_sigma: float = Field(4.0, ge=0, le=8)
    task_mix: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_TASK_MIX))
    seed: int = 0

    def split_counts(self) -> Dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def task_probabilities(self) -> Tuple[List[TaskId], np.ndarray]:
        tasks = [TaskId.parse(name) for name in self.task_mix]
        weights = np.array(list(self.task_mix.values()), dtype=np.float64)
        if (weights < 0).any() or weights.sum() <= 0:
            raise DatasetError("task_mix weights must be non-negative and not all zero")
        return tasks, weights / weights.sum()

    def scene_spec(self, task: TaskId) -> SceneSpec:
        high = self.max_entities
        if task in (TaskId.ROAD_EXTRACTION, TaskId.FLOOD_DETECTION):
            high = min(high, 2)
        return SceneSpec(
            task=task, n_entities=(min(self.min_entities, high), high), image_size=self.image_size,
            texture_amplitude=self.texture_amplitude, noise_sigma=self.noise_sigma,
        )


class SampleRecord(BaseModel):
    id: str
    split: str
    task: str
    image: str
    layout: str


class DatasetManifest(BaseModel):
    root: str
    seed: int
    spec_hash: str
    content_hash: str = ""
    image_size: int
    samples: List[SampleRecord] = Field(default_factory=list)

    def records(self, split: Optional[str] = None) -> List[SampleRecord]:
        return [record for record in self.samples if split is None or record.split == split]


@dataclass
class Sample:
    id: str
    split: str
    image: np.ndarray  # HxWx3 uint8
    layout: Layout


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def write_image(image: np.ndarray, path: Path) -> None:
    Image.fromarray(image, mode="RGB").save(path)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB")).copy()


def write_dataset(config: DataConfig, root: Union[str, Path]) -> DatasetManifest:
    """Generate every split under root and write manifest.json"""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "layouts").mkdir(parents=True, exist_ok=True)
    tasks, probabilities = config.task_probabilities()
    specs = {task: config.scene_spec(task) for task in tasks}

    records = []
    digest = hashlib.sha256()
    index = 0
    total = sum(config.split_counts().values())
    with tqdm(total=total, desc="gen-data", leave=False) as progress:
        for split, count in config.split_counts().items():
            for position in range(count):
                rng = sample_rng(config.seed, index)
                task = tasks[int(rng.choice(len(tasks), p=probabilities))]
                image, layout = gen_scene(rng, specs[task])
                sample_id = f"{split}_{position:05d}"
                image_path = root / "images" / f"{sample_id}.png"
                layout_path = root / "layouts" / f"{sample_id}.json"
                write_image(image, image_path)
                save_layout(layout, layout_path)
                digest.update(image.tobytes())
                digest.update(layout_path.read_bytes())
                records.append(SampleRecord(
                    id=sample_id, split=split, task=task.name.lower(),
                    image=f"images/{sample_id}.png", layout=f"layouts/{sample_id}.json",
                ))
                index += 1
                progress.update(1)

    manifest = DatasetManifest(
        root=str(root), seed=config.seed, spec_hash=config_hash(config),
        content_hash=digest.hexdigest(), image_size=config.image_size, samples=records,
    )
    (root / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"[DATA] Wrote {len(records)} samples to {root} ({config.split_counts()})")
    return manifest


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"Manifest not found: {path}")
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise DatasetError(f"Corrupt manifest {path}: {exc}")


def read_sample(root: Path, record: SampleRecord) -> Sample:
    image_path = root / record.image
    if not image_path.exists():
        raise DatasetError(f"Sample {record.id}: image file missing ({image_path})", details={"sample": record.id})
    try:
        image = read_image(image_path)
    except OSError as exc:
        raise DatasetError(f"Sample {record.id}: unreadable image ({exc})", details={"sample": record.id})
    try:
        layout = load_layout(root / record.layout)
    except LayoutError as exc:
        raise DatasetError(f"Sample {record.id}: {exc.message}", details={"sample": record.id, **exc.details})
    return Sample(id=record.id, split=record.split, image=image, layout=layout)


def read_dataset(root: Union[str, Path], split: Optional[str] = None,
                 limit: Optional[int] = None) -> List[Sample]:
    root = Path(root)
    records = load_manifest(root).records(split)
    if limit is not None:
        records = records[:limit]
    return [read_sample(root, record) for record in records]
