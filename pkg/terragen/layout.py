"""
Layout domain types, the unified layout transform, geometric augmentation,
annotation consistency checks and layout file I/O

Pixel-edge convention: mask pixel (r, c) covers [c/W, (c+1)/W) x [r/H, (r+1)/H);
a box rasterizes to the pixels whose centers fall inside it.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy import ndimage

from terragen.errors import LayoutError, TransformError

logger = logging.getLogger(__name__)

# ============= TASKS AND CATEGORIES =============

class TaskId(IntEnum):
    DETECTION = 0
    SEMANTIC_SEGMENTATION = 1
    BUILDING_EXTRACTION = 2
    ROAD_EXTRACTION = 3
    FLOOD_DETECTION = 4

    @property
    def code(self) -> str:
        return f"T{self.value}"

    @classmethod
    def parse(cls, value: Union[int, str, "TaskId"]) -> "TaskId":
        """Accept a TaskId, its integer value, 'T3' or the lower-case name"""
        if isinstance(value, TaskId):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).strip()
        if text.upper().startswith("T") and text[1:].isdigit():
            return cls(int(text[1:]))
        try:
            return cls[text.upper().replace("-", "_")]
        except KeyError:
            raise LayoutError(f"Unknown task '{value}'")


@dataclass(frozen=True)
class Category:
    id: int
    name: str


CATEGORIES: Tuple[Category, ...] = (
    Category(0, "building"),
    Category(1, "road"),
    Category(2, "water"),
    Category(3, "flood"),
    Category(4, "vehicle"),
    Category(5, "storage_tank"),
)
CATEGORY_BY_NAME = {category.name: category for category in CATEGORIES}
N_CATEGORIES = len(CATEGORIES)

BUILDING, ROAD, WATER, FLOOD, VEHICLE, STORAGE_TANK = range(N_CATEGORIES)

TASK_CATEGORIES: Dict[TaskId, Tuple[int, ...]] = {
    TaskId.DETECTION: (VEHICLE, STORAGE_TANK),
    TaskId.SEMANTIC_SEGMENTATION: (BUILDING, ROAD, WATER),
    TaskId.BUILDING_EXTRACTION: (BUILDING,),
    TaskId.ROAD_EXTRACTION: (ROAD,),
    TaskId.FLOOD_DETECTION: (FLOOD,),
}


def category_id(value: Union[int, str]) -> int:
    if isinstance(value, (int, np.integer)):
        if not 0 <= int(value) < N_CATEGORIES:
            raise LayoutError(f"Category id {value} is outside the category table")
        return int(value)
    text = str(value).strip()
    if text.isdigit():
        return category_id(int(text))
    if text not in CATEGORY_BY_NAME:
        raise LayoutError(f"Unknown category '{value}'")
    return CATEGORY_BY_NAME[text].id


def category_name(cid: int) -> str:
    return CATEGORIES[cid].name

# ============= GEOMETRY =============

@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise LayoutError(f"Degenerate box {self.as_tuple()}")
        if min(self.x1, self.y1) < -1e-9 or max(self.x2, self.y2) > 1 + 1e-9:
            raise LayoutError(f"Box {self.as_tuple()} leaves the unit square")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise LayoutError(f"Mask must be a non-empty 2-D grid, got shape {bits.shape}")
        if bits.dtype != bool:
            if not np.isin(bits, (0, 1)).all():
                raise LayoutError("Mask values must be 0 or 1")
            bits = bits.astype(bool)
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes"""
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def rasterize_box(box: BBox, height: int, width: int) -> Mask:
    centers_x = (np.arange(width) + 0.5) / width
    centers_y = (np.arange(height) + 0.5) / height
    cols = (centers_x >= box.x1) & (centers_x < box.x2)
    rows = (centers_y >= box.y1) & (centers_y < box.y2)
    return Mask(np.outer(rows, cols))


def tight_box(mask: Mask) -> Optional[BBox]:
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    if rows.size == 0:
        return None
    return BBox(cols[0] / mask.width, rows[0] / mask.height,
                (cols[-1] + 1) / mask.width, (rows[-1] + 1) / mask.height)


def resample_mask(mask: Mask, height: int, width: int) -> Mask:
    """Nearest-neighbour resampling onto another grid"""
    if (mask.height, mask.width) == (height, width):
        return mask
    rows = np.minimum(((np.arange(height) + 0.5) * mask.height / height).astype(int), mask.height - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * mask.width / width).astype(int), mask.width - 1)
    return Mask(mask.bits[np.ix_(rows, cols)])

# ============= LAYOUTS =============

@dataclass(frozen=True)
class LayoutEntity:
    category: int
    box: Optional[BBox] = None
    mask: Optional[Mask] = None

    def __post_init__(self):
        if self.box is None and self.mask is None:
            raise LayoutError("A layout entity needs a box, a mask or both")
        object.__setattr__(self, "category", category_id(self.category))

    @property
    def name(self) -> str:
        return category_name(self.category)


@dataclass(frozen=True)
class UnifiedEntity:
    category: int
    box: BBox
    mask: Mask

    @property
    def name(self) -> str:
        return category_name(self.category)


def count_categories(entities: Iterable) -> Dict[int, int]:
    return dict(sorted(Counter(entity.category for entity in entities).items()))


@dataclass
class Layout:
    task: TaskId
    entities: List[LayoutEntity] = field(default_factory=list)
    caption: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def build(cls, task: Union[TaskId, int, str], entities: Sequence[LayoutEntity]) -> "Layout":
        """Layout whose caption is the category count of its entities"""
        entities = list(entities)
        return cls(TaskId.parse(task), entities, count_categories(entities))

    @classmethod
    def from_unified(cls, task: TaskId, unified: Sequence[UnifiedEntity]) -> "Layout":
        return cls.build(task, [LayoutEntity(u.category, u.box, u.mask) for u in unified])

    def recount(self) -> "Layout":
        return Layout(self.task, list(self.entities), count_categories(self.entities))

# ============= UNIFIED LAYOUT TRANSFORM =============

def unify(layout: Layout, grid_h: int, grid_w: int) -> List[UnifiedEntity]:
    """Give every entity both a box and a mask on the grid; drop empty masks"""
    if grid_h <= 0 or grid_w <= 0:
        raise LayoutError(f"Grid must be positive, got {grid_h}x{grid_w}")

    unified = []
    for entity in layout.entities:
        if entity.mask is not None:
            mask = resample_mask(entity.mask, grid_h, grid_w)
            if mask.area == 0:
                continue
            box = entity.box if entity.box is not None else tight_box(mask)
        else:
            mask = rasterize_box(entity.box, grid_h, grid_w)
            if mask.area == 0:
                continue
            box = entity.box
        unified.append(UnifiedEntity(entity.category, box, mask))
    return unified

# ============= GEOMETRIC TRANSFORMS =============

class TransformKind(str, Enum):
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    SCALE = "scale"
    SHEAR = "shear"


_ROTATIONS = {90: TransformKind.ROT90, 180: TransformKind.ROT180, 270: TransformKind.ROT270}


@dataclass(frozen=True)
class GeoTransform:
    kind: TransformKind
    factor: float = 0.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", TransformKind(self.kind))
        except ValueError:
            raise TransformError(f"Unsupported transform '{self.kind}'")
        if self.kind == TransformKind.SCALE and not 0.5 <= self.factor <= 1.5:
            raise TransformError(f"Scale factor {self.factor} outside [0.5, 1.5]")
        if self.kind == TransformKind.SHEAR and abs(self.factor) > 0.3:
            raise TransformError(f"Shear factor {self.factor} outside [-0.3, 0.3]")

    @classmethod
    def rotation(cls, degrees: int) -> "GeoTransform":
        if degrees % 360 not in _ROTATIONS:
            raise TransformError(f"Only right-angle rotations are supported, got {degrees}")
        return cls(_ROTATIONS[degrees % 360])

    @classmethod
    def parse(cls, text: str) -> "GeoTransform":
        """'hflip', 'rot90', 'scale:1.2', 'shear:-0.1'"""
        kind, _, factor = text.partition(":")
        try:
            return cls(TransformKind(kind.strip()), float(factor) if factor else 0.0)
        except ValueError:
            raise TransformError(f"Unsupported transform '{text}'")

    def __str__(self) -> str:
        if self.kind in (TransformKind.SCALE, TransformKind.SHEAR):
            return f"{self.kind.value}:{self.factor:g}"
        return self.kind.value

    def map_point(self, x: float, y: float) -> Tuple[float, float]:
        kind = self.kind
        if kind == TransformKind.HFLIP:
            return 1 - x, y
        if kind == TransformKind.VFLIP:
            return x, 1 - y
        if kind == TransformKind.ROT90:
            return y, 1 - x
        if kind == TransformKind.ROT180:
            return 1 - x, 1 - y
        if kind == TransformKind.ROT270:
            return 1 - y, x
        if kind == TransformKind.SCALE:
            return 0.5 + self.factor * (x - 0.5), 0.5 + self.factor * (y - 0.5)
        return x + self.factor * (y - 0.5), y

    def apply_mask(self, mask: Mask) -> Mask:
        bits = mask.bits
        kind = self.kind
        if kind == TransformKind.HFLIP:
            return Mask(np.flip(bits, axis=1).copy())
        if kind == TransformKind.VFLIP:
            return Mask(np.flip(bits, axis=0).copy())
        if kind in (TransformKind.ROT90, TransformKind.ROT180, TransformKind.ROT270):
            turns = {TransformKind.ROT90: 1, TransformKind.ROT180: 2, TransformKind.ROT270: 3}[kind]
            return Mask(np.rot90(bits, k=turns).copy())

        h, w = bits.shape
        # output pixel index -> input pixel index, pixel centres at index + 0.5
        if kind == TransformKind.SCALE:
            s = self.factor
            matrix = np.diag([1 / s, 1 / s])
            offset = [(0.5 - h / 2) / s + h / 2 - 0.5, (0.5 - w / 2) / s + w / 2 - 0.5]
        else:
            k = self.factor * w / h
            matrix = np.array([[1.0, 0.0], [-k, 1.0]])
            offset = [0.0, -k * (0.5 - h / 2)]
        out = ndimage.affine_transform(bits.astype(np.uint8), matrix, offset=offset,
                                       output_shape=(h, w), order=0, mode="constant", cval=0)
        return Mask(out > 0)

    def apply_box(self, box: BBox) -> Optional[BBox]:
        corners = [self.map_point(x, y) for x in (box.x1, box.x2) for y in (box.y1, box.y2)]
        xs = [min(max(x, 0.0), 1.0) for x, _ in corners]
        ys = [min(max(y, 0.0), 1.0) for _, y in corners]
        x1, x2, y1, y2 = min(xs), max(xs), min(ys), max(ys)
        if (x2 - x1) * (y2 - y1) < MIN_BOX_AREA:
            return None
        return BBox(x1, y1, x2, y2)


MIN_MASK_PIXELS = 4
MIN_BOX_AREA = 1e-4

ALL_TRANSFORM_KINDS = tuple(TransformKind)


def random_transform(rng: np.random.Generator) -> GeoTransform:
    kind = ALL_TRANSFORM_KINDS[int(rng.integers(len(ALL_TRANSFORM_KINDS)))]
    if kind == TransformKind.SCALE:
        return GeoTransform(kind, float(np.round(rng.uniform(0.5, 1.5), 3)))
    if kind == TransformKind.SHEAR:
        return GeoTransform(kind, float(np.round(rng.uniform(-0.3, 0.3), 3)))
    return GeoTransform(kind)


def transform_layout(layout: Layout, t: GeoTransform) -> Layout:
    """Apply one geometric transform; entities that shrink away are dropped"""
    if not isinstance(t, GeoTransform):
        raise TransformError(f"Unsupported transform {t!r}")

    kept = []
    for entity in layout.entities:
        box = mask = None
        if entity.box is not None:
            box = t.apply_box(entity.box)
            if box is None:
                continue
        if entity.mask is not None:
            mask = t.apply_mask(entity.mask)
            if mask.area < MIN_MASK_PIXELS:
                continue
        kept.append(LayoutEntity(entity.category, box, mask))
    return Layout(layout.task, kept, count_categories(kept))

# ============= CONSISTENCY CHECKS =============

class IssueKind(str, Enum):
    OVERLAPPING_BOXES = "OverlappingBoxes"
    BROKEN_ROAD = "BrokenRoad"
    SEMANTIC_CONFLICT = "SemanticConflict"


@dataclass(frozen=True)
class Issue:
    kind: IssueKind
    entities: Tuple[int, ...]
    message: str


class ValidationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    overlap_iou: float = Field(0.9, gt=0, le=1)
    max_road_components: int = Field(3, ge=1)
    grid_size: int = Field(32, ge=1)


def _entity_box(entity: LayoutEntity) -> Optional[BBox]:
    return entity.box if entity.box is not None else tight_box(entity.mask)


def validate(layout: Layout, config: Optional[ValidationConfig] = None) -> List[Issue]:
    """Overlapping same-category boxes, broken roads and illegal categories"""
    config = config or ValidationConfig()
    issues = []
    legal = TASK_CATEGORIES[layout.task]

    for index, entity in enumerate(layout.entities):
        if entity.category not in legal:
            issues.append(Issue(
                IssueKind.SEMANTIC_CONFLICT, (index,),
                f"'{entity.name}' is not a {layout.task.name.lower()} category",
            ))

    boxes = [_entity_box(entity) for entity in layout.entities]
    for i, j in combinations(range(len(layout.entities)), 2):
        if layout.entities[i].category != layout.entities[j].category:
            continue
        if boxes[i] is None or boxes[j] is None:
            continue
        overlap = iou(boxes[i], boxes[j])
        if overlap > config.overlap_iou:
            issues.append(Issue(
                IssueKind.OVERLAPPING_BOXES, (i, j),
                f"'{layout.entities[i].name}' boxes {i} and {j} overlap with IoU {overlap:.3f}",
            ))

    if layout.task == TaskId.ROAD_EXTRACTION:
        roads = [(i, e) for i, e in enumerate(layout.entities) if e.category == ROAD]
        if roads:
            masked = [e.mask for _, e in roads if e.mask is not None]
            grid_h, grid_w = (masked[0].height, masked[0].width) if masked else (config.grid_size, config.grid_size)
            union = np.zeros((grid_h, grid_w), dtype=bool)
            for unified in unify(Layout(layout.task, [e for _, e in roads]), grid_h, grid_w):
                union |= unified.mask.bits
            _, components = ndimage.label(union)
            if components > config.max_road_components:
                issues.append(Issue(
                    IssueKind.BROKEN_ROAD, tuple(i for i, _ in roads),
                    f"road mask has {components} components (max {config.max_road_components})",
                ))
    return issues

# ============= LAYOUT FILES =============

class EntityDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    category: Union[int, str]
    box: Optional[List[float]] = None
    mask_file: Optional[str] = None

    @field_validator("box")
    @classmethod
    def _four_coordinates(cls, value):
        if value is not None and len(value) != 4:
            raise ValueError("box must be [x1, y1, x2, y2]")
        return value


class LayoutDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: Union[int, str]
    entities: List[EntityDocument] = Field(default_factory=list)
    caption: Dict[str, int] = Field(default_factory=dict)


def write_mask_png(mask: Mask, path: Path) -> None:
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path: Path) -> Mask:
    try:
        with Image.open(path) as image:
            bits = np.asarray(image.convert("L")) > 127
    except OSError as exc:
        raise LayoutError(f"Unreadable mask file {path}: {exc}", details={"path": str(path)})
    return Mask(bits)


def save_layout(layout: Layout, path: Union[str, Path]) -> Path:
    """Write the layout JSON; masks go next to it as 0/255 PNGs"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entities = []
    for index, entity in enumerate(layout.entities):
        document = EntityDocument(category=entity.name)
        if entity.box is not None:
            document.box = list(entity.box.as_tuple())
        if entity.mask is not None:
            mask_name = f"{path.stem}_m{index}.png"
            write_mask_png(entity.mask, path.parent / mask_name)
            document.mask_file = mask_name
        entities.append(document)

    document = LayoutDocument(
        task=layout.task.name.lower(),
        entities=entities,
        caption={str(cid): count for cid, count in layout.caption.items()},
    )
    path.write_text(document.model_dump_json(indent=2, exclude_none=True), encoding="utf-8")
    return path


def load_layout(path: Union[str, Path]) -> Layout:
    path = Path(path)
    try:
        document = LayoutDocument.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LayoutError(f"Layout file not found: {path}")
    except ValidationError as exc:
        raise LayoutError(f"Invalid layout document {path}: {exc}")

    entities = []
    for entity in document.entities:
        box = BBox(*entity.box) if entity.box is not None else None
        mask = None
        if entity.mask_file is not None:
            mask_path = path.parent / entity.mask_file
            if not mask_path.exists():
                raise LayoutError(f"Mask file missing: {mask_path}")
            mask = read_mask_png(mask_path)
        entities.append(LayoutEntity(category_id(entity.category), box, mask))
    caption = {int(cid): int(count) for cid, count in document.caption.items()}
    return Layout(TaskId.parse(document.task), entities, dict(sorted(caption.items())))
