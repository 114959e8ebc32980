"""
Benchmark metrics and the layout-consistency report
FID, oracle detector, segmentation and detection agreement, report exports
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, ndimage

from terragen.config import config_hash
from terragen.errors import MetricError
from terragen.layout import (
    N_CATEGORIES, TASK_CATEGORIES, BBox, Layout, Mask, iou, tight_box, unify,
)
from terragen.diffusion import SampleConfig, load_model, sample_batched
from terragen.synthdata import PALETTE, Sample, read_dataset

logger = logging.getLogger(__name__)

NEGATIVE_EIGEN_TOLERANCE = 1e-8
SHRINKAGE = 0.01
MAP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))

# ============= FID =============

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _psd_sqrt(matrix: np.ndarray, what: str) -> np.ndarray:
    values, vectors = linalg.eigh((matrix + matrix.T) / 2)
    if values.size and values.min() < -NEGATIVE_EIGEN_TOLERANCE:
        raise MetricError(f"{what} is indefinite (eigenvalue {values.min():.3e})")
    return (vectors * np.sqrt(np.clip(values, 0, None))) @ vectors.T


def fid(real: FeatureStats, gen: FeatureStats) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2)"""
    if real.mu.shape != gen.mu.shape or real.sigma.shape != gen.sigma.shape:
        raise MetricError(f"Feature dimensions differ: {real.mu.shape} vs {gen.mu.shape}")
    sqrt_real = _psd_sqrt(real.sigma, "real covariance")
    product = sqrt_real @ gen.sigma @ sqrt_real
    values = linalg.eigvalsh((product + product.T) / 2)
    if values.size and values.min() < -NEGATIVE_EIGEN_TOLERANCE:
        raise MetricError(f"Covariance product is indefinite (eigenvalue {values.min():.3e})")
    trace_sqrt = float(np.sqrt(np.clip(values, 0, None)).sum())
    diff = real.mu - gen.mu
    return float(diff @ diff + np.trace(real.sigma) + np.trace(gen.sigma) - 2 * trace_sqrt)

# ============= FEATURE EXTRACTORS =============

FeatureExtractor = Callable[[np.ndarray], np.ndarray]
FEATURE_EXTRACTORS: Dict[str, FeatureExtractor] = {}


def register_extractor(name: str):
    def decorator(fn: FeatureExtractor) -> FeatureExtractor:
        FEATURE_EXTRACTORS[name] = fn
        return fn
    return decorator


def _downsample(images: np.ndarray, size: int = 8) -> np.ndarray:
    return np.stack([
        cv2.resize(image.astype(np.float32), (size, size), interpolation=cv2.INTER_AREA)
        for image in images
    ]).reshape(len(images), -1).astype(np.float64)


@register_extractor("projection")
def projection_features(images: np.ndarray) -> np.ndarray:
    """8x8 downsample, flatten, fixed seeded projection to 64 dims"""
    flat = _downsample(images)
    projection = np.random.default_rng(20240531).normal(size=(flat.shape[1], 64)) / np.sqrt(flat.shape[1])
    return flat @ projection


@register_extractor("downsample")
def downsample_features(images: np.ndarray) -> np.ndarray:
    return _downsample(images, size=4)


def _as_float_images(images: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    array = np.asarray(images)
    if array.dtype == np.uint8:
        return array.astype(np.float64) / 255.0
    return array.astype(np.float64)


def features(images: Union[np.ndarray, Sequence[np.ndarray]], extractor: str = "projection") -> FeatureStats:
    """Gaussian fit of extracted features; shrinks the covariance when n < dim + 1"""
    if len(images) < 2:
        raise MetricError(f"features needs at least 2 images, got {len(images)}")
    if extractor not in FEATURE_EXTRACTORS:
        raise MetricError(f"Unknown feature extractor '{extractor}'")
    feats = FEATURE_EXTRACTORS[extractor](_as_float_images(images))
    n, dim = feats.shape
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    if n < dim + 1:
        target = np.trace(sigma) / dim
        sigma = (1 - SHRINKAGE) * sigma + SHRINKAGE * target * np.eye(dim)
    return FeatureStats(mu=mu, sigma=sigma, n=n)

# ============= ORACLE DETECTOR =============

@dataclass
class Detection:
    category: int
    mask: Mask
    box: BBox
    score: float


def oracle_detect(image: np.ndarray, palette: Optional[Dict[int, Tuple[int, int, int]]] = None,
                  tol: float = 32.0, min_pixels: int = 4) -> List[Detection]:
    """Palette-threshold each category and emit its 4-connected components"""
    palette = palette or PALETTE
    pixels = image.astype(np.int32)
    detections = []
    for category, color in sorted(palette.items()):
        distance = np.abs(pixels - np.asarray(color, dtype=np.int32)[None, None, :]).max(axis=2)
        selected = distance <= tol
        labels, count = ndimage.label(selected)
        for label in range(1, count + 1):
            component = labels == label
            if component.sum() < min_pixels:
                continue
            mask = Mask(component)
            proximity = 1.0 - distance[component] / tol if tol > 0 else np.ones(int(component.sum()))
            detections.append(Detection(category, mask, tight_box(mask), float(proximity.mean())))
    return detections

# ============= SEGMENTATION METRICS =============

def _label_map(masks: Dict[int, np.ndarray], shape: Tuple[int, int]) -> np.ndarray:
    labels = np.full(shape, -1, dtype=np.int64)
    for category in sorted(masks, reverse=True):
        labels[np.asarray(masks[category], dtype=bool)] = category
    return labels


def seg_metrics(pred: Dict[int, np.ndarray], gt: Dict[int, np.ndarray]) -> Tuple[float, float]:
    """(mIoU over classes with a non-empty union, pixel accuracy incl. background)

    Overlapping classes resolve to the smallest category id.
    """
    shapes = {np.asarray(m).shape for m in list(pred.values()) + list(gt.values())}
    if len(shapes) > 1:
        raise MetricError(f"seg_metrics: grids differ {sorted(shapes)}")
    if not shapes:
        return 1.0, 1.0
    shape = shapes.pop()
    empty = np.zeros(shape, dtype=bool)

    ious = []
    for category in sorted(set(pred) | set(gt)):
        p = np.asarray(pred.get(category, empty), dtype=bool)
        g = np.asarray(gt.get(category, empty), dtype=bool)
        union = (p | g).sum()
        if union:
            ious.append((p & g).sum() / union)
    miou = float(np.mean(ious)) if ious else 1.0
    acc = float((_label_map(pred, shape) == _label_map(gt, shape)).mean())
    return miou, acc

# ============= DETECTION METRICS =============

@dataclass
class ScoredBox:
    category: int
    box: BBox
    score: float


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated area under the precision envelope"""
    if n_gt == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def _category_ap(preds: Sequence[Tuple[int, BBox, float]], gts: Dict[int, List[BBox]], threshold: float) -> float:
    """preds are (image index, box, score); greedy matching in descending score"""
    n_gt = sum(len(boxes) for boxes in gts.values())
    order = sorted(range(len(preds)), key=lambda i: -preds[i][2])
    matched = {image: np.zeros(len(boxes), dtype=bool) for image, boxes in gts.items()}
    tp = np.zeros(len(preds))
    for rank, index in enumerate(order):
        image, box, _ = preds[index]
        best, best_iou = -1, threshold
        for j, gt_box in enumerate(gts.get(image, [])):
            if matched[image][j]:
                continue
            overlap = iou(box, gt_box)
            if overlap >= best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            matched[image][best] = True
            tp[rank] = 1
    return average_precision(tp, n_gt)


def det_metrics(preds: Sequence[Sequence[ScoredBox]], gts: Sequence[Sequence[Tuple[int, BBox]]]) -> Tuple[float, float]:
    """(AP50, mAP@[.50:.05:.95]) pooled over images, averaged over categories with ground truth"""
    if len(preds) != len(gts):
        raise MetricError(f"det_metrics: {len(preds)} prediction lists for {len(gts)} images")
    gt_by_category: Dict[int, Dict[int, List[BBox]]] = {}
    for image, boxes in enumerate(gts):
        for category, box in boxes:
            gt_by_category.setdefault(category, {}).setdefault(image, []).append(box)
    if not gt_by_category:
        return 0.0, 0.0

    pred_by_category: Dict[int, List[Tuple[int, BBox, float]]] = {}
    for image, boxes in enumerate(preds):
        for scored in boxes:
            pred_by_category.setdefault(scored.category, []).append((image, scored.box, scored.score))

    ap50, ap_all = [], []
    for category, gt_boxes in sorted(gt_by_category.items()):
        category_preds = pred_by_category.get(category, [])
        per_threshold = [_category_ap(category_preds, gt_boxes, float(t)) for t in MAP_THRESHOLDS]
        ap50.append(per_threshold[0])
        ap_all.append(np.mean(per_threshold))
    return float(np.mean(ap50)), float(np.mean(ap_all))

# ============= LAYOUT CONSISTENCY =============

class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str = "test"
    limit: Optional[int] = Field(None, ge=1)
    oracle_tolerance: float = Field(32.0, gt=0)
    feature_extractor: str = "projection"
    shuffle_seed: int = 0
    noise_seed: int = 1


class EvalReport(BaseModel):
    fid: float
    fid_noise_baseline: float
    miou: Dict[str, float] = Field(default_factory=dict)
    acc: Dict[str, float] = Field(default_factory=dict)
    miou_mean: float
    acc_mean: float
    ap50: float
    map: float
    caption_consistency: float
    caption_consistency_note: str = "category-count cosine surrogate (not CLIP-T)"
    miou_shuffled: float
    miou_real_ceiling: float
    n_samples: int
    counts: Dict[str, int] = Field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0


@dataclass
class LayoutScores:
    miou: Dict[str, float]
    acc: Dict[str, float]
    miou_mean: float
    acc_mean: float
    ap50: float
    map: float
    caption_consistency: float
    counts: Dict[str, int]


def _count_vector(categories: Sequence[int]) -> np.ndarray:
    return np.bincount(np.asarray(categories, dtype=np.int64), minlength=N_CATEGORIES).astype(np.float64)


def caption_cosine(requested: Dict[int, int], detected: Sequence[int]) -> float:
    wanted = np.zeros(N_CATEGORIES)
    for category, count in requested.items():
        wanted[int(category)] = count
    found = _count_vector(detected)
    norms = np.linalg.norm(wanted) * np.linalg.norm(found)
    if norms == 0:
        return 1.0 if not wanted.any() and not found.any() else 0.0
    return float(wanted @ found / norms)


def score_layouts(images: Sequence[np.ndarray], layouts: Sequence[Layout],
                  tol: float = 32.0) -> LayoutScores:
    """Score images against layouts with the oracle detector"""
    if len(images) != len(layouts):
        raise MetricError(f"{len(images)} images for {len(layouts)} layouts")
    per_task_iou: Dict[str, List[float]] = {}
    per_task_acc: Dict[str, List[float]] = {}
    det_preds, det_gts, cosines = [], [], []

    for image, layout in zip(images, layouts):
        size = image.shape[0]
        legal = TASK_CATEGORIES[layout.task]
        entities = unify(layout, size, size)
        detections = [d for d in oracle_detect(image, tol=tol) if d.category in legal]

        gt_masks: Dict[int, np.ndarray] = {}
        for entity in entities:
            gt_masks[entity.category] = gt_masks.get(entity.category, np.zeros((size, size), bool)) | entity.mask.bits
        pred_masks: Dict[int, np.ndarray] = {}
        for detection in detections:
            pred_masks[detection.category] = pred_masks.get(detection.category, np.zeros((size, size), bool)) | detection.mask.bits

        name = layout.task.name.lower()
        miou, acc = seg_metrics(pred_masks, gt_masks)
        if gt_masks or pred_masks:
            per_task_iou.setdefault(name, []).append(miou)
        per_task_acc.setdefault(name, []).append(acc)

        det_gts.append([(entity.category, entity.box) for entity in entities])
        det_preds.append([ScoredBox(d.category, d.box, d.score) for d in detections])
        cosines.append(caption_cosine(layout.caption, [d.category for d in detections]))

    ap50, map_ = det_metrics(det_preds, det_gts)
    miou = {task: float(np.mean(values)) for task, values in per_task_iou.items()}
    acc = {task: float(np.mean(values)) for task, values in per_task_acc.items()}
    return LayoutScores(
        miou=miou, acc=acc,
        miou_mean=float(np.mean(list(miou.values()))) if miou else 0.0,
        acc_mean=float(np.mean(list(acc.values()))) if acc else 0.0,
        ap50=ap50, map=map_,
        caption_consistency=float(np.mean(cosines)) if cosines else 0.0,
        counts={task: len(values) for task, values in per_task_acc.items()},
    )


def shuffled_pairing(n: int, seed: int) -> List[int]:
    """Index of a different sample for each position (a derangement for n >= 2)"""
    if n < 2:
        return list(range(n))
    order = np.random.default_rng(seed).permutation(n)
    partner = [0] * n
    for position in range(n):
        partner[order[position]] = int(order[(position + 1) % n])
    return partner


def noise_images(n: int, size: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)


def build_report(real: Sequence[Sample], generated: Sequence[np.ndarray],
                 config: Optional[EvalConfig] = None, run_hash: str = "", seed: int = 0) -> EvalReport:
    """Assemble the report from real test samples and one generated image per sample"""
    config = config or EvalConfig()
    if len(real) != len(generated):
        raise MetricError(f"{len(generated)} generated images for {len(real)} test samples")
    layouts = [sample.layout for sample in real]
    real_images = np.stack([sample.image for sample in real])
    generated = np.stack(list(generated))

    matched = score_layouts(generated, layouts, config.oracle_tolerance)
    partner = shuffled_pairing(len(layouts), config.shuffle_seed)
    shuffled = score_layouts(generated, [layouts[partner[i]] for i in range(len(layouts))], config.oracle_tolerance)
    ceiling = score_layouts(real_images, layouts, config.oracle_tolerance)

    real_stats = features(real_images, config.feature_extractor)
    noise = noise_images(len(real), real_images.shape[1], config.noise_seed)
    report = EvalReport(
        fid=fid(real_stats, features(generated, config.feature_extractor)),
        fid_noise_baseline=fid(real_stats, features(noise, config.feature_extractor)),
        miou=matched.miou, acc=matched.acc, miou_mean=matched.miou_mean, acc_mean=matched.acc_mean,
        ap50=matched.ap50, map=matched.map, caption_consistency=matched.caption_consistency,
        miou_shuffled=shuffled.miou_mean, miou_real_ceiling=ceiling.miou_mean,
        n_samples=len(real), counts=matched.counts,
        config_hash=run_hash or config_hash(config), seed=seed,
    )
    logger.info(
        f"[EVAL] mIoU {report.miou_mean:.3f} (shuffled {report.miou_shuffled:.3f}, ceiling "
        f"{report.miou_real_ceiling:.3f}), FID {report.fid:.3f} vs noise {report.fid_noise_baseline:.3f}"
    )
    return report


def layout_consistency_report(checkpoint: Union[str, Path], data_root: Union[str, Path],
                              sample_config: Optional[SampleConfig] = None, config: Optional[EvalConfig] = None,
                              run_hash: str = "") -> EvalReport:
    """Generate one image per test layout with the checkpoint and score it"""
    config = config or EvalConfig()
    sample_config = sample_config or SampleConfig()
    real = read_dataset(data_root, split=config.split, limit=config.limit)
    if len(real) < 2:
        raise MetricError(f"Evaluation needs at least 2 '{config.split}' samples, found {len(real)}")
    model, schedule, _ = load_model(checkpoint)
    generated = sample_batched(model, schedule, [sample.layout for sample in real], sample_config)
    return build_report(real, generated, config, run_hash=run_hash, seed=sample_config.seed)

# ============= EXPORTS =============

def save_report_json(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_report_json(path: Union[str, Path]) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


SUMMARY_COLUMNS = ("fid", "fid_noise_baseline", "miou_mean", "acc_mean", "ap50", "map",
                   "caption_consistency", "miou_shuffled", "miou_real_ceiling", "n_samples", "config_hash", "seed")


def save_report_csv(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    data = report.model_dump()
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerow([data[column] for column in SUMMARY_COLUMNS])
    return path


def save_report_pdf(report: EvalReport, path: Union[str, Path]) -> Path:
    from reportlab.lib.pagesizes import letter
    from reportlab.lib.styles import getSampleStyleSheet
    from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer

    path = Path(path)
    doc = SimpleDocTemplate(str(path), pagesize=letter)
    styles = getSampleStyleSheet()
    story = [Paragraph("TerraGen layout-consistency report", styles["Title"]), Spacer(1, 12)]
    for column in SUMMARY_COLUMNS:
        value = getattr(report, column)
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        story.append(Paragraph(f"<b>{column}</b>: {text}", styles["Normal"]))
    story.append(Spacer(1, 12))
    story.append(Paragraph("Per-task mIoU / Acc", styles["Heading2"]))
    for task in sorted(report.acc):
        miou = report.miou.get(task)
        miou_text = f"{miou:.4f}" if miou is not None else "n/a"
        story.append(Paragraph(
            f"{task}: mIoU {miou_text}, Acc {report.acc[task]:.4f} ({report.counts.get(task, 0)} samples)",
            styles["Normal"],
        ))
    story.append(Spacer(1, 12))
    story.append(Paragraph(f"caption consistency is a {report.caption_consistency_note}", styles["Italic"]))
    doc.build(story)
    return path
