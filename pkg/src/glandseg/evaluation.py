"""Pixel-level and object-level segmentation metrics and report generation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _as_binary(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr).astype(bool)


def _require_same_shape(pred, gt) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")


def pixel_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    _require_same_shape(pred, gt)
    p, g = _as_binary(pred), _as_binary(gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def pixel_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|P & G| / |P | G|; 1.0 when both masks are empty."""
    _require_same_shape(pred, gt)
    p, g = _as_binary(pred), _as_binary(gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def _intersection_table(pred_labels: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """(P+1) x (G+1) table of pixel overlap counts between label pairs."""
    _require_same_shape(pred_labels, gt_labels)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    n_pred = int(pred_labels.max())
    n_gt = int(gt_labels.max())
    combined = pred_labels.ravel() * (n_gt + 1) + gt_labels.ravel()
    counts = np.bincount(combined, minlength=(n_pred + 1) * (n_gt + 1))
    return counts.reshape(n_pred + 1, n_gt + 1)


def _first_pixel_positions(labels: np.ndarray, count: int) -> np.ndarray:
    """Row-major flat index of each label's first pixel (relabeling-proof order)."""
    flat = np.asarray(labels, dtype=np.int64).ravel()
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    return first


def object_f1(pred_labels: np.ndarray, gt_labels: np.ndarray,
              iou_match: float = 0.5) -> tuple[float, float, float]:
    """Greedy one-to-one detection score over instance label maps.

    Candidate (pred, gt) pairs are matched in order of descending pairwise
    IoU; a prediction counts as a true positive iff its match exceeds
    ``iou_match``. Returns (precision, recall, f1); an image with no objects
    on either side scores 1.0 across the board.
    """
    table = _intersection_table(pred_labels, gt_labels)
    n_pred, n_gt = table.shape[0] - 1, table.shape[1] - 1
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0, 0.0, 0.0

    pred_area = table.sum(axis=1)
    gt_area = table.sum(axis=0)
    # equal-IoU ties break on object positions, not label values, so the
    # matching is invariant under instance relabeling
    pred_pos = _first_pixel_positions(pred_labels, n_pred)
    gt_pos = _first_pixel_positions(gt_labels, n_gt)
    pairs = []
    for p in range(1, n_pred + 1):
        for g in range(1, n_gt + 1):
            inter = table[p, g]
            if inter == 0:
                continue
            iou = inter / (pred_area[p] + gt_area[g] - inter)
            pairs.append((iou, p, g))
    pairs.sort(key=lambda t: (-t[0], pred_pos[t[1]], gt_pos[t[2]]))

    matched_pred, matched_gt = set(), set()
    tp = 0
    for iou, p, g in pairs:
        if iou <= iou_match:
            break
        if p in matched_pred or g in matched_gt:
            continue
        matched_pred.add(p)
        matched_gt.add(g)
        tp += 1
    precision = float(tp / n_pred)
    recall = float(tp / n_gt)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def object_dice(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """Area-weighted Dice between each object and its best-overlap partner.

    Average of the ground-truth-side and prediction-side sums; 1.0 when both
    maps are empty, 0.0 when exactly one side is empty.
    """
    table = _intersection_table(pred_labels, gt_labels)
    n_pred, n_gt = table.shape[0] - 1, table.shape[1] - 1
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0

    pred_area = table.sum(axis=1)
    gt_area = table.sum(axis=0)
    total_pred = pred_area[1:].sum()
    total_gt = gt_area[1:].sum()

    # overlap ties resolve to the best dice, which keeps the metric invariant
    # under instance relabeling
    gt_side = 0.0
    for g in range(1, n_gt + 1):
        col = table[1:, g]
        inter = int(col.max())
        if inter == 0:
            dice = 0.0
        else:
            candidates = np.nonzero(col == inter)[0] + 1
            dice = max(2.0 * inter / (pred_area[c] + gt_area[g]) for c in candidates)
        gt_side += (gt_area[g] / total_gt) * dice
    pred_side = 0.0
    for p in range(1, n_pred + 1):
        row = table[p, 1:]
        inter = int(row.max())
        if inter == 0:
            dice = 0.0
        else:
            candidates = np.nonzero(row == inter)[0] + 1
            dice = max(2.0 * inter / (pred_area[p] + gt_area[c]) for c in candidates)
        pred_side += (pred_area[p] / total_pred) * dice
    return float(0.5 * (gt_side + pred_side))


@dataclass
class ImageMetrics:
    id: str
    pixel_dice: float
    pixel_iou: float
    precision: float
    recall: float
    object_f1: float
    object_dice: float
    overlay_path: str | None = None


@dataclass
class MetricsReport:
    """Aggregate metrics (mean of per-image values) plus the breakdown."""

    pixel_dice: float
    pixel_iou: float
    object_f1: float
    object_dice: float
    per_image: list[ImageMetrics] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def format_table(self) -> str:
        header = f"{'image':<16}{'pix_dice':>10}{'pix_iou':>10}{'obj_f1':>10}{'obj_dice':>10}"
        lines = [header, "-" * len(header)]
        for m in self.per_image:
            lines.append(f"{m.id:<16}{m.pixel_dice:>10.4f}{m.pixel_iou:>10.4f}"
                         f"{m.object_f1:>10.4f}{m.object_dice:>10.4f}")
        lines.append("-" * len(header))
        lines.append(f"{'mean':<16}{self.pixel_dice:>10.4f}{self.pixel_iou:>10.4f}"
                     f"{self.object_f1:>10.4f}{self.object_dice:>10.4f}")
        return "\n".join(lines)


def evaluate_image(image_id: str, pred_labels: np.ndarray, gt_labels: np.ndarray,
                   overlay_path: str | None = None) -> ImageMetrics:
    precision, recall, f1 = object_f1(pred_labels, gt_labels)
    return ImageMetrics(
        id=image_id,
        pixel_dice=pixel_dice(pred_labels > 0, gt_labels > 0),
        pixel_iou=pixel_iou(pred_labels > 0, gt_labels > 0),
        precision=precision,
        recall=recall,
        object_f1=f1,
        object_dice=object_dice(pred_labels, gt_labels),
        overlay_path=overlay_path,
    )


def evaluate_pairs(pairs: list[tuple[str, np.ndarray, np.ndarray]],
                   overlay_paths: dict[str, str] | None = None) -> MetricsReport:
    """Score (id, predicted labels, ground-truth labels) triples."""
    if not pairs:
        raise ValueError("nothing to evaluate")
    overlay_paths = overlay_paths or {}
    per_image = [evaluate_image(i, p, g, overlay_paths.get(i)) for i, p, g in pairs]
    return MetricsReport(
        pixel_dice=float(np.mean([m.pixel_dice for m in per_image])),
        pixel_iou=float(np.mean([m.pixel_iou for m in per_image])),
        object_f1=float(np.mean([m.object_f1 for m in per_image])),
        object_dice=float(np.mean([m.object_dice for m in per_image])),
        per_image=per_image,
    )


def write_report(report: MetricsReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.format_table() + "\n")
    return json_path
