"""Dice, IoU, average symmetric surface distance and HD95."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .geometry import directed_surface_distances

REPORT_SCHEMA = {
    "type": "object",
    "required": ["spacing", "threshold", "per_image", "aggregate"],
    "properties": {
        "spacing": {"type": "number", "exclusiveMinimum": 0},
        "threshold": {"type": "number"},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "dice", "iou", "asd", "hd95"],
                "properties": {
                    "id": {"type": "string"},
                    "dice": {"type": "number", "minimum": 0, "maximum": 100},
                    "iou": {"type": "number", "minimum": 0, "maximum": 100},
                    "asd": {"type": ["number", "null"], "minimum": 0},
                    "hd95": {"type": ["number", "null"], "minimum": 0},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["dice", "iou", "asd", "hd95"],
            "properties": {k: {"type": ["number", "null"]} for k in ("dice", "iou", "asd", "hd95")},
        },
        "distance_excluded": {"type": "integer", "minimum": 0},
    },
}


def _pair(pred, gt):
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = p.sum() + g.sum()
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, g).sum() / total


def iou_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(p, g).sum() / union


def pooled_distances(pred, gt) -> np.ndarray:
    """Surface distances pred->gt and gt->pred, concatenated."""
    p, g = _pair(pred, gt)
    return np.concatenate([directed_surface_distances(p, g), directed_surface_distances(g, p)])


def asd(pred, gt, spacing: float = 1.0) -> float:
    return float(pooled_distances(pred, gt).mean()) * spacing


def hd95(pred, gt, spacing: float = 1.0) -> float:
    return float(np.percentile(pooled_distances(pred, gt), 95, method="linear")) * spacing


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    spacing: float = 1.0
    threshold: float = 0.5
    distance_excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))


def score_pair(pred, gt, spacing: float = 1.0, id: str = "") -> dict:
    """All four metrics for one image; distances are None if either mask is empty."""
    p, g = _pair(pred, gt)
    row = {"id": id, "dice": float(dice_score(p, g)), "iou": float(iou_score(p, g)),
           "asd": None, "hd95": None}
    if p.any() and g.any():
        d = pooled_distances(p, g)
        row["asd"] = float(d.mean()) * spacing
        row["hd95"] = float(np.percentile(d, 95, method="linear")) * spacing
    return row


def build_report(rows: list, spacing: float, threshold: float) -> MetricReport:
    agg = {}
    for key in ("dice", "iou", "asd", "hd95"):
        vals = [r[key] for r in rows if r[key] is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    excluded = sum(r["asd"] is None for r in rows)
    return MetricReport(rows, agg, float(spacing), float(threshold), excluded)


@torch.no_grad()
def predict_probs(model, images: torch.Tensor, domain: str) -> torch.Tensor:
    """Foreground probabilities from a universal network or any callable."""
    if isinstance(model, torch.nn.Module):
        was_training = model.training
        model.eval()
        try:
            out = model(images, domain)
        finally:
            model.train(was_training)
        return out.prediction if hasattr(out, "prediction") else out
    return torch.as_tensor(model(images, domain))


def evaluate(model, dataset, threshold: float = 0.5, spacing: float = 1.0, domain: str | None = None,
             batch_size: int = 4) -> MetricReport:
    """Binarise predictions at ``threshold`` and score every sample.

    ``model`` is a :class:`UniversalNet` or any ``f(images, domain) -> probs``.
    The last, possibly short, batch is kept.
    """
    from .data import make_batch

    rows = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        dom = domain or chunk[0].domain
        batch = make_batch(chunk, chunk[0].domain)
        probs = predict_probs(model, batch.images, dom)
        preds = (probs[:, 0] > threshold).cpu().numpy()
        for s, pred in zip(chunk, preds):
            rows.append(score_pair(pred, s.mask, spacing, s.id))
    return build_report(rows, spacing, threshold)
