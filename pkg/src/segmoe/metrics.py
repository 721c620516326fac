"""Segmentation metrics: confusion matrix, per-class IoU, mIoU, relative drop.

CSV records follow the `model,attack,epsilon,miou_clean,miou_attack,drop_pct`
header, mIoU written in percent with two decimals plus a full-precision
sibling `<name>.raw.csv`.  Every CSV starts with a `# config_hash=... seed=...`
comment so downstream steps can refuse mixed inputs.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


class ConfusionMatrix:
    """KxK pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes) or (counts < 0).any():
                raise ValueError("counts must be a non-negative KxK matrix")
            self.counts = counts

    def add(self, gt: np.ndarray, pred: np.ndarray):
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"gt/pred size mismatch: {gt.shape} vs {pred.shape}")
        k = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise ValueError("class index out of range")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class never occurs in gt or prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes present in gt or prediction."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    ious = per_class_iou(cm)
    return float(np.nanmean(ious))


def drop_pct(clean: float, attacked: float) -> float:
    """Relative mIoU change in percent: 100*(attacked-clean)/clean."""
    if clean <= 0:
        raise ValueError("clean mIoU must be positive")
    return 100.0 * (attacked - clean) / clean


def fmt2(x: float) -> str:
    """Two-decimal string with round-half-away-from-zero, Table-style."""
    scaled = x * 100.0
    rounded = np.floor(np.abs(scaled) + 0.5) * np.sign(scaled)
    return f"{rounded / 100.0:.2f}"


@dataclass
class EvalRecord:
    """One model-under-attack measurement; mIoU values in [0, 1]."""

    model: str
    attack: str
    epsilon: float
    miou_clean: float
    miou_attack: float

    @property
    def drop(self) -> float:
        return drop_pct(self.miou_clean, self.miou_attack)


CSV_HEADER = ["model", "attack", "epsilon", "miou_clean", "miou_attack", "drop_pct"]


def _meta_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def write_records(path: str, records: Sequence[EvalRecord], config_hash: str, seed: int):
    """Write rounded CSV plus a `.raw.csv` sibling with full precision."""
    for rec in records:
        for v in (rec.miou_clean, rec.miou_attack):
            if not np.isfinite(v):
                raise ValueError(f"non-finite mIoU for {rec.model}/{rec.attack}")
    rounded = io.StringIO()
    raw = io.StringIO()
    for buf in (rounded, raw):
        buf.write(_meta_line(config_hash, seed) + "\n")
        buf.write(",".join(CSV_HEADER) + "\n")
    for rec in records:
        rounded.write(
            f"{rec.model},{rec.attack},{rec.epsilon:g},"
            f"{fmt2(rec.miou_clean * 100)},{fmt2(rec.miou_attack * 100)},{fmt2(rec.drop)}\n"
        )
        raw.write(
            f"{rec.model},{rec.attack},{rec.epsilon!r},"
            f"{rec.miou_clean * 100!r},{rec.miou_attack * 100!r},{rec.drop!r}\n"
        )
    with open(path, "w", newline="") as fh:
        fh.write(rounded.getvalue())
    root, ext = os.path.splitext(path)
    with open(root + ".raw" + ext, "w", newline="") as fh:
        fh.write(raw.getvalue())


def read_records(path: str):
    """Read a raw-precision records CSV; returns (records, config_hash, seed)."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ValueError(f"{path}: missing config-hash header line")
        fields = dict(part.split("=", 1) for part in first[2:].split(" "))
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            records.append(
                EvalRecord(
                    model=row["model"],
                    attack=row["attack"],
                    epsilon=float(row["epsilon"]),
                    miou_clean=float(row["miou_clean"]) / 100.0,
                    miou_attack=float(row["miou_attack"]) / 100.0,
                )
            )
    return records, fields["config_hash"], int(fields["seed"])


def confusion_from_predictions(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]], num_classes: int
) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for gt, pred in pairs:
        cm.add(gt, pred)
    return cm
