"""Dice overlap and average surface distance on 2-D label maps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask or outside the image."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def asd(pred, gt) -> float | None:
    """Symmetric mean of the directed average boundary distances.

    Returns ``None`` when either mask is empty (the metric is undefined).
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"asd: shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary(pred), boundary(gt)
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return 0.5 * (float(to_g[bp].mean()) + float(to_p[bg].mean()))


@dataclass
class Summary:
    mean: float
    std: float
    n: int
    excluded: int = 0


def aggregate(values) -> Summary:
    """Population mean and std; ``None`` entries are counted as exclusions."""
    values = list(values)
    kept = np.array([v for v in values if v is not None], dtype=np.float64)
    excluded = len(values) - kept.size
    if kept.size == 0:
        return Summary(float("nan"), float("nan"), 0, excluded)
    return Summary(float(kept.mean()), float(kept.std()), int(kept.size), excluded)


def _defined(x: float):
    return None if np.isnan(x) else x


def _undefined(x):
    return float("nan") if x is None else x


@dataclass
class ClassMetrics:
    """Per-class Dice (percent) and ASD (pixels) summaries over test subjects."""

    class_names: list
    dice: dict = field(default_factory=dict)   # name -> Summary
    asd: dict = field(default_factory=dict)    # name -> Summary

    def mean_dice(self) -> float:
        return float(np.mean([self.dice[c].mean for c in self.class_names]))

    def to_dict(self) -> dict:
        """Plain JSON-safe dict; an undefined summary (no scored subject) maps to ``None``."""
        return {
            c: {
                "dice_mean": _defined(self.dice[c].mean), "dice_std": _defined(self.dice[c].std),
                "dice_n": self.dice[c].n,
                "asd_mean": _defined(self.asd[c].mean), "asd_std": _defined(self.asd[c].std),
                "asd_n": self.asd[c].n,
                "asd_excluded": self.asd[c].excluded,
            }
            for c in self.class_names
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMetrics":
        out = cls(list(d))
        for c, v in d.items():
            out.dice[c] = Summary(_undefined(v["dice_mean"]), _undefined(v["dice_std"]), v["dice_n"])
            out.asd[c] = Summary(_undefined(v["asd_mean"]), _undefined(v["asd_std"]), v["asd_n"],
                                 v.get("asd_excluded", 0))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "metric", "mean", "std", "n"])
        for c in self.class_names:
            w.writerow([c, "dice", repr(self.dice[c].mean), repr(self.dice[c].std), self.dice[c].n])
            w.writerow([c, "asd", repr(self.asd[c].mean), repr(self.asd[c].std), self.asd[c].n])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"class": c, **v}, sort_keys=True) + "\n"
                       for c, v in self.to_dict().items())


def score_label_maps(pred: np.ndarray, gt: np.ndarray, class_names, classes=None) -> ClassMetrics:
    """Score integer label maps (n, H, W); each image is one subject.

    ``classes`` defaults to every foreground index ``1..len(class_names)-1``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"score: shape mismatch {pred.shape} vs {gt.shape}")
    classes = list(range(1, len(class_names))) if classes is None else list(classes)
    out = ClassMetrics([class_names[k] for k in classes])
    for k in classes:
        d = [dice(p == k, g == k) * 100.0 for p, g in zip(pred, gt)]
        a = [asd(p == k, g == k) for p, g in zip(pred, gt)]
        out.dice[class_names[k]] = aggregate(d)
        out.asd[class_names[k]] = aggregate(a)
    return out


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Hard labels from (…, N_c) probabilities; ties go to the lower class index."""
    return np.argmax(probs, axis=-1)
