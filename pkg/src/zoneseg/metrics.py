"""Dice scores (global, soft and base/middle/apex) and their aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .volume import PZ, TZ

REGIONS = ("all", "base", "middle", "apex")


def dice(prediction: np.ndarray, truth: np.ndarray, label: int, mask: Optional[np.ndarray] = None) -> float:
    """Hard dice ``2|P & G| / (|P| + |G|)`` for one label; 1.0 when both sets are empty."""
    p = np.asarray(prediction) == label
    g = np.asarray(truth) == label
    if mask is not None:
        p &= mask
        g &= mask
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / denom


def soft_dice(probabilities: np.ndarray, truth: np.ndarray, label: int, mask: Optional[np.ndarray] = None) -> float:
    """Dice with the predicted probabilities in place of the prediction indicator."""
    p = np.asarray(probabilities, dtype=np.float64)
    g = (np.asarray(truth) == label).astype(np.float64)
    if mask is not None:
        p = p * mask
        g = g * mask
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p * g).sum() / denom)


def prostate_extent(truth: np.ndarray) -> Optional[Tuple[int, int]]:
    """Inclusive (lowest, highest) z index holding any TZ or PZ voxel."""
    z = np.flatnonzero(np.isin(truth, (TZ, PZ)).any(axis=(1, 2)))
    if z.size == 0:
        return None
    return int(z[0]), int(z[-1])


def region_slabs(z_lo: int, z_hi: int) -> Dict[str, Optional[Tuple[int, int]]]:
    """Half-open z ranges for base (superior), middle and apex (inferior).

    Base and apex take ``ceil(n / 5)`` slices each, the middle gets the rest.
    Slabs that would be empty (very short prostates) map to ``None``.
    """
    n = z_hi - z_lo + 1
    n_base = math.ceil(n / 5)
    n_apex = min(math.ceil(n / 5), n - n_base)
    n_mid = n - n_base - n_apex
    top = z_hi + 1
    slabs = {
        "base": (top - n_base, top),
        "middle": (z_lo + n_apex, z_lo + n_apex + n_mid),
        "apex": (z_lo, z_lo + n_apex),
    }
    return {k: (v if v[1] > v[0] else None) for k, v in slabs.items()}


def regional_dice(prediction: np.ndarray, truth: np.ndarray, label: int, mask=None):
    """Dice inside the base, middle and apex slabs of the true prostate extent.

    Returns ``(base, middle, apex)``; entries are ``None`` when undefined.
    """
    extent = prostate_extent(truth)
    if extent is None:
        return None, None, None
    out = []
    for name, slab in region_slabs(*extent).items():
        if slab is None:
            out.append(None)
            continue
        sl = slice(*slab)
        out.append(dice(prediction[sl], truth[sl], label, None if mask is None else mask[sl]))
    base, middle, apex = out
    return base, middle, apex


@dataclass
class DiceRow:
    volume_id: str
    label: str
    region: str
    dice: Optional[float]
    soft_dice: Optional[float]


@dataclass
class DiceReport:
    rows: List[DiceRow] = field(default_factory=list)

    def add_volume(self, volume_id, prediction, probabilities, truth, label_names, mask=None) -> None:
        """Append global and regional scores for every non-background label."""
        extent = prostate_extent(truth)
        slabs = region_slabs(*extent) if extent else {r: None for r in REGIONS[1:]}
        for label in range(1, len(label_names)):
            name = label_names[label]
            prob = probabilities[label] if probabilities is not None else None
            for region in REGIONS:
                if region == "all":
                    sl = slice(None)
                elif slabs[region] is None:
                    self.rows.append(DiceRow(volume_id, name, region, None, None))
                    continue
                else:
                    sl = slice(*slabs[region])
                m = None if mask is None else mask[sl]
                d = dice(prediction[sl], truth[sl], label, m)
                s = soft_dice(prob[sl], truth[sl], label, m) if prob is not None else None
                self.rows.append(DiceRow(volume_id, name, region, d, s))

    def extend(self, other: "DiceReport") -> None:
        self.rows.extend(other.rows)

    def values(self, label: str, region: str = "all") -> List[float]:
        return [r.dice for r in self.rows if r.label == label and r.region == region and r.dice is not None]

    def summary(self) -> List[dict]:
        keys = []
        for r in self.rows:
            if (r.label, r.region) not in keys:
                keys.append((r.label, r.region))
        return [dict(label=lab, region=reg, **summarize(self.values(lab, reg))) for lab, reg in keys]

    def write(self, out_dir) -> None:
        from pathlib import Path

        out_dir = Path(out_dir)
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["volume_id", "label", "region", "dice", "soft_dice"])
            for r in self.rows:
                w.writerow([r.volume_id, r.label, r.region, _fmt(r.dice), _fmt(r.soft_dice)])
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "region", "n", "mean", "sd", "stderr"])
            for s in self.summary():
                w.writerow([s["label"], s["region"], s["n"], _fmt(s["mean"]), _fmt(s["sd"]), _fmt(s["stderr"])])
        with open(out_dir / "dice_histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "bin_lo", "bin_hi", "count"])
            for lab in dict.fromkeys(r.label for r in self.rows):
                counts, edges = np.histogram(self.values(lab), bins=10, range=(0.0, 1.0))
                for i, c in enumerate(counts):
                    w.writerow([lab, _fmt(edges[i]), _fmt(edges[i + 1]), int(c)])


def summarize(values: Sequence[float]) -> dict:
    """Mean, sample standard deviation (n - 1) and standard error ``sd / sqrt(n)``."""
    n = len(values)
    if n == 0:
        return {"n": 0, "mean": None, "sd": None, "stderr": None}
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if n > 1 else float("nan")
    return {"n": n, "mean": mean, "sd": sd, "stderr": sd / math.sqrt(n)}


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))
