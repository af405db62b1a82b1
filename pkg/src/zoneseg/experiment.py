"""Desk-scale replication of the four-way comparison on synthetic phantoms.

One shared pool of 6-label phantoms is cross-validated under every
(variant, label count) pair; 3-label runs see the organs folded into
background. Each run lands in ``<out>/<variant>_<labels>label/`` with the
usual crossval outputs, and ``comparison.csv`` collects the summaries.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import runtime
from .augment import AugmentationConfig
from .metrics import DiceReport
from .training import Case, TrainingConfig, run_crossval
from .volume import synth_phantom, write_volume

log = logging.getLogger("zoneseg.experiment")

RUNS = (("aniso", 3), ("iso", 3), ("aniso", 6), ("iso", 6))


@dataclass
class ExperimentConfig:
    n_phantoms: int = 12
    folds: int = 2
    epochs: int = 40
    width_scale: str = "1/4"
    seed: int = 0
    # 40 epochs at the 1e-5 of full-length training would leave the nets near init
    lr: float = 1e-3
    runs: Sequence[Tuple[str, int]] = RUNS
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def training_config(self, variant: str, labels: int) -> TrainingConfig:
        return TrainingConfig(
            variant=variant,
            labels=labels,
            folds=self.folds,
            epochs=self.epochs,
            width_scale=self.width_scale,
            seed=self.seed,
            lr=self.lr,
            augmentation=self.augmentation,
        )


@dataclass
class ExperimentResult:
    reports: Dict[str, DiceReport]
    seconds: Dict[str, float]
    claims: List[dict]


def run_name(variant: str, labels: int) -> str:
    return f"{variant}_{labels}label"


def make_phantoms(n: int, seed: int, out_dir: Optional[Path] = None) -> List[Case]:
    cases = []
    for i in range(n):
        image, labels, _ = synth_phantom([seed, i], label_mode="6label")
        vid = f"phantom_{i:03d}"
        cases.append(Case(vid, image, labels))
        if out_dir is not None:
            write_volume(image, out_dir / f"{vid}_image.zvol")
            write_volume(labels, out_dir / f"{vid}_labels.zvol")
    return cases


def _mean_dice(report: DiceReport, label: str) -> Optional[float]:
    vals = report.values(label, "all")
    return sum(vals) / len(vals) if vals else None


def directional_claims(reports: Dict[str, DiceReport]) -> List[dict]:
    """The two orderings the comparison is about, reported but never enforced."""
    claims = []

    def add(name, left, right, label):
        if left in reports and right in reports:
            a, b = _mean_dice(reports[left], label), _mean_dice(reports[right], label)
            claims.append({"claim": name, "left": a, "right": b, "holds": a is not None and b is not None and a >= b})

    add("aniso >= iso (PZ, 3 labels)", run_name("aniso", 3), run_name("iso", 3), "PZ")
    add("aniso >= iso (PZ, 6 labels)", run_name("aniso", 6), run_name("iso", 6), "PZ")
    add("3 labels >= 6 labels (PZ, aniso)", run_name("aniso", 3), run_name("aniso", 6), "PZ")
    add("3 labels >= 6 labels (PZ, iso)", run_name("iso", 3), run_name("iso", 6), "PZ")
    return claims


def write_comparison(reports: Dict[str, DiceReport], seconds: Dict[str, float], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "label", "region", "n", "mean", "sd", "stderr", "seconds"])
        for name, report in reports.items():
            for s in report.summary():
                w.writerow([name, s["label"], s["region"], s["n"], repr(s["mean"]), repr(s["sd"]), repr(s["stderr"]),
                            f"{seconds[name]:.1f}"])


def write_claims(claims: List[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["claim", "left_mean", "right_mean", "holds"])
        for c in claims:
            w.writerow([c["claim"], repr(c["left"]), repr(c["right"]), int(c["holds"])])


def run_experiment(config: ExperimentConfig, out_dir) -> ExperimentResult:
    out = Path(out_dir)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    cases = make_phantoms(config.n_phantoms, config.seed, data_dir)
    reports, seconds = {}, {}
    for variant, labels in config.runs:
        name = run_name(variant, labels)
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        tcfg = config.training_config(variant, labels)
        start = time.perf_counter()
        result = run_crossval(cases, tcfg, run_dir)
        seconds[name] = time.perf_counter() - start
        reports[name] = result.report
        seeds = {"config_seed": tcfg.seed, "model_seeds": [tcfg.seed * 1000 + s.fold_id for s in result.splits]}
        runtime.write_manifest(run_dir, "crossval", tcfg.to_dict(), seeds, sorted(data_dir.glob("*.zvol")))
        log.info("%s finished in %.0f s", name, seconds[name])
    claims = directional_claims(reports)
    write_comparison(reports, seconds, out / "comparison.csv")
    write_claims(claims, out / "claims.csv")
    return ExperimentResult(reports, seconds, claims)
