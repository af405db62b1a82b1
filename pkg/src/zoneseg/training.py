"""Weighted cross-entropy training, k-fold cross-validation and the final test run."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import augment as aug
from .augment import AugmentationConfig
from .errors import ConfigError, DataError
from .metrics import DiceReport, dice
from .models import Model, NetworkSpec, build_network, parse_scale, required_input_multiple, save_checkpoint
from .optim import Adam
from .tensor import Tensor, make_result, no_grad
from .volume import LABELS_2, LABELS_6, Volume, read_volume, resample, write_volume

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (1.0, 2.0, 6.0, 1.0, 1.0, 1.0)
PROB_FLOOR = 1e-12


@dataclass
class TrainingConfig:
    """Every knob of a training run; :meth:`to_dict` is what lands in the manifest.

    ``label_weights`` shorter than ``labels`` is padded with 1.0, so
    ``(1, 2, 6)`` also serves the 6-label case (other organs weigh 1).
    """

    variant: str = "aniso"
    labels: int = 3
    lr: float = 1e-5
    epochs: int = 300
    label_weights: Optional[Tuple[float, ...]] = None
    folds: int = 5
    seed: int = 0
    l2_lambda: float = 1e-5
    width_scale: float = 1.0
    normalization: bool = True
    iso_order: str = "3d2d"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    normalize_intensity: bool = True
    target_spacing: Optional[Tuple[float, float, float]] = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        self.width_scale = parse_scale(self.width_scale)
        if self.labels not in (3, 6):
            raise ConfigError(f"labels must be 3 or 6, got {self.labels}")
        weights = tuple(float(w) for w in (self.label_weights or DEFAULT_WEIGHTS[: self.labels]))
        if len(weights) > self.labels:
            raise ConfigError(f"{len(weights)} label weights given for {self.labels} labels")
        self.label_weights = weights + (1.0,) * (self.labels - len(weights))
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if any(w <= 0 for w in self.label_weights):
            raise ConfigError("label weights must be > 0")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be >= 0")
        if self.target_spacing is not None:
            self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.network_spec()

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            variant=self.variant,
            labels=self.labels,
            width_scale=self.width_scale,
            normalization=self.normalization,
            iso_order=self.iso_order,
        )

    @property
    def label_names(self) -> Tuple[str, ...]:
        return LABELS_2 if self.labels == 3 else LABELS_6

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["label_weights"] = list(self.label_weights)
        d["augmentation"] = aug.config_to_dict(self.augmentation)
        if self.target_spacing is not None:
            d["target_spacing"] = list(self.target_spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("augmentation"), dict):
            aug_names = {f.name for f in dataclasses.fields(AugmentationConfig)}
            bad = set(d["augmentation"]) - aug_names
            if bad:
                raise ConfigError(f"unknown augmentation keys: {sorted(bad)}")
        return cls(**d)


# --- loss ---------------------------------------------------------------------


def weighted_cross_entropy(probabilities: Tensor, labels: np.ndarray, weights: Sequence[float], mask=None) -> Tensor:
    """Mean over (valid) voxels of ``weight[g] * -log(max(p_g, 1e-12))``.

    Normalised by the voxel count, not the weight sum.
    """
    P = probabilities.data
    C = P.shape[0]
    lab = np.asarray(labels).astype(np.intp).ravel()
    if lab.size != P[0].size:
        raise DataError(f"labels hold {lab.size} voxels, probabilities {P[0].size}")
    if lab.size and lab.max() >= C:
        raise DataError(f"label {lab.max()} out of range for {C} probability channels")
    w_table = np.asarray(weights, dtype=np.float64)
    if w_table.size < C:
        raise DataError(f"{w_table.size} weights for {C} labels")
    flat = P.reshape(C, -1)
    cols = np.arange(lab.size)
    pg = flat[lab, cols].astype(np.float64)
    w = w_table[lab]
    if mask is not None:
        w = w * np.asarray(mask, dtype=np.float64).ravel()
        n = float(np.count_nonzero(mask))
    else:
        n = float(lab.size)
    n = max(n, 1.0)
    clamped = np.maximum(pg, PROB_FLOOR)
    value = float((w * -np.log(clamped)).sum() / n)

    def backward_fn(g):
        gp = np.zeros_like(flat)
        local = -w / (n * clamped) * (pg >= PROB_FLOOR)
        gp[lab, cols] = (float(g) * local).astype(flat.dtype)
        return (gp.reshape(P.shape),)

    return make_result(np.asarray(value, dtype=P.dtype).reshape(()), (probabilities,), backward_fn)


# --- data ---------------------------------------------------------------------


@dataclass
class Case:
    volume_id: str
    image: Volume
    labels: Volume


@dataclass
class PreparedCase:
    """Network-ready arrays: normalised image, remapped labels and a validity mask."""

    volume_id: str
    image: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    crop: Tuple[slice, slice, slice]
    spacing: Tuple[float, float, float]
    padding: Tuple[Tuple[int, int], ...]

    @property
    def padded(self) -> bool:
        return any(a or b for a, b in self.padding)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.image.shape
        return nx, ny, nz


@dataclass
class FoldSplit:
    fold_id: int
    train_ids: List[str]
    val_ids: List[str]


def load_dataset(directory) -> List[Case]:
    """Pair ``<id>_image.zvol`` with ``<id>_labels.zvol`` files, sorted by id."""
    directory = Path(directory)
    cases = []
    for img_path in sorted(directory.glob("*_image.zvol")):
        vid = img_path.name[: -len("_image.zvol")]
        lab_path = directory / f"{vid}_labels.zvol"
        if not lab_path.exists():
            raise DataError(f"no label volume for {img_path.name}")
        cases.append(Case(vid, read_volume(img_path), read_volume(lab_path)))
    if not cases:
        raise DataError(f"no *_image.zvol files in {directory}")
    return cases


def dataset_files(directory) -> List[Path]:
    directory = Path(directory)
    return sorted(directory.glob("*_image.zvol")) + sorted(directory.glob("*_labels.zvol"))


def remap_labels(labels: np.ndarray, label_names: Sequence[str], n_labels: int) -> np.ndarray:
    """Fold organ labels into background when training a 3-label model on 6-label data."""
    labels = np.asarray(labels)
    if labels.size == 0 or labels.max() < n_labels:
        return labels.astype(np.uint8)
    if n_labels == 3 and tuple(label_names) == LABELS_6:
        return np.where(labels <= 2, labels, 0).astype(np.uint8)
    raise DataError(f"label value {labels.max()} does not fit a {n_labels}-label model")


def _pad_amounts(shape, multiple):
    out = []
    for n, m in zip(shape, multiple):
        total = (-n) % m
        out.append((total // 2, total - total // 2))
    return tuple(out)


def prepare_case(case: Case, config: TrainingConfig) -> PreparedCase:
    image, labels = case.image, case.labels
    if image.header.dims != labels.header.dims:
        raise DataError(f"{case.volume_id}: image and label dims differ")
    if config.target_spacing is not None:
        image = resample(image, config.target_spacing, "trilinear")
        labels = resample(labels, config.target_spacing, "nearest")
    lab = remap_labels(labels.voxels, labels.header.label_names, config.labels)
    img = image.voxels.astype(np.float32)
    pads = _pad_amounts(img.shape, required_input_multiple(config.network_spec()))
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, img.shape))
    mask = np.ones(img.shape, dtype=bool)
    if any(a or b for a, b in pads):
        img = np.pad(img, pads, mode="edge")
        lab = np.pad(lab, pads, mode="constant")
        mask = np.pad(mask, pads, mode="constant")
    if config.normalize_intensity:
        vals = img[mask]
        sd = float(vals.std())
        img = ((img - float(vals.mean())) / (sd if sd > 0 else 1.0)).astype(np.float32)
    return PreparedCase(case.volume_id, img, lab, mask, crop, image.spacing, pads)


def kfold_split(volume_ids: Sequence[str], k: int, seed: int) -> List[FoldSplit]:
    """Seeded shuffle, then deal ids round-robin into ``k`` validation sets."""
    ids = list(volume_ids)
    if k < 2:
        raise ConfigError("k must be >= 2")
    if len(ids) < k:
        raise ConfigError(f"{len(ids)} volumes cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    val_sets = [[] for _ in range(k)]
    for pos, idx in enumerate(perm):
        val_sets[pos % k].append(ids[idx])
    splits = []
    for fold, val in enumerate(val_sets):
        vs = set(val)
        splits.append(FoldSplit(fold, [i for i in ids if i not in vs], sorted(val, key=ids.index)))
    return splits


# --- training -----------------------------------------------------------------


@dataclass
class FoldLog:
    curves: List[tuple] = field(default_factory=list)
    losses: List[tuple] = field(default_factory=list)
    transforms: List[dict] = field(default_factory=list)


def _label_dice(pred, truth, mask, label_names) -> Dict[str, float]:
    return {label_names[i]: dice(pred, truth, i, mask) for i in range(1, len(label_names))}


def predict_case(model: Model, case: PreparedCase):
    """Hard labels and probabilities cropped back to the unpadded grid."""
    with no_grad():
        probs, _ = model.forward(Tensor(case.image[None], dtype=model.params["head2.weight"].dtype))
    p = probs.data
    pred = p.argmax(axis=0).astype(np.uint8)
    return pred[case.crop], p[(slice(None),) + case.crop]


def train_model(
    model: Model,
    train_cases: Sequence[PreparedCase],
    config: TrainingConfig,
    rng: np.random.Generator,
    val_cases: Sequence[PreparedCase] = (),
    fold: int = 0,
    epochs: Optional[int] = None,
) -> FoldLog:
    """Per-volume Adam steps with on-the-fly augmentation.

    Train dice per epoch is the mean over that epoch's (augmented) training
    forward passes, taken before each update; validation dice comes from a
    clean forward pass after the epoch.
    """
    epochs = config.epochs if epochs is None else epochs
    names = config.label_names
    opt = Adam(
        model.parameters(),
        lr=config.lr,
        l2_lambda=config.l2_lambda,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
        decay_mask=model.decay_mask(),
    )
    dtype = model.params["head2.weight"].dtype
    flog = FoldLog()
    for epoch in range(1, epochs + 1):
        train_scores: Dict[str, List[float]] = {n: [] for n in names[1:]}
        losses = []
        for idx in rng.permutation(len(train_cases)):
            pc = train_cases[idx]
            t = aug.sample_transform(config.augmentation, rng, pc.dims)
            img, lab = aug.apply_transform(pc.image, pc.labels, t)
            mask = aug.transform_mask(pc.mask, t) if pc.padded else None
            flog.transforms.append({"epoch": epoch, "volume_id": pc.volume_id, **t.log_row()})
            probs, _ = model.forward(Tensor(img[None], dtype=dtype))
            loss = weighted_cross_entropy(probs, lab, config.label_weights, mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            pred = probs.data.argmax(axis=0)
            for name, d in _label_dice(pred, lab, mask, names).items():
                train_scores[name].append(d)
        flog.losses.append((epoch, fold, float(np.mean(losses))))
        for name, vals in train_scores.items():
            flog.curves.append((epoch, fold, "train", name, float(np.mean(vals))))
        if val_cases:
            val_scores: Dict[str, List[float]] = {n: [] for n in names[1:]}
            for pc in val_cases:
                pred, _ = predict_case(model, pc)
                for name, d in _label_dice(pred, pc.labels[pc.crop], None, names).items():
                    val_scores[name].append(d)
            for name, vals in val_scores.items():
                flog.curves.append((epoch, fold, "val", name, float(np.mean(vals))))
        log.info("fold %d epoch %d loss %.5f", fold, epoch, flog.losses[-1][2])
    return flog


def model_seed(config: TrainingConfig, fold: int) -> int:
    return config.seed * 1000 + fold


def _fold_rng(config: TrainingConfig, fold: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, fold, 7])


# --- outputs ------------------------------------------------------------------


def write_curves(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "fold", "split", "label", "dice"])
        for epoch, fold, split, label, d in rows:
            w.writerow([epoch, fold, split, label, repr(d)])


def write_losses(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "fold", "loss"])
        for epoch, fold, loss in rows:
            w.writerow([epoch, fold, repr(loss)])


def write_transforms(rows, path) -> None:
    cols = ["epoch", "volume_id", "tx", "ty", "tz", "rotate_deg", "scale", "elastic_rms", "flip"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def _write_prediction(pred: np.ndarray, case: PreparedCase, names, directory: Path) -> None:
    write_volume(Volume.labels(pred, case.spacing, names), directory / f"{case.volume_id}_pred.zvol")


@dataclass
class CrossvalResult:
    splits: List[FoldSplit]
    logs: List[FoldLog]
    report: DiceReport
    models: List[Model]


def run_crossval(cases: Sequence[Case], config: TrainingConfig, out_dir=None) -> CrossvalResult:
    """Train one fresh model per fold and score it on that fold's validation volumes."""
    prepared = {c.volume_id: prepare_case(c, config) for c in cases}
    ids = [c.volume_id for c in cases]
    splits = kfold_split(ids, config.folds, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "predictions").mkdir(parents=True, exist_ok=True)
    report = DiceReport()
    logs, models, all_curves, all_losses = [], [], [], []
    names = config.label_names
    for split in splits:
        model = build_network(config.network_spec(), model_seed(config, split.fold_id))
        train = [prepared[i] for i in split.train_ids]
        val = [prepared[i] for i in split.val_ids]
        flog = train_model(model, train, config, _fold_rng(config, split.fold_id), val, split.fold_id)
        logs.append(flog)
        models.append(model)
        all_curves += flog.curves
        all_losses += flog.losses
        for pc in val:
            pred, probs = predict_case(model, pc)
            report.add_volume(pc.volume_id, pred, probs, pc.labels[pc.crop], names)
            if out is not None:
                _write_prediction(pred, pc, names, out / "predictions")
        if out is not None:
            fdir = out / f"fold{split.fold_id}"
            fdir.mkdir(exist_ok=True)
            write_curves(flog.curves, fdir / "curves.csv")
            write_losses(flog.losses, fdir / "losses.csv")
            write_transforms(flog.transforms, fdir / "transforms.csv")
            save_checkpoint(model, fdir / "model.ckpt")
            with open(fdir / "split.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["volume_id", "role"])
                w.writerows([(i, "train") for i in split.train_ids] + [(i, "val") for i in split.val_ids])
    if out is not None:
        write_curves(all_curves, out / "curves.csv")
        write_losses(all_losses, out / "losses.csv")
        report.write(out)
    return CrossvalResult(splits, logs, report, models)


def run_final_test(train_set: Sequence[Case], test_set: Sequence[Case], config: TrainingConfig, out_dir=None):
    """Train once on the whole pool, then predict and score the held-out volumes.

    Returns:
        ``(report, model, fold_log)``.
    """
    if not test_set:
        raise ConfigError("final test run needs at least one test volume")
    if not train_set:
        raise ConfigError("final test run needs at least one training volume")
    overlap = {c.volume_id for c in train_set} & {c.volume_id for c in test_set}
    if overlap:
        raise ConfigError(f"test volumes also in the training set: {sorted(overlap)}")
    train = [prepare_case(c, config) for c in train_set]
    test = [prepare_case(c, config) for c in test_set]
    fold = config.folds
    model = build_network(config.network_spec(), model_seed(config, fold))
    flog = train_model(model, train, config, _fold_rng(config, fold), (), fold)
    report = DiceReport()
    names = config.label_names
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "predictions").mkdir(parents=True, exist_ok=True)
    for pc in test:
        pred, probs = predict_case(model, pc)
        report.add_volume(pc.volume_id, pred, probs, pc.labels[pc.crop], names)
        if out is not None:
            _write_prediction(pred, pc, names, out / "predictions")
    if out is not None:
        write_curves(flog.curves, out / "curves.csv")
        write_losses(flog.losses, out / "losses.csv")
        write_transforms(flog.transforms, out / "transforms.csv")
        save_checkpoint(model, out / "model.ckpt")
        report.write(out)
    return report, model, flog


def train_only(train_set: Sequence[Case], config: TrainingConfig, out_dir=None):
    """Fit one model on every given volume (no evaluation)."""
    train = [prepare_case(c, config) for c in train_set]
    fold = config.folds
    model = build_network(config.network_spec(), model_seed(config, fold))
    flog = train_model(model, train, config, _fold_rng(config, fold), (), fold)
    if out_dir is not None:
        out = Path(out_dir)
        write_curves(flog.curves, out / "curves.csv")
        write_losses(flog.losses, out / "losses.csv")
        write_transforms(flog.transforms, out / "transforms.csv")
        save_checkpoint(model, out / "model.ckpt")
    return model, flog
