"""Volume container, physical-space resampling, label balance and phantoms.

Axis convention: x = left-right, y = anterior-posterior (increasing
posteriorly), z = inferior-superior (increasing superiorly). Voxel buffers
are stored x-fastest, so in memory a volume is a ``(nz, ny, nx)`` array.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import sampling
from .errors import ConfigError, DataError, FormatError, UsageError

MAGIC = b"ZSEGVOL1" + b"\x00" * 8
LABELS_2 = ("background", "TZ", "PZ")
LABELS_6 = ("background", "TZ", "PZ", "bladder", "rectum", "femur")
BACKGROUND, TZ, PZ, BLADDER, RECTUM, FEMUR = range(6)
_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


@dataclass
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    dtype: str = "float32"
    kind: str = "image"
    label_names: Optional[List[str]] = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DataError(f"dims must be three extents >= 1, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise DataError(f"spacings must be three positive values, got {self.spacing_mm}")
        if self.dtype not in _DTYPES:
            raise DataError(f"unsupported dtype {self.dtype!r}")
        if self.kind not in ("image", "labels"):
            raise DataError(f"kind must be 'image' or 'labels', got {self.kind!r}")
        if self.kind == "labels":
            if self.dtype != "uint8":
                raise DataError("label volumes must be uint8")
            if not self.label_names:
                raise DataError("label volumes need label_names")
            self.label_names = list(self.label_names)

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "dtype": self.dtype,
            "kind": self.kind,
            "label_names": self.label_names,
        }


@dataclass
class Volume:
    """A voxel grid with physical spacing; ``voxels`` is ``(nz, ny, nx)``."""

    header: VolumeHeader
    voxels: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.header.dims
        dtype = _DTYPES[self.header.dtype]
        self.voxels = np.ascontiguousarray(self.voxels, dtype=dtype)
        if self.voxels.shape != (nz, ny, nx):
            raise DataError(f"voxel array shape {self.voxels.shape} does not match dims (nx, ny, nz)={self.header.dims}")
        if self.header.kind == "labels" and self.voxels.size:
            top = int(self.voxels.max())
            if top >= len(self.header.label_names):
                raise DataError(f"label value {top} exceeds {len(self.header.label_names)} label names")

    @classmethod
    def image(cls, voxels: np.ndarray, spacing_mm) -> "Volume":
        nz, ny, nx = voxels.shape
        return cls(VolumeHeader((nx, ny, nz), spacing_mm, "float32", "image"), voxels)

    @classmethod
    def labels(cls, voxels: np.ndarray, spacing_mm, label_names: Sequence[str] = LABELS_2) -> "Volume":
        nz, ny, nx = voxels.shape
        return cls(VolumeHeader((nx, ny, nz), spacing_mm, "uint8", "labels", list(label_names)), voxels)

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.header.spacing_mm

    @property
    def is_labels(self) -> bool:
        return self.header.kind == "labels"


def encode_volume(volume: Volume) -> bytes:
    header = json.dumps(volume.header.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + volume.voxels.tobytes()


def decode_volume(blob: bytes) -> Volume:
    if len(blob) < 16 or blob[:8] != MAGIC[:8]:
        raise FormatError("bad magic, expected ZSEGVOL1", 0)
    if len(blob) < 24:
        raise FormatError("file ends inside the header length field", len(blob))
    (hlen,) = struct.unpack_from("<Q", blob, 16)
    if 24 + hlen > len(blob):
        raise FormatError(f"header length {hlen} runs past end of file ({len(blob)} bytes)", 16)
    try:
        meta = json.loads(blob[24 : 24 + hlen].decode("utf-8"))
        header = VolumeHeader(
            meta["dims"], meta["spacing_mm"], meta["dtype"], meta["kind"], meta.get("label_names")
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", 24) from exc
    except DataError as exc:
        raise FormatError(f"invalid header: {exc}", 24) from exc
    start = 24 + hlen
    nx, ny, nz = header.dims
    dtype = _DTYPES[header.dtype]
    expected = nx * ny * nz * dtype.itemsize
    if len(blob) - start != expected:
        raise FormatError(f"payload holds {len(blob) - start} bytes, header implies {expected}", start)
    voxels = np.frombuffer(blob, dtype=dtype, offset=start).reshape(nz, ny, nx)
    return Volume(header, voxels.copy())


def write_volume(volume: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(volume))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


def resampled_dims(dims, spacing, target) -> Tuple[int, int, int]:
    return tuple(max(1, int(math.floor(d * s / t + 0.5))) for d, s, t in zip(dims, spacing, target))


def resample(volume: Volume, target_spacing_mm, mode: Optional[str] = None) -> Volume:
    """Resample onto a grid with ``target_spacing_mm``, sampling at voxel centres.

    Images default to trilinear interpolation (clamp-to-edge), labels to
    nearest-neighbour. Trilinear on labels is refused.
    """
    mode = mode or ("nearest" if volume.is_labels else "trilinear")
    if mode not in ("trilinear", "nearest"):
        raise UsageError(f"unknown resampling mode {mode!r}")
    if volume.is_labels and mode == "trilinear":
        raise UsageError("label volumes must be resampled with mode='nearest'")
    target = tuple(float(t) for t in target_spacing_mm)
    if len(target) != 3 or min(target) <= 0:
        raise UsageError(f"target spacing must be three positive values, got {target_spacing_mm}")
    new_dims = resampled_dims(volume.header.dims, volume.spacing, target)
    # per-axis source coordinates, array axis order (z, y, x)
    coords = [
        (np.arange(n, dtype=np.float64) + 0.5) * (t / s) - 0.5
        for n, s, t in zip(new_dims[::-1], volume.spacing[::-1], target[::-1])
    ]
    data = volume.voxels
    if mode == "nearest":
        idx = [sampling.nearest_index(c, n) for c, n in zip(coords, data.shape)]
        out = data[np.ix_(*idx)]
    else:
        out = data.astype(np.float64)
        for axis, c in enumerate(coords):
            out = sampling.linear_axis(out, c, axis)
    header = VolumeHeader(new_dims, target, volume.header.dtype, volume.header.kind, volume.header.label_names)
    return Volume(header, out)


@dataclass
class BalanceStats:
    volume_id: str
    tz_voxels: int
    pz_voxels: int
    background_voxels: int
    tz_fraction: Optional[float]
    bg_tz_ratio: Optional[float]
    excluded: bool = False


def volume_balance(volume_id: str, labels: np.ndarray) -> BalanceStats:
    counts = np.bincount(np.asarray(labels).ravel(), minlength=3)
    bg, tz, pz = int(counts[BACKGROUND]), int(counts[TZ]), int(counts[PZ])
    if tz + pz == 0:
        return BalanceStats(volume_id, tz, pz, bg, None, None, excluded=True)
    ratio = bg / tz if tz else None
    return BalanceStats(volume_id, tz, pz, bg, tz / (tz + pz), ratio)


def histogram(values: Sequence[float], lo: float, hi: float, bins: int = 10) -> List[Tuple[float, float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def label_balance_stats(dataset: Iterable[Tuple[str, np.ndarray]], bins: int = 10):
    """Per-volume TZ fraction and background/TZ ratio plus a TZ-fraction histogram.

    Volumes without any prostate voxel are flagged ``excluded`` and left out
    of the histogram.
    """
    stats = [volume_balance(vid, lab.voxels if isinstance(lab, Volume) else lab) for vid, lab in dataset]
    fractions = [s.tz_fraction for s in stats if not s.excluded]
    return stats, histogram(fractions, 0.0, 1.0, bins)


def write_balance_csv(stats: Sequence[BalanceStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume_id", "tz_fraction", "bg_tz_ratio"])
        for s in stats:
            w.writerow([s.volume_id, _fmt(s.tz_fraction), _fmt(s.bg_tz_ratio)])


def write_histogram_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in rows:
            w.writerow([_fmt(lo), _fmt(hi), n])


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# --- phantoms -----------------------------------------------------------------

BASE_INTENSITY = {BACKGROUND: 0.35, TZ: 0.55, PZ: 0.85, BLADDER: 1.0, RECTUM: 0.15, FEMUR: 0.7}
MIN_DIMS = (24, 24, 6)


@dataclass
class PhantomGeometry:
    """Physical-space (mm) layout drawn for one phantom."""

    center: Tuple[float, float, float]
    tz_axes: Tuple[float, float, float]
    pz_thickness: float
    target_tz_fraction: float


def _grid(dims, spacing):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    z = (np.arange(nz) + 0.5) * sz
    y = (np.arange(ny) + 0.5) * sy
    x = (np.arange(nx) + 0.5) * sx
    return np.meshgrid(z, y, x, indexing="ij")


def _ellipsoid(zz, yy, xx, center, axes):
    cx, cy, cz = center
    ax, ay, az = axes
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0


def _pz_mask(zz, yy, xx, center, axes, tz, t):
    cx, cy, cz = center
    ax, ay, az = axes
    # outer shell shifted posteriorly so the crescent is thickest at the back
    outer_center = (cx, cy + 0.5 * t * ay, cz)
    outer = _ellipsoid(zz, yy, xx, outer_center, (ax * (1 + t), ay * (1 + t), az * (1 + 0.5 * t)))
    posterior = (yy - cy) > -0.2 * ay
    return outer & ~tz & posterior


def synth_phantom(
    seed: int,
    dims=(64, 64, 16),
    spacing=(1.0, 1.0, 3.6),
    label_mode: str = "2label",
    difficulty: float = 1.0,
    tz_fraction: float = 0.7,
):
    """Deterministic synthetic pelvis: image and label volumes.

    The TZ is a central ellipsoid and the PZ a thin posterior crescent whose
    thickness is solved so that ``|TZ| / (|TZ| + |PZ|)`` lands near a jittered
    ``tz_fraction``. Bladder, rectum and femur heads are always present in the
    image; only ``label_mode="6label"`` annotates them.

    Returns:
        ``(image, labels, geometry)``.
    """
    if label_mode not in ("2label", "6label"):
        raise ConfigError(f"label_mode must be '2label' or '6label', got {label_mode!r}")
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d < m for d, m in zip(dims, MIN_DIMS)):
        raise ConfigError(f"phantom dims {dims} too small; need at least {MIN_DIMS} (nx, ny, nz)")
    if not 0.0 < tz_fraction < 1.0:
        raise ConfigError("tz_fraction must lie strictly between 0 and 1")
    if difficulty < 0:
        raise ConfigError("difficulty must be non-negative")
    rng = np.random.default_rng(seed)
    ext = [d * s for d, s in zip(dims, spacing)]
    center = tuple(e * (0.5 + rng.uniform(-0.03, 0.03)) for e in ext)
    tz_axes = (
        0.17 * ext[0] * (1 + rng.normal(0, 0.05)),
        0.14 * ext[1] * (1 + rng.normal(0, 0.05)),
        0.22 * ext[2] * (1 + rng.normal(0, 0.05)),
    )
    target = float(np.clip(tz_fraction + rng.normal(0, 0.02), 0.05, 0.95))

    zz, yy, xx = _grid(dims, spacing)
    tz = _ellipsoid(zz, yy, xx, center, tz_axes)
    n_tz = int(tz.sum())
    lo, hi = 0.0, 2.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        n_pz = int(_pz_mask(zz, yy, xx, center, tz_axes, tz, mid).sum())
        frac = n_tz / (n_tz + n_pz) if n_tz + n_pz else 1.0
        lo, hi = (mid, hi) if frac > target else (lo, mid)
    thickness = 0.5 * (lo + hi)
    pz = _pz_mask(zz, yy, xx, center, tz_axes, tz, thickness)

    cx, cy, cz = center
    ax, ay, az = tz_axes
    bladder = _ellipsoid(
        zz, yy, xx, (cx, cy - 0.3 * ay, cz + az + 0.12 * ext[2]), (0.2 * ext[0], 0.15 * ext[1], 0.14 * ext[2])
    )
    r_rect = 0.08 * ext[1]
    ry = cy + ay * (1 + 1.5 * thickness) + r_rect + spacing[1]
    rectum = (xx - cx) ** 2 + (yy - ry) ** 2 <= r_rect**2
    r_fem = 0.08 * ext[0]
    femur = np.zeros_like(tz)
    for side in (-1, 1):
        femur |= (xx - (cx + side * 0.38 * ext[0])) ** 2 + (yy - cy) ** 2 <= r_fem**2
    femur &= zz < cz + 0.5 * az

    tissue = np.zeros(zz.shape, dtype=np.uint8)
    for value, mask in ((FEMUR, femur), (RECTUM, rectum), (BLADDER, bladder), (PZ, pz), (TZ, tz)):
        tissue[mask] = value

    # smooth multiplicative bias field over normalised coordinates in [-1, 1]
    u = [(c / e) * 2.0 - 1.0 for c, e in zip((xx, yy, zz), ext)]
    coef = rng.normal(0.0, 1.0, size=6)
    bias = 1.0 + 0.08 * difficulty * (
        coef[0] * u[0] + coef[1] * u[1] + coef[2] * u[2] + coef[3] * u[0] * u[1] + coef[4] * u[0] ** 2 + coef[5] * u[1] ** 2
    ) / 3.0
    base = np.vectorize(BASE_INTENSITY.get, otypes=[np.float64])(tissue)
    noise = rng.normal(0.0, 0.05 * difficulty, size=tissue.shape)
    image = (base * bias + noise).astype(np.float32)

    if label_mode == "6label":
        labels, names = tissue, LABELS_6
    else:
        labels, names = np.where(tissue <= PZ, tissue, BACKGROUND).astype(np.uint8), LABELS_2
    geometry = PhantomGeometry(center, tz_axes, thickness, target)
    return Volume.image(image, spacing), Volume.labels(labels, spacing, names), geometry
