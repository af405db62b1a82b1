"""Joint image/label spatial augmentation.

A drawn :class:`TransformSpec` maps source to output as
scale -> rotate (about z) -> translate -> elastic -> left-right flip, all about
the volume centre. :func:`apply_transform` evaluates the inverse of that chain
at every output voxel and resamples once: trilinear for the image, nearest for
the labels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import sampling
from .errors import ConfigError, UsageError


@dataclass
class AugmentationConfig:
    """Ranges for every transform. ``translate_max_vox`` is ordered (x, y, z)."""

    translate_max_vox: Tuple[int, int, int] = (5, 5, 1)
    rotate_max_deg: float = 10.0
    scale_range: Tuple[float, float] = (0.95, 1.05)
    elastic_grid_vox: int = 16
    elastic_sigma_vox: float = 0.4
    flip_prob: float = 0.5
    translate: bool = True
    rotate: bool = True
    scale: bool = True
    elastic: bool = True
    flip: bool = True
    enabled: bool = True

    def __post_init__(self):
        self.translate_max_vox = tuple(int(v) for v in self.translate_max_vox)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        lo, hi = self.scale_range
        if not 0 < lo <= 1 <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        if self.elastic_sigma_vox < 0:
            raise ConfigError("elastic_sigma_vox must be >= 0")
        if self.elastic_grid_vox < 1:
            raise ConfigError("elastic_grid_vox must be >= 1")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if any(v < 0 for v in self.translate_max_vox) or self.rotate_max_deg < 0:
            raise ConfigError("translation and rotation ranges must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(enabled=False)


@dataclass
class TransformSpec:
    translate: Tuple[int, int, int] = (0, 0, 0)
    rotate_deg: float = 0.0
    scale: float = 1.0
    flip: bool = False
    elastic_grid_vox: int = 16
    # in-plane node displacements (dy, dx) on a coarse (gz, gy, gx) lattice
    elastic_nodes: Optional[np.ndarray] = field(default=None, repr=False)

    def is_identity(self) -> bool:
        return (
            tuple(self.translate) == (0, 0, 0)
            and self.rotate_deg == 0.0
            and self.scale == 1.0
            and not self.flip
            and (self.elastic_nodes is None or not np.any(self.elastic_nodes))
        )

    def log_row(self) -> dict:
        rms = 0.0 if self.elastic_nodes is None else float(np.sqrt(np.mean(self.elastic_nodes**2)))
        tx, ty, tz = self.translate
        return {
            "tx": tx,
            "ty": ty,
            "tz": tz,
            "rotate_deg": repr(float(self.rotate_deg)),
            "scale": repr(float(self.scale)),
            "elastic_rms": repr(rms),
            "flip": int(self.flip),
        }


def sample_transform(config: AugmentationConfig, rng: np.random.Generator, dims=None) -> TransformSpec:
    """Draw one transform; ``dims`` (nx, ny, nz) sizes the elastic lattice.

    Draws happen in a fixed order regardless of which transforms are enabled,
    so toggling one transform leaves the others' values unchanged.
    """
    c = config
    txyz = tuple(int(rng.integers(-m, m + 1)) for m in c.translate_max_vox)
    angle = float(rng.uniform(-c.rotate_max_deg, c.rotate_max_deg))
    lo, hi = c.scale_range
    scale = float(rng.uniform(lo, hi))
    flip = bool(rng.random() < c.flip_prob)
    nodes = None
    if dims is not None:
        nx, ny, nz = dims
        g = c.elastic_grid_vox
        lattice = (math.ceil(nz / g) + 1, math.ceil(ny / g) + 1, math.ceil(nx / g) + 1)
        nodes = rng.normal(0.0, 1.0, size=(2,) + lattice) * c.elastic_sigma_vox
    if not c.enabled:
        return TransformSpec(elastic_grid_vox=c.elastic_grid_vox)
    return TransformSpec(
        translate=txyz if c.translate else (0, 0, 0),
        rotate_deg=angle if c.rotate else 0.0,
        scale=scale if c.scale else 1.0,
        flip=flip if c.flip else False,
        elastic_grid_vox=c.elastic_grid_vox,
        elastic_nodes=nodes if (c.elastic and c.elastic_sigma_vox > 0) else None,
    )


def _source_coords(shape, t: TransformSpec):
    nz, ny, nx = shape
    z, y, x = np.meshgrid(
        np.arange(nz, dtype=np.float64), np.arange(ny, dtype=np.float64), np.arange(nx, dtype=np.float64), indexing="ij"
    )
    cz, cy, cx = (nz - 1) / 2.0, (ny - 1) / 2.0, (nx - 1) / 2.0
    if t.flip:
        x = (nx - 1) - x
    if t.elastic_nodes is not None:
        g = float(t.elastic_grid_vox)
        gz, gy, gx = z / g, y / g, x / g
        y = y - sampling.trilinear(t.elastic_nodes[0], gz, gy, gx)
        x = x - sampling.trilinear(t.elastic_nodes[1], gz, gy, gx)
    tx, ty, tz = t.translate
    x, y, z = x - tx, y - ty, z - tz
    if t.rotate_deg or t.scale != 1.0:
        theta = math.radians(t.rotate_deg)
        cos, sin = math.cos(theta), math.sin(theta)
        dx, dy = x - cx, y - cy
        rx = cos * dx + sin * dy
        ry = -sin * dx + cos * dy
        x = cx + rx / t.scale
        y = cy + ry / t.scale
    return z, y, x


def apply_transform(image: np.ndarray, labels: np.ndarray, t: TransformSpec):
    """Warp an image/label pair with one combined inverse mapping.

    Image samples outside the field clamp to the edge; label samples outside
    become background.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape != labels.shape:
        raise UsageError(f"image {image.shape} and labels {labels.shape} differ in shape")
    if t.is_identity():
        return image.copy(), labels.copy()
    z, y, x = _source_coords(image.shape, t)
    warped = sampling.trilinear(image, z, y, x).astype(image.dtype)
    warped_labels = sampling.nearest(labels, z, y, x, fill=0)
    return warped, warped_labels


def config_to_dict(config: AugmentationConfig) -> dict:
    d = asdict(config)
    d["translate_max_vox"] = list(config.translate_max_vox)
    d["scale_range"] = list(config.scale_range)
    return d


def transform_mask(mask: np.ndarray, t: TransformSpec) -> np.ndarray:
    """Warp a boolean validity mask exactly like the labels (outside -> invalid)."""
    mask = np.asarray(mask)
    if t.is_identity():
        return mask.copy()
    z, y, x = _source_coords(mask.shape, t)
    return sampling.nearest(mask.astype(np.uint8), z, y, x, fill=0).astype(bool)
