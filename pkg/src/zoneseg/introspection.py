"""Feature-map grids for the ``convNb`` taps and a 2-model conv7b comparison.

Tiles are laid out row-major in channel order on a near-square grid with a
1-pixel black gutter; each tile is normalised on its own (min -> 0,
max -> 255, constant maps -> 128).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import UsageError
from .metrics import prostate_extent
from .models import TAP_NAMES, Model, cumulative_pool
from .tensor import Tensor, no_grad

LAYER_TAPS = TAP_NAMES[:7]


@dataclass
class FeatureMapGrid:
    layer_name: str
    n_maps: int
    tile_shape: Tuple[int, int]
    grid_shape: Tuple[int, int]
    slice_index: int
    bounds: List[Tuple[float, float]]
    image: np.ndarray = field(repr=False)

    def to_pgm(self) -> bytes:
        h, w = self.image.shape
        return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(self.image, dtype=np.uint8).tobytes()

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_pgm())


def mid_prostate_slice(labels: np.ndarray) -> int:
    """Middle of the prostate's z extent, rounded down."""
    extent = prostate_extent(np.asarray(labels))
    if extent is None:
        raise UsageError("label volume contains no prostate (TZ/PZ) voxels")
    lo, hi = extent
    return (lo + hi) // 2


def normalize_tile(tile: np.ndarray) -> Tuple[np.ndarray, Tuple[float, float]]:
    t = np.asarray(tile, dtype=np.float64)
    lo, hi = float(t.min()), float(t.max())
    if hi == lo:
        return np.full(t.shape, 128, dtype=np.uint8), (lo, hi)
    scaled = np.floor((t - lo) / (hi - lo) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8), (lo, hi)


def tile_maps(maps: np.ndarray) -> Tuple[np.ndarray, List[Tuple[float, float]], Tuple[int, int]]:
    """Tile ``(n, h, w)`` slices into one 8-bit image."""
    n, h, w = maps.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1), dtype=np.uint8)
    bounds = []
    for i in range(n):
        r, c = divmod(i, cols)
        tile, b = normalize_tile(maps[i])
        canvas[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = tile
        bounds.append(b)
    return canvas, bounds, (rows, cols)


def _level_of(layer_name: str) -> int:
    if layer_name not in LAYER_TAPS:
        raise UsageError(f"unknown layer {layer_name!r}; choose from {LAYER_TAPS}")
    return int(layer_name[4])


def capture_slice(model: Model, image: np.ndarray, z_mid: int, layer_name: str) -> Tuple[np.ndarray, int]:
    """Forward ``image`` (D, H, W) and return the tap's ``(C, h, w)`` slice plus its index.

    Coarse levels use ``z_mid // cumulative z pooling``.
    """
    level = _level_of(layer_name)
    dtype = model.params["head2.weight"].dtype
    with no_grad():
        _, taps = model.forward(Tensor(np.asarray(image)[None], dtype=dtype), capture=[layer_name])
    act = taps[layer_name].data
    z = min(z_mid // cumulative_pool(model.spec, level)[0], act.shape[1] - 1)
    return act[:, z], z


def render_feature_grid(model: Model, image: np.ndarray, labels: np.ndarray, layer_name: str, out_path=None) -> FeatureMapGrid:
    z_mid = mid_prostate_slice(labels)
    maps, z = capture_slice(model, image, z_mid, layer_name)
    canvas, bounds, grid = tile_maps(maps)
    result = FeatureMapGrid(layer_name, maps.shape[0], maps.shape[1:], grid, z, bounds, canvas)
    if out_path is not None:
        result.write(out_path)
    return result


def _standardize(flat: np.ndarray):
    centered = flat - flat.mean(axis=1, keepdims=True)
    norm = np.sqrt((centered * centered).sum(axis=1, keepdims=True))
    const = norm[:, 0] == 0
    return np.divide(centered, norm, out=np.zeros_like(centered), where=norm > 0), const


def best_correlations(maps_a: np.ndarray, maps_b: np.ndarray) -> List[Tuple[int, int, float]]:
    """For every map in ``a``: (index, best-matching index in ``b``, |Pearson r|).

    A constant map correlates 1.0 with an identical constant map and 0.0 with
    anything else.
    """
    a = np.asarray(maps_a, dtype=np.float64).reshape(maps_a.shape[0], -1)
    b = np.asarray(maps_b, dtype=np.float64).reshape(maps_b.shape[0], -1)
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"map sizes differ: {maps_a.shape[1:]} vs {maps_b.shape[1:]}")
    za, const_a = _standardize(a)
    zb, const_b = _standardize(b)
    corr = np.clip(np.abs(za @ zb.T), 0.0, 1.0)
    for i in np.flatnonzero(const_a):
        corr[i] = [1.0 if const_b[j] and np.array_equal(a[i], b[j]) else 0.0 for j in range(b.shape[0])]
    rows = []
    for i in range(a.shape[0]):
        j = int(np.argmax(corr[i]))
        rows.append((i, j, float(corr[i, j])))
    return rows


def compare_final_layer(model_a: Model, model_b: Model, image: np.ndarray, labels: np.ndarray, out_dir=None):
    """Paired conv7b grids and a best-match correlation table (a -> b).

    Returns:
        ``(grid_a, grid_b, rows)``.
    """
    image = np.asarray(image)
    z_mid = mid_prostate_slice(labels)
    for m in (model_a, model_b):
        try:
            m.check_input((1,) + image.shape)
        except Exception as exc:
            raise UsageError(f"image does not fit both models: {exc}") from exc
    maps_a, z = capture_slice(model_a, image, z_mid, "conv7b")
    maps_b, _ = capture_slice(model_b, image, z_mid, "conv7b")
    if maps_a.shape[1:] != maps_b.shape[1:]:
        raise UsageError("models produce conv7b maps of different in-plane size")
    grids = []
    for maps in (maps_a, maps_b):
        canvas, bounds, grid = tile_maps(maps)
        grids.append(FeatureMapGrid("conv7b", maps.shape[0], maps.shape[1:], grid, z, bounds, canvas))
    rows = best_correlations(maps_a, maps_b)
    if out_dir is not None:
        out = Path(out_dir)
        grids[0].write(out / "conv7b_a.pgm")
        grids[1].write(out / "conv7b_b.pgm")
        write_correlation_csv(rows, out / "conv7b_correlation.csv")
    return grids[0], grids[1], rows


def write_correlation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["map_index", "best_match_index", "abs_correlation"])
        for i, j, r in rows:
            w.writerow([i, j, repr(r)])


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise UsageError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
