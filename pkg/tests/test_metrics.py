import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import brute_dice, brute_regional_dice
from zoneseg.metrics import DiceReport, dice, prostate_extent, region_slabs, regional_dice, soft_dice, summarize
from zoneseg.volume import synth_phantom

label_vols = hnp.arrays(np.uint8, (4, 5, 6), elements=st.integers(0, 2))


def test_dice_examples():
    truth = np.zeros((1, 1, 6), np.uint8)
    truth[0, 0, :4] = 1
    pred = np.zeros_like(truth)
    pred[0, 0, :2] = 1
    assert dice(pred, truth, 1) == pytest.approx(2 * 2 / 6)
    assert dice(truth, truth, 1) == 1.0
    assert dice(1 - truth, truth, 1) == 0.0
    assert dice(np.zeros_like(truth), np.zeros_like(truth), 1) == 1.0


@given(label_vols, label_vols, st.integers(0, 2))
def test_dice_matches_brute_force(pred, truth, label):
    assert dice(pred, truth, label) == brute_dice(pred, truth, label)


@given(label_vols, label_vols, st.integers(0, 2), st.randoms())
def test_dice_symmetric_and_permutation_invariant(pred, truth, label, rnd):
    perm = list(range(pred.size))
    rnd.shuffle(perm)
    p2 = pred.ravel()[perm].reshape(pred.shape)
    t2 = truth.ravel()[perm].reshape(truth.shape)
    assert dice(pred, truth, label) == dice(truth, pred, label) == dice(p2, t2, label)


def test_dice_mask_excludes_voxels():
    truth = np.array([[[1, 1, 0, 0]]], np.uint8)
    pred = np.array([[[1, 0, 0, 1]]], np.uint8)
    mask = np.array([[[True, True, True, False]]])
    assert dice(pred, truth, 1, mask) == pytest.approx(2 / 3)


def test_soft_dice_equals_hard_on_indicators(rng):
    truth = rng.integers(0, 3, (3, 4, 4)).astype(np.uint8)
    pred = rng.integers(0, 3, (3, 4, 4)).astype(np.uint8)
    assert soft_dice((pred == 2).astype(float), truth, 2) == pytest.approx(dice(pred, truth, 2))


@pytest.mark.parametrize("n,expected", [(10, (2, 6, 2)), (5, (1, 3, 1)), (1, (1, 0, 0)), (2, (1, 0, 1)), (7, (2, 3, 2))])
def test_region_slab_sizes(n, expected):
    slabs = region_slabs(3, 3 + n - 1)
    sizes = tuple(0 if slabs[r] is None else slabs[r][1] - slabs[r][0] for r in ("base", "middle", "apex"))
    assert sizes == expected


def test_base_is_superior():
    slabs = region_slabs(0, 9)
    assert slabs["base"] == (8, 10) and slabs["apex"] == (0, 2)


def test_regional_perfect_prediction():
    _, lab, _ = synth_phantom(0)
    assert regional_dice(lab.voxels, lab.voxels, 1) == (1.0, 1.0, 1.0)


def test_regional_no_prostate():
    empty = np.zeros((4, 4, 4), np.uint8)
    assert regional_dice(empty, empty, 1) == (None, None, None)


@pytest.mark.parametrize("seed", range(5))
def test_regional_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    _, lab, _ = synth_phantom(seed, dims=(24, 24, 16))
    truth = lab.voxels
    pred = np.where(rng.random(truth.shape) < 0.2, rng.integers(0, 3, truth.shape), truth).astype(np.uint8)
    for label in (1, 2):
        assert regional_dice(pred, truth, label) == brute_regional_dice(pred, truth, label)


def test_prostate_extent():
    lab = np.zeros((6, 2, 2), np.uint8)
    lab[1, 0, 0] = 2
    lab[4, 1, 1] = 1
    assert prostate_extent(lab) == (1, 4)


def test_summarize_against_hand_values():
    s = summarize([0.5, 0.7, 0.9])
    assert s["mean"] == pytest.approx(0.7)
    assert s["sd"] == pytest.approx(0.2)
    assert s["stderr"] == pytest.approx(0.2 / math.sqrt(3))
    assert math.isnan(summarize([0.4])["sd"])


def test_report_rows_and_files(tmp_path, rng):
    _, lab, _ = synth_phantom(0)
    truth = lab.voxels
    probs = rng.dirichlet(np.ones(3), size=truth.shape).transpose(3, 0, 1, 2)
    report = DiceReport()
    report.add_volume("a", truth, probs, truth, ("background", "TZ", "PZ"))
    report.add_volume("b", probs.argmax(0), probs, truth, ("background", "TZ", "PZ"))
    assert len(report.rows) == 2 * 2 * 4
    report.write(tmp_path)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0].keys() == {"volume_id", "label", "region", "dice", "soft_dice"}
    with open(tmp_path / "summary.csv") as fh:
        summary = {(r["label"], r["region"]): r for r in csv.DictReader(fh)}
    tz = [float(r["dice"]) for r in rows if r["label"] == "TZ" and r["region"] == "all"]
    assert float(summary["TZ", "all"]["mean"]) == pytest.approx(np.mean(tz), abs=1e-12)
    assert float(summary["TZ", "all"]["sd"]) == pytest.approx(np.std(tz, ddof=1), abs=1e-12)
    assert (tmp_path / "dice_histogram.csv").exists()
