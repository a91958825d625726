import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tidemark import metrics as mx
from tidemark.metrics import Confusion
from tidemark.volio import MaskVolume

import oracles
from conftest import flat_plane


def mv(a):
    return MaskVolume(np.asarray(a, dtype=np.uint8))


@pytest.mark.parametrize("pad, voxel, expected", [(15, 3.2, 5), (75, 3.2, 23), (150, 3.2, 47), (1, 3.2, 1), (30, 3.2, 9)])
def test_pad_um_to_voxels(pad, voxel, expected):
    assert mx.pad_um_to_voxels(pad, voxel) == expected


def test_pad_um_to_voxels_rejects_non_positive():
    for args in ((0, 3.2), (15, 0), (-1, 3.2)):
        with pytest.raises(ValueError):
            mx.pad_um_to_voxels(*args)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 500), st.floats(0.01, 500), st.floats(0.1, 20))
def test_pad_conversion_monotone(a, b, voxel):
    lo, hi = sorted((a, b))
    assert mx.pad_um_to_voxels(lo, voxel) <= mx.pad_um_to_voxels(hi, voxel)


def test_extract_flat_and_empty():
    s = mx.extract_tidemark(mv(flat_plane()))
    assert (s.depth == 4).all() and s.present.all()
    empty = mx.extract_tidemark(mv(np.zeros((8, 8, 8))))
    assert not empty.present.any()


def test_extract_min_rule():
    g = np.zeros((8, 2, 2), np.uint8)
    g[6:, 0, 1] = 1
    s = mx.extract_tidemark(mv(g))
    assert s.depth[0, 1] == 6 and s.present.sum() == 1


def test_extract_zy_is_transpose():
    g = np.zeros((5, 3, 4), np.uint8)
    g[2, 1, 3] = 1
    zy = mx.extract_tidemark(mv(g), "ZY")
    assert zy.depth.shape == (4, 3) and zy.depth[3, 1] == 2


def test_band_flat_surface():
    band = mx.build_band(mx.extract_tidemark(mv(flat_plane())), 1, (8, 8, 8))
    assert band.size == 192
    assert np.flatnonzero(band.voxels.any(axis=(1, 2))).tolist() == [3, 4, 5]


def test_band_clipped_at_top():
    band = mx.build_band(mx.extract_tidemark(mv(flat_plane(z0=0))), 2, (8, 8, 8))
    assert np.flatnonzero(band.voxels.any(axis=(1, 2))).tolist() == [0, 1, 2]


def test_band_skips_absent_columns():
    g = flat_plane()
    g[:, 0, 0] = 0
    band = mx.build_band(mx.extract_tidemark(mv(g)), 1, g.shape)
    assert not band.voxels[:, 0, 0].any() and band.size == 189


def test_band_requires_positive_pad():
    with pytest.raises(ValueError):
        mx.build_band(mx.extract_tidemark(mv(flat_plane())), 0, (8, 8, 8))


def shifted_plane():
    return mv(flat_plane(z0=5)), mv(flat_plane(z0=4))


def test_shifted_plane_counts_and_scores():
    pred, gt = shifted_plane()
    band = mx.build_band(mx.extract_tidemark(gt), 1, gt.shape)
    c = mx.banded_confusion(pred, gt, band)
    assert c == Confusion(64, 0, 64, 64)
    assert mx.iou(c) == 0.5
    assert mx.dice(c) == pytest.approx(2 / 3)
    assert mx.volumetric_similarity(c) == pytest.approx(2 / 3)


def test_perfect_and_complement():
    gt = mv(flat_plane())
    band = mx.build_band(mx.extract_tidemark(gt), 2, gt.shape)
    c = mx.banded_confusion(gt, gt, band)
    assert c.fp == c.fn == 0
    assert mx.iou(c) == mx.dice(c) == mx.volumetric_similarity(c) == 1.0
    comp = mx.banded_confusion(mv(1 - gt.voxels), gt, band)
    assert comp.tp == comp.tn == 0
    assert mx.iou(comp) == mx.dice(comp) == 0.0


def test_empty_denominator_convention():
    c = Confusion(0, 0, 0, 10)
    assert mx.iou(c) == mx.dice(c) == mx.volumetric_similarity(c) == 1.0


def test_confusion_shape_mismatch():
    gt = mv(flat_plane())
    band = mx.build_band(mx.extract_tidemark(gt), 1, gt.shape)
    with pytest.raises(ValueError):
        mx.banded_confusion(mv(np.zeros((8, 8, 7))), gt, band)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_matches_brute_force(seed, pad):
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in rng.integers(1, 13, 3))
    gt = (rng.random(shape) < rng.uniform(0.05, 0.9)).astype(np.uint8)
    pred = (rng.random(shape) < 0.5).astype(np.uint8)
    band = mx.build_band(mx.extract_tidemark(mv(gt)), pad, shape)
    got = mx.banded_confusion(mv(pred), mv(gt), band)
    assert tuple(got) == oracles.brute_force_banded(pred, gt, pad)
    assert sum(got) == band.size


def test_matches_brute_force_32_cube(rng):
    gt = np.zeros((32, 32, 32), np.uint8)
    surface = rng.integers(0, 32, (32, 32))
    for y in range(32):
        for x in range(32):
            gt[surface[y, x]:, y, x] = rng.random() > 0.1
    pred = (rng.random(gt.shape) < 0.5).astype(np.uint8)
    band = mx.build_band(mx.extract_tidemark(mv(gt)), 3, gt.shape)
    assert tuple(mx.banded_confusion(mv(pred), mv(gt), band)) == oracles.brute_force_banded(pred, gt, 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_score_relations(tp, fp, fn, tn):
    c = Confusion(tp, fp, fn, tn)
    i, d, v = mx.iou(c), mx.dice(c), mx.volumetric_similarity(c)
    assert (i, d, v) == pytest.approx(oracles.ratios(tp, fp, fn))
    assert 0 <= i <= d <= 1 and i <= v + 1e-12 and 0 <= v <= 1
    if tp + fp + fn:
        assert d == pytest.approx(2 * i / (1 + i))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_band_symmetry_on_flat_surface(seed, pad):
    rng = np.random.default_rng(seed)
    s, n = 6, 13
    gt = np.zeros((n, 4, 4), np.uint8)
    gt[s:] = 1
    band = mx.build_band(mx.extract_tidemark(mv(gt)), pad, gt.shape)
    pred = (rng.random(gt.shape) < 0.5).astype(np.uint8)
    truth = (rng.random(gt.shape) < 0.5).astype(np.uint8)
    mirror = 2 * s - np.arange(n)  # z -> 2s - z, exact inside the band
    inside = (mirror >= 0) & (mirror < n)
    pred_m, truth_m = np.zeros_like(pred), np.zeros_like(truth)
    pred_m[inside] = pred[mirror[inside]]
    truth_m[inside] = truth[mirror[inside]]
    a = mx.banded_confusion(mv(pred), mv(truth), band)
    b = mx.banded_confusion(mv(pred_m), mv(truth_m), band)
    assert a == b


def test_evaluate_sample_rows():
    pred, gt = shifted_plane()
    rows = mx.evaluate_sample(pred, gt, mx.PADS_UM, 3.2, "S1", "P1", "bce")
    assert len(rows) == 10
    assert [r.pad_voxels for r in rows][:3] == [5, 9, 14]
    assert all(r.TP + r.FP + r.FN + r.TN == 64 * (min(7, 4 + r.pad_voxels) - max(0, 4 - r.pad_voxels) + 1) for r in rows)


def test_evaluate_monotone_on_shifted_plane():
    pred = mv(flat_plane((16, 8, 8), z0=9))
    gt = mv(flat_plane((16, 8, 8), z0=8))
    r1, r5 = mx.evaluate_sample(pred, gt, (3.2, 16.0), 3.2)
    assert (r1.pad_voxels, r5.pad_voxels) == (1, 5)
    assert r5.iou >= r1.iou


def test_evaluate_empty_gt_flags_rows():
    rows = mx.evaluate_sample(mv(np.zeros((8, 8, 8))), mv(np.zeros((8, 8, 8))), (15, 30), 3.2)
    assert all(r.band_empty_flag and r.iou == r.dice == r.vs == 1.0 for r in rows)
    assert all(r.TP + r.FP + r.FN + r.TN == 0 for r in rows)


def test_report_roundtrip(tmp_path):
    pred, gt = shifted_plane()
    rows = mx.evaluate_sample(pred, gt, (15, 30), 3.2, "S1", "P1", "focal")
    mx.write_report(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(mx.REPORT_COLUMNS)
    back = mx.read_report(tmp_path / "r.csv")
    assert back == rows
    assert not math.isnan(back[0].iou)
