import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from headlab.analysis import (AnalysisError, RunBundle, adjusted_r2, gray_image, gray_overlay, pairwise_pearson,
                              pearson, quantize, read_ppm, rgb_encode, write_ppm, write_statistics_csv,
                              write_utilization_csv)
from headlab.trainer import UtilizationGrid

GOLDEN = Path(__file__).parent / "golden"

R = [[1, 0.5, 0], [0.2, 1, 0.998]]
G = [[1, 0.5, 0], [0.6, 0, 0.002]]
B = [[1, 0.5, 1], [0.9, 0.5, 0.5]]


def _bundle(*grids):
    return RunBundle([UtilizationGrid(np.array(g, dtype=float), run=k) for k, g in enumerate(grids)])


def test_rgb_examples():
    img = rgb_encode(_bundle([[1.0]], [[1.0]], [[1.0]]))
    assert img.tolist() == [[[0, 0, 0]]]
    assert rgb_encode(_bundle([[0.0]], [[0.0]], [[0.0]])).tolist() == [[[255, 255, 255]]]
    assert rgb_encode(_bundle([[0.5]], [[0.5]], [[0.5]])).tolist() == [[[128, 128, 128]]]


def test_bundle_validation():
    with pytest.raises(AnalysisError):
        RunBundle([UtilizationGrid(np.zeros((2, 2)))] * 2)
    with pytest.raises(AnalysisError):
        _bundle([[0.1]], [[0.1]], [[0.1, 0.2]])


def test_golden_images(tmp_path):
    img = rgb_encode(_bundle(R, G, B))
    write_ppm(img, tmp_path / "a.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (GOLDEN / "rgb_2x3.ppm").read_bytes()
    write_ppm(img, tmp_path / "b.ppm", scale=2)
    assert (tmp_path / "b.ppm").read_bytes() == (GOLDEN / "rgb_2x3_scale2.ppm").read_bytes()
    H = gray_overlay([UtilizationGrid(np.array(g, dtype=float)) for g in (R, G, B)], tasks=1, runs=3)
    write_ppm(gray_image(H), tmp_path / "c.ppm")
    assert (tmp_path / "c.ppm").read_bytes() == (GOLDEN / "overlay_2x3.ppm").read_bytes()
    write_ppm(img, tmp_path / "d.ppm")
    assert (tmp_path / "d.ppm").read_bytes() == (tmp_path / "a.ppm").read_bytes()
    assert read_ppm(tmp_path / "a.ppm").tolist() == img.tolist()


def test_ppm_two_pixel_bytes(tmp_path):
    img = np.array([[[0, 0, 0], [255, 255, 255]]], dtype=np.uint8)
    write_ppm(img, tmp_path / "x.ppm")
    assert (tmp_path / "x.ppm").read_bytes() == b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff"
    with pytest.raises(AnalysisError):
        write_ppm(img, tmp_path / "y.ppm", scale=0)
    with pytest.raises(OSError):
        write_ppm(img, tmp_path / "missing" / "z.ppm")


def test_gray_overlay_examples():
    ones = [UtilizationGrid(np.ones((2, 2))) for _ in range(15)]
    np.testing.assert_array_equal(gray_overlay(ones), np.ones((2, 2)))
    assert quantize(gray_overlay(ones)).max() == 0
    consts = [UtilizationGrid(np.full((2, 2), 0.2)) for _ in range(15)]
    np.testing.assert_allclose(gray_overlay(consts), 0.2, atol=1e-15)
    vals = [0.1, 0.9, 0.3, 0.35, 0.5, 0.05, 0.7, 0.2, 0.95, 0.4, 0.6, 0.15, 0.8, 0.25, 0.45]
    mixed = [UtilizationGrid(np.array([[v]])) for v in vals]
    assert gray_overlay(mixed)[0, 0] == pytest.approx(sum(vals) / 15, abs=1e-15)
    with pytest.raises(AnalysisError):
        gray_overlay(mixed[:14])
    assert gray_overlay(mixed[:6], tasks=2, runs=3)[0, 0] == pytest.approx(sum(vals[:6]) / 6)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_overlay_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    grids = [UtilizationGrid(rng.random((3, 4))) for _ in range(15)]
    perm = rng.permutation(15)
    np.testing.assert_allclose(gray_overlay(grids), gray_overlay([grids[k] for k in perm]), atol=1e-15)


@given(arrays(np.float64, 20, elements=st.floats(0, 1)))
def test_quantize_monotone(z):
    z = np.sort(z)
    q = quantize(z).astype(int)
    assert np.all(np.diff(q) <= 0)


def _normal_equations_r2(x1, x2, y):
    X = np.column_stack([np.ones_like(y), x1, x2])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    r2 = 1 - ((y - X @ beta) ** 2).sum() / ((y - y.mean()) ** 2).sum()
    n = len(y)
    return 1 - (1 - r2) * (n - 1) / (n - 3), r2


def test_adjusted_r2_examples():
    rng = np.random.default_rng(0)
    a, b = rng.random(20), rng.random(20)
    assert adjusted_r2(a, b, a) == pytest.approx(1.0, abs=1e-12)
    assert adjusted_r2(a, b, 3 * a - 2 * b + 0.1) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(144)
    a, b, c = rng.random(144), rng.random(144), rng.random(144)
    assert adjusted_r2(a, b, c) == pytest.approx(_normal_equations_r2(a, b, c)[0], abs=1e-10)
    with pytest.raises(AnalysisError):
        adjusted_r2(a, 2 * a, c)
    with pytest.raises(AnalysisError):
        adjusted_r2(a[:3], b[:3], c[:3])


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(5, 60))
def test_adjusted_r2_bounds(seed, n):
    rng = np.random.default_rng(seed)
    a, b, c = rng.random(n), rng.random(n), rng.random(n)
    adj, r2 = _normal_equations_r2(a, b, c)
    got = adjusted_r2(a, b, c)
    assert got <= 1.0 and got == pytest.approx(adj, abs=1e-9)
    if r2 < 1:
        assert got <= r2


def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0])
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson(x, [1.0, 2.0, 4.0]) == pytest.approx(9 / (2 * math.sqrt(21)), abs=1e-12)
    with pytest.raises(AnalysisError):
        pearson(x, np.ones(3))


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(-10, 10).filter(lambda a: abs(a) > 1e-3), st.floats(-5, 5))
def test_pearson_affine(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.random(10), rng.random(10)
    assert pearson(a * x + b, y) == pytest.approx(math.copysign(1, a) * pearson(x, y), abs=1e-9)


def test_csv_outputs(tmp_path):
    g = UtilizationGrid(np.array([[0.5, 0.25]]))
    write_utilization_csv([("pos", 0, g)], tmp_path / "u.csv")
    assert (tmp_path / "u.csv").read_text().splitlines() == ["layer,head,run,task,expected_z", "0,0,0,pos,0.5",
                                                             "0,1,0,pos,0.25"]
    pairs = pairwise_pearson({"a": [UtilizationGrid(np.array([[1.0, 2.0, 3.0]]))],
                              "b": [UtilizationGrid(np.array([[1.0, 2.0, 4.0]]))]})
    write_statistics_csv({"a": 0.5}, pairs, tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text()
    assert "model,adj_r2" in text and "model_a,model_b,pearson" in text
    assert pairs[0][2] == pytest.approx(9 / (2 * math.sqrt(21)))
