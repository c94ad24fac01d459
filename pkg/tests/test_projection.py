import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covernet import projection
from covernet.classes import GENRES
from covernet.errors import DegenerateProjectionError


def softmax_rows(rng, n, c=30, temp=1.5):
    z = rng.standard_normal((n, c)) * temp
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def dense_oracle(x):
    c = x - x.mean(axis=0)
    cov = c.T @ c / (len(x) - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:2]
    vecs = v[:, order]
    for j in range(2):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] *= -1
    return w[order], vecs


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_dense_eigendecomposition(seed):
    x = softmax_rows(np.random.default_rng(seed), 400)
    p = projection.pca_project(x)
    values, vecs = dense_oracle(x)
    np.testing.assert_allclose(p.explained_variance, values, rtol=0, atol=1e-8)
    np.testing.assert_allclose(p.components, vecs, rtol=0, atol=1e-8)
    np.testing.assert_allclose(p.points, (x - x.mean(0)) @ vecs, rtol=0, atol=1e-8)


def test_planted_diagonal_covariance():
    rng = np.random.default_rng(5)
    sd = np.full(30, 0.1)
    sd[0], sd[1] = 2.0, 1.0
    x = rng.standard_normal((20_000, 30)) * sd
    p = projection.pca_project(x)
    assert abs(p.components[0, 0]) > 0.999 and abs(p.components[1, 1]) > 0.999
    np.testing.assert_allclose(p.explained_variance, [4.0, 1.0], rtol=0.05)


def test_two_dimensional_data_preserves_distances(rng):
    x = np.zeros((25, 30))
    x[:, :2] = rng.standard_normal((25, 2)) * [3.0, 1.0]
    p = projection.pca_project(x)
    d_in = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d_out = np.linalg.norm(p.points[:, None] - p.points[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9)


def test_axes_are_images_of_unit_vectors(rng):
    x = softmax_rows(rng, 100)
    p = projection.pca_project(x)
    assert p.class_axes.shape == (30, 2)
    np.testing.assert_allclose(p.class_axes, (np.eye(30) - x.mean(0)) @ p.components, atol=1e-14)
    assert p.explained_variance[0] >= p.explained_variance[1] >= 0


def test_projected_variance_bounded(rng):
    x = softmax_rows(rng, 200)
    p = projection.pca_project(x)
    assert p.points.var(axis=0, ddof=1).sum() <= x.var(axis=0, ddof=1).sum() + 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_row_permutation_invariance(seed):
    g = np.random.default_rng(seed)
    x = softmax_rows(g, 60)
    perm = g.permutation(60)
    a, b = projection.pca_project(x), projection.pca_project(x[perm])
    np.testing.assert_allclose(b.components, a.components, atol=1e-8)
    np.testing.assert_allclose(b.points, a.points[perm], atol=1e-8)


def test_degenerate_inputs():
    with pytest.raises(DegenerateProjectionError):
        projection.pca_project(np.full((2, 30), 1 / 30))
    with pytest.raises(DegenerateProjectionError):
        projection.pca_project(np.full((10, 30), 1 / 30))
    line = np.zeros((10, 30))
    line[:, 0] = np.arange(10)
    with pytest.raises(DegenerateProjectionError):
        projection.pca_project(line)


def test_jacobi_matches_eigh(rng):
    a = rng.standard_normal((12, 12))
    a = a @ a.T
    w, v = projection.jacobi_eigh(a)
    ref = np.sort(np.linalg.eigvalsh(a))[::-1]
    np.testing.assert_allclose(w, ref, rtol=1e-10)
    np.testing.assert_allclose(a @ v, v * w, atol=1e-9)


def test_fallback_when_power_iteration_stalls(rng):
    x = softmax_rows(rng, 300)
    c = x - x.mean(0)
    cov = c.T @ c / 299
    values, vecs = projection.top2_eigenpairs(cov, max_iter=2)
    ref_w, ref_v = dense_oracle(x)
    np.testing.assert_allclose(values, ref_w, atol=1e-10)
    np.testing.assert_allclose(vecs, ref_v, atol=1e-8)


def test_export_csv_round_trip_and_svg_counts(rng):
    x = softmax_rows(rng, 77)
    labels = rng.integers(0, 30, 77)
    p = projection.pca_project(x, labels)
    csv_bytes, svg_bytes = projection.export_projection(p, GENRES)
    points, got_labels, axes = projection.read_projection_csv(csv_bytes)
    assert points.tobytes() == p.points.tobytes()
    np.testing.assert_array_equal(got_labels, labels)
    assert axes.tobytes() == p.class_axes.tobytes()
    text = csv_bytes.decode()
    assert text.splitlines()[0] == "kind,x,y,classId,className"
    assert sum(l.startswith("axis,") for l in text.splitlines()) == 30
    svg = svg_bytes.decode()
    assert svg.startswith("<?xml") and "<svg" in svg
    assert len(re.findall(r'<circle class="point"', svg)) == 77
    assert len(re.findall(r'<line class="axis"', svg)) == 30
    assert "Cookbooks, Food &amp; Wine" in svg
    again = projection.export_projection(projection.pca_project(x, labels), GENRES)
    assert again == (csv_bytes, svg_bytes)


def test_palette_fixed_and_distinct():
    colours = projection.palette(30)
    assert len(set(colours)) == 30 and colours == projection.palette(30)
    assert all(re.fullmatch(r"#[0-9a-f]{6}", c) for c in colours)
