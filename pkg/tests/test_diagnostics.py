import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, random_adapter
from lionlora.adapter import AdapterSet, LoraAdapter
from lionlora.diagnostics import (
    LinearityReport,
    centroids,
    layerwise_cosine,
    linearity_csv,
    mean_direction,
    mean_trajectory,
    motion_magnitude,
    norm_csv,
    norm_profile,
    pearson,
    pixel_coordinates,
    similarity_csv,
    trajectory_csv,
    trajectory_smoothness,
)
from lionlora.errors import DimensionError, DomainError, UndefinedCentroidError, UndefinedCorrelationError
from lionlora.synthbench import rasterize
from lionlora.tensor import Tensor


def pearson_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pearson_values():
    assert pearson([1, 2, 3, 4], [3, 5, 7, 9]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0, abs=1e-15)
    assert abs(pearson([1, 2, 3], [1, 2, 4]) - pearson_oracle([1, 2, 3], [1, 2, 4])) < 1e-12
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)


def test_pearson_degenerate():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 2, 3], [5, 5, 5])
    with pytest.raises(DomainError):
        pearson([1, 2], [1, 2])
    with pytest.raises(DimensionError):
        pearson([1, 2, 3], [1, 2])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=8), st.integers(0, 1000),
       st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariant(x, seed, a, b, c, d):
    x = np.asarray(x)
    y = np.random.default_rng(seed).normal(size=len(x))
    if np.ptp(x) < 1e-3:
        return
    r = pearson(x, y)
    assert abs(pearson(a * x + b, c * y + d) - r) < 1e-12 * max(1, 1 / max(np.std(x), 1e-12))
    assert -1 - 1e-12 <= r <= 1 + 1e-12


# -- motion measures ------------------------------------------------------------


def splat_clip(path, size=32, radius=1.5):
    return np.stack([rasterize(np.array([p]), np.array([1.0]), size, radius) for p in path])


def test_static_clip_has_no_motion():
    clip = splat_clip([(0.1, -0.2)] * 5)
    assert motion_magnitude(clip) == 0.0


def test_translation_magnitude():
    delta = 0.05
    clip = splat_clip([(-0.3 + delta * t, 0.1) for t in range(8)], size=32)
    assert motion_magnitude(clip) == pytest.approx(delta, rel=0.02)
    double = splat_clip([(-0.3 + 2 * delta * t, 0.1) for t in range(8)], size=32)
    assert motion_magnitude(double) / motion_magnitude(clip) == pytest.approx(2.0, rel=0.1)


def test_centroid_axes():
    frame = np.zeros((1, 4, 4))
    frame[0, 0, 3] = 1.0  # top row, right column
    c = centroids(frame)[0]
    coords = pixel_coordinates(4)
    assert c.tolist() == [coords[3], coords[0]]


def test_blank_frame():
    with pytest.raises(UndefinedCentroidError):
        motion_magnitude(np.zeros((3, 4, 4)))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100))
def test_magnitude_intensity_invariant(k):
    clip = splat_clip([(0.05 * t, -0.02 * t) for t in range(5)], size=16)
    assert motion_magnitude(clip * k) == pytest.approx(motion_magnitude(clip), rel=1e-9)


def test_mean_direction():
    assert mean_direction(np.array([[0, 0], [1, 1], [2, 2]])) == pytest.approx(45.0)
    assert mean_direction(np.array([[0, 0], [0, -1.0]])) == pytest.approx(-90.0)
    with pytest.raises(DomainError):
        mean_direction(np.zeros((3, 2)))


def test_smoothness_straight_line():
    assert trajectory_smoothness(np.array([[0, 0], [1, 1], [2, 2], [3, 3]], float)) == 0.0


def test_smoothness_right_angle():
    path = np.array([[0, 0], [1, 0], [2, 0], [2, 1], [2, 2]], float)
    # turning angles per step: 0, pi/2, 0
    assert trajectory_smoothness(path) == pytest.approx((math.pi / 2) / 3, abs=1e-12)


def test_smoothness_circle():
    theta = 0.2
    path = np.array([[math.cos(theta * t), math.sin(theta * t)] for t in range(10)])
    assert trajectory_smoothness(path) == pytest.approx(theta, abs=1e-12)


def test_smoothness_undefined():
    with pytest.raises(DomainError):
        trajectory_smoothness(np.zeros((4, 2)))
    with pytest.raises(DomainError):
        trajectory_smoothness(np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-math.pi, math.pi), st.integers(0, 1000))
def test_smoothness_rotation_invariant(phi, seed):
    path = np.cumsum(np.random.default_rng(seed).normal(size=(7, 2)), axis=0)
    rot = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    assert trajectory_smoothness(path @ rot.T) == pytest.approx(trajectory_smoothness(path), abs=1e-9)


def test_mean_trajectory():
    clips = np.stack([splat_clip([(0.1 * t, 0.0) for t in range(3)], 16),
                      splat_clip([(0.0, 0.1 * t) for t in range(3)], 16)])
    got = mean_trajectory(clips)
    oracle = (centroids(clips[0]) + centroids(clips[1])) / 2
    np.testing.assert_allclose(got, oracle, atol=1e-15)


# -- adapter profiles -----------------------------------------------------------


def negated(ad):
    return AdapterSet(ad.name + "-neg", {lid: LoraAdapter(Tensor(-l.A.data), Tensor(l.B.data))
                                        for lid, l in ad.layers.items()})


def probes(n=3, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, TINY.frames, 4, 4))


def test_cosine_self_and_negated(tiny_model):
    ad = random_adapter(TINY, 1)
    same = layerwise_cosine(tiny_model, ad, ad, probes(), 10)
    np.testing.assert_allclose(same.mean, 1.0, atol=1e-12)
    neg = layerwise_cosine(tiny_model, ad, negated(ad), probes(), 10)
    np.testing.assert_allclose(neg.mean, -1.0, atol=1e-12)


def test_cosine_symmetric(tiny_model):
    a, b = random_adapter(TINY, 1, "a"), random_adapter(TINY, 2, "b")
    ab = layerwise_cosine(tiny_model, a, b, probes(), 10)
    ba = layerwise_cosine(tiny_model, b, a, probes(), 10)
    np.testing.assert_allclose(ab.samples, ba.samples, atol=1e-15)
    assert (np.abs(ab.samples) <= 1).all()


def test_cosine_excludes_zero_samples(tiny_model, zero_adapter):
    prof = layerwise_cosine(tiny_model, random_adapter(TINY, 1), zero_adapter, probes(), 10)
    assert prof.excluded == TINY.num_blocks * 3
    assert np.isnan(prof.mean).all()


def test_norm_profile_zero_and_linear(tiny_model, zero_adapter):
    ad = random_adapter(TINY, 1, "a")
    doubled = AdapterSet("b", ad.layers, lam=2.0)
    prof = norm_profile(tiny_model, [ad, doubled, zero_adapter], probes(), 10)
    assert not prof.norms[zero_adapter.name].any()
    np.testing.assert_allclose(prof.norms["b"], 2 * prof.norms["a"], rtol=1e-12)
    assert (prof.norms["a"] >= 0).all()


def test_shallow_deep_split():
    from lionlora.diagnostics import SimilarityProfile
    samples = np.array([[0.1, -0.1], [0.2, 0.2], [0.5, 0.7], [-0.9, 0.9]])
    prof = SimilarityProfile(samples.mean(1), samples.std(1), samples)
    assert prof.shallow_deep() == pytest.approx((0.15, 0.75))


# -- CSV ----------------------------------------------------------------------


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_similarity_and_norm_csv_columns(tiny_model):
    ad = random_adapter(TINY, 1, "a")
    rows = parse(similarity_csv([layerwise_cosine(tiny_model, ad, ad, probes(), 10)]))
    assert list(rows[0]) == ["block_index", "metric", "mean", "std", "sample_id", "value"]
    assert {r["mean"] for r in rows if r["mean"]} == {"1.000000"}
    rows = parse(norm_csv(norm_profile(tiny_model, [ad], probes(), 10)))
    assert list(rows[0]) == ["block_index", "metric", "mean", "std", "sample_id", "value"]
    assert len(rows) == TINY.num_blocks * (1 + 3)


def test_linearity_csv_rows():
    reports = [LinearityReport([0.2, 0.4, 0.6, 0.8, 1.0], [1, 2, 3, 4, 5], 1.0, "scaling_token"),
               LinearityReport([0.2, 0.4, 0.6, 0.8, 1.0], [1, 1, 2, 2, 2], 0.86, "adapter_scale")]
    rows = parse(linearity_csv(reports))
    assert [r["row_type"] for r in rows].count("sample") == 10
    summary = [r for r in rows if r["row_type"] == "summary"]
    assert [r["arm"] for r in summary] == ["scaling_token", "adapter_scale"]


def test_trajectory_csv():
    text = trajectory_csv(np.array([[0.0, 0.5], [0.25, -1.0]]))
    assert text == "frame,x,y\n0,0.000000,0.500000\n1,0.250000,-1.000000\n"
