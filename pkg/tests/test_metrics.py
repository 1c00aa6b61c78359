import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from msssim_reference import reference_ms_ssim
from hdcgan.metrics import (
    FD_RESIZE,
    MSSSIM_PAIRS,
    MSSSIM_RESIZE,
    NN_K,
    STANDARD_MSSSIM_WEIGHTS,
    DownsampleExtractor,
    FeatureFileExtractor,
    GaussianSummary,
    MsSsimConfig,
    RandomProjectionExtractor,
    extract_features,
    fit_gaussian,
    frechet_distance,
    frechet_from_features,
    frechet_protocol,
    make_extractor,
    ms_ssim,
    msssim_protocol,
    nearest_neighbors,
    read_feature_file,
    sample_pairs,
    write_feature_file,
)
from hdcgan.rng import RngStream


def _checkerboard(n=128, cell=8):
    yy, xx = np.mgrid[0:n, 0:n]
    return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, -1.0)


def _fixed_pairs():
    r = np.random.default_rng(2024)
    cb = _checkerboard()
    noise = np.clip(r.normal(0, 0.5, (3, 128, 128)), -1, 1)
    yy, xx = np.mgrid[0:128, 0:128] / 127.0
    ramp = np.stack([2 * xx - 1, 2 * yy - 1, xx * yy * 2 - 1])
    return [
        (cb, -cb),
        (noise, np.clip(noise + r.normal(0, 0.2, noise.shape), -1, 1)),
        (ramp, np.roll(ramp, 5, axis=2)),
    ]


# --- MS-SSIM ----------------------------------------------------------------------


def test_config_defaults():
    cfg = MsSsimConfig()
    assert cfg.scales == 5 and cfg.window_size == 11 and cfg.window_sigma == 1.5
    assert abs(sum(cfg.scale_weights) - 1.0) < 1e-9
    assert np.allclose(np.array(cfg.scale_weights) * sum(STANDARD_MSSSIM_WEIGHTS), STANDARD_MSSSIM_WEIGHTS)
    assert cfg.c1 == pytest.approx((0.01 * 2) ** 2) and cfg.c2 == pytest.approx((0.03 * 2) ** 2)
    with pytest.raises(ValueError):
        MsSsimConfig(window_size=10)
    with pytest.raises(ValueError):
        MsSsimConfig(scale_weights=(0.5, 0.6))


@pytest.mark.parametrize("k", range(3))
def test_ms_ssim_matches_independent_reference(k):
    a, b = _fixed_pairs()[k]
    assert ms_ssim(a, b) == pytest.approx(reference_ms_ssim(a, b), abs=1e-6)


def test_ms_ssim_reflexive_and_symmetric():
    for a, b in _fixed_pairs():
        assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-9)
        assert abs(ms_ssim(a, b) - ms_ssim(b, a)) < 1e-9
        assert -1.0 <= ms_ssim(a, b) <= 1.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), shift=st.floats(-3, 3))
def test_ms_ssim_joint_luminance_shift_invariance(seed, shift):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-1, 1, (32, 32)), r.uniform(-1, 1, (32, 32))
    cfg = MsSsimConfig(value_range=(-1.0 + shift, 1.0 + shift))
    assert abs(ms_ssim(a + shift, b + shift, cfg) - ms_ssim(a, b)) < 1e-6


def test_ms_ssim_errors():
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ms_ssim_orders_similarity():
    r = np.random.default_rng(0)
    a = np.clip(r.normal(0, 0.5, (64, 64)), -1, 1)
    near = np.clip(a + r.normal(0, 0.05, a.shape), -1, 1)
    far = np.clip(a + r.normal(0, 0.5, a.shape), -1, 1)
    assert ms_ssim(a, near) > ms_ssim(a, far)


def test_msssim_protocol_defaults_and_identical_set():
    assert (MSSSIM_PAIRS, MSSSIM_RESIZE, FD_RESIZE, NN_K) == (10_000, 128, 64, 5)
    img = np.random.default_rng(1).uniform(-1, 1, (3, 40, 40))
    report = msssim_protocol(np.stack([img] * 4), pairs=50)
    assert report.value == pytest.approx(1.0, abs=1e-9)
    assert report.resize == 128 and report.pairs == 50
    assert report.value == pytest.approx(np.mean(report.per_pair))


def test_msssim_protocol_deterministic_and_validated(tmp_path):
    imgs = np.random.default_rng(3).uniform(-1, 1, (5, 3, 32, 32))
    r1 = msssim_protocol(imgs, pairs=20, resize_to=32, seed=4)
    r2 = msssim_protocol(imgs, pairs=20, resize_to=32, seed=4)
    assert r1.value == r2.value
    r1.write(tmp_path / "r.json", tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["pairs"] == 20 and data["resize"] == 32 and data["metric"] == "ms-ssim"
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,value,pairs,resize,seed"
    with pytest.raises(ValueError):
        msssim_protocol(imgs[:1], pairs=5)


def test_sample_pairs_distinct():
    idx = sample_pairs(4, 5000, RngStream(0))
    assert np.all(idx[:, 0] != idx[:, 1])
    counts = np.bincount(idx.ravel(), minlength=4)
    assert counts.min() > 0.2 * idx.size / 4


# --- Frechet distance ------------------------------------------------------------------


def test_fit_gaussian_reference_cases():
    g = fit_gaussian([[1.0], [-1.0]])
    assert g.mean[0] == 0.0 and g.covariance[0, 0] == pytest.approx(2.0)
    z = fit_gaussian(np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert np.all(z.covariance == 0.0)
    r = fit_gaussian(np.random.default_rng(0).normal(size=(50, 4)))
    assert np.allclose(r.covariance, r.covariance.T, atol=1e-10)
    assert np.linalg.eigvalsh(r.covariance).min() >= -1e-8
    with pytest.raises(ValueError):
        fit_gaussian([[1.0, 2.0]])


def test_frechet_closed_forms():
    assert frechet_distance(GaussianSummary([0.0], [[1.0]]), GaussianSummary([3.0], [[1.0]])) == pytest.approx(9.0, abs=1e-12)
    r = np.random.default_rng(5)
    m1, m2 = r.normal(size=6), r.normal(size=6)
    s1, s2 = r.uniform(0.1, 3, 6), r.uniform(0.1, 3, 6)
    closed = np.sum((m1 - m2) ** 2) + np.sum(s1 + s2 - 2 * np.sqrt(s1 * s2))
    got = frechet_distance(GaussianSummary(m1, np.diag(s1)), GaussianSummary(m2, np.diag(s2)))
    assert abs(got - closed) < 1e-8


def test_frechet_matches_sqrtm_oracle_and_is_symmetric():
    r = np.random.default_rng(6)
    a, b = r.normal(size=(30, 5)), r.normal(size=(30, 5)) @ r.normal(size=(5, 5))
    g1, g2 = fit_gaussian(a), fit_gaussian(b)
    cross = scipy.linalg.sqrtm(g1.covariance @ g2.covariance).real
    oracle = np.sum((g1.mean - g2.mean) ** 2) + np.trace(g1.covariance + g2.covariance - 2 * cross)
    assert frechet_distance(g1, g2) == pytest.approx(oracle, rel=1e-8)
    assert frechet_distance(g1, g2) == pytest.approx(frechet_distance(g2, g1), rel=1e-10)
    assert frechet_distance(g1, g1) < 1e-8


def test_frechet_errors():
    with pytest.raises(ValueError):
        frechet_distance(GaussianSummary([0.0], [[1.0]]), GaussianSummary([0.0, 0.0], np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance(GaussianSummary([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]]), GaussianSummary([0.0, 0.0], np.eye(2)))


def test_frechet_split_halves_shrinks_with_n():
    r = np.random.default_rng(7)
    values = []
    for n in (100, 1000, 10000):
        x = r.normal(size=(2 * n, 3))
        values.append(frechet_distance(fit_gaussian(x[:n]), fit_gaussian(x[n:])))
    assert values[0] > values[1] > values[2]


# --- features -------------------------------------------------------------------------


def test_downsample_extractor_dimension_and_determinism():
    imgs = np.random.default_rng(0).uniform(-1, 1, (2, 3, 64, 64))
    f = extract_features(imgs, "downsample:8")
    assert f.shape == (2, 192)
    assert np.array_equal(f, DownsampleExtractor(8).fit_transform(imgs))


def test_random_projection_preserves_distance_order():
    base = np.zeros((3, 3, 16, 16))
    base[1] += 0.3
    base[2] += 1.0
    f = RandomProjectionExtractor(64, seed=1).fit_transform(base)
    assert np.linalg.norm(f[0] - f[1]) < np.linalg.norm(f[0] - f[2])
    assert np.linalg.norm(f[1] - f[2]) < np.linalg.norm(f[0] - f[2])
    assert np.array_equal(f, extract_features(base, "random-projection:64:1"))


def test_extractor_specs():
    assert isinstance(make_extractor("downsample"), DownsampleExtractor)
    assert make_extractor("random-projection:16:3").get_params() == {"n_components": 16, "seed": 3}
    assert isinstance(make_extractor("file:x.bin"), FeatureFileExtractor)
    for bad in ("inception", "file:"):
        with pytest.raises(ValueError):
            make_extractor(bad)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_feature_file_roundtrip(tmp_path, suffix):
    feats = np.random.default_rng(0).normal(size=(7, 3))
    path = tmp_path / f"f{suffix}"
    write_feature_file(path, feats)
    assert np.array_equal(read_feature_file(path), feats)
    assert np.array_equal(FeatureFileExtractor(str(path)).fit_transform(np.zeros((7, 1))), feats)


def test_feature_file_errors(tmp_path):
    (tmp_path / "a.csv").write_text("2 3\n1,2,3\n")
    with pytest.raises(ValueError):
        read_feature_file(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("1 3\n1,2\n")
    with pytest.raises(ValueError):
        read_feature_file(tmp_path / "b.csv")
    (tmp_path / "c.bin").write_bytes(b"2 2\n" + np.zeros(3).tobytes())
    with pytest.raises(ValueError):
        read_feature_file(tmp_path / "c.bin")
    (tmp_path / "d.bin").write_bytes(b"x\n")
    with pytest.raises(ValueError):
        read_feature_file(tmp_path / "d.bin")


def test_frechet_protocol_modes():
    r = np.random.default_rng(0)
    real = r.uniform(-1, 1, (20, 3, 32, 32))
    sets = [r.uniform(-1, 1, (20, 3, 32, 32)) for _ in range(2)]
    pooled = frechet_protocol(real, sets)
    per = frechet_protocol(real, sets, mode="per-epoch")
    assert pooled.resize == 64 and pooled.protocol["mode"] == "pooled"
    assert per.value == pytest.approx(np.mean(per.per_pair))
    assert frechet_protocol(real, real).value < 1e-6
    with pytest.raises(ValueError):
        frechet_protocol(real, sets, mode="mixed")
    assert frechet_from_features(r.normal(size=(10, 2)), r.normal(size=(10, 2))).value >= 0


# --- nearest neighbours -------------------------------------------------------------------


def test_nearest_neighbors():
    r = np.random.default_rng(0)
    corpus = r.uniform(-1, 1, (10, 3, 8, 8))
    res = nearest_neighbors(corpus[4], corpus)
    assert len(res) == 5
    assert res[0] == (4, 0.0)
    d = [x[1] for x in res]
    assert d == sorted(d)
    ref = np.sqrt(((corpus - corpus[4]) ** 2).reshape(10, -1).sum(1))
    assert [i for i, _ in res] == list(np.argsort(ref, kind="stable")[:5])


def test_nearest_neighbors_ties_and_errors():
    corpus = np.zeros((4, 1, 2, 2))
    assert [i for i, _ in nearest_neighbors(np.zeros((1, 2, 2)), corpus, 3)] == [0, 1, 2]
    with pytest.raises(ValueError):
        nearest_neighbors(np.zeros((1, 2, 2)), np.zeros((0, 1, 2, 2)))
    with pytest.raises(ValueError):
        nearest_neighbors(np.zeros((1, 2, 2)), corpus, 9)
