import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hdcgan import HDCGAN
from hdcgan.dataset import synthetic_two_class
from hdcgan.validation import check_images, check_power_of_two, check_telescope

SMALL = dict(image_size=16, latent_dim=8, n_filters=4, batch_size=8, max_steps=3, random_state=2)


def test_get_params_and_clone():
    est = HDCGAN(**SMALL)
    params = est.get_params()
    assert params["image_size"] == 16 and params["learning_rate"] == 0.0002
    assert clone(est).get_params() == params


def test_fit_sample_predict():
    X, _ = synthetic_two_class(16, 16, seed=0)
    est = HDCGAN(**SMALL).fit(X)
    assert len(est.history_) == 3
    samples = est.sample(5)
    assert samples.shape == (5, 3, 16, 16) and np.all(np.abs(samples) <= 1)
    p = est.predict_proba(X[:4])
    assert p.shape == (4,) and np.all((p > 0) & (p < 1))
    est.partial_fit(X, steps=2)
    assert len(est.history_) == 5


def test_fit_is_reproducible():
    X, _ = synthetic_two_class(16, 16, seed=0)
    a = HDCGAN(**SMALL).fit(X)
    b = HDCGAN(**SMALL).fit(X)
    assert a.history_ == b.history_
    assert np.array_equal(a.sample(3), b.sample(3))


def test_telescope_enlarges_samples():
    X, _ = synthetic_two_class(8, 8, seed=0)
    est = HDCGAN(image_size=8, telescope="2x2", latent_dim=4, n_filters=2, batch_size=4, max_steps=1).fit(X)
    assert est.network_config_.n_layers == 3
    assert est.sample(2).shape == (2, 3, 16, 16)


def test_save_load(tmp_path):
    X, _ = synthetic_two_class(16, 16, seed=0)
    est = HDCGAN(**SMALL).fit(X)
    est.save(tmp_path / "m.hdck")
    back = HDCGAN.load(tmp_path / "m.hdck")
    assert np.array_equal(back.sample(2), est.sample(2))
    assert back.get_params()["n_filters"] == 4


def test_unfitted_and_invalid_inputs():
    with pytest.raises(NotFittedError):
        HDCGAN().sample(1)
    X, _ = synthetic_two_class(16, 16, seed=0)
    with pytest.raises(ValueError):
        HDCGAN(**SMALL).fit(X[:, :, :8, :8])
    with pytest.raises(ValueError):
        HDCGAN(**SMALL).fit(X * 3)
    with pytest.raises(ValueError):
        HDCGAN(**SMALL).fit(X[:4])
    with pytest.raises(ValueError):
        HDCGAN(**{**SMALL, "image_size": 12}).fit(X)


def test_validation_helpers():
    assert check_power_of_two(64) == 64
    with pytest.raises(ValueError):
        check_power_of_two(48)
    assert check_telescope("4x2") == (4, 2) and check_telescope(3) == (3, 3)
    with pytest.raises(ValueError):
        check_telescope("2x")
    with pytest.raises(ValueError):
        check_telescope((0, 1))
    assert check_images(np.zeros((2, 5, 5))).shape == (2, 1, 5, 5)
    with pytest.raises(ValueError):
        check_images(np.full((1, 1, 2, 2), np.nan))
    with pytest.raises(TypeError):
        check_images(np.array([[["a"]]]))
