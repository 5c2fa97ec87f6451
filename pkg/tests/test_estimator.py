import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sightline import VggImageClassifier
from sightline.data import ingest_directory
from sightline.estimator import check_images
from sightline.vgg import build_vgg_mini, save_weights

from conftest import FIXTURES


def arrays(folder):
    ds = ingest_directory(FIXTURES / folder)
    return np.stack([r.pixels for r in ds.records]), np.array([r.label for r in ds.records])


FAST = dict(freeze_backbone=False, learning_rate=1e-3, max_epochs=30, patience=5,
            batch_size=8, augment=False, validation_fraction=0.25)


@pytest.fixture(scope="module")
def fitted():
    X, y = arrays("pets")
    return VggImageClassifier(**FAST).fit(X, y)


def test_params_and_clone():
    est = VggImageClassifier(max_epochs=3, threshold=0.7)
    params = est.get_params()
    assert params["max_epochs"] == 3 and params["threshold"] == 0.7
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_fit_predict_held_out(fitted):
    X, y = arrays("pets_test")
    assert list(fitted.classes_) == ["cat", "dog"]
    assert fitted.score(X, y) == 1.0
    proba = fitted.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert 1 <= fitted.n_epochs_ == len(fitted.history_) <= 30


def test_integer_labels_and_float_pixels():
    X, y = arrays("scenes")
    yi = (y == "outdoor").astype(int)
    est = VggImageClassifier(**{**FAST, "max_epochs": 2, "patience": 1}).fit(X.astype(float), yi)
    assert set(est.predict(X)) <= {0, 1}


def test_init_weights_archive(tmp_path):
    save_weights(build_vgg_mini(seed=4), tmp_path / "base.vggw")
    X, y = arrays("pets")
    est = VggImageClassifier(init_weights=str(tmp_path / "base.vggw"), max_epochs=2, patience=1,
                             augment=False).fit(X, y)
    base = build_vgg_mini(seed=4)
    np.testing.assert_array_equal(est.net_.layer("conv1_1").params["weight"],
                                  base.layer("conv1_1").params["weight"])


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        VggImageClassifier().predict(np.zeros((1, 32, 32, 3), np.uint8))


def test_rejects_bad_inputs():
    X = np.zeros((4, 32, 32, 3), np.uint8)
    with pytest.raises(ValueError, match="binary"):
        VggImageClassifier().fit(X, [0, 1, 2, 0])
    with pytest.raises(ValueError):
        VggImageClassifier().fit(X, [0, 1])
    with pytest.raises(ValueError):
        VggImageClassifier(arch="resnet").fit(X, [0, 0, 1, 1])


def test_check_images():
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 2, 2, 3), 300.0))
    with pytest.raises(ValueError):
        check_images(np.full((1, 2, 2, 3), np.nan))
    np.testing.assert_array_equal(check_images(np.full((1, 1, 1, 3), 2.5)), [[[[3, 3, 3]]]])
