import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fidcal.estimators import BackboneClassifier, CalibratedClassifier
from fidcal.imaging import load_split
from fidcal.restore import DenoiserConfig, DnCNN


@pytest.fixture(scope="module")
def data(tiny_corpus):
    sp = load_split(tiny_corpus, 0, train_per_class=8)
    X, y = sp.load_images("train")
    Xv, yv = sp.load_images("val")
    return X + Xv, np.concatenate([y, yv])


@pytest.fixture(scope="module")
def fitted(data):
    return BackboneClassifier(crop_size=16, epochs=2, warmup_epochs=1, batch_size=8).fit(*data)


def test_params_roundtrip():
    est = BackboneClassifier(lr_init=0.1, epochs=4)
    assert est.get_params()["lr_init"] == 0.1
    assert clone(est).get_params() == est.get_params()
    cal = CalibratedClassifier(modules={"ensemble": True})
    assert clone(cal).get_params()["modules"] == {"ensemble": True}


def test_not_fitted():
    with pytest.raises(NotFittedError):
        BackboneClassifier().predict([np.zeros((3, 8, 8), np.float32)])


def test_fit_predict_shapes(fitted, data):
    X, y = data
    proba = fitted.predict_proba(X[:5])
    assert proba.shape == (5, 3)
    np.testing.assert_allclose(proba.sum(1), 1, atol=1e-5)
    assert set(fitted.predict(X)) <= set(fitted.classes_)
    assert 0 <= fitted.score(X, y) <= 1
    assert len([r for r in fitted.history_ if r["split"] == "val"]) == 2


def test_deterministic(data, fitted):
    again = clone(fitted).fit(*data)
    np.testing.assert_array_equal(again.decision_function(data[0][:8]), fitted.decision_function(data[0][:8]))


def test_label_validation(data):
    X, y = data
    with pytest.raises(ValueError):
        BackboneClassifier(epochs=1, warmup_epochs=0).fit(X, y + 5)
    with pytest.raises(ValueError):
        BackboneClassifier(epochs=1, warmup_epochs=0).fit(X, y[:-1])


def test_calibrated(data, fitted):
    X, y = data
    with pytest.raises(ValueError):
        CalibratedClassifier().fit(X, y)
    den = DnCNN(DenoiserConfig(depth=3, width=4))
    cal = CalibratedClassifier(fitted, den, conv_hidden=4, crop_size=16, epochs=1, warmup_epochs=0,
                               batch_size=8).fit(X, y)
    assert cal.decision_function(X[:4], clean=X[:4]).shape == (4, 3)
    assert 0 <= cal.score(X, y, clean=X) <= 1
    with pytest.raises(ValueError):
        cal.predict(X[:4])  # oracle fidelity needs the clean reference
