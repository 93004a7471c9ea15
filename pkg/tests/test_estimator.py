import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from modconn.data import make_blobs
from modconn.errors import ShapeError
from modconn.estimator import ConnectivityClassifier

PARAMS = dict(num_modules=3, fan_in=1, cardinality=3, stage_channels=(8, 16, 16), stem_channels=8,
              epochs=(3, 2, 1, 1), batch_size=32)


@pytest.fixture(scope="module")
def fitted():
    train = make_blobs(192, num_classes=3, noise=0.3, seed=0)
    labels = np.array(["cat", "dog", "emu"])[train.labels]
    return ConnectivityClassifier(**PARAMS).fit(train.images, labels), labels


def test_fit_predict_score(fitted):
    clf, labels = fitted
    test = make_blobs(96, num_classes=3, noise=0.3, seed=0, split="test")
    y_test = np.array(["cat", "dog", "emu"])[test.labels]
    assert set(clf.predict(test.images)) <= {"cat", "dog", "emu"}
    assert clf.score(test.images, y_test) > 0.8
    proba = clf.predict_proba(test.images)
    assert proba.shape == (96, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert all(m.frozen for m in clf.graph_.masks.values())


def test_prune_keeps_predictions(fitted):
    clf, _ = fitted
    x = make_blobs(32, num_classes=3, seed=5).images
    before = clf.predict_proba(x)
    report = clf.prune()
    assert report.params_after <= report.params_before
    np.testing.assert_array_equal(clf.predict_proba(x), before)


def test_params_api():
    clf = ConnectivityClassifier(fan_in=2)
    assert clf.get_params()["fan_in"] == 2
    assert clone(clf.set_params(cardinality=5)).get_params()["cardinality"] == 5


def test_unfitted_and_bad_input():
    with pytest.raises(NotFittedError):
        ConnectivityClassifier().predict(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError):
        ConnectivityClassifier().fit(np.zeros((4, 3, 8)), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        ConnectivityClassifier().fit(np.full((4, 3, 8, 8), np.nan), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        ConnectivityClassifier().fit(np.zeros((4, 3, 8, 8)), [0.5, 1.5, 0.2, 1.0])
