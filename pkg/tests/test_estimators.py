import numpy as np
import pytest
from sklearn.base import clone

from wscat.estimators import WSCATClassifier, check_inputs, check_semi_labels


@pytest.fixture(scope="module")
def semi_xy(tiny_semi):
    X = np.concatenate([tiny_semi.x_labeled, tiny_semi.x_val, tiny_semi.x_unlabeled])
    y = np.concatenate([tiny_semi.y_labeled, tiny_semi.y_val, -np.ones(tiny_semi.n_unlabeled, int)]) * 3 + 0
    y[y < 0] = -1
    return X, y


def test_params_round_trip():
    est = WSCATClassifier(beta=0.3, epochs=2)
    assert est.get_params()["beta"] == 0.3
    assert clone(est).set_params(lam=2.0).get_params()["lam"] == 2.0


@pytest.mark.parametrize("method", ["wscat", "trades", "standard"])
def test_fit_predict_transform(semi_xy, method):
    X, y = semi_xy
    est = WSCATClassifier(method=method, epochs=1, batch_size=32, eval_steps=3, mt_epochs=1).fit(X, y)
    assert set(est.classes_) == {0, 3}
    pred = est.predict(X[:20])
    assert set(pred) <= {0, 3}
    proba = est.predict_proba(X[:20])
    assert np.allclose(proba.sum(1), 1, atol=1e-6)
    assert est.transform(X[:5]).shape == (5, 16)
    if method == "standard":
        assert est.transduction_ is None
    else:
        assert len(est.transduction_) == (y != -1).sum() - round(0.2 * (y != -1).sum()) + (y == -1).sum()
    assert 0 <= est.score(X[:50], np.where(y[:50] < 0, 0, y[:50])) <= 1


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        WSCATClassifier().predict(np.zeros((2, 3)))


@pytest.mark.parametrize("bad", [np.full((3, 2), 2.0), np.array([[np.nan, 0.1]])])
def test_input_validation(bad):
    with pytest.raises(ValueError):
        check_inputs(bad)


@pytest.mark.parametrize("y", [np.array([-1, -1]), np.array([0, -2]), np.array([0.5, 1])])
def test_label_validation(y):
    with pytest.raises(ValueError):
        check_semi_labels(y, 2)


def test_wscat_without_unlabeled_rows(tiny_semi):
    with pytest.raises(ValueError, match="wscat_sup"):
        WSCATClassifier(epochs=1).fit(tiny_semi.x_labeled, tiny_semi.y_labeled)
