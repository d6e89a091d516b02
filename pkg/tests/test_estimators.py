import numpy as np
import pytest
from sklearn.base import clone

from fedseg.data import PROFILES, generate_site
from fedseg.estimators import FCNSegmenter, FederatedSegmenter


@pytest.fixture(scope="module")
def arrays():
    ds = generate_site(PROFILES["A"], 6, 3, split=(4, 1, 1))
    X = np.stack(ds.images)
    y = np.stack(ds.labels)
    shifted = generate_site(PROFILES["B"], 3, 4, split=(1, 1, 1))
    return X, y, np.stack(shifted.images)


SMALL = dict(depth=3, base_channels=4, patch=16, window=32, stride=32)


def test_get_params_and_clone():
    est = FCNSegmenter(lr=3e-3, iterations=2, **SMALL)
    params = est.get_params()
    assert params["lr"] == 3e-3 and params["depth"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(iterations=5)
    assert est.iterations == 5
    fed = FederatedSegmenter(rounds=2, tau=0.8)
    assert clone(fed).get_params() == fed.get_params()


def test_fcn_fit_predict_score(arrays):
    X, y, _ = arrays
    est = FCNSegmenter(lr=3e-3, iterations=3, batch_size=2, **SMALL).fit(X, y)
    proba = est.predict_proba(X[:2])
    assert proba.shape == (2,) + X.shape[1:] and proba.min() >= 0 and proba.max() <= 1
    pred = est.predict(X[:2])
    assert pred.dtype == np.uint8 and set(np.unique(pred)) <= {0, 1}
    np.testing.assert_array_equal(pred, (proba > 0.5).astype(np.uint8))
    assert 0.0 <= est.score(X, y) <= 1.0
    assert len(est.loss_curve_) == 3


def test_fcn_deterministic_and_partial_fit(arrays):
    X, y, _ = arrays
    a = FCNSegmenter(lr=3e-3, iterations=2, **SMALL).fit(X, y)
    b = FCNSegmenter(lr=3e-3, iterations=2, **SMALL).fit(X, y)
    assert a.params_.bitwise_equal(b.params_)
    before = a.params_
    a.partial_fit(X, y)
    assert a.n_rounds_ == 2 and not a.params_.bitwise_equal(before)
    a.fit(X, y)   # fit restarts from initialization
    assert a.params_.bitwise_equal(b.params_)


def test_input_validation(arrays):
    X, y, _ = arrays
    est = FCNSegmenter(iterations=1, **SMALL)
    with pytest.raises(RuntimeError):
        est.predict(X)
    with pytest.raises(ValueError):
        est.fit(X * 2, y)
    with pytest.raises(ValueError):
        est.fit(X, y[:, :10])
    with pytest.raises(ValueError):
        est.fit(X, y * 2)
    with pytest.raises(ValueError):
        FCNSegmenter(iterations=0, **SMALL).fit(X, y)
    with pytest.raises(ValueError):
        FCNSegmenter(lr=-1.0, **SMALL).fit(X, y)


def test_federated_fit_with_unlabeled(arrays):
    X, y, U = arrays
    est = FederatedSegmenter(rounds=2, warm_start_rounds=1, iterations_per_round=1, sup_lr=3e-3,
                             tau=0.5, **SMALL).fit(X, y, X_unlabeled=U)
    assert len(est.history_) == 3
    assert est.history_[-1].participants == ["sup", "unsup"]
    assert est.history_[0].participants == ["sup"]
    assert 0.0 <= est.score(X, y) <= 1.0
    again = FederatedSegmenter(rounds=2, warm_start_rounds=1, iterations_per_round=1, sup_lr=3e-3,
                               tau=0.5, **SMALL).fit(X, y, X_unlabeled=U)
    assert est.params_.bitwise_equal(again.params_)


def test_federated_supervised_only_equals_one_client(arrays):
    X, y, _ = arrays
    est = FederatedSegmenter(rounds=2, iterations_per_round=1, sup_lr=3e-3, **SMALL).fit(X, y)
    assert [r.participants for r in est.history_] == [["sup"], ["sup"]]
    assert est.predict(X).shape == X.shape
