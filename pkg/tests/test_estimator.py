import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from seec.estimator import SeecCodec, check_images, check_masks

from conftest import TINY
from test_maskio import blob_mask


def _data(n=2, size=32, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 256, size=(n, size, size, 3)).astype(np.uint8)
    X[:, : size // 2] //= 32
    y = np.stack([blob_mask(rng, size, size) for _ in range(n)])
    return X, y


def small(**kw):
    return SeecCodec(**{**TINY, **dict(K=2, batch_size=2, patch_size=16, epochs=1, steps_per_epoch=2), **kw})


def test_params_round_trip_through_clone():
    est = small(lr=0.01, roi=True)
    params = est.get_params()
    assert params["lr"] == 0.01 and params["roi"] and params["c_y"] == TINY["c_y"]
    assert clone(est).get_params() == params
    assert est.set_params(seed=4).seed == 4


def test_fit_transform_inverse():
    X, y = _data()
    est = small().fit(X, y)
    streams = est.transform(X, y)
    assert all(isinstance(s, bytes) for s in streams)
    back = est.inverse_transform(streams)
    for a, b in zip(X, back):
        np.testing.assert_array_equal(a, b)
    bpp = est.predict(X, y)
    np.testing.assert_allclose(bpp, [8 * len(s) / (32 * 32) for s in streams])
    assert est.score(X, y) == pytest.approx(-bpp.mean())


def test_fit_is_deterministic():
    X, y = _data()
    a = small(seed=1).fit(X, y).model_.checkpoint_bytes()
    b = small(seed=1).fit(X, y).model_.checkpoint_bytes()
    assert a == b


def test_unfitted_estimator_refuses_to_encode():
    X, y = _data(1)
    with pytest.raises(NotFittedError):
        small().transform(X, y)


def test_roi_estimator_keeps_the_foreground(tiny_model):
    X, y = _data(1, size=20)
    est = SeecCodec.from_model(tiny_model, roi=True)
    out = est.inverse_transform(est.transform(X, y))[0]
    fg = y[0] == 1
    np.testing.assert_array_equal(out[fg], X[0][fg])


def test_validation_helpers():
    X, y = _data(2)
    assert len(check_images(X)) == 2
    with pytest.raises(ValueError):
        check_images(X.astype(np.float32))
    with pytest.raises(ValueError):
        check_images([])
    with pytest.raises(ValueError):
        check_masks(y[:1], list(X), 2)
    with pytest.raises(ValueError):
        check_masks(y[:, :5], list(X), 2)
    assert all(not m.ids.any() for m in check_masks(None, list(X), 2))


@pytest.mark.parametrize("kw", [dict(patch_size=24), dict(validation_fraction=0.0), dict(patch_size=64)])
def test_fit_rejects_bad_settings(kw):
    X, y = _data(1)
    with pytest.raises(ValueError):
        small(**kw).fit(X, y)
