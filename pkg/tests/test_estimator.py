import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from nca_wss.config import TrainConfig
from nca_wss.estimator import NCAClassifier, NCAMaskExtractor
from nca_wss.segment import extract_mask

TINY = dict(nca_channels=6, nca_hidden=6, classifier_hidden=8, steps=3, batch_size=4, epochs=2, chunk_size=3,
            learning_rate=1e-3)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    X = rng.random((8, 10, 10, 3))
    y = np.array(["a", "b"] * 4)
    return X, y


@pytest.fixture(scope="module")
def fitted(data):
    return NCAClassifier(**TINY).fit(*data)


def test_defaults_mirror_train_config():
    params = NCAClassifier().get_params()
    defaults = TrainConfig()
    for key, value in params.items():
        if hasattr(defaults, key):
            assert getattr(defaults, key) == value, key


def test_clone_keeps_params_and_drops_state(fitted):
    copy = clone(fitted)
    assert copy.get_params() == fitted.get_params()
    assert not hasattr(copy, "params_")


def test_set_params_round_trip():
    est = NCAClassifier().set_params(steps=7, fire_rate=0.25)
    assert est.get_params()["steps"] == 7 and est.fire_rate == 0.25


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        NCAClassifier().predict(data[0])


def test_fit_outputs(fitted, data):
    X, y = data
    assert list(fitted.classes_) == ["a", "b"]
    assert len(fitted.history_) == 2
    proba = fitted.predict_proba(X)
    assert proba.shape == (8, 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert set(fitted.predict(X)) <= {"a", "b"}
    assert fitted.transform(X).shape == (8, 10, 10, 6)
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_fit_is_deterministic(fitted, data):
    again = NCAClassifier(**TINY).fit(*data)
    assert np.array_equal(again.decision_logits(data[0]), fitted.decision_logits(data[0]))


def test_segment_matches_mask_extractor(fitted, data):
    X = data[0]
    masks = fitted.segment(X)
    states = fitted.transform(X)
    assert masks.dtype == bool and masks.shape == (8, 10, 10)
    for mask, state in zip(masks, states):
        assert np.array_equal(mask, extract_mask(state).mask)


def test_pipeline_composition(fitted, data):
    pipe = make_pipeline(NCAClassifier(**TINY), NCAMaskExtractor())
    pipe.fit(*data)
    assert np.array_equal(pipe.transform(data[0]), fitted.segment(data[0]))


def test_save_load_round_trip(fitted, data, tmp_path):
    fitted.save(tmp_path / "m.ckpt")
    loaded = NCAClassifier.load(tmp_path / "m.ckpt")
    assert loaded.get_params() == fitted.get_params()
    assert list(loaded.classes_) == ["a", "b"]
    assert np.array_equal(loaded.decision_logits(data[0]), fitted.decision_logits(data[0]))


@pytest.mark.parametrize(
    "X,y,match",
    [
        (np.zeros((4, 8, 9, 3)), [0, 1, 0, 1], "square"),
        (np.zeros((4, 8, 8, 3)), [0, 1, 0], "shape"),
        (np.zeros((4, 8, 8, 3)), [1, 1, 1, 1], "two classes"),
    ],
)
def test_fit_rejects_bad_input(X, y, match):
    with pytest.raises(ValueError, match=match):
        NCAClassifier(**TINY).fit(X, np.asarray(y))


def test_mask_extractor_single_state_and_degenerate_flag():
    flat = np.ones((6, 6, 4))
    out = NCAMaskExtractor().fit_transform(flat)
    assert out.shape == (1, 6, 6) and not out.any()
    assert NCAMaskExtractor().fit(flat).transform(flat).shape == (1, 6, 6)
    ext = NCAMaskExtractor()
    ext.transform(flat)
    assert ext.degenerate_.tolist() == [True]
