import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nca_wss.config import TrainConfig
from nca_wss.grad import backward, focal_loss, focal_terms, loss_and_grad
from nca_wss.model import fire_masks, pool, seed_state
from nca_wss._validation import NonFiniteError

from oracles import fd_relative_errors, mlp_loop, random_params


def direct_focal(logits, label, gamma):
    p = [math.exp(z) for z in logits]
    pt = p[label] / sum(p)
    return -((1 - pt) ** gamma) * math.log(pt)


# ---------------------------------------------------------------- focal loss


def test_focal_uniform_two_class():
    expected = 0.25 * math.log(2)
    assert focal_loss(np.array([0.0, 0.0]), 0, gamma=2.0) == pytest.approx(expected, abs=1e-15)
    assert direct_focal([0.0, 0.0], 0, 2.0) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 5.0])
def test_focal_saturated_correct(gamma):
    assert focal_loss(np.array([20.0, -20.0]), 0, gamma=gamma) < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_focal_gamma_zero_is_cross_entropy(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    z = np.array(logits)
    ce = -(z[label] - z.max() - np.log(np.exp(z - z.max()).sum()))
    assert abs(focal_loss(z, label, gamma=0.0) - ce) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=2, max_size=5), st.floats(0, 5), st.data())
def test_focal_nonnegative_and_matches_direct(logits, gamma, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    value = focal_loss(np.array(logits), label, gamma=gamma)
    assert value >= 0
    assert value == pytest.approx(direct_focal(logits, label, gamma), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0, 4.0])
def test_focal_monotone_in_pt(gamma):
    margins = np.linspace(-10, 10, 401)
    values = [focal_loss(np.array([m, 0.0]), 0, gamma=gamma) for m in margins]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_focal_logit_gradient_matches_fd():
    rng = np.random.default_rng(3)
    for _ in range(20):
        z = rng.normal(0, 3, 4)
        label = int(rng.integers(4))
        _, d = focal_terms(z[None], np.array([label]), gamma=2.0)
        for k in range(4):
            e = np.zeros(4)
            e[k] = 1e-6
            fd = (focal_loss(z + e, label) - focal_loss(z - e, label)) / 2e-6
            assert abs(fd - d[0, k]) < 1e-7


@pytest.mark.parametrize("label", [-1, 2, 1.0, "0"])
def test_focal_rejects_invalid_label(label):
    with pytest.raises(ValueError, match="label"):
        focal_loss(np.array([0.0, 1.0]), label)


def test_focal_rejects_negative_gamma():
    with pytest.raises(ValueError, match="gamma"):
        focal_loss(np.array([0.0, 1.0]), 0, gamma=-1.0)


# ---------------------------------------------------------------- backward


def test_backward_finite_differences_random_params():
    rng = np.random.default_rng(0)
    p = random_params(rng, n=4, h=4, hc=6, k=3, scale=0.4)
    image = rng.random((8, 8, 3))
    errors = fd_relative_errors(p, image, 1, 3, rng, count=25)
    assert errors.max() < 1e-4


def test_backward_finite_differences_without_state_perception():
    rng = np.random.default_rng(1)
    p = random_params(rng, n=4, h=4, hc=5, k=2, scale=0.4, with_state=False)
    errors = fd_relative_errors(p, rng.random((8, 8, 3)), 0, 3, rng, count=25)
    assert errors.max() < 1e-4


def test_backward_partial_fire_mask_finite_differences():
    rng = np.random.default_rng(2)
    p = random_params(rng, scale=0.4)
    image = rng.random((6, 6, 3))
    cfg = TrainConfig(steps=3, fire_rate=0.5, num_classes=3, nca_channels=4, nca_hidden=4, classifier_hidden=5)
    _, grads = backward(image, 2, p, cfg, 42)
    for name in p.names():
        idx = tuple(rng.integers(s) for s in getattr(p, name).shape)
        plus, minus = p.copy(), p.copy()
        getattr(plus, name)[idx] += 1e-5
        getattr(minus, name)[idx] -= 1e-5
        fd = (backward(image, 2, plus, cfg, 42)[0] - backward(image, 2, minus, cfg, 42)[0]) / 2e-5
        assert abs(fd - getattr(grads, name)[idx]) <= 1e-4 * max(abs(fd), 1e-3)


def test_zero_update_net_reduces_to_classifier():
    rng = np.random.default_rng(5)
    p = random_params(rng, scale=0.6)
    for name in ("update_w1", "update_b1", "update_w2", "update_b2"):
        getattr(p, name)[...] = 0.0
    image = rng.random((6, 6, 3))
    steps = 3
    cfg = TrainConfig(steps=steps, fire_rate=1.0, num_classes=3, nca_channels=4, nca_hidden=4, classifier_hidden=5)
    loss, grads = backward(image, 1, p, cfg, 0)

    pooled = pool(seed_state(image, 4))
    names = ("classifier_w1", "classifier_b1", "classifier_w2", "classifier_b2")

    def mlp_loss(arrays, x=pooled):
        return direct_focal(mlp_loop(x, *arrays), 1, 2.0)

    base = [getattr(p, n).copy() for n in names]
    assert loss == pytest.approx(mlp_loss(base), abs=1e-12)
    for i, name in enumerate(names):
        for idx in np.ndindex(base[i].shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i][idx] += 1e-6
            minus[i][idx] -= 1e-6
            fd = (mlp_loss(plus) - mlp_loss(minus)) / 2e-6
            assert abs(fd - getattr(grads, name)[idx]) < 1e-7

    # nothing reaches the kernels or the first update layer; the bias sees
    # d(loss)/d(pooled) once per step
    for name in ("kernels", "update_w1", "update_b1", "update_w2"):
        assert not getattr(grads, name).any()
    d_pooled = np.array([
        (mlp_loss(base, pooled + e) - mlp_loss(base, pooled - e)) / 2e-6 for e in np.eye(4) * 1e-6
    ])
    assert np.allclose(grads.update_b2, steps * d_pooled, atol=1e-7)


def test_backward_deterministic():
    rng = np.random.default_rng(8)
    p = random_params(rng, scale=0.3)
    image = rng.random((8, 8, 3))
    cfg = TrainConfig(steps=4, fire_rate=0.5, num_classes=3, nca_channels=4, nca_hidden=4, classifier_hidden=5)
    a = backward(image, 0, p, cfg, 9)
    b = backward(image, 0, p, cfg, 9)
    assert a[0] == b[0]
    assert all(np.array_equal(getattr(a[1], n), getattr(b[1], n)) for n in p.names())


def test_backward_rejects_label_outside_classes():
    rng = np.random.default_rng(0)
    p = random_params(rng)
    cfg = TrainConfig(steps=2, num_classes=3, nca_channels=4, nca_hidden=4, classifier_hidden=5)
    with pytest.raises(ValueError, match="label"):
        backward(rng.random((6, 6, 3)), 3, p, cfg, 0)


def test_batch_gradient_is_mean_of_single_gradients():
    rng = np.random.default_rng(4)
    p = random_params(rng, scale=0.3)
    images = rng.random((3, 6, 6, 3))
    labels = np.array([0, 2, 1])
    masks = fire_masks(1, 3, 6, 6, 0.5)
    states = np.stack([seed_state(im, 4) for im in images])
    batch_masks = np.repeat(masks[:, None], 3, axis=1)
    loss, grads, _ = loss_and_grad(states, labels, batch_masks, p)
    singles = [loss_and_grad(states[b : b + 1], labels[b : b + 1], masks[:, None], p) for b in range(3)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-12)
    for name in p.names():
        expected = np.mean([getattr(s[1], name) for s in singles], axis=0)
        assert np.allclose(getattr(grads, name), expected, atol=1e-13)


def test_nonfinite_forward_reports_step():
    rng = np.random.default_rng(0)
    p = random_params(rng)
    p.update_w2[...] = 1e250
    p.update_b2[...] = 1e250
    cfg = TrainConfig(steps=6, fire_rate=1.0, num_classes=3, nca_channels=4, nca_hidden=4, classifier_hidden=5)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError) as info:
        backward(rng.random((6, 6, 3)), 0, p, cfg, 0)
    assert info.value.step is not None and 1 <= info.value.step <= 6
