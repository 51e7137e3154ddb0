import numpy as np
import pytest

from nca_wss.config import TrainConfig
from nca_wss.model import NcaParams
from nca_wss.optim import effective_lr, init_adam, adam_step

from oracles import adam_scalar_reference, random_params


def scalar_params(x):
    """NcaParams whose first kernel entry plays the role of a scalar parameter."""
    p = random_params(np.random.default_rng(0))
    p.kernels[0, 0, 0, 0] = x
    return p


def test_zero_gradient_leaves_params_and_decays_moments():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    state = init_adam(p)
    state.m.update_w1[...] = 0.5
    state.v.update_w1[...] = 0.25
    cfg = TrainConfig()
    new_p, new_state = adam_step(p, p.zeros_like(), state, cfg)
    for name in NcaParams.names():
        assert np.array_equal(getattr(new_p, name), getattr(p, name)) or name == "update_w1"
    assert np.allclose(new_state.m.update_w1, 0.45)
    assert np.allclose(new_state.v.update_w1, 0.25 * 0.999)
    assert new_state.step == 1


def test_zero_gradient_from_fresh_state_never_moves():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    state = init_adam(p)
    cfg = TrainConfig(learning_rate=0.1)
    current = p
    for _ in range(5):
        current, state = adam_step(current, p.zeros_like(), state, cfg)
    assert all(np.array_equal(getattr(current, n), getattr(p, n)) for n in NcaParams.names())


@pytest.mark.parametrize("g,k,decay", [(0.3, 1, 1.0), (-2.0, 10, 1.0), (1e-3, 25, 0.9999), (5.0, 7, 0.9)])
def test_scalar_matches_reference(g, k, decay):
    cfg = TrainConfig(learning_rate=1e-2, lr_decay=decay)
    p = scalar_params(1.5)
    grads = p.zeros_like()
    grads.kernels[0, 0, 0, 0] = g
    state = init_adam(p)
    for _ in range(k):
        p, state = adam_step(p, grads, state, cfg)
    assert p.kernels[0, 0, 0, 0] == adam_scalar_reference(1.5, g, k, 1e-2, decay=decay)


def test_decay_off_keeps_learning_rate_constant():
    cfg = TrainConfig(learning_rate=3e-4, lr_decay=1.0)
    assert {effective_lr(cfg, s) for s in (0, 1, 100, 10**6)} == {3e-4}


def test_effective_lr_decays_per_step():
    cfg = TrainConfig(learning_rate=1e-4, lr_decay=0.9999)
    assert effective_lr(cfg, 0) == 1e-4
    assert effective_lr(cfg, 10000) == pytest.approx(1e-4 * 0.9999**10000, rel=1e-14)


def test_opposite_gradients_give_opposite_first_steps():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    g = random_params(rng)
    neg = NcaParams(**{n: -a for n, a in g.as_dict().items()})
    cfg = TrainConfig(learning_rate=1e-3)
    up, _ = adam_step(p, g, init_adam(p), cfg)
    down, _ = adam_step(p, neg, init_adam(p), cfg)
    for name in NcaParams.names():
        d_up = getattr(up, name) - getattr(p, name)
        d_down = getattr(down, name) - getattr(p, name)
        assert np.allclose(d_up, -d_down, rtol=1e-12, atol=1e-18)


def test_inputs_are_not_mutated():
    rng = np.random.default_rng(4)
    p = random_params(rng)
    g = random_params(rng)
    state = init_adam(p)
    before = p.copy()
    adam_step(p, g, state, TrainConfig())
    assert all(np.array_equal(getattr(p, n), getattr(before, n)) for n in NcaParams.names())
    assert state.step == 0 and not state.m.update_w1.any()


def test_shape_mismatch_raises():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    g = p.zeros_like()
    g.update_b2 = np.zeros(7)
    with pytest.raises(ValueError, match="update_b2"):
        adam_step(p, g, init_adam(p), TrainConfig())
