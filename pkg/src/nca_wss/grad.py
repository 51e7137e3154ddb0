"""Focal loss and reverse-mode gradients through the unrolled NCA rollout.

Fire masks are sampled up front and held fixed while differentiating, so the
gradient is exact for the sampled computation graph.
"""

import numpy as np

from ._validation import NonFiniteError
from .model import (
    NcaParams,
    _update_cells,
    fire_masks,
    fused_update_weights,
    gather_neighbourhoods,
    pool,
    scatter_neighbourhoods,
    seed_state,
    unfuse_gradient,
)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def focal_terms(logits, labels, gamma=2.0, alpha=1.0):
    """Per-sample focal losses and their gradients w.r.t. the logits.

    ``logits`` is (B, k), ``labels`` is (B,). The loss is
    ``-alpha * (1 - p_t)**gamma * log(p_t)`` with ``p_t`` the softmax
    probability of the true class.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    k = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("one label per row of logits is required")
    if not np.issubdtype(labels.dtype, np.integer) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must be integers in [0, {k})")
    rows = np.arange(len(labels))
    log_p = _log_softmax(logits)
    p = np.exp(log_p)
    log_pt = log_p[rows, labels]
    pt = p[rows, labels]
    miss = -np.expm1(log_pt)  # 1 - p_t without cancellation
    if gamma == 0:
        losses = -log_pt
        coef = -np.ones_like(log_pt)
    else:
        weight = miss**gamma
        losses = -weight * log_pt
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(miss > 0, gamma * miss ** (gamma - 1.0) * pt * log_pt, 0.0)
        coef = slope - weight
    onehot = np.zeros_like(logits)
    onehot[rows, labels] = 1.0
    d_logits = alpha * coef[:, None] * (onehot - p)
    return alpha * losses, d_logits


def focal_loss(logits, label, gamma=2.0, alpha=1.0):
    """Focal loss of a single logit vector; ``gamma = 0`` gives cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("focal_loss expects a single logit vector")
    if not isinstance(label, (int, np.integer)) or not 0 <= label < logits.shape[0]:
        raise ValueError(f"invalid label {label!r} for {logits.shape[0]} classes")
    losses, _ = focal_terms(logits[None], np.array([label]), gamma, alpha)
    return float(losses[0])


def loss_and_grad(states, labels, masks, params, gamma=2.0, alpha=1.0, reduction="mean"):
    """Loss and parameter gradients for a batch of seeded states.

    states: (B, H, W, n) initial grids; labels: (B,); masks: (T, B, H, W).
    Returns ``(loss, grads, logits)`` where ``loss`` is reduced over the
    batch by ``reduction`` ("mean" or "sum").
    """
    states = np.asarray(states, dtype=np.float64)
    labels = np.asarray(labels)
    batch, height, width, n = states.shape
    fused = fused_update_weights(params)

    tape = []
    state = states
    for t, mask in enumerate(masks):
        new, rows, z = _update_cells(state, params, fused, mask)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"non-finite state after step {t + 1}", step=t + 1)
        tape.append((state, rows, z))
        state = new

    pooled = pool(state)
    pre = pooled @ params.classifier_w1 + params.classifier_b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.classifier_w2 + params.classifier_b2
    losses, d_logits = focal_terms(logits, labels, gamma, alpha)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("non-finite loss", step=len(masks))
    scale = 1.0 / batch if reduction == "mean" else 1.0
    d_logits = d_logits * scale

    grads = params.zeros_like()
    grads.classifier_w2 = hidden.T @ d_logits
    grads.classifier_b2 = d_logits.sum(axis=0)
    d_pre = (d_logits @ params.classifier_w2.T) * (pre > 0)
    grads.classifier_w1 = pooled.T @ d_pre
    grads.classifier_b1 = d_pre.sum(axis=0)
    d_pooled = d_pre @ params.classifier_w1.T

    d_state = np.broadcast_to(d_pooled[:, None, None, :] / (height * width), states.shape).copy()
    d_fused = np.zeros_like(fused)
    for t in range(len(tape) - 1, -1, -1):
        prev, rows, z = tape[t]
        d_update = d_state.reshape(-1, n)[rows]
        grads.update_w2 += np.maximum(z, 0.0).T @ d_update
        grads.update_b2 += d_update.sum(axis=0)
        d_z = (d_update @ params.update_w2.T) * (z > 0)
        grads.update_b1 += d_z.sum(axis=0)
        d_fused += gather_neighbourhoods(prev, rows).T @ d_z
        d_state += scatter_neighbourhoods(d_z @ fused.T, rows, prev.shape)
        if not np.all(np.isfinite(d_state)):
            raise NonFiniteError(f"non-finite gradient at step {t + 1}", step=t + 1)
    grads.kernels, grads.update_w1 = unfuse_gradient(d_fused, params)

    loss = losses.mean() if reduction == "mean" else losses.sum()
    return float(loss), grads, logits


def backward(image, label, params, config, rng_seed):
    """Focal loss of one image and its exact gradient w.r.t. every parameter."""
    state = seed_state(image, params.channels)
    masks = fire_masks(rng_seed, config.steps, *state.shape[:2], config.fire_rate)
    if not 0 <= int(label) < params.num_classes:
        raise ValueError(f"label {label} outside [0, {params.num_classes})")
    loss, grads, _ = loss_and_grad(
        state[None], np.array([int(label)]), masks[:, None], params, config.focal_gamma, config.focal_alpha
    )
    return loss, grads


def add_into(total: NcaParams, other: NcaParams):
    for name in NcaParams.names():
        getattr(total, name).__iadd__(getattr(other, name))
    return total
