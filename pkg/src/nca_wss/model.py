"""Neural cellular automaton backbone and classifier head.

Every array op here works on state tensors of shape ``(..., H, W, n)`` so the
same code serves single images and batches. Channels 0..2 of the state hold
the RGB image; the remaining channels start at zero.

Perception uses two learnable depthwise 3x3 kernels with replicate padding.
Inside :func:`step` the two convolutions and the first dense layer are folded
into a single ``(9n, h)`` matrix applied to each cell's 3x3 neighbourhood,
which is the same linear map as ``perceive(...) @ update_w1`` but costs one
matmul instead of eighteen elementwise passes.
"""

from dataclasses import dataclass, fields

import numpy as np

from ._validation import NonFiniteError, check_fire_rate, check_image, check_state

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()

# row/column offsets into the replicate-padded grid, neighbourhood order o = 3*di + dj
_DI = np.repeat(np.arange(3), 3)
_DJ = np.tile(np.arange(3), 3)
_CENTER = 4


@dataclass
class NcaParams:
    """Learnable weights. Dense layers act on row vectors: ``y = x @ w + b``."""

    kernels: np.ndarray  # (2, 3, 3, n)
    update_w1: np.ndarray  # (3n, h), or (2n, h) without the raw-state block
    update_b1: np.ndarray  # (h,)
    update_w2: np.ndarray  # (h, n)
    update_b2: np.ndarray  # (n,)
    classifier_w1: np.ndarray  # (n, h_cls)
    classifier_b1: np.ndarray  # (h_cls,)
    classifier_w2: np.ndarray  # (h_cls, num_classes)
    classifier_b2: np.ndarray  # (num_classes,)

    def __post_init__(self):
        for name in self.names():
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))

    @property
    def channels(self):
        return self.kernels.shape[-1]

    @property
    def hidden(self):
        return self.update_b1.shape[0]

    @property
    def classifier_hidden(self):
        return self.classifier_b1.shape[0]

    @property
    def num_classes(self):
        return self.classifier_b2.shape[0]

    @property
    def perceive_state(self):
        return self.update_w1.shape[0] == 3 * self.channels

    def validate(self):
        n, h = self.kernels.shape[-1], self.update_b1.shape[0]
        hc, k = self.classifier_b1.shape[0], self.classifier_b2.shape[0]
        expected = {
            "kernels": (2, 3, 3, n),
            "update_b1": (h,),
            "update_w2": (h, n),
            "update_b2": (n,),
            "classifier_w1": (n, hc),
            "classifier_b1": (hc,),
            "classifier_w2": (hc, k),
            "classifier_b2": (k,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.update_w1.shape not in ((3 * n, h), (2 * n, h)):
            raise ValueError(f"update_w1 has shape {self.update_w1.shape}, expected ({3 * n}, {h}) or ({2 * n}, {h})")

    def as_dict(self):
        return {name: getattr(self, name) for name in self.names()}

    @classmethod
    def from_dict(cls, arrays):
        return cls(**{name: arrays[name] for name in cls.names()})

    def copy(self):
        return NcaParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def zeros_like(self):
        return NcaParams(**{k: np.zeros_like(v) for k, v in self.as_dict().items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())

    def size(self):
        return sum(v.size for v in self.as_dict().values())


# Gradients share the parameter layout.
GradientSet = NcaParams


def init_params(channels=32, hidden=32, classifier_hidden=128, num_classes=2, perceive_state=True, seed=0):
    """Sobel kernels, uniform(+-1/sqrt(fan_in)) dense weights, zero biases."""
    if channels < 4:
        raise ValueError("channels must be >= 4")
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    kernels = np.stack([np.repeat(k[:, :, None], channels, axis=2) for k in (SOBEL_X, SOBEL_Y)])
    n_in = (3 if perceive_state else 2) * channels
    return NcaParams(
        kernels=kernels,
        update_w1=dense(n_in, hidden),
        update_b1=np.zeros(hidden),
        update_w2=dense(hidden, channels),
        update_b2=np.zeros(channels),
        classifier_w1=dense(channels, classifier_hidden),
        classifier_b1=np.zeros(classifier_hidden),
        classifier_w2=dense(classifier_hidden, num_classes),
        classifier_b2=np.zeros(num_classes),
    )


def seed_state(image, channels):
    """Place an RGB image in channels 0..2 of a zeroed (H, W, channels) grid."""
    if channels < 4:
        raise ValueError(f"channel count must be >= 4, got {channels}")
    image = check_image(image)
    state = np.zeros(image.shape[:2] + (channels,))
    state[..., :3] = image
    return state


def seed_states(images, channels):
    images = np.asarray(images, dtype=np.float64)
    states = np.zeros(images.shape[:-1] + (channels,))
    states[..., :3] = images
    return states


def _pad(state):
    widths = [(0, 0)] * (state.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(state, widths, mode="edge")


def depthwise_conv(state, kernel):
    """Replicate-padded 3x3 cross-correlation, one kernel slice per channel."""
    padded = _pad(state)
    h, w = state.shape[-3:-1]
    out = np.zeros_like(state)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[..., di : di + h, dj : dj + w, :]
    return out


def perceive(state, params):
    """Concatenate [state, K1*state, K2*state] along channels (3n wide)."""
    state = np.asarray(state, dtype=np.float64)
    parts = [depthwise_conv(state, params.kernels[0]), depthwise_conv(state, params.kernels[1])]
    if params.perceive_state:
        parts.insert(0, state)
    return np.concatenate(parts, axis=-1)


def fused_update_weights(params):
    """Fold both kernels into update_w1, giving a (9n, h) neighbourhood matrix."""
    n = params.channels
    w1 = params.update_w1
    if params.perceive_state:
        w_state, w_k1, w_k2 = w1[:n], w1[n : 2 * n], w1[2 * n :]
    else:
        w_state, (w_k1, w_k2) = None, (w1[:n], w1[n:])
    k = params.kernels.reshape(2, 9, n)
    fused = k[0][:, :, None] * w_k1 + k[1][:, :, None] * w_k2
    if w_state is not None:
        fused[_CENTER] += w_state
    return fused.reshape(9 * n, -1)


def unfuse_gradient(d_fused, params):
    """Chain rule from d(fused matrix) back to (d kernels, d update_w1)."""
    n = params.channels
    d_fused = d_fused.reshape(9, n, -1)
    w1 = params.update_w1
    off = n if params.perceive_state else 0
    w_k1, w_k2 = w1[off : off + n], w1[off + n : off + 2 * n]
    k = params.kernels.reshape(2, 9, n)
    d_kernels = np.stack([np.einsum("ocj,cj->oc", d_fused, w_k1), np.einsum("ocj,cj->oc", d_fused, w_k2)])
    d_w1 = np.empty_like(w1)
    if params.perceive_state:
        d_w1[:n] = d_fused[_CENTER]
    d_w1[off : off + n] = np.einsum("oc,ocj->cj", k[0], d_fused)
    d_w1[off + n :] = np.einsum("oc,ocj->cj", k[1], d_fused)
    return d_kernels.reshape(2, 3, 3, n), d_w1


def _flat_hood_index(rows, shape):
    """Flat row indices into the padded grid, (len(rows), 9), for flat cell indices ``rows``."""
    h, w = shape[-3:-1]
    cells = h * w
    b, rem = np.divmod(rows, cells)
    i, j = np.divmod(rem, w)
    base = b * ((h + 2) * (w + 2)) + i * (w + 2) + j
    return base[:, None] + (_DI * (w + 2) + _DJ)


def gather_neighbourhoods(state, rows):
    """(len(rows), 9n) neighbourhoods for flat cell indices over the grid(s) of ``state``."""
    n = state.shape[-1]
    padded = _pad(state).reshape(-1, n)
    index = _flat_hood_index(rows, state.shape)
    return np.take(padded, index.ravel(), axis=0).reshape(len(rows), 9 * n)


def scatter_neighbourhoods(d_hood, rows, shape):
    """Adjoint of :func:`gather_neighbourhoods`, folding padding back onto edges."""
    n = shape[-1]
    h, w = shape[-3:-1]
    batch = int(np.prod(shape[:-3], dtype=int))
    index = _flat_hood_index(rows, shape)
    d_hood = d_hood.reshape(len(rows), 9, n)
    d_pad = np.zeros((batch * (h + 2) * (w + 2), n))
    for o in range(9):
        # cells are distinct, so indices are unique within one offset
        d_pad[index[:, o]] += d_hood[:, o]
    d_pad = d_pad.reshape(batch, h + 2, w + 2, n)
    d_pad[:, 1] += d_pad[:, 0]
    d_pad[:, h] += d_pad[:, h + 1]
    d_pad[:, :, 1] += d_pad[:, :, 0]
    d_pad[:, :, w] += d_pad[:, :, w + 1]
    return d_pad[:, 1 : h + 1, 1 : w + 1].reshape(shape)


def _update_cells(state, params, fused, fire_mask, scale=1.0):
    """Apply the residual update to fired cells; returns (new state, rows, pre-activations)."""
    n = state.shape[-1]
    rows = np.flatnonzero(fire_mask)
    z = gather_neighbourhoods(state, rows) @ fused + params.update_b1
    update = np.maximum(z, 0.0) @ params.update_w2 + params.update_b2
    if scale != 1.0:
        update *= scale
    out = state.copy()
    out.reshape(-1, n)[rows] += update
    return out, rows, z


def step(state, params, fire_mask):
    """One stochastic NCA update: ``state + fire_mask * update(perceive(state))``."""
    state = check_state(state)
    fire_mask = np.asarray(fire_mask, dtype=bool)
    if fire_mask.shape != state.shape[:-1]:
        raise ValueError(f"fire_mask shape {fire_mask.shape} does not match state grid {state.shape[:-1]}")
    if state.shape[-1] != params.channels:
        raise ValueError(f"state has {state.shape[-1]} channels, params expect {params.channels}")
    out, _, _ = _update_cells(state, params, fused_update_weights(params), fire_mask)
    return out


def fire_masks(rng_seed, steps, height, width, fire_rate):
    """(steps, H, W) boolean masks, each entry Bernoulli(fire_rate) from one seeded generator."""
    fire_rate = check_fire_rate(fire_rate)
    rng = np.random.default_rng(rng_seed)
    return rng.random((steps, height, width)) < fire_rate


@dataclass
class RolloutTrace:
    states: list  # S_0 ... S_T
    fire_masks: np.ndarray  # (T, H, W) bool


def run_steps(state, params, masks, keep=None, check_finite=True, scale=1.0):
    """Iterate :func:`step` over ``masks`` (shape (T, ..., H, W)).

    Returns ``(final_state, kept)`` where ``kept`` maps each requested step
    index to the state after that many updates. ``scale`` multiplies every
    update (used by the expected-update inference mode).
    """
    fused = fused_update_weights(params)
    keep = set() if keep is None else {k % (len(masks) + 1) for k in keep}
    kept = {0: state} if 0 in keep else {}
    for t, mask in enumerate(masks):
        state, _, _ = _update_cells(state, params, fused, mask, scale)
        if check_finite and not np.all(np.isfinite(state)):
            raise NonFiniteError(f"non-finite state after step {t + 1}", step=t + 1)
        if t + 1 in keep:
            kept[t + 1] = state
    return state, kept


def rollout(image, params, steps, fire_rate, rng_seed):
    """Seed the grid with ``image`` and run ``steps`` stochastic updates, keeping every state."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state = seed_state(image, params.channels)
    masks = fire_masks(rng_seed, steps, *state.shape[:2], fire_rate)
    _, kept = run_steps(state, params, masks, keep=range(steps + 1))
    return RolloutTrace(states=[kept[t] for t in range(steps + 1)], fire_masks=masks)


def pool(state):
    """Spatial average: (..., H, W, n) -> (..., n)."""
    return np.asarray(state, dtype=np.float64).mean(axis=(-3, -2))


def classify(pooled, params):
    hidden = np.maximum(pooled @ params.classifier_w1 + params.classifier_b1, 0.0)
    return hidden @ params.classifier_w2 + params.classifier_b2


def forward(image, params, steps, fire_rate, rng_seed):
    """Return ``(logits, S_T)`` for one image."""
    trace = rollout(image, params, steps, fire_rate, rng_seed)
    final = trace.states[-1]
    return classify(pool(final), params), final


INFERENCE_MODES = ("expected", "stochastic")


def forward_batch(images, params, steps, fire_rate, seeds, state_index=-1, mode="stochastic"):
    """Batched :func:`forward`; image ``b`` uses masks drawn from ``seeds[b]``.

    ``mode="expected"`` replaces the Bernoulli gate by its mean: every cell
    updates every step with the update scaled by ``fire_rate`` (seeds are
    then irrelevant). Returns ``(logits, final_states, seg_states)`` where
    ``seg_states`` are the states after ``state_index`` updates (``-1``
    means the final state).
    """
    images = np.asarray(images, dtype=np.float64)
    states = seed_states(images, params.channels)
    h, w = images.shape[1:3]
    if mode == "expected":
        fire_rate = check_fire_rate(fire_rate)
        masks = np.ones((steps, len(images), h, w), dtype=bool)
        scale = fire_rate
    elif mode == "stochastic":
        masks = np.stack([fire_masks(s, steps, h, w, fire_rate) for s in seeds], axis=1)
        scale = 1.0
    else:
        raise ValueError(f"mode must be one of {INFERENCE_MODES}, got {mode!r}")
    final, kept = run_steps(states, params, masks, keep=[state_index], scale=scale)
    seg = kept[state_index % (steps + 1)]
    return classify(pool(final), params), final, seg


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
