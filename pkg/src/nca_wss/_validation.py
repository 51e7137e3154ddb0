"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input carries no variance to work with."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver hits its iteration cap."""

    def __init__(self, message, iterations, last=None):
        super().__init__(message)
        self.iterations = iterations
        self.last = last


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up; ``step`` is the rollout step (or None)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def check_image(image, name="image"):
    """Return ``image`` as a float64 (H, W, 3) array with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError(f"{name} contains non-finite values")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return image


def check_images(images, name="X"):
    """Batch version of :func:`check_image`; returns (N, H, W, 3) float64."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (N, H, W, 3), got {images.shape}")
    if images.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(images)):
        raise ValueError(f"{name} contains non-finite values")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return images


def check_state(state, name="state"):
    state = np.asarray(state, dtype=np.float64)
    if state.ndim < 3:
        raise ValueError(f"{name} must have shape (..., H, W, n), got {state.shape}")
    h, w, n = state.shape[-3:]
    if h < 3 or w < 3:
        raise ValueError(f"{name} grid must be at least 3x3, got {h}x{w}")
    if n < 4:
        raise ValueError(f"{name} needs at least 4 channels, got {n}")
    return state


def check_fire_rate(fire_rate):
    fire_rate = float(fire_rate)
    if not 0.0 < fire_rate <= 1.0:
        raise ValueError(f"fire_rate must be in (0, 1], got {fire_rate}")
    return fire_rate


def check_mask_pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth
