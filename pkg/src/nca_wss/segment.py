"""Binary masks from NCA feature maps: PCA projection followed by Otsu.

Pipeline for a final state ``S`` (H, W, n)::

    covariance -> leading_pc -> orient -> project -> otsu_threshold -> P > tau
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import ConvergenceError, DegenerateInputError

_TINY = 64 * np.finfo(np.float64).eps


def covariance(state):
    """Population covariance (normalised by H*W) of the per-cell feature vectors.

    Returns ``(sigma, mean)`` with sigma (n, n) and mean (n,).
    """
    state = np.asarray(state, dtype=np.float64)
    cells = state.reshape(-1, state.shape[-1])
    if cells.shape[0] < 2:
        raise ValueError("covariance needs at least two cells")
    mean = cells.mean(axis=0)
    centred = cells - mean
    sigma = centred.T @ centred / cells.shape[0]
    return (sigma + sigma.T) / 2.0, mean


def is_degenerate(sigma, mean=None):
    scale = max(1.0, float(np.max(np.abs(mean)))) if mean is not None else 1.0
    return float(np.trace(sigma)) <= (_TINY * scale) ** 2 * sigma.shape[0]


def leading_pc(sigma, seed=0, tol=1e-12, max_iter=10000):
    """Unit eigenvector of the largest eigenvalue of a symmetric PSD matrix.

    Power iteration from a seeded Gaussian start; stops once successive
    (unit) iterates differ by at most ``tol`` in Euclidean norm.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got {sigma.shape}")
    if not np.any(sigma):
        raise DegenerateInputError("covariance is the zero matrix")
    x = np.random.default_rng(seed).standard_normal(sigma.shape[0])
    x /= np.linalg.norm(x)
    for iteration in range(1, max_iter + 1):
        y = sigma @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            raise DegenerateInputError("start vector lies in the null space")
        y /= norm
        if y @ x < 0:
            y = -y
        if np.linalg.norm(y - x) <= tol:
            return y / np.linalg.norm(y)
        x = y
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", max_iter, last=x)


def project(state, v1, mean):
    """Centred projection ``(S_ij - mean) . v1`` as an (H, W) map."""
    state = np.asarray(state, dtype=np.float64)
    return (state - mean) @ v1


def _frame(values):
    return np.concatenate([values[0], values[-1], values[1:-1, 0], values[1:-1, -1]])


def orient(v1, state, mean):
    """Fix the eigenvector sign so the image border projects at or below the global mean.

    Background touches the border, so after orientation the cell is the
    above-threshold side. An exact tie falls back to making the largest
    absolute component of ``v1`` positive.
    """
    response = project(state, v1, mean)
    border, overall = _frame(response).mean(), response.mean()
    if border > overall:
        return -v1
    if border == overall:
        k = int(np.argmax(np.abs(v1)))
        return -v1 if v1[k] < 0 else v1
    return v1


def histogram_edges(values, bins):
    lo, hi = float(np.min(values)), float(np.max(values))
    return np.linspace(lo, hi, bins + 1)


def otsu_threshold(values, bins=256):
    """Bin edge minimising the within-class variance ``w1*var1 + w2*var2``.

    Candidates are the ``bins - 1`` interior edges of an equal-width histogram
    over ``[min, max]``; the lower class is ``values <= edge``. Class
    variances use the raw values (per-bin sums), not bin centres. Ties go to
    the lowest edge.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if values.size == 0 or values.min() == values.max():
        raise DegenerateInputError("cannot threshold a constant map")
    edges = histogram_edges(values, bins)
    inner = edges[1:-1]
    which = np.searchsorted(inner, values, side="left")  # bin k holds (edge_k, edge_k+1]
    shifted = values - values.mean()
    count = np.bincount(which, minlength=bins).astype(np.float64)
    total = np.bincount(which, weights=shifted, minlength=bins)
    square = np.bincount(which, weights=shifted * shifted, minlength=bins)
    n1 = np.cumsum(count)[:-1]
    s1 = np.cumsum(total)[:-1]
    q1 = np.cumsum(square)[:-1]
    n2 = count.sum() - n1
    s2 = total.sum() - s1
    q2 = square.sum() - q1
    with np.errstate(divide="ignore", invalid="ignore"):
        within = np.where(n1 > 0, q1 - s1 * s1 / n1, 0.0) + np.where(n2 > 0, q2 - s2 * s2 / n2, 0.0)
    within /= values.size
    return float(inner[int(np.argmin(within))])


@dataclass
class Segmentation:
    mask: np.ndarray  # (H, W) bool
    response: np.ndarray  # (H, W) float
    threshold: float
    degenerate: bool
    direction: np.ndarray | None = None


def largest_component(mask):
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def extract_mask(state, bins=256, keep_largest=False, seed=0):
    """Binary foreground mask of one NCA state; degenerate inputs give an empty mask."""
    state = np.asarray(state, dtype=np.float64)
    shape = state.shape[:2]
    empty = Segmentation(np.zeros(shape, dtype=bool), np.zeros(shape), float("nan"), True, None)
    sigma, mean = covariance(state)
    if is_degenerate(sigma, mean):
        return empty
    try:
        v1 = leading_pc(sigma, seed=seed)
    except DegenerateInputError:
        return empty
    except ConvergenceError as exc:
        # near-equal top eigenvalues; the last iterate is still a top-subspace direction
        v1 = exc.last / np.linalg.norm(exc.last)
    v1 = orient(v1, state, mean)
    response = project(state, v1, mean)
    try:
        tau = otsu_threshold(response, bins)
    except DegenerateInputError:
        return Segmentation(np.zeros(shape, dtype=bool), response, float("nan"), True, v1)
    mask = response > tau
    if keep_largest:
        mask = largest_component(mask)
    return Segmentation(mask, response, tau, False, v1)


def overlay(image, mask, color=(1.0, 0.0, 0.0)):
    """RGB uint8 image with the mask boundary drawn in ``color``."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0).copy()
    mask = np.asarray(mask, dtype=bool)
    boundary = mask & ~ndimage.binary_erosion(mask, border_value=0)
    image[boundary] = color
    return np.round(image * 255.0).astype(np.uint8)


def save_response(path, response):
    """Dump a response map as raw little-endian float64 plus a ``.json`` header sidecar."""
    path = Path(path)
    response = np.ascontiguousarray(response, dtype="<f8")
    path.write_bytes(response.tobytes())
    header = {"dtype": "float64", "byteorder": "little", "height": response.shape[0], "width": response.shape[1]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header) + "\n")


def load_response(path):
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    return data.reshape(header["height"], header["width"]).copy()
