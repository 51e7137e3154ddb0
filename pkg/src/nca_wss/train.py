"""Augmentation, cross-validation folds and the mini-batch training loop."""

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import NonFiniteError, check_images
from .checkpoint import save_checkpoint
from .data import load_arrays
from .grad import add_into, loss_and_grad
from .model import fire_masks, forward_batch, init_params, seed_states
from .optim import adam_step, effective_lr, init_adam

log = logging.getLogger(__name__)

DIHEDRAL_ORDER = 8


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, epoch, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


def dihedral(image, element):
    """Apply D4 element ``element`` (0..7): ``element % 4`` quarter turns, then a
    horizontal flip if ``element >= 4``."""
    out = np.rot90(image, element % 4, axes=(0, 1))
    if element >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(image, element):
    out = image[:, ::-1] if element >= 4 else image
    return np.ascontiguousarray(np.rot90(out, -(element % 4), axes=(0, 1)))


def augment(image, rng, return_element=False):
    """Random lossless rotation/flip drawn uniformly from the 8 symmetries of the square."""
    image = np.asarray(image)
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"augment needs a square image, got {image.shape[:2]}")
    element = int(rng.integers(DIHEDRAL_ORDER))
    out = dihedral(image, element)
    return (out, element) if return_element else out


def fold_indices(n_samples, folds, seed):
    """Seeded shuffle split into ``folds`` disjoint, exhaustive index arrays."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n_samples < folds:
        raise ValueError(f"cannot split {n_samples} samples into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def sample_seed(seed, key):
    """Stable per-sample seed derived from a run seed and a sample id or index."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(str(key).encode())]).generate_state(1)[0])


def predict_logits(images, params, config, seeds, chunk=None):
    chunk = chunk or config.chunk_size
    out = []
    for start in range(0, len(images), chunk):
        logits, _, _ = forward_batch(
            images[start : start + chunk], params, config.steps, config.fire_rate,
            seeds[start : start + chunk], mode=config.inference_mode,
        )
        out.append(logits)
    return np.concatenate(out)


@dataclass
class TrainResult:
    params: object
    log: list
    adam: object = None
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def __iter__(self):
        # allows ``params, log = train_fold(...)``
        return iter((self.params, self.log))


def _batch_gradient(params, images, labels, mask_seeds, config, pool):
    states = seed_states(images, params.channels)
    h, w = images.shape[1:3]
    masks = np.stack([fire_masks(s, config.steps, h, w, config.fire_rate) for s in mask_seeds], axis=1)
    bounds = range(0, len(images), config.chunk_size)

    def run(start):
        stop = start + config.chunk_size
        return loss_and_grad(
            states[start:stop],
            labels[start:stop],
            masks[:, start:stop],
            params,
            config.focal_gamma,
            config.focal_alpha,
            reduction="sum",
        )

    results = list(pool.map(run, bounds)) if pool is not None else [run(b) for b in bounds]
    total_loss, grads, logits = 0.0, params.zeros_like(), []
    for loss, g, lg in results:  # fixed order keeps the reduction reproducible
        total_loss += loss
        add_into(grads, g)
        logits.append(lg)
    return total_loss, grads, np.concatenate(logits)


def train_arrays(images, labels, config, val=None, out_dir=None, log_path=None, jobs=1, metadata=None):
    """Train from in-memory arrays: images (N, S, S, 3) in [0, 1], integer labels.

    ``val`` is an optional ``(images, labels)`` pair scored after the last
    epoch. Returns a :class:`TrainResult`.
    """
    images = check_images(images)
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise ValueError("need one label per image")
    if np.any(labels < 0) or np.any(labels >= config.num_classes):
        raise ValueError(f"labels must lie in [0, {config.num_classes})")

    rng = np.random.default_rng(config.seed)
    params = init_params(
        config.nca_channels,
        config.nca_hidden,
        config.classifier_hidden,
        config.num_classes,
        config.perceive_state,
        seed=int(rng.integers(2**32)),
    )
    adam = init_adam(params)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    history = []
    log_file = open(log_path, "a") if log_path else None
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            perm = rng.permutation(len(images))
            epoch_loss, correct = 0.0, 0
            for start in range(0, len(images), config.batch_size):
                idx = perm[start : start + config.batch_size]
                if config.augment:
                    elements = rng.integers(DIHEDRAL_ORDER, size=len(idx))
                else:
                    elements = np.zeros(len(idx), dtype=int)
                mask_seeds = rng.integers(2**63, size=len(idx))
                batch = np.stack([dihedral(images[i], e) for i, e in zip(idx, elements)])
                try:
                    loss, grads, logits = _batch_gradient(params, batch, labels[idx], mask_seeds, config, pool)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}: {exc}", epoch, exc.step) from exc
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"epoch {epoch}: non-finite loss", epoch)
                for name in params.names():
                    getattr(grads, name).__itruediv__(len(idx))
                params, adam = adam_step(params, grads, adam, config)
                epoch_loss += loss
                correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
            record = {
                "epoch": epoch,
                "step": adam.step,
                "lr": effective_lr(config, adam.step),
                "loss": epoch_loss / len(images),
                "accuracy": correct / len(images),
            }
            history.append(record)
            log.info("epoch %d loss %.5f acc %.3f", epoch, record["loss"], record["accuracy"])
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                meta = dict(metadata or {}, epoch=epoch)
                save_checkpoint(Path(out_dir) / f"epoch_{epoch:04d}.ckpt", params, config, meta, adam)

        if val is not None and len(val[0]):
            val_images, val_labels = check_images(val[0]), np.asarray(val[1])
            seeds = [sample_seed(config.seed, i) for i in range(len(val_images))]
            pred = np.argmax(predict_logits(val_images, params, config, seeds), axis=1)
            record = {"epoch": config.epochs, "step": adam.step, "split": "val",
                      "accuracy": float(np.mean(pred == val_labels))}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, history, adam)


def train_fold(manifest, fold_index, config, out_dir=None, jobs=1):
    """Train on every fold except ``fold_index`` (``None`` trains on all samples).

    Returns a :class:`TrainResult`; with ``out_dir`` set, the log goes to
    ``train_log.jsonl`` there and periodic checkpoints are written.
    """
    entries = manifest.entries
    missing = [e.id for e in entries if e.label is None]
    if missing:
        raise ValueError(f"{len(missing)} samples lack class labels (first: {missing[0]})")
    bad = [e.id for e in entries if not 0 <= e.label < config.num_classes]
    if bad:
        raise ValueError(f"label outside [0, {config.num_classes}) for sample {bad[0]}")
    if fold_index is None:
        train_idx, val_idx = np.arange(len(entries)), np.array([], dtype=int)
    else:
        parts = fold_indices(len(entries), config.folds, config.seed)
        if not 0 <= fold_index < config.folds:
            raise ValueError(f"fold_index must be in [0, {config.folds})")
        val_idx = parts[fold_index]
        train_idx = np.sort(np.concatenate([p for k, p in enumerate(parts) if k != fold_index]))
    if len(train_idx) == 0 or (fold_index is not None and len(val_idx) == 0):
        raise ValueError("empty fold")

    train_set = manifest.subset(train_idx)
    images, labels, train_ids = load_arrays(train_set, config.image_size)
    val = None
    val_ids = []
    if len(val_idx):
        val_images, val_labels, val_ids = load_arrays(manifest.subset(val_idx), config.image_size)
        val = (val_images, val_labels)
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "train_log.jsonl"
        log_path.unlink(missing_ok=True)
    metadata = {"dataset_id": manifest.dataset_id, "fold": fold_index, "class_names": manifest.class_names}
    result = train_arrays(images, labels, config, val=val, out_dir=out_dir, log_path=log_path, jobs=jobs,
                          metadata=metadata)
    result.train_ids, result.val_ids = train_ids, val_ids
    return result
