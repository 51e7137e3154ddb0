"""scikit-learn style wrappers around the functional API.

``NCAClassifier`` is fitted on image-level labels only. Its ``transform``
returns the final NCA states, which ``NCAMaskExtractor`` turns into binary
masks, so the two compose in a :class:`sklearn.pipeline.Pipeline`.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_state
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .model import forward_batch, softmax
from .segment import extract_mask
from .train import sample_seed, train_arrays


class NCAClassifier(ClassifierMixin, BaseEstimator):
    """Neural cellular automaton image classifier.

    Parameters mirror :class:`~nca_wss.config.TrainConfig`; ``random_state``
    seeds initialisation, batching, augmentation and fire masks.
    """

    def __init__(
        self,
        nca_channels=32,
        nca_hidden=32,
        steps=32,
        classifier_hidden=128,
        fire_rate=0.5,
        inference_mode="expected",
        perceive_state=True,
        learning_rate=1e-4,
        adam_beta1=0.9,
        adam_beta2=0.999,
        adam_epsilon=1e-8,
        lr_decay=0.9999,
        batch_size=32,
        epochs=256,
        focal_gamma=2.0,
        focal_alpha=1.0,
        augment=True,
        chunk_size=8,
        otsu_bins=256,
        seg_state_index=-1,
        random_state=0,
        n_jobs=1,
    ):
        self.nca_channels = nca_channels
        self.nca_hidden = nca_hidden
        self.steps = steps
        self.classifier_hidden = classifier_hidden
        self.fire_rate = fire_rate
        self.inference_mode = inference_mode
        self.perceive_state = perceive_state
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_epsilon = adam_epsilon
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.focal_gamma = focal_gamma
        self.focal_alpha = focal_alpha
        self.augment = augment
        self.chunk_size = chunk_size
        self.otsu_bins = otsu_bins
        self.seg_state_index = seg_state_index
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _make_config(self, num_classes, image_size):
        params = self.get_params()
        seed = params.pop("random_state")
        params.pop("n_jobs")
        return TrainConfig(num_classes=num_classes, image_size=image_size, seed=seed if seed is not None else 0,
                           **params)

    def fit(self, X, y):
        X = check_images(X)
        if X.shape[1] != X.shape[2]:
            raise ValueError("images must be square")
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.config_ = self._make_config(len(self.classes_), X.shape[1])
        result = train_arrays(X, encoded, self.config_, jobs=self.n_jobs)
        self.params_ = result.params
        self.history_ = result.log
        self.optimizer_state_ = result.adam
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X)
        cfg = self.config_
        seeds = [sample_seed(cfg.seed, i) for i in range(len(X))]
        logits, states, seg = [], [], []
        for start in range(0, len(X), cfg.chunk_size):
            lg, fin, sg = forward_batch(X[start : start + cfg.chunk_size], self.params_, cfg.steps, cfg.fire_rate,
                                        seeds[start : start + cfg.chunk_size], cfg.seg_state_index,
                                        cfg.inference_mode)
            logits.append(lg)
            states.append(fin)
            seg.append(sg)
        return np.concatenate(logits), np.concatenate(states), np.concatenate(seg)

    def decision_logits(self, X):
        return self._forward(X)[0]

    def predict_proba(self, X):
        return softmax(self.decision_logits(X))

    def predict(self, X):
        logits = self.decision_logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def transform(self, X):
        """NCA states used for segmentation, shape (N, H, W, nca_channels)."""
        return self._forward(X)[2]

    def segment(self, X, keep_largest=False):
        """Boolean masks (N, H, W) from PCA projection + Otsu on the NCA states."""
        return NCAMaskExtractor(self.otsu_bins, keep_largest).transform(self.transform(X))

    def save(self, path):
        check_is_fitted(self, "params_")
        meta = {"classes": self.classes_.tolist(), "estimator_params": self.get_params()}
        return save_checkpoint(path, self.params_, self.config_, meta, self.optimizer_state_)

    @classmethod
    def load(cls, path):
        ckpt = load_checkpoint(path)
        est = cls(**ckpt.metadata.get("estimator_params", {}))
        est.classes_ = np.asarray(ckpt.metadata.get("classes", list(range(ckpt.params.num_classes))))
        est.config_ = ckpt.config
        est.params_ = ckpt.params
        est.optimizer_state_ = ckpt.adam
        est.history_ = []
        return est


class NCAMaskExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer: NCA states (N, H, W, n) -> boolean masks (N, H, W)."""

    def __init__(self, bins=256, keep_largest=False):
        self.bins = bins
        self.keep_largest = keep_largest

    def fit(self, X, y=None):
        check_state(X if np.ndim(X) == 3 else np.asarray(X)[0])
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        results = [extract_mask(s, self.bins, self.keep_largest) for s in X]
        self.degenerate_ = np.array([r.degenerate for r in results])
        return np.stack([r.mask for r in results])
