"""scikit-learn style estimators around the training loops.

Images are passed as arrays of shape (N, H, W) or (N, C, H, W); masks as
integer arrays of shape (N, H, W). Following the scikit-learn convention for
semi-supervised learning, an unlabeled sample has a mask filled with ``-1``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_masks, labeled_indices
from .augment import StrongPolicy
from .dataset import ImageSample, LabelSplit, compute_stats, split_holdout
from .evaluate import matched_mean_iou, mean_iou
from .train import PipelineConfig, build_network, predict_samples, select_checkpoint, self_train, semi_train


class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel min/max scaling to [0, 1] with clamping.

    >>> import numpy as np
    >>> MinMaxNormalizer().fit(np.array([[[10.0, 20.0]]])).transform(np.array([[[15.0, 25.0]]]))
    array([[[[0.5, 1. ]]]], dtype=float32)
    """

    def fit(self, X, y=None):
        X = check_images(X)
        self.stats_ = compute_stats(list(X))
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_images(X)
        if X.shape[1] != self.n_channels_:
            raise ValueError(f"fitted on {self.n_channels_} channels, got {X.shape[1]}")
        return np.stack([self.stats_.apply(x) for x in X])


def _samples(X, y=None, prefix="s"):
    return [ImageSample(x, None if y is None else y[i], f"{prefix}{i:05d}") for i, x in enumerate(X)]


class _SegmenterBase(BaseEstimator):
    def _predict_probs(self, X, head="main"):
        check_is_fitted(self, "net_")
        X = self.normalizer_.transform(X)
        return np.stack(predict_samples(self.net_, _samples(X), head=head))

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape (N, K, H, W)."""
        return self._predict_probs(X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class SemiSupervisedSegmenter(_SegmenterBase):
    """U-Net trained with Dice on labeled masks plus a consistency loss on unlabeled images.

    Parameters mirror :class:`~semiseg.train.PipelineConfig`. A fraction
    ``val_fraction`` of the labeled samples is held out for checkpoint
    selection; the weights restored after ``fit`` follow ``checkpoint_policy``.
    """

    def __init__(
        self,
        unsup_loss="kldiv",
        checkpoint_policy="best_supervised",
        n_classes=None,
        epochs=100,
        batch_size=1,
        lr=1e-3,
        optimizer="adam",
        base_width=64,
        batch_norm=False,
        unsup_weight=1.0,
        strong_n_ops=2,
        strong_magnitude=15,
        val_fraction=0.1,
        seed=0,
        run_dir=None,
    ):
        self.unsup_loss = unsup_loss
        self.checkpoint_policy = checkpoint_policy
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.base_width = base_width
        self.batch_norm = batch_norm
        self.unsup_weight = unsup_weight
        self.strong_n_ops = strong_n_ops
        self.strong_magnitude = strong_magnitude
        self.val_fraction = val_fraction
        self.seed = seed
        self.run_dir = run_dir

    def _config(self, n_classes, in_channels, ratio) -> PipelineConfig:
        return PipelineConfig.semi(
            unsup_loss=self.unsup_loss,
            checkpoint_policy=self.checkpoint_policy,
            label_ratio=ratio,
            optimizer=self.optimizer,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            unsup_weight=self.unsup_weight,
            n_classes=n_classes,
            base_width=self.base_width,
            batch_norm=self.batch_norm,
            in_channels=in_channels,
            val_fraction=self.val_fraction,
            strong=StrongPolicy(self.strong_n_ops, self.strong_magnitude),
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X, allow_unlabeled=True)
        lab = labeled_indices(y)
        if len(lab) < 2:
            raise ValueError("need at least two labeled samples (one is held out for validation)")
        n_classes = self.n_classes or int(max(2, y[lab].max() + 1))
        if y[lab].max() >= n_classes:
            raise ValueError(f"mask ids must be < n_classes={n_classes}")
        self.normalizer_ = MinMaxNormalizer().fit(X)
        Xn = self.normalizer_.transform(X)
        samples = _samples(Xn, np.where(y < 0, 0, y))
        labeled = [samples[i] for i in lab]
        unlabeled_ids = tuple(s.id for i, s in enumerate(samples) if i not in set(lab.tolist()))
        train_lab, val = split_holdout(labeled, self.val_fraction, self.seed)
        train = train_lab + [s for s in samples if s.id in set(unlabeled_ids)]
        split = LabelSplit(tuple(s.id for s in train_lab), unlabeled_ids, len(train_lab) / len(train), self.seed)
        cfg = self._config(n_classes, X.shape[1], split.ratio)
        self.net_ = build_network(cfg)
        self.state_ = semi_train(self.net_, train, split, cfg, val, run_dir=self.run_dir)
        self.checkpoint_ = select_checkpoint(self.state_, self.checkpoint_policy)
        self.checkpoint_.load_into(self.net_)
        self.n_classes_ = n_classes
        return self

    def score(self, X, y):
        """Dataset-aggregated mean IoU over all classes."""
        y = check_masks(y, check_images(X))
        return mean_iou(list(self.predict(X)), list(y), range(self.n_classes_)).mean_iou


class SelfSupervisedSegmenter(_SegmenterBase, TransformerMixin):
    """U-Net clustering pixels by mutual information between rotated views.

    ``transform`` returns main-head cluster probabilities. Cluster ids are
    arbitrary; :meth:`score` matches clusters to classes by maximal overlap.
    """

    def __init__(
        self,
        n_classes=2,
        n_aux_classes=None,
        epochs=10,
        batch_size=10,
        lr=0.01,
        optimizer="rmsprop",
        base_width=64,
        batch_norm=True,
        val_fraction=0.1,
        seed=0,
        run_dir=None,
    ):
        self.n_classes = n_classes
        self.n_aux_classes = n_aux_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.base_width = base_width
        self.batch_norm = batch_norm
        self.val_fraction = val_fraction
        self.seed = seed
        self.run_dir = run_dir

    def fit(self, X, y=None):
        X = check_images(X)
        self.normalizer_ = MinMaxNormalizer().fit(X)
        samples = _samples(self.normalizer_.transform(X))
        train, val = split_holdout(samples, self.val_fraction, self.seed)
        cfg = PipelineConfig.self_supervised(
            n_classes=self.n_classes,
            n_aux_classes=self.n_aux_classes or 2 * self.n_classes,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            optimizer=self.optimizer,
            base_width=self.base_width,
            batch_norm=self.batch_norm,
            in_channels=X.shape[1],
            seed=self.seed,
        )
        self.net_ = build_network(cfg)
        self.state_ = self_train(self.net_, train, cfg, val, run_dir=self.run_dir)
        self.checkpoint_ = select_checkpoint(self.state_, "best_final")
        self.checkpoint_.load_into(self.net_)
        self.n_aux_classes_ = cfg.n_aux_classes
        return self

    def transform(self, X):
        return self.predict_proba(X)

    def predict(self, X, head="main"):
        return self._predict_probs(X, head).argmax(axis=1)

    def score(self, X, y, head="main"):
        """Mean IoU after mapping clusters to classes by maximal overlap."""
        y = check_masks(y, check_images(X))
        k = self.n_classes if head == "main" else self.n_aux_classes_
        n_true = int(max(self.n_classes, y.max() + 1))
        return matched_mean_iou(list(self.predict(X, head)), list(y), max(k, n_true), n_true).mean_iou
