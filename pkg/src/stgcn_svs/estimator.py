"""scikit-learn style front end for the voltage-stability classifier.

X is a (samples, 3, window, buses) panel of voltage / active / reactive time
series; y holds 0/1 or "stable"/"unstable" labels.  The grid topology is an
estimator parameter (an object or edge-list path), since it is shared by all
samples rather than a per-row feature.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .datagen import LabeledDataset
from .model import ModelConfig, SvsSample, bank_for, forward_batch, influence_weights
from .trainer import TrainConfig, train
from .validation import check_labels, check_panel, check_topology


class STGCNClassifier(BaseEstimator, ClassifierMixin):
    """Spatial-temporal graph convolutional classifier (fit/predict API)."""

    def __init__(self, topology=None, cheb_order=2, num_blocks=5, hidden=8,
                 kernel_t=3, dropout_rate=0.2, batch_size=100, epochs=30,
                 steps_per_epoch=48, learning_rate=1e-3, seed=0,
                 validation_fraction=0.0):
        self.topology = topology
        self.cheb_order = cheb_order
        self.num_blocks = num_blocks
        self.hidden = hidden
        self.kernel_t = kernel_t
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.learning_rate = learning_rate
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _dataset(self, X, y, topology):
        samples = [
            SvsSample(V=X[i, 0], P=X[i, 1], Q=X[i, 2], label=int(y[i]))
            for i in range(X.shape[0])
        ]
        return LabeledDataset(topology=topology, samples=samples, seed=self.seed)

    def fit(self, X, y):
        X = check_panel(X)
        y = check_labels(y, X.shape[0])
        topology = check_topology(self.topology)
        model_cfg = ModelConfig(
            num_buses=topology.n, window_len=X.shape[2], cheb_order=self.cheb_order,
            num_blocks=self.num_blocks, hidden=self.hidden, kernel_t=self.kernel_t,
            dropout_rate=self.dropout_rate,
        )
        train_cfg = TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch, learning_rate=self.learning_rate,
            seed=self.seed,
        )
        test_ds = None
        ds = self._dataset(X, y, topology)
        if self.validation_fraction > 0:
            rng = np.random.default_rng(self.seed)
            perm = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            ds = self._dataset(X[perm[n_val:]], y[perm[n_val:]], topology)
            test_ds = self._dataset(X[perm[:n_val]], y[perm[:n_val]], topology)
        result = train(ds, model_cfg, train_cfg, test_dataset=test_ds)
        self.classes_ = np.array([0, 1])
        self.result_ = result
        self.config_ = result.config
        self.history_ = result.history
        self.influence_ = influence_weights(result.params.assign)
        self._bank = bank_for(topology, model_cfg.cheb_order)
        return self

    def _require_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit before predict")

    def predict_proba(self, X):
        self._require_fitted()
        X = check_panel(X)
        probs = np.empty((X.shape[0], 2))
        result = self.result_
        for lo in range(0, X.shape[0], 256):
            out = forward_batch(X[lo:lo + 256], None, self._bank,
                                result.params, result.stats)
            probs[lo:lo + out["probs"].shape[0]] = out["probs"]
        return probs

    def predict(self, X):
        proba = self.predict_proba(X)
        # ties at exactly 0.5 predict stable
        return np.where(proba[:, 0] >= proba[:, 1], 0, 1)

    def save(self, path):
        self._require_fitted()
        self.result_.save(path, with_state=False)
