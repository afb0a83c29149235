"""Scikit-learn style estimator wrapping the full regression pipeline.

``JointAngleRegressor`` follows the usual conventions: hyperparameters are
constructor arguments stored verbatim (so ``get_params``/``set_params`` and
``clone`` work), ``fit`` learns from arrays, and fitted state lives in
trailing-underscore attributes. Features are packed, normalized squared
distances between 2D joint keypoints (length n(n-1)/2); targets are joint
angles in radians (n columns).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .gradients import ChainOps, pipeline_angles
from .kinematics import KinematicChain, load_chain
from .network import forward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .validation import as_float_array, packed_size


class JointAngleRegressor(BaseEstimator):
    """Joint angles from 2D keypoint distance features.

    The regressor trains a shallow network to lift packed 2D squared
    distances to the full 3D distance matrix of the chain's point set;
    prediction decodes that matrix through classical MDS, anchor alignment,
    and sequential kinematic inversion.

    Parameters mirror the training configuration; ``chain`` is a
    KinematicChain or a path to a chain file and must be set before fitting.
    """

    def __init__(self, chain=None, learning_rate=1e-3, warmup_iters=2000,
                 batch_size=64, dropout=0.5, epochs=100, lr_decay_epoch=50,
                 loss_weight=0.5, loss_mode="full", val_fraction=0.1, seed=0,
                 normalizer=1.0):
        self.chain = chain
        self.learning_rate = learning_rate
        self.warmup_iters = warmup_iters
        self.batch_size = batch_size
        self.dropout = dropout
        self.epochs = epochs
        self.lr_decay_epoch = lr_decay_epoch
        self.loss_weight = loss_weight
        self.loss_mode = loss_mode
        self.val_fraction = val_fraction
        self.seed = seed
        self.normalizer = normalizer

    def _resolved_chain(self):
        if self.chain is None:
            raise ValueError("chain must be set before fitting")
        if isinstance(self.chain, KinematicChain):
            return self.chain
        return load_chain(self.chain)

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            warmup_iters=self.warmup_iters,
            batch_size=self.batch_size,
            dropout=self.dropout,
            epochs=self.epochs,
            lr_decay_epoch=self.lr_decay_epoch,
            loss_weight=self.loss_weight,
            loss_mode=self.loss_mode,
            seed=self.seed,
            val_fraction=self.val_fraction,
        ).validate()

    def fit(self, X, y, X_val=None, y_val=None, log_fn=None):
        """Train on packed 2D distance features X and joint-angle targets y."""
        chain = self._resolved_chain()
        X = as_float_array(X, "X")
        y = as_float_array(y, "y")
        if X.ndim != 2 or X.shape[1] != packed_size(chain.n_joints):
            raise ValueError(
                f"X must be (n_samples, {packed_size(chain.n_joints)}) for "
                f"a {chain.n_joints}-joint chain, got {X.shape}"
            )
        self.chain_ = chain
        self.ops_ = ChainOps.from_chain(chain)
        self.checkpoint_, self.history_ = train(
            X, y, chain, self._train_config(), self.normalizer,
            val_inputs=X_val, val_thetas=y_val, log_fn=log_fn,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError(
                "this JointAngleRegressor is not fitted yet; call fit first"
            )

    def predict_edm(self, X):
        """Packed predicted 3D squared-distance matrices, one row per sample."""
        self._check_fitted()
        X = as_float_array(X, "X", shape=(None, self.n_features_in_))
        return forward(self.checkpoint_.params, X, mode="infer")

    def predict(self, X):
        """Joint angles (radians) per sample; rows that hit a degeneracy
        guard in the decode come back as NaN."""
        self._check_fitted()
        theta, valid, _, _ = pipeline_angles(self.ops_, self.predict_edm(X))
        theta = theta.copy()
        theta[~valid] = np.nan
        return theta

    def score(self, X, y):
        """Negative mean absolute wrapped angle error (higher is better)."""
        from .kinematics import wrap_angle

        y = as_float_array(y, "y")
        pred = self.predict(X)
        ok = ~np.isnan(pred).any(axis=1)
        if not ok.any():
            return -np.inf
        return -float(np.abs(wrap_angle(pred[ok] - y[ok])).mean())

    def save(self, path):
        """Persist the fitted model as a checkpoint file."""
        self._check_fitted()
        save_checkpoint(path, self.checkpoint_)

    @classmethod
    def from_checkpoint(cls, path, chain):
        """Rebuild a fitted regressor from a checkpoint file."""
        ckpt = load_checkpoint(path)
        if isinstance(chain, (str,)) or not isinstance(chain, KinematicChain):
            chain = load_chain(chain)
        cfg = ckpt.config
        est = cls(
            chain=chain,
            learning_rate=cfg.learning_rate,
            warmup_iters=cfg.warmup_iters,
            batch_size=cfg.batch_size,
            dropout=cfg.dropout,
            epochs=cfg.epochs,
            lr_decay_epoch=cfg.lr_decay_epoch,
            loss_weight=cfg.loss_weight,
            loss_mode=cfg.loss_mode,
            val_fraction=cfg.val_fraction,
            seed=cfg.seed,
            normalizer=ckpt.normalizer,
        )
        est.chain_ = chain
        est.ops_ = ChainOps.from_chain(chain)
        est.checkpoint_ = ckpt
        est.history_ = []
        est.n_features_in_ = packed_size(chain.n_joints)
        return est
