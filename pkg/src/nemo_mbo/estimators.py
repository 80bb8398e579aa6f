"""scikit-learn style adapters around the CNML and ensemble machinery.

These expose fit / predict / predict_proba and get_params so the
uncertainty estimators compose with the wider ecosystem (pipelines,
grid search). The functional API in cnml / optimizer remains the
primary surface.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import cnml as cn
from . import models as mdl
from .quantization import bins_of, build_scheme

__all__ = ["CnmlRegressor", "BootstrapEnsembleRegressor"]


class CnmlRegressor(BaseEstimator):
    """Amortized conditional-NML predictive distribution over quantized outputs.

    fit() quantizes y and pretrains the per-bin ensemble; predict_proba()
    refines a clone of the ensemble toward each query before reading off
    the normalized per-bin likelihoods.
    """

    def __init__(
        self,
        K=20,
        hidden=(64, 64),
        lr=0.01,
        w=1.0,
        pretrain_epochs=200,
        refine_steps=100,
        minibatch_size=32,
        head="logistic",
        seed=0,
    ):
        self.K = K
        self.hidden = hidden
        self.lr = lr
        self.w = w
        self.pretrain_epochs = pretrain_epochs
        self.refine_steps = refine_steps
        self.minibatch_size = minibatch_size
        self.head = head
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        rng = np.random.default_rng(self.seed)
        self.scheme_ = build_scheme(y, self.K)
        self.X_, self.y_ = X.astype(np.float64), y.astype(np.float64)
        self.bins_ = bins_of(self.y_, self.scheme_)
        ens = cn.make_ensemble(
            self.scheme_, X.shape[1], tuple(self.hidden), rng,
            lr=self.lr, w=self.w, n_train=X.shape[0], head=self.head,
        )
        self.ensemble_ = cn.pretrain(
            ens, self.X_, self.y_, self.pretrain_epochs, self.minibatch_size, rng
        )
        return self

    def predict_proba(self, X):
        """Per-row CNML pmf over the K bins, shape (n, K)."""
        check_is_fitted(self, "ensemble_")
        X = check_array(X).astype(np.float64)
        out = np.empty((X.shape[0], self.scheme_.K))
        for i, x in enumerate(X):
            ens = copy.deepcopy(self.ensemble_)
            for _ in range(self.refine_steps):
                ens = cn.nml_inner_step(ens, x, self.X_, self.bins_)
            out[i] = cn.cnml_estimate(ens, x).probs
        return out

    def predict(self, X):
        """Expected output in original y units (bin midpoints under the pmf)."""
        check_is_fitted(self, "ensemble_")
        proba = self.predict_proba(X)
        mids = self.scheme_.y_min + (np.arange(self.scheme_.K) + 0.5) * self.scheme_.B
        return proba @ mids


class BootstrapEnsembleRegressor(BaseEstimator):
    """Bootstrap-resampled, randomly initialized model ensemble baseline."""

    def __init__(
        self,
        K=20,
        n_members=32,
        hidden=(64, 64),
        lr=0.01,
        epochs=200,
        minibatch_size=32,
        head="logistic",
        seed=0,
    ):
        self.K = K
        self.n_members = n_members
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.head = head
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        X = X.astype(np.float64)
        y = y.astype(np.float64)
        self.scheme_ = build_scheme(y, self.K)
        self.members_ = []
        for j in range(self.n_members):
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, j)))
            idx = rng.choice(X.shape[0], size=X.shape[0], replace=True)
            ens = cn.make_ensemble(
                self.scheme_, X.shape[1], tuple(self.hidden), rng,
                lr=self.lr, w=0.0, n_train=X.shape[0], head=self.head,
            )
            ens = cn.pretrain(
                ens, X[idx], y[idx], self.epochs, self.minibatch_size, rng
            )
            self.members_.append(ens.models[0])
        return self

    def predict_proba(self, X):
        """Mean member pmf per row, shape (n, K)."""
        check_is_fitted(self, "members_")
        X = check_array(X).astype(np.float64)
        return np.mean([mdl.model_pmf_batch(m, X) for m in self.members_], axis=0)

    def predict(self, X):
        proba = self.predict_proba(X)
        mids = self.scheme_.y_min + (np.arange(self.scheme_.K) + 0.5) * self.scheme_.B
        return proba @ mids
