"""Output heads over the feedforward net.

The main head expands a scalar network output mu(x) through offset
sigmoids into a length-K survival vector o, with o[k] = sigmoid(mu - (k+1)/K).
o is strictly decreasing in k; adjacent differences give a pmf over bins,
and the predicted mean in normalized score units is simply mean(o).

A categorical head (K linear outputs + softmax) is kept around for the
head-architecture ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    MlpParams,
    mlp_backward_batch,
    mlp_forward_batch,
    sigmoid,
)

__all__ = [
    "DiscretizedLogisticModel",
    "CategoricalModel",
    "predict_mu",
    "predict_survival",
    "survival_batch",
    "y_mean",
    "y_mean_batch",
    "induced_pmf",
    "pmf_from_survival",
    "bce_loss_and_grad",
    "categorical_loss_and_pmf",
    "categorical_loss_and_grad",
    "model_pmf_batch",
    "model_score_batch",
    "internal_score_and_input_grad",
    "expected_score_and_input_grad",
    "model_loss_and_grad",
]

LOG_EPS = 1e-12  # clamp for saturated sigmoids inside logs


@dataclass(frozen=True)
class DiscretizedLogisticModel:
    mlp: MlpParams
    K: int

    def __post_init__(self):
        if self.mlp.n_outputs != 1:
            raise ValueError("discretized logistic head needs a scalar network")
        if self.K < 1:
            raise ValueError(f"K must be positive, got {self.K}")


@dataclass(frozen=True)
class CategoricalModel:
    mlp: MlpParams
    K: int

    def __post_init__(self):
        if self.mlp.n_outputs != self.K:
            raise ValueError(
                f"categorical head needs {self.K} network outputs, "
                f"got {self.mlp.n_outputs}"
            )


def _offsets(K):
    return (np.arange(K) + 1.0) / K


def predict_mu(model, x):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return float(mlp_forward_batch(model.mlp, x[None, :])[0, 0])


def predict_survival(model, x):
    """Survival vector o for one design; o[k] = sigmoid(mu - (k+1)/K)."""
    mu = predict_mu(model, x)
    return sigmoid(mu - _offsets(model.K))


def survival_batch(model, X):
    mu = mlp_forward_batch(model.mlp, X)[:, 0]
    return sigmoid(mu[:, None] - _offsets(model.K)[None, :])


def y_mean(model, x):
    """Predicted mean in normalized score units: mean of the survival vector."""
    return float(np.mean(predict_survival(model, x)))


def y_mean_batch(model, X):
    return survival_batch(model, X).mean(axis=1)


def pmf_from_survival(o):
    """Adjacent differences of the survival vector, as a pmf over bins.

    Mass above the first boundary that is missing from o[0] is merged into
    bin 0; the survival beyond the last boundary stays in the top bin.
    """
    o = np.asarray(o, dtype=np.float64)
    K = o.size
    if K == 1:
        return np.array([1.0])
    p = np.empty(K)
    p[0] = 1.0 - o[1]
    p[1:-1] = o[1:-1] - o[2:]
    p[-1] = o[-1]
    return p


def induced_pmf(model, x):
    return pmf_from_survival(predict_survival(model, x))


def _bce_per_row(o, targets):
    oc = np.clip(o, LOG_EPS, 1.0 - LOG_EPS)
    return -(targets * np.log(oc) + (1.0 - targets) * np.log(1.0 - oc)).mean(axis=1)


def _cumulative_targets(bins, K):
    bins = np.asarray(bins, dtype=np.int64)
    if np.any(bins < 0) or np.any(bins >= K):
        raise IndexError("bin index out of range")
    return (np.arange(K)[None, :] <= bins[:, None]).astype(np.float64)


def bce_loss_and_grad(model, X, bins, weights=None):
    """Weighted-mean binary cross entropy over a batch, with its gradient.

    Loss per row is the mean over the K survival elements of the BCE against
    the cumulative encoding of that row's bin. Returns (loss, flat parameter
    gradient). Pass a single row and int bin for the one-point case.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    bins = np.atleast_1d(bins)
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    w_norm = w / w.sum()
    out, acts = mlp_forward_batch(model.mlp, X, return_cache=True)
    mu = out[:, 0]
    o = sigmoid(mu[:, None] - _offsets(model.K)[None, :])
    t = _cumulative_targets(bins, model.K)
    loss = float(np.dot(w_norm, _bce_per_row(o, t)))
    # d(BCE)/d(pre-sigmoid) = o - t, and d(pre)/d(mu) = 1 for every element
    upstream = (w_norm * (o - t).mean(axis=1))[:, None]
    pgrad, _ = mlp_backward_batch(model.mlp, X, upstream, acts=acts)
    return loss, pgrad


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def categorical_loss_and_pmf(model, x, bin_index):
    """Softmax cross entropy at one design; returns (loss, pmf)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    logits = mlp_forward_batch(model.mlp, x[None, :])
    p = _softmax(logits)[0]
    if not 0 <= bin_index < model.K:
        raise IndexError(f"bin {bin_index} out of range for K={model.K}")
    return float(-np.log(max(p[bin_index], LOG_EPS))), p


def categorical_loss_and_grad(model, X, bins, weights=None):
    """Weighted-mean softmax cross entropy and its parameter gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    bins = np.atleast_1d(np.asarray(bins, dtype=np.int64))
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    w_norm = w / w.sum()
    logits, acts = mlp_forward_batch(model.mlp, X, return_cache=True)
    p = _softmax(logits)
    picked = np.clip(p[np.arange(n), bins], LOG_EPS, None)
    loss = float(np.dot(w_norm, -np.log(picked)))
    onehot = np.zeros_like(p)
    onehot[np.arange(n), bins] = 1.0
    upstream = w_norm[:, None] * (p - onehot)
    pgrad, _ = mlp_backward_batch(model.mlp, X, upstream, acts=acts)
    return loss, pgrad


# --- head-agnostic helpers used by the CNML machinery and optimizers ---


def model_pmf_batch(model, X):
    """pmf over bins per row, for either head."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if isinstance(model, CategoricalModel):
        return _softmax(mlp_forward_batch(model.mlp, X))
    o = survival_batch(model, X)
    if model.K == 1:
        return np.ones((X.shape[0], 1))
    p = np.empty_like(o)
    p[:, 0] = 1.0 - o[:, 1]
    p[:, 1:-1] = o[:, 1:-1] - o[:, 2:]
    p[:, -1] = o[:, -1]
    return p


def model_score_batch(model, X):
    """Expected normalized score per row: sum_k g(k) pmf(k)."""
    if isinstance(model, CategoricalModel):
        g = (np.arange(model.K) + 1.0) / model.K
        return model_pmf_batch(model, X) @ g
    return y_mean_batch(model, X)


def internal_score_and_input_grad(model, X):
    """Per-row ascent score and its input gradient.

    For the logistic head the score is mu itself (shares its maximizers and
    gradient direction with the predicted mean); for the categorical head it
    is the expected normalized score.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out, acts = mlp_forward_batch(model.mlp, X, return_cache=True)
    if isinstance(model, CategoricalModel):
        p = _softmax(out)
        g = (np.arange(model.K) + 1.0) / model.K
        score = p @ g
        upstream = p * (g[None, :] - score[:, None])
    else:
        score = out[:, 0]
        upstream = np.ones((X.shape[0], 1))
    _, xgrad = mlp_backward_batch(model.mlp, X, upstream, acts=acts)
    return score, xgrad


def expected_score_and_input_grad(model, X):
    """Per-row expected normalized score and its exact input gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out, acts = mlp_forward_batch(model.mlp, X, return_cache=True)
    if isinstance(model, CategoricalModel):
        return internal_score_and_input_grad(model, X)
    o = sigmoid(out[:, 0:1] - _offsets(model.K)[None, :])
    score = o.mean(axis=1)
    upstream = (o * (1.0 - o)).mean(axis=1, keepdims=True)
    _, xgrad = mlp_backward_batch(model.mlp, X, upstream, acts=acts)
    return score, xgrad


def model_loss_and_grad(model, X, bins, weights=None):
    if isinstance(model, CategoricalModel):
        return categorical_loss_and_grad(model, X, bins, weights)
    return bce_loss_and_grad(model, X, bins, weights)
