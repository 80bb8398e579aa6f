"""Dense feedforward networks with hand-derived gradients, plus Adam.

Everything here is float64 and pure: functions take explicit parameter /
state values and return new ones. No global RNG, no hidden mutation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "MlpParams",
    "AdamState",
    "init_mlp",
    "mlp_forward",
    "mlp_forward_batch",
    "mlp_backward_batch",
    "mlp_gradients",
    "adam_step",
    "finite_diff_grad",
    "flatten_params",
    "unflatten_params",
    "save_params",
    "load_params",
    "softplus",
    "sigmoid",
]

CHECKPOINT_VERSION = 1


def softplus(z):
    """Numerically stable log(1 + e^z); nonnegative everywhere."""
    return np.logaddexp(0.0, z)


def sigmoid(z):
    """Stable logistic function, also the derivative of softplus."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a feedforward net with softplus hidden layers.

    weights[i] has shape (fan_in, fan_out); the last layer is affine with no
    activation. Instances are treated as immutable values.
    """

    weights: tuple
    biases: tuple

    @property
    def layer_sizes(self):
        sizes = [self.weights[0].shape[0]]
        sizes.extend(w.shape[1] for w in self.weights)
        return tuple(sizes)

    @property
    def n_inputs(self):
        return self.weights[0].shape[0]

    @property
    def n_outputs(self):
        return self.weights[-1].shape[1]

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError(
                    f"layer {i} output width {self.weights[i].shape[1]} does "
                    f"not match layer {i + 1} input width "
                    f"{self.weights[i + 1].shape[0]}"
                )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias {i} shape {b.shape} != ({w.shape[1]},)")


def init_mlp(layer_sizes, rng, n_outputs=1):
    """Build an MLP with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init.

    layer_sizes is (d_in, h1, ..., hk); the output layer of width
    n_outputs is appended automatically.
    """
    sizes = list(layer_sizes) + [n_outputs]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(tuple(weights), tuple(biases))


def _check_input(params, X):
    if X.shape[-1] != params.n_inputs:
        raise ValueError(
            f"input width {X.shape[-1]} != network input width {params.n_inputs}"
        )


def mlp_forward_batch(params, X, return_cache=False):
    """Forward pass over a batch X of shape (n, d); returns (n, n_outputs)."""
    X = np.asarray(X, dtype=np.float64)
    _check_input(params, X)
    acts = [X]
    a = X
    n_layers = len(params.weights)
    for i in range(n_layers - 1):
        z = a @ params.weights[i] + params.biases[i]
        a = softplus(z)
        acts.append(a)
    out = a @ params.weights[-1] + params.biases[-1]
    if return_cache:
        return out, acts
    return out


def mlp_forward(params, x):
    """Scalar network output for a single design vector x."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = mlp_forward_batch(params, x[None, :])
    if params.n_outputs == 1:
        return float(out[0, 0])
    return out[0]


def mlp_backward_batch(params, X, upstream, acts=None):
    """Backprop through the net for a batch.

    upstream has shape (n, n_outputs) and is dL/d(output) per row; rows sum.
    Returns (flat parameter gradient, input gradient of shape (n, d)).
    """
    X = np.asarray(X, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if acts is None:
        _, acts = mlp_forward_batch(params, X, return_cache=True)
    n_layers = len(params.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    delta = upstream
    for i in range(n_layers - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            # acts[i] = softplus(z_i); softplus' = sigmoid, and
            # sigmoid(z) = 1 - exp(-softplus(z)) avoids re-storing z.
            delta = (delta @ params.weights[i].T) * (1.0 - np.exp(-acts[i]))
    input_grad = delta @ params.weights[0].T
    flat = flatten_params(MlpParams(tuple(grads_w), tuple(grads_b)))
    return flat, input_grad


def mlp_gradients(params, x, upstream=1.0):
    """Gradients of upstream * mu(x) w.r.t. parameters (flat) and input."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if params.n_outputs != 1:
        raise ValueError("mlp_gradients expects a scalar-output network")
    up = np.array([[float(upstream)]])
    pgrad, xgrad = mlp_backward_batch(params, x[None, :], up)
    return pgrad, xgrad[0]


def flatten_params(params):
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts)


def unflatten_params(flat, template):
    """Inverse of flatten_params given a shape template."""
    flat = np.asarray(flat, dtype=np.float64)
    weights, biases = [], []
    pos = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(flat[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(flat[pos : pos + b.size].copy())
        pos += b.size
    if pos != flat.size:
        raise ValueError(f"flat vector length {flat.size} != expected {pos}")
    return MlpParams(tuple(weights), tuple(biases))


@dataclass(frozen=True)
class AdamState:
    """Adam moments for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state, params, grad):
    """One bias-corrected Adam step minimizing along grad.

    Returns (new params, new state); inputs are not mutated.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter / gradient / state shape mismatch")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise FloatingPointError(f"non-finite gradient at parameter index {bad}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near index {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def params_to_dict(params):
    return {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def params_from_dict(d):
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    sizes = d["layer_sizes"]
    weights = tuple(
        np.array(w, dtype=np.float64).reshape(fi, fo)
        for w, fi, fo in zip(d["weights"], sizes[:-1], sizes[1:])
    )
    biases = tuple(np.array(b, dtype=np.float64) for b in d["biases"])
    return MlpParams(weights, biases)


def save_params(params, path):
    """Write a JSON checkpoint; float repr round-trips bit-exactly."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(params_to_dict(params), fh)
    os.replace(tmp, path)


def load_params(path):
    with open(path) as fh:
        return params_from_dict(json.load(fh))
