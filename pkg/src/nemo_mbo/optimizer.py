"""Batch design optimization: the amortized-CNML loop plus forward-model
and bootstrap-ensemble baselines.

Every run is a pure function of (config, dataset, seed): RNG streams are
spawned from the seed and split so that the model-update path and the
candidate path never share draws (which also makes the frozen-model
ablation bit-equivalent to skipping the model updates entirely).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import cnml as cn
from . import models as mdl
from . import stacked
from .numerics import AdamState, adam_step
from .quantization import bins_of, build_scheme

__all__ = [
    "NemoConfig",
    "CandidateBatch",
    "RunResult",
    "init_candidates",
    "nemo_iteration",
    "run_nemo",
    "run_forward_baseline",
    "run_ensemble_baseline",
    "score_batch",
    "nearest_rank",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NemoConfig:
    """Run hyperparameters; defaults are the desk-scale configuration."""

    K: int = 32
    M: int = 16
    T: int = 500
    alpha_theta: float = 0.005
    alpha_x: float = 0.01
    tau: float = 0.05
    inner_steps: int = 1
    w: float | None = None  # None -> 1/N at run time
    init_strategy: str = "best"
    head: str = "logistic"
    minibatch_size: int = 32
    hidden: tuple = (64, 64)
    pretrain_epochs: int = 100
    pretrain_lr: float = 0.01
    query_all_candidates: bool = False
    n_members: int = 32  # bootstrap baseline only
    seed: int = 0

    def __post_init__(self):
        if self.K < 2 or self.M < 1 or self.inner_steps < 1:
            raise ValueError("invalid config: need K >= 2, M >= 1, inner_steps >= 1")
        if self.alpha_theta < 0 or self.alpha_x < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("target rate tau must lie in [0, 1]")
        if self.init_strategy not in ("best", "worst", "random"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if self.head not in ("logistic", "categorical"):
            raise ValueError(f"unknown head {self.head!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {k: v for k, v in d.items() if k in known}
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        return cls(**kwargs)


@dataclass(frozen=True)
class CandidateBatch:
    X: np.ndarray  # (M, d)
    adam: AdamState  # moments hold one row per candidate
    iteration: int = 0


def _adam_for(X, lr):
    return AdamState(np.zeros_like(X), np.zeros_like(X), 0, lr, 0.9, 0.999, 1e-8)


def init_candidates(dataset, M, strategy, rng, lr):
    """Pick the starting batch: top-M, bottom-M, or uniform from the data.

    When M exceeds the dataset size the batch is drawn uniformly with
    replacement instead.
    """
    n = dataset.n
    if M > n:
        idx = rng.choice(n, size=M, replace=True)
    elif strategy == "best":
        idx = np.argsort(-dataset.y, kind="stable")[:M]
    elif strategy == "worst":
        idx = np.argsort(dataset.y, kind="stable")[:M]
    else:
        idx = rng.choice(n, size=M, replace=False)
    X = dataset.X[idx].copy()
    return CandidateBatch(X, _adam_for(X, lr))


def _ascend(batch, grads):
    """One Adam ascent step on every candidate, with a reset-on-NaN guard."""
    new_X, state = adam_step(batch.adam, batch.X, -grads)
    bad = ~np.all(np.isfinite(new_X), axis=1)
    if np.any(bad):
        log.warning("reset %d non-finite candidate(s)", int(bad.sum()))
        new_X[bad] = batch.X[bad]
    return CandidateBatch(new_X, state, batch.iteration + 1)


def _mean_target_grads(ensemble, X):
    """Mean internal score and input gradient over the K target networks."""
    scores = np.zeros(X.shape[0])
    grads = np.zeros_like(X)
    for tgt in ensemble.targets:
        s, gx = mdl.internal_score_and_input_grad(tgt, X)
        scores += s
        grads += gx
    return scores / ensemble.K, grads / ensemble.K


def nemo_iteration(ensemble, batch, data_X, data_bins, config, model_rng):
    """One loop iteration: inner model updates on a sampled query, a target
    Polyak step, then one ascent step per candidate through the targets."""
    n = data_X.shape[0]
    m = min(config.minibatch_size, n)
    # alpha_theta == 0 is the frozen-model ablation: skip the inner updates
    # outright (and their RNG draws) so it is bit-equivalent to never
    # calling them.
    for _ in range(config.inner_steps if config.alpha_theta > 0 else 0):
        if config.query_all_candidates:
            queries = list(batch.X)
        else:
            queries = [batch.X[int(model_rng.integers(batch.X.shape[0]))]]
        for q in queries:
            mb_idx = model_rng.choice(n, size=m, replace=False)
            ensemble = cn.nml_inner_step(ensemble, q, data_X[mb_idx], data_bins[mb_idx])
    ensemble = cn.target_update(ensemble, config.tau)
    _, grads = _mean_target_grads(ensemble, batch.X)
    return ensemble, _ascend(batch, grads)


def _stacked_iteration(se, batch, data_X, data_bins, config, model_rng):
    """nemo_iteration on the stacked representation; same draws, same math,
    one vectorized pass over the K models instead of a Python loop."""
    n = data_X.shape[0]
    m = min(config.minibatch_size, n)
    for _ in range(config.inner_steps if config.alpha_theta > 0 else 0):
        if config.query_all_candidates:
            queries = list(batch.X)
        else:
            queries = [batch.X[int(model_rng.integers(batch.X.shape[0]))]]
        for q in queries:
            mb_idx = model_rng.choice(n, size=m, replace=False)
            se = stacked.inner_step(se, q, data_X[mb_idx], data_bins[mb_idx])
    se = stacked.target_update(se, config.tau)
    _, grads = stacked.target_score_and_grads(se, batch.X)
    return se, _ascend(batch, grads)


@dataclass(frozen=True)
class RunResult:
    algo: str
    seed: int
    config: dict
    scheme: dict
    trajectory: list  # per-iteration score records, length T + 1
    final_X: np.ndarray
    percentiles: dict

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "algo": self.algo,
            "seed": self.seed,
            "config": self.config,
            "scheme": self.scheme,
            "trajectory": self.trajectory,
            "final_X": self.final_X.tolist(),
            "percentiles": self.percentiles,
        }

    def trajectory_rows(self):
        """Flat rows for CSV export."""
        cols = [
            "iteration",
            "proxy_mean",
            "proxy_p50",
            "proxy_p100",
            "truth_mean",
            "truth_p50",
            "truth_p100",
        ]
        return cols, [[rec.get(c) for c in cols] for rec in self.trajectory]


def nearest_rank(scores, p):
    """Nearest-rank percentile: 100th is the max, 50th the lower median."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("empty batch")
    rank = max(1, math.ceil(p / 100.0 * s.size))
    return float(s[rank - 1])


def score_batch(batch_X, evaluator, percentiles=(50, 100)):
    """Evaluate a batch and report nearest-rank percentiles of the scores."""
    scores = np.asarray([evaluator(x) for x in np.atleast_2d(batch_X)])
    return {int(p): nearest_rank(scores, p) for p in percentiles}


def _record(iteration, proxy, truth):
    rec = {
        "iteration": iteration,
        "proxy_mean": float(np.mean(proxy)),
        "proxy_p50": nearest_rank(proxy, 50),
        "proxy_p100": nearest_rank(proxy, 100),
    }
    if truth is not None:
        rec.update(
            truth_mean=float(np.mean(truth)),
            truth_p50=nearest_rank(truth, 50),
            truth_p100=nearest_rank(truth, 100),
        )
    else:
        rec.update(truth_mean=None, truth_p50=None, truth_p100=None)
    return rec


def _finish(algo, config, scheme, trajectory, batch, ground_truth, w_used):
    cfg = config.to_dict()
    cfg["w"] = w_used
    percentiles = {}
    if ground_truth is not None:
        percentiles = {
            str(p): v
            for p, v in score_batch(batch.X, ground_truth, (50, 100)).items()
        }
    return RunResult(
        algo=algo,
        seed=config.seed,
        config=cfg,
        scheme=scheme.to_dict(),
        trajectory=trajectory,
        final_X=batch.X,
        percentiles=percentiles,
    )


def _truth_scores(ground_truth, X):
    if ground_truth is None:
        return None
    return np.asarray([ground_truth(x) for x in X])


def run_nemo(config, dataset, ground_truth=None):
    """Pretrain the per-bin ensemble, then alternate amortized CNML updates
    with gradient ascent of the candidate batch through the targets."""
    ss = np.random.SeedSequence(config.seed)
    rng_init, rng_pre, rng_model = [np.random.default_rng(s) for s in ss.spawn(3)]
    scheme = build_scheme(dataset.y, config.K)
    data_bins = bins_of(dataset.y, scheme)
    w = 1.0 / dataset.n if config.w is None else config.w
    ensemble = cn.make_ensemble(
        scheme,
        dataset.d,
        config.hidden,
        rng_init,
        lr=config.alpha_theta,
        w=w,
        n_train=dataset.n,
        head=config.head,
    )
    ensemble = cn.pretrain(
        ensemble,
        dataset.X,
        dataset.y,
        config.pretrain_epochs,
        config.minibatch_size,
        rng_pre,
        lr=config.pretrain_lr,
    )
    batch = init_candidates(dataset, config.M, config.init_strategy, rng_init,
                            config.alpha_x)
    se = stacked.from_ensemble(ensemble)

    def proxy(X):
        return stacked.target_expected_scores(se, X)

    trajectory = [_record(0, proxy(batch.X), _truth_scores(ground_truth, batch.X))]
    for t in range(1, config.T + 1):
        se, batch = _stacked_iteration(
            se, batch, dataset.X, data_bins, config, rng_model
        )
        trajectory.append(
            _record(t, proxy(batch.X), _truth_scores(ground_truth, batch.X))
        )
    return _finish("nemo", config, scheme, trajectory, batch, ground_truth, w)


def _supervised_model(config, dataset, scheme, rng):
    ens = cn.make_ensemble(
        scheme, dataset.d, config.hidden, rng, lr=config.pretrain_lr,
        w=0.0, n_train=dataset.n, head=config.head,
    )
    ens = cn.pretrain(
        ens, dataset.X, dataset.y, config.pretrain_epochs,
        config.minibatch_size, rng, lr=config.pretrain_lr,
    )
    return ens.models[0]


def _run_ascent(algo, config, dataset, members, ground_truth, scheme):
    ss = np.random.SeedSequence((config.seed, 1))
    rng = np.random.default_rng(ss)
    batch = init_candidates(dataset, config.M, config.init_strategy, rng,
                            config.alpha_x)

    def proxy_and_grads(X):
        scores = np.zeros(X.shape[0])
        grads = np.zeros_like(X)
        for m in members:
            s, gx = mdl.expected_score_and_input_grad(m, X)
            scores += s
            grads += gx
        return scores / len(members), grads / len(members)

    scores, _ = proxy_and_grads(batch.X)
    trajectory = [_record(0, scores, _truth_scores(ground_truth, batch.X))]
    for t in range(1, config.T + 1):
        _, grads = proxy_and_grads(batch.X)
        batch = _ascend(batch, grads)
        scores, _ = proxy_and_grads(batch.X)
        trajectory.append(_record(t, scores, _truth_scores(ground_truth, batch.X)))
    w = 1.0 / dataset.n if config.w is None else config.w
    return _finish(algo, config, scheme, trajectory, batch, ground_truth, w)


def run_forward_baseline(config, dataset, ground_truth=None):
    """Single supervised proxy model; candidates ascend its predicted mean."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    scheme = build_scheme(dataset.y, config.K)
    model = _supervised_model(config, dataset, scheme, rng)
    return _run_ascent("forward", config, dataset, [model], ground_truth, scheme)


def run_ensemble_baseline(config, dataset, n_members=None, ground_truth=None):
    """Bootstrap-resampled, randomly initialized members; candidates ascend
    the mean of the members' predicted means."""
    n_members = config.n_members if n_members is None else n_members
    if n_members < 1:
        raise ValueError("need at least one ensemble member")
    scheme = build_scheme(dataset.y, config.K)
    members = []
    for j in range(n_members):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, j)))
        idx = rng.choice(dataset.n, size=dataset.n, replace=True)
        boot = replace(dataset, X=dataset.X[idx], y=dataset.y[idx])
        members.append(_supervised_model(config, boot, scheme, rng))
    return _run_ascent("ensemble", config, dataset, members, ground_truth, scheme)
