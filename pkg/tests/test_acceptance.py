"""End-to-end acceptance suite: ten independent checks of the library's
core guarantees, each with its own runtime budget. Run with `pytest -v`
to get one pass/fail line per criterion.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from nemo_mbo import bench, cli, stacked
from nemo_mbo import cnml as cn
from nemo_mbo import models as mdl
from nemo_mbo import numerics as nm
from nemo_mbo import optimizer as opt
from nemo_mbo.quantization import (
    QuantizationScheme,
    bin_of,
    bins_of,
    build_scheme,
    g_eval,
    g_values,
)

FIXTURES = __file__.rsplit("/", 1)[0] + "/fixtures"


def logistic_model(rng, d, K, hidden):
    return mdl.DiscretizedLogisticModel(nm.init_mlp((d, *hidden), rng), K)


def categorical_model(rng, d, K, hidden):
    return mdl.CategoricalModel(nm.init_mlp((d, *hidden), rng, n_outputs=K), K)


# 1. The internal ascent score mu and the predicted mean share gradient
#    directions and maximizers.
def test_01_score_gradient_alignment():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    sizes = [(32, 32), (64, 64)]
    n_pairs = 0
    for K in (2, 8, 32):
        for hidden in sizes:
            for _ in range(167):
                m = logistic_model(rng, d=2, K=K, hidden=hidden)
                x = rng.normal(size=(1, 2))
                _, g_mu = mdl.internal_score_and_input_grad(m, x)
                _, g_mean = mdl.expected_score_and_input_grad(m, x)
                assert float(g_mu.ravel() @ g_mean.ravel()) >= -1e-10
                n_pairs += 1
    assert n_pairs >= 1000
    grid = np.linspace(-4.0, 4.0, 1000)[:, None]
    for i in range(20):
        m = logistic_model(rng, d=1, K=8, hidden=(16,))
        mu, _ = mdl.internal_score_and_input_grad(m, grid)
        mean = mdl.y_mean_batch(m, grid)
        assert int(np.argmax(mu)) == int(np.argmax(mean))
    assert time.monotonic() - t0 < 30.0


# 2. Analytic gradients match central finite differences.
def test_02_gradients_match_finite_differences():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)

    def relerr(a, b):
        return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)

    n_cases = 0
    for _ in range(50):  # parameter gradient of the survival-head loss
        m = logistic_model(rng, d=2, K=int(rng.integers(2, 9)), hidden=(5,))
        X = rng.normal(size=(3, 2))
        bins = rng.integers(m.K, size=3)
        _, grad = mdl.bce_loss_and_grad(m, X, bins)
        fd = nm.finite_diff_grad(
            lambda v: mdl.bce_loss_and_grad(
                replace(m, mlp=nm.unflatten_params(v, m.mlp)), X, bins
            )[0],
            nm.flatten_params(m.mlp),
        )
        assert relerr(grad, fd) <= 1e-4
        n_cases += 1
    for _ in range(50):  # parameter gradient of the softmax loss
        m = categorical_model(rng, d=2, K=int(rng.integers(2, 9)), hidden=(5,))
        X = rng.normal(size=(3, 2))
        bins = rng.integers(m.K, size=3)
        _, grad = mdl.categorical_loss_and_grad(m, X, bins)
        fd = nm.finite_diff_grad(
            lambda v: mdl.categorical_loss_and_grad(
                replace(m, mlp=nm.unflatten_params(v, m.mlp)), X, bins
            )[0],
            nm.flatten_params(m.mlp),
        )
        assert relerr(grad, fd) <= 1e-4
        n_cases += 1
    for _ in range(50):  # input gradient of the loss (both heads)
        head = "logistic" if n_cases % 2 else "categorical"
        K = int(rng.integers(2, 9))
        maker = logistic_model if head == "logistic" else categorical_model
        m = maker(rng, d=2, K=K, hidden=(5,))
        x = rng.normal(size=2)
        b = int(rng.integers(K))
        out, acts = nm.mlp_forward_batch(m.mlp, x[None, :], return_cache=True)
        if head == "logistic":
            o = mdl.survival_batch(m, x[None, :])
            t = (np.arange(K)[None, :] <= b).astype(np.float64)
            upstream = (o - t).mean(axis=1, keepdims=True)
        else:
            p = np.exp(out - out.max())
            p /= p.sum()
            onehot = np.zeros((1, K))
            onehot[0, b] = 1.0
            upstream = p - onehot
        _, xgrad = nm.mlp_backward_batch(m.mlp, x[None, :], upstream, acts=acts)
        fd = nm.finite_diff_grad(
            lambda v: mdl.model_loss_and_grad(m, v[None, :], [b])[0], x
        )
        assert relerr(xgrad[0], fd) <= 1e-4
        n_cases += 1
    for _ in range(50):  # input gradient of the mean internal score over K models
        K = int(rng.integers(2, 9))
        members = [logistic_model(rng, d=2, K=K, hidden=(5,)) for _ in range(K)]
        x = rng.normal(size=2)
        grad = np.mean(
            [mdl.internal_score_and_input_grad(m, x[None, :])[1][0] for m in members],
            axis=0,
        )
        fd = nm.finite_diff_grad(
            lambda v: float(
                np.mean(
                    [
                        mdl.internal_score_and_input_grad(m, v[None, :])[0][0]
                        for m in members
                    ]
                )
            ),
            x,
        )
        assert relerr(grad, fd) <= 1e-4
        n_cases += 1
    assert n_cases >= 200
    assert time.monotonic() - t0 < 30.0


# 3. The worst-case functional regret of the exact estimator is bounded by
#    2 * g_max * sqrt(Gamma / 2) on small instances.
def test_03_functional_regret_bound():
    t0 = time.monotonic()
    cfg = cn.OracleConfig(hidden=(8,), restarts=1, max_steps=500, seed=0)
    n_queries = 0
    for inst in range(5):
        rng = np.random.default_rng(inst)
        n = int(rng.integers(4, 11))
        X = rng.uniform(-1.5, 1.5, size=(n, 1))
        y = np.sin(2 * X[:, 0]) + 0.1 * rng.normal(size=n)
        scheme = build_scheme(y, int(rng.integers(3, 9)))
        for xv in np.linspace(-3.0, 3.0, 20):
            rep = cn.regret_report(cn.exact_cnml_oracle(X, y, [xv], scheme, cfg))
            assert rep.functional_regrets.max() <= rep.bound + 1e-3
            n_queries += 1
    assert n_queries >= 100
    assert time.monotonic() - t0 < 300.0


# 4. The score-difference / total-variation / KL chain of inequalities.
def test_04_pinsker_chain():
    t0 = time.monotonic()
    rng = np.random.default_rng(4)
    g = g_values(QuantizationScheme(8, 0.0, 1.0))
    for _ in range(500):
        p = rng.dirichlet(np.full(8, rng.uniform(0.1, 3.0)))
        q = rng.dirichlet(np.full(8, rng.uniform(0.1, 3.0)))
        chk = cn.pinsker_chain_check(p, q, g)
        assert chk["gap_ok"]
        assert chk["tv_ok"]
    assert time.monotonic() - t0 < 5.0


# 5. The amortized estimator converges to the certified exact pmfs on the
#    golden instance: worst-case TV <= 0.1 after 1000 inner steps.
def test_05_amortized_matches_exact_oracle():
    with open(f"{FIXTURES}/golden_oracle.json") as fh:
        fix = json.load(fh)
    s = fix["scheme"]
    scheme = QuantizationScheme(s["K"], s["y_min"], s["y_max"])
    X = np.asarray(fix["X"])
    y = np.asarray(fix["y"])
    bins = bins_of(y, scheme)
    ens = cn.make_ensemble(
        scheme, 1, (8,), np.random.default_rng(0),
        lr=0.01, w=1.0, n_train=len(y), head="logistic",
    )
    ens = cn.pretrain(ens, X, y, epochs=200, batch_size=8,
                      rng=np.random.default_rng(1), lr=0.01)
    base = stacked.from_ensemble(ens)
    for q in fix["queries"]:
        se = base
        xv = np.array([q["x"]])
        for _ in range(1000):
            se = stacked.inner_step(se, xv, X, bins)
        tv = cn.tv_distance(stacked.cnml_pmf(se, xv), np.asarray(q["pmf"]))
        assert tv <= 0.1


# 6. Entropy rises off the data support by >= 0.3 nats, and by more than a
#    bootstrap ensemble's rise on the same seeds.
def test_06_out_of_support_entropy_gap():
    t0 = time.monotonic()
    in_grid = np.linspace(-3.0, 3.0, 13)
    out_half = np.linspace(3.25, 6.0, 6)
    out_grid = np.concatenate([-out_half[::-1], out_half])

    def mean_entropy(estimate, grid):
        return float(np.mean(
            [cn.entropy(estimate(np.array([x]))) for x in grid]
        ))

    for seed in range(5):
        ds, _ = bench.gen_sin1d(n=50, seed=seed, noise_sd=0.0)
        scheme = build_scheme(ds.y, 32)
        ens = cn.make_ensemble(
            scheme, 1, (32, 32), np.random.default_rng(100 + seed),
            lr=0.02, w=0.3, n_train=50, head="categorical",
        )
        ens = cn.pretrain(ens, ds.X, ds.y, epochs=2000, batch_size=32,
                          rng=np.random.default_rng(200 + seed), lr=0.01)
        prof = bench.cnml_profile_fn(ens, ds.X, ds.y, refine_steps=50)
        cnml_gap = mean_entropy(prof, out_grid) - mean_entropy(prof, in_grid)
        assert cnml_gap >= 0.3

        members = []
        for j in range(32):
            rng = np.random.default_rng(np.random.SeedSequence((seed, j)))
            idx = rng.choice(50, size=50, replace=True)
            m_ens = cn.make_ensemble(
                scheme, 1, (32, 32), rng,
                lr=0.01, w=0.0, n_train=50, head="categorical",
            )
            m_ens = cn.pretrain(m_ens, ds.X[idx], ds.y[idx], epochs=1000,
                                batch_size=32, rng=rng, lr=0.01)
            members.append(m_ens.models[0])
        boot = bench.ensemble_profile_fn(members)
        boot_gap = mean_entropy(boot, out_grid) - mean_entropy(boot, in_grid)
        assert boot_gap < cnml_gap
    assert time.monotonic() - t0 < 600.0


def _normalized_truth(task, scheme):
    return lambda x: g_eval(bin_of(task.fn(x), scheme), scheme)


# 7. Freezing the per-bin models (no inner updates) must not beat the full
#    loop's median ground-truth score from a worst-point start.
def test_07_frozen_model_ablation_ordering():
    t0 = time.monotonic()
    wins = 0
    for seed in range(5):
        ds, task = bench.gen_narrow_support(2, 50, seed=seed)
        scheme = build_scheme(ds.y, 32)
        gt = _normalized_truth(task, scheme)
        cfg = opt.NemoConfig(
            K=32, M=16, T=200, alpha_x=0.05, alpha_theta=0.005,
            hidden=(64, 64), pretrain_epochs=100,
            init_strategy="worst", seed=seed,
        )
        full = opt.run_nemo(cfg, ds, ground_truth=gt)
        frozen = opt.run_nemo(replace(cfg, alpha_theta=0.0), ds, ground_truth=gt)
        if full.trajectory[-1]["truth_p50"] >= frozen.trajectory[-1]["truth_p50"]:
            wins += 1
    assert wins >= 4
    assert time.monotonic() - t0 < 600.0


# 8. The plain forward proxy overshoots the ground truth at the final
#    iterate (model exploitation); the full loop's gap is smaller.
def test_08_exploitation_gap():
    fwd_positive = 0
    nemo_smaller = 0
    for seed in range(5):
        ds, task = bench.gen_narrow_support(2, 50, seed=seed)
        scheme = build_scheme(ds.y, 32)
        gt = _normalized_truth(task, scheme)
        cfg = opt.NemoConfig(
            K=32, M=16, T=500, alpha_x=0.1, alpha_theta=0.005,
            hidden=(64, 64), pretrain_epochs=100,
            init_strategy="worst", seed=seed,
        )
        fwd = opt.run_forward_baseline(cfg, ds, ground_truth=gt).trajectory[-1]
        nemo = opt.run_nemo(cfg, ds, ground_truth=gt).trajectory[-1]
        fwd_gap = fwd["proxy_p50"] - fwd["truth_p50"]
        nemo_gap = nemo["proxy_p50"] - nemo["truth_p50"]
        if fwd_gap > 0:
            fwd_positive += 1
        if nemo_gap < fwd_gap:
            nemo_smaller += 1
    assert fwd_positive == 5
    assert nemo_smaller >= 4


# 9. Repeating any CLI command with identical arguments produces
#    byte-identical outputs.
def test_09_cli_byte_determinism(tmp_path):
    data = tmp_path / "d.csv"
    assert cli.cli(["gen", "--task", "sin1d", "--n", "12", "--seed", "7",
                    "--out", str(data)]) == 0
    commands = [
        ["gen", "--task", "narrow", "--n", "10", "--d", "3", "--seed", "1",
         "--out", "gen.csv"],
        ["run", "--algo", "forward", "--data", str(data), "--config",
         "cfg.json", "--truth", "sin1d", "--out", "run.json",
         "--trajectory-csv", "run.csv"],
        ["profile", "--data", str(data), "--config", "cfg.json",
         "--grid=-4:4:3", "--refine-steps", "3", "--out", "prof.json"],
    ]
    cfg = {"K": 4, "M": 2, "T": 2, "hidden": [4], "pretrain_epochs": 2,
           "seed": 0}
    for argv in commands:
        outputs = []
        for rep in range(2):
            d = tmp_path / f"rep{rep}_{argv[0]}"
            d.mkdir()
            (d / "cfg.json").write_text(json.dumps(cfg))
            full = list(argv)
            for flag in ("--out", "--trajectory-csv", "--config"):
                if flag in full:
                    i = full.index(flag) + 1
                    full[i] = str(d / full[i])
            assert cli.cli(full) == 0
            blobs = [
                (d / name).read_bytes()
                for name in sorted(p.name for p in d.iterdir())
                if name != "cfg.json"
            ]
            outputs.append(blobs)
        assert outputs[0] == outputs[1]


# 10. Nearest-rank batch percentiles agree exactly with a sort-based
#     reference.
def test_10_percentile_matches_sort_reference():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        scores = rng.normal(size=n)
        percs = opt.score_batch(scores[:, None], lambda x: float(x[0]))
        s = np.sort(scores)
        for p, got in percs.items():
            want = s[max(1, math.ceil(p / 100.0 * n)) - 1]
            assert got == want
