"""Command-line interface.

Subcommands: gen, run, profile, oracle-check, ablate. Every command is
deterministic given its arguments (seeds are explicit, outputs carry the
full effective config), and file writes are atomic.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Errors go
to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import bench, cnml as cn, optimizer as opt
from .quantization import bins_of, build_scheme, g_values

SCHEMA_VERSION = 1

USAGE_EXIT = 2
RUNTIME_EXIT = 1


class UsageError(Exception):
    pass


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, obj):
    _write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(path):
    if path is None:
        return opt.NemoConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid config JSON: {exc}") from None
    try:
        return opt.NemoConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _parse_grid(spec):
    try:
        lo, hi, steps = spec.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise UsageError(f"grid must be lo:hi:steps, got {spec!r}") from None
    if steps < 1 or not hi > lo:
        raise UsageError(f"invalid grid {spec!r}")
    return np.linspace(lo, hi, steps)


def _load_data(path):
    try:
        return bench.load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {path}") from None
    except bench.DatasetParseError as exc:
        raise UsageError(str(exc)) from None


def _truth_fn(name, d):
    if name == "none":
        return None
    if name == "sin1d":
        return lambda x: float(np.sin(x[0]))
    if name == "narrow":
        x_star = np.zeros(d)
        x_star[1] = 2.0
        return lambda x: float(-np.sum((np.asarray(x) - x_star) ** 2) / d)
    raise UsageError(f"unknown ground truth {name!r}")


def cmd_gen(args):
    if args.task == "sin1d":
        dataset, _ = bench.gen_sin1d(args.n, noise_sd=args.noise_sd, seed=args.seed)
    else:
        dataset, _ = bench.gen_narrow_support(args.d, args.n, seed=args.seed)
    bench.save_dataset(dataset, args.out)
    return 0


def cmd_run(args):
    config = _load_config(args.config)
    dataset = _load_data(args.data)
    truth = _truth_fn(args.truth, dataset.d)
    runners = {
        "nemo": opt.run_nemo,
        "forward": opt.run_forward_baseline,
        "ensemble": opt.run_ensemble_baseline,
    }
    result = runners[args.algo](config, dataset, ground_truth=truth)
    _write_json(args.out, result.to_dict())
    if args.trajectory_csv:
        cols, rows = result.trajectory_rows()
        lines = [",".join(cols)]
        for row in rows:
            lines.append(",".join("" if v is None else repr(v) for v in row))
        _write_atomic(args.trajectory_csv, "\n".join(lines) + "\n")
    return 0


def cmd_profile(args):
    config = _load_config(args.config)
    dataset = _load_data(args.data)
    grid = _parse_grid(args.grid)
    if dataset.d != 1:
        raise UsageError("profile supports 1-D datasets only")
    scheme = build_scheme(dataset.y, config.K)
    rng = np.random.default_rng(config.seed)
    if args.estimator == "cnml":
        ens = cn.make_ensemble(
            scheme, 1, config.hidden, rng,
            lr=config.alpha_theta, w=args.w, n_train=dataset.n, head=config.head,
        )
        ens = cn.pretrain(
            ens, dataset.X, dataset.y, config.pretrain_epochs,
            config.minibatch_size, rng, lr=config.pretrain_lr,
        )
        estimate = bench.cnml_profile_fn(ens, dataset.X, dataset.y, args.refine_steps)
    else:
        from .estimators import BootstrapEnsembleRegressor

        reg = BootstrapEnsembleRegressor(
            K=config.K, n_members=config.n_members, hidden=config.hidden,
            lr=config.pretrain_lr, epochs=config.pretrain_epochs,
            minibatch_size=config.minibatch_size, head=config.head,
            seed=config.seed,
        ).fit(dataset.X, dataset.y)
        estimate = lambda x: reg.predict_proba(x[None, :])[0]
    rows = bench.uncertainty_profile(estimate, grid, scheme)
    header = ["x", "entropy", "y_mean"] + [f"p{k}" for k in range(scheme.K)]
    lines = [",".join(header)]
    for rec in rows:
        vals = [rec["x"], rec["entropy"], rec["y_mean"], *rec["pmf"]]
        lines.append(",".join(bench.FLOAT_FMT % v for v in vals))
    _write_atomic(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_oracle_check(args):
    config = _load_config(args.config)
    dataset = _load_data(args.data)
    if dataset.d != 1:
        raise UsageError("oracle-check supports 1-D datasets only")
    scheme = build_scheme(dataset.y, config.K)
    grid = _parse_grid(args.grid) if args.grid else np.linspace(
        dataset.X[:, 0].min(), dataset.X[:, 0].max(), 5
    )
    oracle_cfg = cn.OracleConfig(
        hidden=config.hidden, head=config.head, seed=config.seed,
        restarts=args.restarts, max_steps=args.max_steps,
    )
    g = g_values(scheme)
    reports = []
    for xv in grid:
        res = cn.exact_cnml_oracle(dataset.X, dataset.y, [xv], scheme, oracle_cfg)
        rep = cn.regret_report(res)
        worst = int(np.argmax(rep.functional_regrets))
        pinsker = cn.pinsker_chain_check(res.bin_pmfs[worst], res.pmf.probs, g)
        pinsker = {
            k: bool(v) if isinstance(v, (bool, np.bool_))
            else (float(v) if np.isfinite(v) else "inf")
            for k, v in pinsker.items()
        }
        reports.append(
            {
                "x": float(xv),
                "pmf": res.pmf.probs.tolist(),
                "provenance": res.pmf.provenance,
                **rep.to_dict(),
                "bound_holds": bool(
                    rep.functional_regrets.max() <= rep.bound + 1e-3
                ),
                "pinsker": pinsker,
            }
        )
    out = {
        "schema_version": SCHEMA_VERSION,
        "scheme": scheme.to_dict(),
        "config": config.to_dict(),
        "oracle": dataclasses.asdict(oracle_cfg),
        "reports": reports,
    }
    _write_json(args.out, out)
    return 0


def cmd_ablate(args):
    config = _load_config(args.config)
    dataset = _load_data(args.data)
    truth = _truth_fn(args.truth, dataset.d)
    results = {}
    if args.which == "no-nml":
        results["nemo"] = opt.run_nemo(config, dataset, ground_truth=truth)
        frozen = dataclasses.replace(config, alpha_theta=0.0)
        results["no_nml"] = opt.run_nemo(frozen, dataset, ground_truth=truth)
    elif args.which == "categorical":
        for head in ("logistic", "categorical"):
            cfg = dataclasses.replace(config, head=head)
            results[head] = opt.run_nemo(cfg, dataset, ground_truth=truth)
    else:  # step-ratio
        for steps in args.ratios:
            cfg = dataclasses.replace(config, inner_steps=steps)
            results[f"inner_steps_{steps}"] = opt.run_nemo(
                cfg, dataset, ground_truth=truth
            )
    _write_json(
        args.out,
        {
            "schema_version": SCHEMA_VERSION,
            "ablation": args.which,
            "runs": {k: v.to_dict() for k, v in results.items()},
        },
    )
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="nemo-mbo")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic offline dataset")
    g.add_argument("--task", choices=["sin1d", "narrow"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sd", type=float, default=0.0)
    g.add_argument("--d", type=int, default=2, help="dims for the narrow task")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="run an optimizer on an offline dataset")
    r.add_argument("--algo", choices=["nemo", "forward", "ensemble"], required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--truth", choices=["none", "sin1d", "narrow"], default="none")
    r.add_argument("--out", required=True)
    r.add_argument("--trajectory-csv", default=None)
    r.set_defaults(fn=cmd_run)

    pr = sub.add_parser("profile", help="uncertainty profile over a query grid")
    pr.add_argument("--data", required=True)
    pr.add_argument("--config", default=None)
    pr.add_argument("--grid", required=True, help="lo:hi:steps")
    pr.add_argument("--estimator", choices=["cnml", "ensemble"], default="cnml")
    pr.add_argument("--refine-steps", type=int, default=100)
    pr.add_argument("--w", type=float, default=1.0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_profile)

    oc = sub.add_parser("oracle-check", help="exact CNML oracle + regret bound")
    oc.add_argument("--data", required=True)
    oc.add_argument("--config", default=None)
    oc.add_argument("--grid", default=None, help="query grid lo:hi:steps")
    oc.add_argument("--restarts", type=int, default=3)
    oc.add_argument("--max-steps", type=int, default=2000)
    oc.add_argument("--out", required=True)
    oc.set_defaults(fn=cmd_oracle_check)

    ab = sub.add_parser("ablate", help="run a named ablation protocol")
    ab.add_argument("--which", choices=["no-nml", "categorical", "step-ratio"],
                    required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--config", default=None)
    ab.add_argument("--truth", choices=["none", "sin1d", "narrow"], default="none")
    ab.add_argument("--ratios", type=int, nargs="+", default=[1, 2, 4])
    ab.add_argument("--out", required=True)
    ab.set_defaults(fn=cmd_ablate)
    return p


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.fn(args)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "kind": "usage"}), file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(
            json.dumps({"error": str(exc), "kind": type(exc).__name__}),
            file=sys.stderr,
        )
        return RUNTIME_EXIT


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
