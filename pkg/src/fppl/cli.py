"""Command line: ``fppl run``, ``fppl costs`` and ``fppl sweep``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config
from .experiment import run_experiment
from .metrics import CostInputs, comm_cost, extra_storage, tunable_param_count

log = logging.getLogger("fppl")

COST_PRESETS = {
    "vit": CostInputs(D=768, N_all=200, T=20, L_p=20, M=5),
    "cifar": CostInputs(D=768, N_all=100, T=10, L_p=20, M=5),
    "desk": CostInputs(D=32, N_all=20, T=5, L_p=4, M=5),
}

_AGG_KEYS = ("A_bar", "A_T", "F_bar")


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(_int_list(args.seeds)))
    if getattr(args, "parallel", False):
        cfg = replace(cfg, hp=replace(cfg.hp, parallel=True))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if not cfg.seeds:
        raise ValueError("no seeds given")
    return cfg


def run_seeds(cfg: ExperimentConfig, out: Path) -> dict:
    """Run every seed of ``cfg`` under ``out/seed_<s>`` and write the aggregate summary."""
    summaries = []
    for seed in cfg.seeds:
        art = run_experiment(cfg.with_seed(seed), out / f"seed_{seed}")
        summaries.append(art.summary)
        log.info("seed %d: A_bar=%.4f F_bar=%.4f", seed, art.summary["A_bar"],
                 art.summary["F_bar"])
    agg = {"seeds": list(cfg.seeds)}
    for k in _AGG_KEYS:
        vals = [s[k] for s in summaries]
        agg[f"{k}_mean"] = statistics.fmean(vals)
        agg[f"{k}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
    for k in ("COMM", "ESTG", "PARAM"):
        agg[k] = summaries[0][k]
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary_aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


def cmd_run(args) -> int:
    cfg = _load(args)
    agg = run_seeds(cfg, Path(cfg.out_dir))
    print(f"A_bar {agg['A_bar_mean']:.4f} +/- {agg['A_bar_std']:.4f}  "
          f"F_bar {agg['F_bar_mean']:.4f} +/- {agg['F_bar_std']:.4f}  -> {cfg.out_dir}")
    return 0


def cmd_costs(args) -> int:
    if args.preset:
        c = COST_PRESETS[args.preset]
    else:
        missing = [n for n in ("D", "N_all", "T", "L_p", "M") if getattr(args, n) is None]
        if missing:
            raise ValueError(f"give --preset or all of --D --N_all --T --L_p --M (missing {missing})")
        c = CostInputs(D=args.D, N_all=args.N_all, T=args.T, L_p=args.L_p, M=args.M)
    print(f"COMM  {comm_cost(c):,}")
    print(f"ESTG  {extra_storage(c):,}")
    print(f"PARAM {tunable_param_count(c):,}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.axis == "beta":
        values = [float(v) for v in args.values.split(",") if v.strip()]
    else:
        values = _int_list(args.values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(cfg.out_dir)
    rows = []
    for v in values:
        if args.axis == "beta":
            sub = replace(cfg, data=replace(cfg.data, beta=v))
        else:
            sub = replace(cfg, hp=replace(cfg.hp, num_clients=v))
        agg = run_seeds(sub, out / f"{args.axis}_{v}")
        rows.append({args.axis: v, **{k: agg[k] for k in sorted(agg) if k.endswith(("_mean", "_std"))}})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{args.axis}={r[args.axis]}  A_bar {r['A_bar_mean']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fppl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_args(sp):
        sp.add_argument("--config", help="TOML config, or a run's manifest.json")
        sp.add_argument("--seeds", help="comma-separated seeds, e.g. 2023,2024,2025")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. flags.use_debias=false (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--parallel", action="store_true", help="run clients in threads")

    run = sub.add_parser("run", help="run an experiment for each seed")
    experiment_args(run)
    run.set_defaults(func=cmd_run)

    costs = sub.add_parser("costs", help="print COMM / ESTG / PARAM")
    costs.add_argument("--preset", choices=sorted(COST_PRESETS))
    for name in ("D", "N_all", "T", "L_p", "M"):
        costs.add_argument(f"--{name}", type=int)
    costs.set_defaults(func=cmd_costs)

    sweep = sub.add_parser("sweep", help="repeat run over beta or client counts")
    experiment_args(sweep)
    sweep.add_argument("--axis", choices=("beta", "clients"), required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"fppl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
