"""Command line entry point ``sb``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from graphsb.errors import ConfigurationError, GraphFormatError, NodeIndexError
from graphsb.experiment import ABLATIONS, ExperimentConfig, export_structure, run_experiment

RHO_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def _load_config(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    cfg = ExperimentConfig.from_dict(base)
    top = {
        "dataset": args.dataset,
        "rho": args.rho,
        "alpha": args.alpha,
        "steps": args.steps,
        "minority": args.minority,
        "output_dir": args.out,
    }
    cfg = replace(cfg, **{k: v for k, v in top.items() if v is not None})
    if args.ablate is not None:
        cfg = replace(cfg, ablate=args.ablate)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    elif args.seeds is not None:
        cfg = replace(cfg, seeds=list(range(args.seeds)))
    t = {}
    if args.p_drop is not None:
        t["p_drop"] = args.p_drop
    if args.max_epochs is not None:
        t["max_epochs"] = args.max_epochs
    if args.patience is not None:
        t["patience"] = args.patience
    if args.oversample_scale is not None:
        s = args.oversample_scale
        if s not in ("rl", "none") and not s.startswith("fixed:"):
            try:
                s = f"fixed:{float(s)}"
            except ValueError:
                raise ConfigurationError(f"--oversample-scale must be 'rl', 'none', 'fixed:<x>' or a number, got {s!r}")
        t["oversample"] = s
    if t:
        cfg = replace(cfg, train=replace(cfg.train, **t))
    # re-run validation on the merged config
    return ExperimentConfig.from_dict(cfg.to_dict())


def _experiment_flags(p):
    p.add_argument("--config", help="JSON config file; individual flags override it")
    p.add_argument("--dataset", help="'sbm', a three-file directory, or linqs:<dir>")
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float, help="diffusion teleport weight")
    p.add_argument("--steps", type=int, help="diffusion steps")
    p.add_argument("--p-drop", type=float)
    p.add_argument("--minority", type=int, help="number of minority classes")
    p.add_argument("--ablate", choices=ABLATIONS)
    p.add_argument("--oversample-scale", help="'rl', 'none', 'fixed:<x>' or a number")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, help="run a single seed")
    g.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    p.add_argument("--out", help="output directory (export-diffusion also takes a .csv path)")


def _print_agg(label, agg):
    def fmt(k):
        m = agg[k]
        return f"{k}={m['mean']:.4f}±{m['std']:.4f}"

    print(label, fmt("accuracy"), fmt("macro_f1"), fmt("roc_auc"), fmt("distance_ratio"))
    if agg["failed_seeds"]:
        print(f"  failed seeds: {agg['failed_seeds']}")


def cmd_run(args):
    cfg = _load_config(args)
    _, agg = run_experiment(cfg)
    _print_agg("run", agg)
    return 0 if agg["n_seeds"] else 1


def _sub_runs(cfg, name, variants):
    out_root = Path(cfg.output_dir) if cfg.output_dir else None
    rows = []
    for key, value, changes in variants:
        sub = replace(cfg, output_dir=str(out_root / f"{name}_{value}") if out_root else None, **changes)
        _, agg = run_experiment(sub)
        _print_agg(f"{key}={value}", agg)
        rows.append({key: value, **{m: agg[m]["mean"] for m in ("accuracy", "macro_f1", "roc_auc", "distance_ratio")},
                     **{f"{m}_std": agg[m]["std"] for m in ("accuracy", "macro_f1", "roc_auc", "distance_ratio")}})
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        with open(out_root / f"{name}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        (out_root / f"{name}.json").write_text(json.dumps(rows, indent=1))
    return rows


def cmd_sweep_rho(args):
    cfg = _load_config(args)
    rhos = [float(r) for r in args.rhos.split(",")] if args.rhos else list(RHO_GRID)
    _sub_runs(cfg, "sweep_rho", [("rho", r, {"rho": r}) for r in rhos])
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    _sub_runs(cfg, "ablate", [("ablate", a, {"ablate": a}) for a in ABLATIONS])
    return 0


def cmd_theory(args):
    from graphsb.theory import theory_report

    rep = theory_report(p=args.p, q=args.q, beta=args.beta, layers=args.layers, seeds=args.seeds)
    print(f"gamma={rep.gamma:.4f} lambda1={rep.lambda1:.6f} lambda2={rep.lambda2:.4f}")
    print(f"assimilation rate={rep.assimilation['fitted_rate']:.4f} (predicted {rep.assimilation['predicted']:.4f})")
    print(f"gradient slope={rep.gradient['slope']:.3f} monotone={rep.gradient['monotone']}")
    if args.out:
        for path in rep.write(args.out):
            print(f"wrote {path}")
    else:
        print(json.dumps(rep.to_dict(), indent=1))
    return 0


def cmd_export(args):
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    if not args.out:
        raise ConfigurationError("export-diffusion needs --out")
    # the exported operator is undropped unless --p-drop is given explicitly
    p_drop = args.p_drop if args.p_drop is not None else 0.0
    info = export_structure(cfg, seed, args.out, p_drop=p_drop)
    print(json.dumps(info))
    return 0


def cmd_metrics(args):
    from graphsb.metrics import compute_metrics, distance_ratio

    src = Path(args.source)
    npz = src / "predictions.npz" if src.is_dir() else src
    d = np.load(npz)
    mask = d[f"{args.mask}_mask"]
    rec = compute_metrics(d["probabilities"], d["labels"], mask)
    emb = npz.parent / "embeddings.csv"
    if emb.exists():
        H = np.loadtxt(emb, delimiter=",", ndmin=2)
        r = distance_ratio(H[mask], d["labels"][mask])
        rec.distance_ratio = r.value
        rec.meta["distance_ratio"] = asdict(r)
    print(json.dumps(rec.to_dict(), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sb", description="Structure-balanced imbalanced node classification")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="train and evaluate over seeds")
    _experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-rho", help="repeat a run over labeled-imbalance ratios")
    _experiment_flags(p)
    p.add_argument("--rhos", help="comma separated (default 0.1,0.3,0.5,0.7,0.9)")
    p.set_defaults(func=cmd_sweep_rho)

    p = sub.add_parser("ablate", help="full model, without enhancement, without diffusion, without both")
    _experiment_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("theory", help="numerical checks on two-block SBMs")
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--q", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", help="report JSON path; CSV curves are written beside it")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("export-diffusion", help="write the enhanced adjacency and diffusion operator as CSV")
    _experiment_flags(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("metrics", help="recompute metrics from a saved predictions dump")
    p.add_argument("--from", dest="source", required=True, help="predictions.npz or a seed directory")
    p.add_argument("--mask", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, GraphFormatError, NodeIndexError, FileNotFoundError) as exc:
        print(f"sb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
