"""Experiment orchestration: build a split, apply structural balance, train, evaluate, persist."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from graphsb.balance import (
    enhance_structure,
    identify_minority_classes,
    normalize_adjacency,
    relation_diffusion,
    truncate,
)
from graphsb.errors import ConfigurationError
from graphsb.graph import Graph, SbmSpec, SplitSpec, generate_sbm, load_graph_dir, load_linqs, make_split
from graphsb.metrics import compute_metrics, distance_ratio
from graphsb.train import TrainConfig, train

log = logging.getLogger(__name__)

RESULTS_VERSION = 1
ABLATIONS = ("none", "se", "rd", "both")


@dataclass
class ExperimentConfig:
    """One experiment. ``dataset`` is a directory in the three-file format,
    ``linqs:<dir>`` for a directory holding ``*.content``/``*.cites``, or
    ``sbm`` to generate graphs from the ``sbm`` block."""

    dataset: str = "sbm"
    sbm: dict = field(
        default_factory=lambda: {"n1": 50, "n2": 500, "p": 0.05, "q": 0.01, "feature_dim": 16, "centroid_gap": 2.0}
    )
    rho: float = 0.5
    labeled_per_majority: int = 20
    minority: int | list = 1
    split_protocol: str = "controlled"
    alpha: float = 0.15
    steps: int = 4
    truncate_eps: float = 1e-4
    max_hops: int = 4
    ablate: str = "none"
    normalize_features: bool = False
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.ablate not in ABLATIONS:
            raise ConfigurationError(f"ablate must be one of {ABLATIONS}, got {self.ablate!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def use_se(self) -> bool:
        return self.ablate not in ("se", "both")

    @property
    def use_rd(self) -> bool:
        return self.ablate not in ("rd", "both")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = asdict(self.train)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "train" in d:
            tknown = {f.name for f in fields(TrainConfig)}
            bad = set(d["train"]) - tknown
            if bad:
                raise ConfigurationError(f"unknown train config keys: {sorted(bad)}")
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)

    def digest(self) -> str:
        """Short hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def benchmark_config(**overrides) -> ExperimentConfig:
    """The imbalanced two-block SBM benchmark used for end-to-end comparisons."""
    base = dict(
        sbm={"n1": 50, "n2": 500, "p": 0.02, "q": 0.01, "feature_dim": 16, "centroid_gap": 2.0},
        alpha=0.3,
        train=TrainConfig(max_epochs=400, patience=100),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def load_dataset(config: ExperimentConfig, seed: int) -> Graph:
    if config.dataset == "sbm":
        s = dict(config.sbm)
        feature_dim = s.pop("feature_dim", 16)
        gap = s.pop("centroid_gap", 2.0)
        base = s.pop("seed", 0)
        return generate_sbm(SbmSpec(seed=base + seed, **s), feature_dim=feature_dim, centroid_gap=gap)
    if config.dataset.startswith("linqs:"):
        d = Path(config.dataset[6:])
        content = next(d.glob("*.content"), None)
        cites = next(d.glob("*.cites"), None)
        if content is None or cites is None:
            raise ConfigurationError(f"{d} has no *.content / *.cites pair")
        return load_linqs(content, cites)
    return load_graph_dir(config.dataset)


def split_graph(g: Graph, config: ExperimentConfig, seed: int) -> Graph:
    minority = config.minority if isinstance(config.minority, int) else tuple(config.minority)
    spec = SplitSpec(
        rho=config.rho,
        labeled_per_majority=config.labeled_per_majority,
        minority_classes=minority,
        seed=seed,
        protocol=config.split_protocol,
    )
    return g.with_masks(*make_split(g, spec))


def minority_count(config: ExperimentConfig, g: Graph) -> int:
    if isinstance(config.minority, int):
        return config.minority
    return len(config.minority)


@dataclass
class Structure:
    graph: Graph
    S: sp.csr_matrix
    minority: tuple
    report: object = None
    dropout_operator: bool = True


def structural_balance(g: Graph, config: ExperimentConfig) -> Structure:
    """Apply enhancement and diffusion as the ablation flags allow.

    Without diffusion the operator is the plain normalized adjacency and no
    entry dropout is applied.
    """
    minority = identify_minority_classes(g.labels, g.train_mask, minority_count(config, g), g.num_classes)
    report = None
    if config.use_se:
        g, report = enhance_structure(g, minority, max_hops=config.max_hops)
    a_hat = normalize_adjacency(g.adjacency)
    if config.use_rd:
        S = truncate(relation_diffusion(a_hat, config.alpha, config.steps).S, config.truncate_eps)
        return Structure(g, S, minority, report, True)
    return Structure(g, a_hat, minority, report, False)


def _prepare_features(g: Graph, config: ExperimentConfig) -> Graph:
    if not config.normalize_features:
        return g
    X = g.features
    s = X.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return replace(g, features=X / s)


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path | None = None) -> dict:
    """Build, train and evaluate one seed. Returns a JSON-serializable record."""
    t0 = time.perf_counter()
    g = _prepare_features(load_dataset(config, seed), config)
    g = split_graph(g, config, seed)
    st = structural_balance(g, config)
    tcfg = replace(config.train, seed=seed)
    result = train(st.graph, st.S, tcfg, st.minority, dropout_operator=st.dropout_operator)
    rec = compute_metrics(result.probabilities, g.labels, g.test_mask, g.num_classes)
    ratio = distance_ratio(result.embeddings[g.test_mask], g.labels[g.test_mask])
    rec.distance_ratio = ratio.value
    record = {
        "version": RESULTS_VERSION,
        "seed": seed,
        "config_hash": config.digest(),
        "ablate": config.ablate,
        "rho": config.rho,
        "metrics": rec.to_dict(),
        "distance_ratio": asdict(ratio),
        "minority": list(st.minority),
        "final_scales": {str(k): v for k, v in result.state.scales.items()},
        "best_epoch": result.state.best_epoch,
        "epochs_run": len(result.history),
        "edges_added": st.report.total_added if st.report else 0,
        "wall_time": time.perf_counter() - t0,
    }
    if out_dir is not None:
        sd = out_dir / f"seed{seed}"
        sd.mkdir(parents=True, exist_ok=True)
        np.savetxt(sd / "embeddings.csv", result.embeddings, delimiter=",", fmt="%.10g")
        np.savez(sd / "predictions.npz", probabilities=result.probabilities, labels=g.labels,
                 train_mask=g.train_mask, val_mask=g.val_mask, test_mask=g.test_mask)
        with open(sd / "rl_trace.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "class", "scale", "reward", "action", "epsilon"])
            w.writeheader()
            w.writerows(result.rl_trace)
        with open(sd / "history.csv", "w", newline="") as fh:
            keys = sorted({k for row in result.history for k in row})
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(result.history)
        if st.report is not None:
            (sd / "enhancement.json").write_text(json.dumps(st.report.to_dict(), indent=1))
        (sd / "checkpoint.json").write_text(json.dumps(result.state.to_dict()))
        if g.node_ids is not None:
            # row i of every output belongs to external id node_ids[i]
            (sd / "node_ids.txt").write_text("\n".join(g.node_ids) + "\n")
    return record


def aggregate(records: list) -> dict:
    """Mean and sample standard deviation of every scalar metric over successful seeds."""
    ok = [r for r in records if "error" not in r]
    out = {"version": RESULTS_VERSION, "n_seeds": len(ok), "failed_seeds": [r["seed"] for r in records if "error" in r]}
    for key in ("accuracy", "macro_f1", "roc_auc", "distance_ratio"):
        vals = np.array([r["metrics"][key] for r in ok], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        out[key] = {
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "n": int(vals.size),
        }
    return out


def _threads():
    n = os.environ.get("SB_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def run_experiment(config: ExperimentConfig) -> tuple[list, dict]:
    """Run every seed; a failing seed is recorded and the others continue."""
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, default=str))
        (out_dir / "runs.jsonl").write_text("")
    limiter = _threads()
    records = []
    try:
        for seed in config.seeds:
            try:
                rec = run_seed(config, seed, out_dir)
            except Exception as exc:  # noqa: BLE001 - one bad seed must not sink the sweep
                log.error("seed %s failed: %s", seed, exc)
                rec = {"version": RESULTS_VERSION, "seed": seed, "config_hash": config.digest(),
                       "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
            records.append(rec)
            if out_dir is not None:
                with open(out_dir / "runs.jsonl", "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True, default=float) + "\n")
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    agg = aggregate(records)
    agg["config_hash"] = config.digest()
    agg["ablate"] = config.ablate
    agg["rho"] = config.rho
    if out_dir is not None:
        (out_dir / "aggregate.json").write_text(json.dumps(agg, indent=1, sort_keys=True))
    return records, agg


def export_structure(config: ExperimentConfig, seed: int, out, p_drop: float = 0.0) -> dict:
    """Plug-in mode: run only structural balance and write ``A'`` and the operator as CSV.

    ``out`` is either a ``.csv`` path for the operator (the adjacency goes to
    ``<stem>_adjacency.csv`` beside it) or a directory receiving ``S.csv`` and
    ``adjacency.csv``. With ``p_drop > 0`` one dropout sample seeded by
    ``seed`` is applied to the operator.
    """
    from graphsb.balance import drop_entries

    out = Path(out)
    if out.suffix.lower() == ".csv":
        out.parent.mkdir(parents=True, exist_ok=True)
        s_path = out
        a_path = out.with_name(f"{out.stem}_adjacency.csv")
        r_path = out.with_name(f"{out.stem}_enhancement.json")
    else:
        out.mkdir(parents=True, exist_ok=True)
        s_path, a_path, r_path = out / "S.csv", out / "adjacency.csv", out / "enhancement.json"
    g = split_graph(load_dataset(config, seed), config, seed)
    st = structural_balance(g, config)
    S = st.S
    if p_drop > 0.0:
        S = drop_entries(S, p_drop, np.random.default_rng(seed))
    np.savetxt(s_path, S.toarray(), delimiter=",", fmt="%.17g")
    np.savetxt(a_path, st.graph.adjacency.toarray(), delimiter=",", fmt="%d")
    written = {"S": str(s_path), "adjacency": str(a_path), "n": g.n}
    if st.report is not None:
        r_path.write_text(json.dumps(st.report.to_dict(), indent=1))
        written["enhancement"] = str(r_path)
    return written
