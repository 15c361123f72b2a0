import json

import numpy as np
import pytest

from graphsb import ConfigurationError
from graphsb.balance import normalize_adjacency
from graphsb.cli import main
from graphsb.experiment import ExperimentConfig, aggregate, load_dataset, run_experiment, split_graph, structural_balance
from graphsb.train import TrainConfig

SMALL = {"n1": 20, "n2": 60, "p": 0.2, "q": 0.02, "feature_dim": 6, "centroid_gap": 2.0}


def small_config(tmp_path=None, **kw):
    base = dict(
        sbm=dict(SMALL),
        labeled_per_majority=10,
        seeds=[0, 1],
        train=TrainConfig(max_epochs=20, pretrain_epochs=3, patience=50),
        output_dir=str(tmp_path) if tmp_path else None,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_roundtrip(self):
        cfg = small_config(alpha=0.4)
        back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg and back.digest() == cfg.digest()

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict({"alhpa": 0.2})
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict({"train": {"lr_": 1}})

    def test_bad_values(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(ablate="all")
        with pytest.raises(ConfigurationError):
            ExperimentConfig(alpha=1.0)

    def test_digest_changes(self):
        assert small_config().digest() != small_config(alpha=0.3).digest()


class TestPipeline:
    def test_ablate_both_is_plain_gcn(self):
        cfg = small_config(ablate="both")
        g = split_graph(load_dataset(cfg, 0), cfg, 0)
        st = structural_balance(g, cfg)
        assert st.report is None and not st.dropout_operator
        assert (st.graph.adjacency != g.adjacency).nnz == 0
        assert abs(st.S - normalize_adjacency(g.adjacency)).max() == 0

    def test_full_structure(self):
        cfg = small_config()
        g = split_graph(load_dataset(cfg, 0), cfg, 0)
        st = structural_balance(g, cfg)
        assert st.dropout_operator and st.report is not None
        assert (st.graph.adjacency.toarray() >= g.adjacency.toarray()).all()
        assert st.S.min() >= 0 and (st.S.data >= cfg.truncate_eps).all()

    def test_deterministic_aggregate_and_artifacts(self, tmp_path):
        run_experiment(small_config(tmp_path / "a"))
        run_experiment(small_config(tmp_path / "b"))
        a = (tmp_path / "a" / "aggregate.json").read_text()
        b = (tmp_path / "b" / "aggregate.json").read_text()
        assert a == b
        agg = json.loads(a)
        assert agg["n_seeds"] == 2 and agg["failed_seeds"] == []
        runs = (tmp_path / "a" / "runs.jsonl").read_text().splitlines()
        assert len(runs) == 2
        sd = tmp_path / "a" / "seed0"
        for name in ("embeddings.csv", "predictions.npz", "rl_trace.csv", "history.csv", "enhancement.json", "checkpoint.json"):
            assert (sd / name).exists(), name
        H = np.loadtxt(sd / "embeddings.csv", delimiter=",")
        assert H.shape == (80, 32)

    def test_external_ids_written_with_outputs(self, tmp_path):
        from dataclasses import replace

        from graphsb.graph import save_graph

        g = load_dataset(small_config(), 0)
        save_graph(replace(g, node_ids=tuple(f"paper{i}" for i in range(g.n))), tmp_path / "data")
        run_experiment(small_config(tmp_path / "out", dataset=str(tmp_path / "data"), sbm=None, seeds=[0]))
        ids = (tmp_path / "out" / "seed0" / "node_ids.txt").read_text().split()
        assert ids[:2] == ["paper0", "paper1"] and len(ids) == g.n

    def test_rerun_overwrites_runs(self, tmp_path):
        cfg = small_config(tmp_path, seeds=[0])
        run_experiment(cfg)
        run_experiment(cfg)
        assert len((tmp_path / "runs.jsonl").read_text().splitlines()) == 1

    def test_failing_seed_is_recorded(self, tmp_path, monkeypatch):
        import graphsb.experiment as ex

        real = ex.run_seed

        def flaky(config, seed, out_dir=None):
            if seed == 1:
                raise ConfigurationError("synthetic failure")
            return real(config, seed, out_dir)

        monkeypatch.setattr(ex, "run_seed", flaky)
        records, agg = run_experiment(small_config(tmp_path, seeds=[0, 1, 2]))
        assert agg["n_seeds"] == 2 and agg["failed_seeds"] == [1]
        assert "synthetic failure" in records[1]["error"]
        assert len((tmp_path / "runs.jsonl").read_text().splitlines()) == 3

    def test_aggregate_sample_std(self):
        recs = [{"seed": i, "metrics": {"accuracy": a, "macro_f1": a, "roc_auc": a, "distance_ratio": a}}
                for i, a in enumerate([0.5, 0.7, 0.9])]
        recs.append({"seed": 9, "error": "boom"})
        agg = aggregate(recs)
        assert agg["accuracy"]["mean"] == pytest.approx(0.7)
        assert agg["accuracy"]["std"] == pytest.approx(0.2)
        assert agg["failed_seeds"] == [9]


class TestCli:
    def test_run_and_metrics(self, tmp_path, capsys):
        cfg = small_config().to_dict()
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        code = main(["run", "--config", str(cfg_path), "--seed", "1", "--max-epochs", "15", "--out", str(out)])
        assert code == 0
        saved = json.loads((out / "config.json").read_text())
        assert saved["seeds"] == [1] and saved["train"]["max_epochs"] == 15
        rec = json.loads((out / "runs.jsonl").read_text())
        capsys.readouterr()
        assert main(["metrics", "--from", str(out / "seed1")]) == 0
        again = json.loads(capsys.readouterr().out)
        assert again["accuracy"] == pytest.approx(rec["metrics"]["accuracy"])
        assert again["macro_f1"] == pytest.approx(rec["metrics"]["macro_f1"])
        assert again["distance_ratio"] == pytest.approx(rec["metrics"]["distance_ratio"])

    def test_export_roundtrip(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(small_config().to_dict()))
        target = tmp_path / "S.csv"
        assert main(["export-diffusion", "--config", str(cfg_path), "--alpha", "0.3", "--steps", "3",
                     "--p-drop", "0", "--seed", "0", "--out", str(target)]) == 0
        S = np.loadtxt(target, delimiter=",")
        A2 = np.loadtxt(tmp_path / "S_adjacency.csv", delimiter=",")
        cfg = small_config(alpha=0.3, steps=3)
        g = split_graph(load_dataset(cfg, 0), cfg, 0)
        st = structural_balance(g, cfg)
        assert np.abs(S - st.S.toarray()).max() < 1e-9
        assert (A2 >= g.adjacency.toarray()).all()
        np.testing.assert_array_equal(A2, st.graph.adjacency.toarray())

    def test_export_directory_with_dropout(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(small_config().to_dict()))
        assert main(["export-diffusion", "--config", str(cfg_path), "--p-drop", "0.2", "--out", str(tmp_path / "d")]) == 0
        S = np.loadtxt(tmp_path / "d" / "S.csv", delimiter=",")
        np.testing.assert_array_equal(S, S.T)

    def test_oversample_flag(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(small_config().to_dict()))
        for value in ("fixed:0.5", "0.5", "none"):
            out = tmp_path / value.replace(":", "_")
            assert main(["run", "--config", str(cfg_path), "--seed", "0", "--max-epochs", "5",
                         "--oversample-scale", value, "--out", str(out)]) == 0
        assert main(["run", "--config", str(cfg_path), "--oversample-scale", "lots"]) == 2

    def test_ablate_verb(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(small_config(seeds=[0]).to_dict()))
        assert main(["ablate", "--config", str(cfg_path), "--max-epochs", "5", "--out", str(tmp_path / "ab")]) == 0
        rows = json.loads((tmp_path / "ab" / "ablate.json").read_text())
        assert [r["ablate"] for r in rows] == ["none", "se", "rd", "both"]

    def test_sweep_rho(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(small_config(seeds=[0]).to_dict()))
        assert main(["sweep-rho", "--config", str(cfg_path), "--rhos", "0.3,0.9", "--max-epochs", "5",
                     "--out", str(tmp_path / "sw")]) == 0
        header = (tmp_path / "sw" / "sweep_rho.csv").read_text().splitlines()[0]
        assert header.startswith("rho,accuracy")

    def test_theory_verb(self, tmp_path):
        assert main(["theory", "--seeds", "2", "--layers", "3", "--out", str(tmp_path / "t.json")]) == 0
        assert json.loads((tmp_path / "t.json").read_text())["gamma"] == pytest.approx(3.4)

    def test_missing_dataset_exit_code(self, tmp_path):
        # every seed fails to load, so nothing is aggregated
        assert main(["run", "--dataset", str(tmp_path / "nope"), "--seed", "0"]) == 1

    def test_bad_config_exit_code(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"bogus": 1}))
        assert main(["run", "--config", str(cfg_path)]) == 2
