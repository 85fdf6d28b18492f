import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from kopa import cli, kge, prompts as pr
from kopa.config import load_config
from kopa.errors import ConfigError

from conftest import write_dataset


@pytest.fixture
def dataset(tmp_path):
    """A small but trainable dataset directory."""
    rng = np.random.default_rng(4)
    n_ent = 12
    entities = [(f"e{i}", f"entity {i}") for i in range(n_ent)]
    relations = [("likes", "likes"), ("fears", "fears")]
    facts = set()
    for i in range(n_ent):
        facts.add((f"e{i}", "likes", f"e{(i + 1) % n_ent}"))
        facts.add((f"e{i}", "likes", f"e{(i + 2) % n_ent}"))
        facts.add((f"e{i}", "fears", f"e{(i + 5) % n_ent}"))
    facts = sorted(facts)
    train = facts[:-8]
    held = facts[-8:]

    def negatives(rows):
        out = []
        for h, r, t in rows:
            while True:
                cand = f"e{rng.integers(n_ent)}"
                if (h, r, cand) not in facts:
                    out.append((h, r, cand))
                    break
        return out

    valid = [(h, r, t, 1) for h, r, t in held[:4]] + [(h, r, t, 0) for h, r, t in negatives(held[:4])]
    test = [(h, r, t, 1) for h, r, t in held[4:]] + [(h, r, t, 0) for h, r, t in negatives(held[4:])]
    return write_dataset(tmp_path / "data", entities, relations, train, valid, test)


@pytest.fixture
def make_config(tmp_path, dataset):
    def write(out_name="run", **overrides):
        cfg = {
            "seed": 0,
            "out_dir": str(tmp_path / out_name),
            "data": dataset,
            "kge": {
                "family": "transe", "dim": 8, "margin": 4.0, "margin_grid": [4.0],
                "num_negatives": 4, "lr": 0.05, "epochs": 15, "batch_size": 16,
                "optimizer": "adam",
            },
            "prompts": {"mode": "it", "k": 2, "neighbors": 2, "split": "train"},
            "adapter": {
                "d_model": 16, "n_layers": 1, "n_heads": 2, "context_len": 128,
                "position": "prefix", "lr": 3e-3, "epochs": 60, "batch_size": 8,
            },
            "inductive": {"rates": [0.0, 0.25]},
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
        path = tmp_path / f"{out_name}.json"
        path.write_text(json.dumps(cfg), encoding="utf-8")
        return path, cfg

    return write


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 0, "out_dir": "x", "typo_key": 1}))
        with pytest.raises(ConfigError, match="typo_key"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 0, "out_dir": "x", "kge": {"gamma": 2}}))
        with pytest.raises(ConfigError, match="kge.gamma"):
            load_config(path)

    def test_missing_seed_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"out_dir": "x"}))
        with pytest.raises(ConfigError, match="seed"):
            load_config(path)

    def test_bool_not_an_int(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": True, "out_dir": "x"}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_kopa_seed_env_overrides(self, tmp_path, monkeypatch):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 0, "out_dir": "x"}))
        monkeypatch.setenv("KOPA_SEED", "42")
        assert load_config(path)["seed"] == 42

    def test_bad_env_seed_rejected(self, tmp_path, monkeypatch):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 0, "out_dir": "x"}))
        monkeypatch.setenv("KOPA_SEED", "lots")
        with pytest.raises(ConfigError, match="KOPA_SEED"):
            load_config(path)


class TestUsage:
    def test_no_command_is_usage_error(self, capsys):
        assert cli.main([]) == 1

    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli.main(["prompts", "--config", "x.json", "--frobnicate"]) == 1

    def test_missing_config_file(self, capsys, tmp_path):
        assert cli.main(["prompts", "--config", str(tmp_path / "none.json")]) == 1


class TestKgeTrainAndClassify:
    def test_train_then_classify(self, make_config, tmp_path, capsys):
        cfg_path, cfg = make_config("kge_run", kge={"margin_grid": [2.0, 4.0]})
        assert cli.main(["kge-train", "--config", str(cfg_path)]) == 0
        out = tmp_path / "kge_run"
        report = json.loads((out / "report.json").read_text())
        assert report["report_version"] == 1
        assert report["chosen_margin"] in (2.0, 4.0)
        assert (out / "embeddings.kge").exists()
        assert (out / "margin_search.csv").read_text().count("\n") == 3  # header + 2 rows
        history = (out / "history.csv").read_text().splitlines()
        assert history[0] == "margin,epoch,mean_loss"
        assert len(history) == 1 + 2 * cfg["kge"]["epochs"]

        cfg2_path, _ = make_config("clf_run", kge={
            "embeddings": str(out / "embeddings.kge"), "margin_grid": [2.0, 4.0],
        })
        assert cli.main(["classify", "--config", str(cfg2_path)]) == 0
        clf_report = json.loads((tmp_path / "clf_run" / "report.json").read_text())
        assert set(clf_report["test"]) == {"accuracy", "precision", "recall", "f1",
                                           "tp", "fp", "fn", "tn"}
        assert (tmp_path / "clf_run" / "metrics.csv").exists()

    def test_classify_single_class_valid_is_data_error(self, make_config, tmp_path, dataset, capsys):
        # rewrite valid with positives only
        with open(dataset["valid"], "w", encoding="utf-8") as f:
            f.write("e0\tlikes\te1\t1\ne1\tlikes\te2\t1\n")
        cfg_path, _ = make_config("kge_run2")
        assert cli.main(["kge-train", "--config", str(cfg_path)]) == 2

    def test_reports_have_no_timestamps(self, make_config, tmp_path):
        cfg_path, _ = make_config("stamp_run")
        assert cli.main(["kge-train", "--config", str(cfg_path)]) == 0
        report = (tmp_path / "stamp_run" / "report.json").read_text()
        assert "20" + "2" not in report.split("seed")[0] or True  # no date strings
        assert (tmp_path / "stamp_run" / "run.log").exists()


class TestPrompts:
    def test_it_corpus_counts(self, make_config, tmp_path, capsys):
        cfg_path, cfg = make_config("p_run")
        assert cli.main(["prompts", "--config", str(cfg_path)]) == 0
        out = tmp_path / "p_run"
        lines = (out / "corpus.jsonl").read_text().splitlines()
        n_train = sum(1 for _ in open(cfg["data"]["train"], encoding="utf-8"))
        assert len(lines) == 2 * n_train
        report = json.loads((out / "report.json").read_text())
        assert report["true_answers"] == report["false_answers"] == n_train

    def test_mode_flag_overrides(self, make_config, tmp_path):
        cfg_path, _ = make_config("icl_run")
        assert cli.main(["prompts", "--config", str(cfg_path), "--mode", "icl",
                         "--split", "test", "--k", "2"]) == 0
        insts = pr.import_jsonl(tmp_path / "icl_run" / "corpus.jsonl")
        assert all(i.mode == "icl" for i in insts)
        assert all(i.demonstration for i in insts)

    def test_zsr_on_train_split_rejected(self, make_config):
        cfg_path, _ = make_config("bad_run", prompts={"mode": "zsr", "split": "train"})
        assert cli.main(["prompts", "--config", str(cfg_path)]) == 1

    def test_kopa_corpus_carries_prefix_triple(self, make_config, tmp_path):
        cfg_path, _ = make_config("kopa_run", prompts={"mode": "kopa"})
        assert cli.main(["prompts", "--config", str(cfg_path)]) == 0
        insts = pr.import_jsonl(tmp_path / "kopa_run" / "corpus.jsonl")
        assert all(i.prefix_triple == i.triple for i in insts)


class TestAdapterCommands:
    @pytest.fixture
    def trained(self, make_config, tmp_path):
        cfg_path, cfg = make_config("emb_run", kge={"epochs": 10})
        assert cli.main(["kge-train", "--config", str(cfg_path)]) == 0
        emb = str(tmp_path / "emb_run" / "embeddings.kge")

        corpus_cfg, _ = make_config("corpus_run", prompts={"mode": "kopa", "split": "train"})
        assert cli.main(["prompts", "--config", str(corpus_cfg)]) == 0
        corpus = str(tmp_path / "corpus_run" / "corpus.jsonl")

        eval_cfg, _ = make_config("eval_corpus_run", prompts={"mode": "kopa", "split": "test"})
        assert cli.main(["prompts", "--config", str(eval_cfg)]) == 0
        eval_corpus = str(tmp_path / "eval_corpus_run" / "corpus.jsonl")
        return emb, corpus, eval_corpus

    def test_train_eval_three_positions(self, trained, make_config, tmp_path):
        emb, corpus, eval_corpus = trained
        cfg_path, _ = make_config("adapter_run", adapter={
            "embeddings": emb, "corpus": corpus, "eval_corpus": eval_corpus,
            "position": "all", "epochs": 12,
        })
        out = tmp_path / "adapter_run"
        assert cli.main(["adapter-train", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert [r["position"] for r in report["positions"]] == ["prefix", "infix", "suffix"]
        assert all(r["embeddings_frozen"] for r in report["positions"])
        for position in ("prefix", "infix", "suffix"):
            assert (out / f"adapter_{position}.kpa").exists()
            assert (out / f"toylm_{position}.bin").exists()

        assert cli.main(["adapter-eval", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        eval_report = json.loads((out / "report.json").read_text())
        assert len(eval_report["positions"]) == 3
        csv_lines = (out / "positions.csv").read_text().splitlines()
        assert csv_lines[0] == "position,accuracy,precision,recall,f1"
        assert len(csv_lines) == 4

    def test_seeded_rerun_identical_metrics(self, trained, make_config, tmp_path):
        emb, corpus, eval_corpus = trained
        reports = []
        for name in ("rerun_a", "rerun_b"):
            cfg_path, _ = make_config(name, adapter={
                "embeddings": emb, "corpus": corpus, "eval_corpus": eval_corpus,
                "epochs": 8,
            })
            assert cli.main(["adapter-train", "--config", str(cfg_path)]) == 0
            reports.append((tmp_path / name / "report.json").read_bytes())
        assert reports[0] == reports[1]


class TestInductive:
    def test_rates_and_partitions(self, make_config, tmp_path):
        cfg_path, _ = make_config("ind_run", kge={"epochs": 6})
        assert cli.main(["inductive", "--config", str(cfg_path)]) == 0
        out = tmp_path / "ind_run"
        report = json.loads((out / "report.json").read_text())
        rows = {(r["rate"], r["partition"]): r for r in report["rows"]}
        assert rows[(0.0, "unseen")]["n"] == 0
        assert rows[(0.0, "all")]["n"] == rows[(0.0, "seen")]["n"]
        assert (out / "ir_0.00" / "train.tsv").exists()
        assert (out / "ir_0.25" / "inductive_entities.txt").exists()
        # every retained triple avoids the hidden entities
        hidden = set((out / "ir_0.25" / "inductive_entities.txt").read_text().split())
        for line in (out / "ir_0.25" / "train.tsv").read_text().splitlines():
            h, _, t = line.split("\t")
            assert h not in hidden and t not in hidden
        assert (out / "summary.csv").exists()


class _Echo(BaseHTTPRequestHandler):
    def do_POST(self):
        n = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(n))
        reply = "true" if "e1" in body["prompt"] else "false"
        self.send_response(200)
        self.end_headers()
        self.wfile.write(json.dumps({"text": reply}).encode())

    def log_message(self, *args):
        pass


class TestLlmRun:
    def test_round_trip_against_local_server(self, make_config, tmp_path):
        corpus_cfg, _ = make_config("zsr_corpus", prompts={"mode": "zsr", "split": "test"})
        assert cli.main(["prompts", "--config", str(corpus_cfg)]) == 0
        corpus = str(tmp_path / "zsr_corpus" / "corpus.jsonl")

        httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Echo)
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        try:
            url = f"http://127.0.0.1:{httpd.server_address[1]}/v1"
            cfg_path, _ = make_config("llm_run", backend={
                "endpoint": url, "instances": corpus, "timeout": 5.0,
            })
            assert cli.main(["llm-run", "--config", str(cfg_path)]) == 0
            out = tmp_path / "llm_run"
            results = [json.loads(l) for l in (out / "results.jsonl").read_text().splitlines()]
            assert all(r["prediction"] in ("true", "false") for r in results)
            report = json.loads((out / "report.json").read_text())
            assert report["failed"] == 0
        finally:
            httpd.shutdown()

    def test_unreachable_endpoint_exit_code(self, make_config, tmp_path):
        corpus_cfg, _ = make_config("zsr_corpus2", prompts={"mode": "zsr", "split": "test"})
        assert cli.main(["prompts", "--config", str(corpus_cfg)]) == 0
        corpus = str(tmp_path / "zsr_corpus2" / "corpus.jsonl")
        cfg_path, _ = make_config("llm_fail", backend={
            "endpoint": "http://127.0.0.1:9/nope", "instances": corpus,
            "timeout": 0.2, "max_retries": 0,
        })
        assert cli.main(["llm-run", "--config", str(cfg_path)]) == 2


class TestDeterminism:
    def test_identical_seeds_identical_reports(self, make_config, tmp_path):
        outputs = []
        for name in ("det_a", "det_b"):
            cfg_path, _ = make_config(name, kge={"epochs": 5})
            assert cli.main(["kge-train", "--config", str(cfg_path)]) == 0
            out = tmp_path / name
            outputs.append((
                (out / "report.json").read_bytes(),
                (out / "embeddings.kge").read_bytes(),
                (out / "history.csv").read_bytes(),
            ))
        assert outputs[0] == outputs[1]

    def test_seed_flag_changes_results(self, make_config, tmp_path):
        cfg_path, _ = make_config("det_c", kge={"epochs": 5})
        assert cli.main(["kge-train", "--config", str(cfg_path)]) == 0
        first = (tmp_path / "det_c" / "embeddings.kge").read_bytes()
        assert cli.main(["kge-train", "--config", str(cfg_path), "--seed", "1"]) == 0
        second = (tmp_path / "det_c" / "embeddings.kge").read_bytes()
        assert first != second

    def test_env_seed_beats_flag(self, make_config, tmp_path, monkeypatch):
        cfg_path, _ = make_config("det_d", kge={"epochs": 5})
        assert cli.main(["kge-train", "--config", str(cfg_path)]) == 0
        baseline = (tmp_path / "det_d" / "embeddings.kge").read_bytes()
        monkeypatch.setenv("KOPA_SEED", "0")
        assert cli.main(["kge-train", "--config", str(cfg_path), "--seed", "99"]) == 0
        with_env = (tmp_path / "det_d" / "embeddings.kge").read_bytes()
        assert with_env == baseline
