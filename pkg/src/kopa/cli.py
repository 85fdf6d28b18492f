"""Command-line orchestration.

Commands: ``kge-train``, ``classify``, ``prompts``, ``adapter-train``,
``adapter-eval``, ``inductive``, ``llm-run``. Every command reads a JSON
config (see config.py), is reproducible under its seed, and writes
byte-stable reports; timestamps appear only in the ``run.log`` sidecar.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import classify, kge, prompts as pr, toylm
from .adapter import init_adapter, load_adapter, save_adapter
from .backend import BackendResult, CompletionBackend, run_backend
from .config import SCHEMA, apply_seed_env, load_config, require_section
from .errors import (
    ConfigError,
    CorruptionExhaustedError,
    DataError,
    DegenerateSplitError,
    FitError,
    FormatError,
    KopaError,
    ParseError,
    TrainingDivergenceError,
)
from .kg import (
    load_graph,
    make_inductive_split,
    write_entity_set,
    write_labeled,
    write_triples,
)

log = logging.getLogger(__name__)

REPORT_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_run_dir(out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    root = logging.getLogger("kopa")
    for old in [h for h in root.handlers if isinstance(h, logging.FileHandler)]:
        root.removeHandler(old)
        old.close()
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.setLevel(logging.INFO)
    root.addHandler(handler)


def _write_report(out_dir, command: str, payload: dict) -> None:
    payload = {"report_version": REPORT_VERSION, "command": command, **payload}
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _require_file(path, what: str):
    if path is None:
        raise ConfigError(f"config is missing a path for {what}")
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    return path


def _load_dataset(cfg):
    data = require_section(cfg, "data")
    for key in ("train", "valid", "test", "entities", "relations"):
        _require_file(data[key], f"data.{key}")
    return load_graph(data["train"], data["valid"], data["test"],
                      data["entities"], data["relations"])


def _metrics_dict(m: classify.Metrics) -> dict:
    return m.as_dict()


def _fit_and_eval(model, valid, test):
    valid_scores = model.score_many([lt.triple for lt in valid])
    clf = classify.fit_threshold(zip(valid_scores, (lt.label for lt in valid)))
    val_acc = classify.evaluate(clf.predict(valid_scores), [lt.label for lt in valid]).accuracy
    test_scores = model.score_many([lt.triple for lt in test])
    metrics = classify.evaluate(clf.predict(test_scores), [lt.label for lt in test])
    return clf, val_acc, metrics


def cmd_kge_train(cfg) -> int:
    kcfg = require_section(cfg, "kge")
    graph, valid, _ = _load_dataset(cfg)
    out = cfg["out_dir"]
    grid = [float(g) for g in kcfg["margin_grid"]]
    history_rows = []
    search_rows = []
    best = None
    for margin in grid:
        tc = kge.TrainConfig(
            num_negatives=kcfg["num_negatives"], lr=kcfg["lr"], epochs=kcfg["epochs"],
            batch_size=kcfg["batch_size"], adv_temperature=kcfg["adv_temperature"],
            seed=cfg["seed"], margin_grid=tuple(grid), optimizer=kcfg["optimizer"],
        )
        try:
            model, history = kge.train(graph, tc, kcfg["family"], kcfg["dim"], margin)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"margin {margin}: {exc}") from exc
        history_rows.extend((margin, e, loss) for e, loss in enumerate(history))
        clf, val_acc, _ = _fit_and_eval(model, valid, valid)
        search_rows.append((margin, val_acc, clf.theta))
        log.info("margin %.1f: validation accuracy %.4f", margin, val_acc)
        if best is None or val_acc > best[1]:
            best = (margin, val_acc, clf.theta, model)
    margin, val_acc, theta, model = best
    emb_path = os.path.join(out, "embeddings.kge")
    kge.save_embeddings(model, emb_path)
    _write_csv(os.path.join(out, "history.csv"), ["margin", "epoch", "mean_loss"], history_rows)
    _write_csv(os.path.join(out, "margin_search.csv"),
               ["margin", "val_accuracy", "threshold"], search_rows)
    _write_report(out, "kge-train", {
        "family": kcfg["family"],
        "dim": kcfg["dim"],
        "margin_grid": grid,
        "chosen_margin": margin,
        "val_accuracy": val_acc,
        "threshold": theta,
        "seed": cfg["seed"],
        "embeddings": "embeddings.kge",
        "num_entities": graph.num_entities,
        "num_relations": graph.num_relations,
        "num_train_triples": len(graph.triples),
    })
    print(f"chose margin {margin} (validation accuracy {val_acc:.4f}); wrote {emb_path}")
    return EXIT_OK


def cmd_classify(cfg) -> int:
    kcfg = require_section(cfg, "kge")
    graph, valid, test = _load_dataset(cfg)
    out = cfg["out_dir"]
    emb = _require_file(kcfg["embeddings"], "kge.embeddings")
    model = kge.load_embeddings(emb, kg=graph)
    clf, val_acc, metrics = _fit_and_eval(model, valid, test)
    d = _metrics_dict(metrics)
    _write_report(out, "classify", {
        "embeddings": emb,
        "threshold": clf.theta,
        "val_accuracy": val_acc,
        "test": d,
        "seed": cfg["seed"],
    })
    _write_csv(os.path.join(out, "metrics.csv"),
               ["accuracy", "precision", "recall", "f1", "tp", "fp", "fn", "tn"],
               [[d["accuracy"], d["precision"], d["recall"], d["f1"],
                 d["tp"], d["fp"], d["fn"], d["tn"]]])
    print(f"threshold {clf.theta:.6g}: test accuracy {d['accuracy']:.4f}, f1 {d['f1']:.4f}")
    return EXIT_OK


def cmd_prompts(cfg) -> int:
    pcfg = require_section(cfg, "prompts")
    graph, valid, test = _load_dataset(cfg)
    out = cfg["out_dir"]
    rng = np.random.default_rng(cfg["seed"])
    mode, split = pcfg["mode"], pcfg["split"]
    if split == "train":
        if mode in ("zsr", "icl"):
            raise ConfigError(f"mode {mode!r} builds evaluation prompts; use split 'valid' or 'test'")
        instances = pr.build_training_corpus(graph, mode, rng, neighbors=pcfg["neighbors"])
    else:
        labeled = valid if split == "valid" else test
        instances = pr.build_eval_instances(graph, labeled, mode, rng,
                                            k=pcfg["k"], neighbors=pcfg["neighbors"])
    corpus_path = os.path.join(out, "corpus.jsonl")
    pr.export_jsonl(instances, corpus_path)
    n_true = sum(1 for i in instances if i.answer == pr.TRUE)
    n_false = sum(1 for i in instances if i.answer == pr.FALSE)
    _write_report(out, "prompts", {
        "mode": mode,
        "split": split,
        "k": pcfg["k"],
        "neighbors": pcfg["neighbors"],
        "instances": len(instances),
        "true_answers": n_true,
        "false_answers": n_false,
        "seed": cfg["seed"],
        "corpus": "corpus.jsonl",
    })
    print(f"wrote {len(instances)} {mode} instances to {corpus_path}")
    return EXIT_OK


def _positions(position: str) -> list[str]:
    return ["prefix", "infix", "suffix"] if position == "all" else [position]


def _adapter_setup(acfg):
    emb_path = _require_file(acfg["embeddings"], "adapter.embeddings")
    corpus_path = _require_file(acfg["corpus"], "adapter.corpus")
    embeddings = kge.load_embeddings(emb_path)
    corpus = pr.import_jsonl(corpus_path)
    if not corpus:
        raise DataError(f"{corpus_path}: empty corpus")
    return embeddings, corpus


def cmd_adapter_train(cfg) -> int:
    acfg = require_section(cfg, "adapter")
    out = cfg["out_dir"]
    embeddings, corpus = _adapter_setup(acfg)
    texts = [pr.render_prompt(i, include_answer=True) for i in corpus] + [f"{pr.TRUE} {pr.FALSE}"]
    rows = []
    history_rows = []
    for position in _positions(acfg["position"]):
        rng = np.random.default_rng(cfg["seed"])
        tokenizer = toylm.Tokenizer.build(texts)
        lm = toylm.init_toylm(tokenizer, rng, d_model=acfg["d_model"],
                              n_layers=acfg["n_layers"], n_heads=acfg["n_heads"],
                              context_len=acfg["context_len"])
        adapter = init_adapter(embeddings.entity_dim, acfg["d_model"], rng)
        tc = toylm.AdapterTrainConfig(
            epochs=acfg["epochs"], lr=acfg["lr"], batch_size=acfg["batch_size"],
            seed=cfg["seed"], position=position, loss_mode=acfg["loss_mode"],
        )
        adapter, lm, report = toylm.train_adapter(embeddings, corpus, lm, adapter, tc)
        save_adapter(adapter, os.path.join(out, f"adapter_{position}.kpa"))
        toylm.save_toylm(lm, os.path.join(out, f"toylm_{position}.bin"))
        history_rows.extend((position, e, loss) for e, loss in enumerate(report["loss_history"]))
        rows.append({
            "position": position,
            "final_loss": report["loss_history"][-1] if report["loss_history"] else None,
            "train_answer_accuracy": report["answer_accuracy"],
            "embeddings_frozen": report["embeddings_frozen"],
        })
        log.info("position %s: frozen-table check %s, train accuracy %.4f",
                 position, "pass" if report["embeddings_frozen"] else "FAIL",
                 report["answer_accuracy"])
    _write_csv(os.path.join(out, "history.csv"), ["position", "epoch", "mean_loss"], history_rows)
    _write_report(out, "adapter-train", {
        "positions": rows,
        "instances": len(corpus),
        "loss_mode": acfg["loss_mode"],
        "seed": cfg["seed"],
    })
    for r in rows:
        print(f"{r['position']}: train answer accuracy {r['train_answer_accuracy']:.4f} "
              f"(frozen tables: {'pass' if r['embeddings_frozen'] else 'FAIL'})")
    return EXIT_OK


def cmd_adapter_eval(cfg) -> int:
    acfg = require_section(cfg, "adapter")
    out = cfg["out_dir"]
    emb_path = _require_file(acfg["embeddings"], "adapter.embeddings")
    eval_path = _require_file(acfg["eval_corpus"], "adapter.eval_corpus")
    embeddings = kge.load_embeddings(emb_path)
    instances = pr.import_jsonl(eval_path)
    if not instances:
        raise DataError(f"{eval_path}: empty corpus")
    rows = []
    for position in _positions(acfg["position"]):
        adapter_file = acfg["adapter_file"] or os.path.join(out, f"adapter_{position}.kpa")
        lm_file = acfg["lm_file"] or os.path.join(out, f"toylm_{position}.bin")
        adapter = load_adapter(_require_file(adapter_file, "adapter.adapter_file"))
        lm = toylm.load_toylm(_require_file(lm_file, "adapter.lm_file"))
        preds, gold = [], []
        for inst in instances:
            if inst.answer is None:
                raise DataError("adapter evaluation needs instances with gold answers")
            preds.append(toylm.predict_answer(lm, adapter, embeddings, inst, position) == pr.TRUE)
            gold.append(inst.answer == pr.TRUE)
        metrics = classify.evaluate(preds, gold)
        rows.append({"position": position, **_metrics_dict(metrics)})
    _write_csv(os.path.join(out, "positions.csv"),
               ["position", "accuracy", "precision", "recall", "f1"],
               [[r["position"], r["accuracy"], r["precision"], r["recall"], r["f1"]]
                for r in rows])
    _write_report(out, "adapter-eval", {
        "positions": rows,
        "instances": len(instances),
        "seed": cfg["seed"],
    })
    for r in rows:
        print(f"{r['position']}: accuracy {r['accuracy']:.4f}, f1 {r['f1']:.4f}")
    return EXIT_OK


def cmd_inductive(cfg) -> int:
    kcfg = require_section(cfg, "kge")
    icfg = require_section(cfg, "inductive")
    graph, valid, test = _load_dataset(cfg)
    out = cfg["out_dir"]
    rows = []
    for rate in icfg["rates"]:
        rng = np.random.default_rng(cfg["seed"])
        try:
            split = make_inductive_split(graph, test, float(rate), rng)
        except DegenerateSplitError as exc:
            raise DegenerateSplitError(f"rate {rate}: {exc}") from exc
        split_dir = os.path.join(out, f"ir_{rate:.2f}")
        os.makedirs(split_dir, exist_ok=True)
        write_entity_set(os.path.join(split_dir, "inductive_entities.txt"), graph,
                         split.inductive_entities)
        write_triples(os.path.join(split_dir, "train.tsv"), graph, split.retained_train)
        hidden = split.inductive_entities
        valid_seen = [lt for lt in valid
                      if lt.triple[0] not in hidden and lt.triple[2] not in hidden]
        write_labeled(os.path.join(split_dir, "valid_seen.tsv"), graph, valid_seen)
        write_labeled(os.path.join(split_dir, "test_seen.tsv"), graph, split.seen_test)
        write_labeled(os.path.join(split_dir, "test_unseen.tsv"), graph, split.unseen_test)

        sub = type(graph)(graph.entities, graph.relations, split.retained_train,
                          graph.entity_desc, graph.relation_desc)
        tc = kge.TrainConfig(
            num_negatives=kcfg["num_negatives"], lr=kcfg["lr"], epochs=kcfg["epochs"],
            batch_size=kcfg["batch_size"], adv_temperature=kcfg["adv_temperature"],
            seed=cfg["seed"], optimizer=kcfg["optimizer"],
        )
        model, _ = kge.train(sub, tc, kcfg["family"], kcfg["dim"], kcfg["margin"])
        clf, _, _ = _fit_and_eval(model, valid_seen, valid_seen)
        for name, part in (("seen", split.seen_test), ("unseen", split.unseen_test),
                           ("all", list(split.seen_test) + list(split.unseen_test))):
            if part:
                scores = model.score_many([lt.triple for lt in part])
                m = classify.evaluate(clf.predict(scores), [lt.label for lt in part])
                rows.append({"rate": float(rate), "partition": name, "n": len(part),
                             "accuracy": m.accuracy, "f1": m.f1})
            else:
                rows.append({"rate": float(rate), "partition": name, "n": 0,
                             "accuracy": None, "f1": None})
        log.info("rate %.2f: %d hidden entities, %d retained triples",
                 rate, len(hidden), len(split.retained_train))
    _write_csv(os.path.join(out, "summary.csv"),
               ["rate", "partition", "n", "accuracy", "f1"],
               [[r["rate"], r["partition"], r["n"],
                 "" if r["accuracy"] is None else r["accuracy"],
                 "" if r["f1"] is None else r["f1"]] for r in rows])
    _write_report(out, "inductive", {"rows": rows, "seed": cfg["seed"]})
    for r in rows:
        acc = "n/a" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        print(f"ir={r['rate']:.2f} {r['partition']:>6} (n={r['n']}): accuracy {acc}")
    return EXIT_OK


def cmd_llm_run(cfg) -> int:
    bcfg = require_section(cfg, "backend")
    out = cfg["out_dir"]
    if not bcfg["endpoint"]:
        raise ConfigError("backend.endpoint is required for llm-run")
    instances = pr.import_jsonl(_require_file(bcfg["instances"], "backend.instances"))
    backend = CompletionBackend(
        endpoint=bcfg["endpoint"], timeout=bcfg["timeout"], max_retries=bcfg["max_retries"],
        prompt_field=bcfg["prompt_field"], response_field=bcfg["response_field"],
        max_in_flight=bcfg["max_in_flight"],
    )
    results = run_backend(backend, instances)
    results_path = os.path.join(out, "results.jsonl")
    with open(results_path, "w", encoding="utf-8", newline="\n") as f:
        for res in results:
            record = {
                "triple": list(res.instance.triple),
                "mode": res.instance.mode,
                "prediction": res.answer,
                "failed": res.failed,
            }
            if res.instance.answer is not None:
                record["gold"] = res.instance.answer
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    n_failed = sum(r.failed for r in results)
    n_unknown = sum(r.answer == pr.UNKNOWN for r in results)
    payload = {
        "instances": len(results),
        "failed": n_failed,
        "unknown": n_unknown,
        "results": "results.jsonl",
        "seed": cfg["seed"],
    }
    scored = [r for r in results if r.instance.answer is not None]
    if scored:
        # unknown or failed answers count as incorrect
        correct = sum(r.answer == r.instance.answer for r in scored)
        payload["accuracy"] = correct / len(scored)
    _write_report(out, "llm-run", payload)
    print(f"{len(results)} instances, {n_failed} failed, {n_unknown} unknown")
    if n_failed == len(results) and results:
        return EXIT_DATA
    return EXIT_OK


_COMMANDS = {
    "kge-train": cmd_kge_train,
    "classify": cmd_classify,
    "prompts": cmd_prompts,
    "adapter-train": cmd_adapter_train,
    "adapter-eval": cmd_adapter_eval,
    "inductive": cmd_inductive,
    "llm-run": cmd_llm_run,
}

# (section, key) pairs each CLI override flag maps onto
_OVERRIDES = {
    "mode": ("prompts", "mode"),
    "k": ("prompts", "k"),
    "neighbors": ("prompts", "neighbors"),
    "split": ("prompts", "split"),
    "position": ("adapter", "position"),
    "family": ("kge", "family"),
    "dim": ("kge", "dim"),
    "embeddings": ("kge", "embeddings"),
    "endpoint": ("backend", "endpoint"),
    "instances": ("backend", "instances"),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="kopa", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="override out_dir")
        p.add_argument("--seed", type=int, help="override seed")
        if name == "prompts":
            p.add_argument("--mode", choices=pr.MODES)
            p.add_argument("--k", type=int)
            p.add_argument("--neighbors", type=int)
            p.add_argument("--split", choices=("train", "valid", "test"))
        if name in ("adapter-train", "adapter-eval"):
            p.add_argument("--position", choices=("prefix", "infix", "suffix", "all"))
        if name == "kge-train":
            p.add_argument("--family", choices=("transe", "distmult", "complex", "rotate"))
            p.add_argument("--dim", type=int)
        if name == "classify":
            p.add_argument("--embeddings")
        if name == "llm-run":
            p.add_argument("--endpoint")
            p.add_argument("--instances")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        cfg = load_config(args.config)
        if args.out:
            cfg["out_dir"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
        apply_seed_env(cfg)  # KOPA_SEED wins over both config and flag
        for flag, (section, key) in _OVERRIDES.items():
            value = getattr(args, flag.replace("-", "_"), None)
            if value is not None:
                if cfg.get(section) is None:
                    cfg[section] = {k: spec.default for k, spec in SCHEMA[section].items()}
                cfg[section][key] = value
        _setup_run_dir(cfg["out_dir"])
        return _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, DataError, FormatError, FitError, DegenerateSplitError,
            CorruptionExhaustedError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KopaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
