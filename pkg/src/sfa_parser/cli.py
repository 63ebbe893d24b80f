"""Command-line interface: train, eval, predict, convert, gradcheck, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from .config import ConfigError, TrainConfig, load_config
from .corpus import (
    ConversionError,
    CorpusError,
    DecodeReport,
    LoadReport,
    graph_to_tuples,
    load_corpus,
    tuples_to_graph,
    write_corpus,
    write_graph_tsv,
)
from .metrics import EvaluationError, evaluate, format_report

logger = logging.getLogger("sfa_parser")

GRAD_TOLERANCE = 1e-4

# name -> config changes relative to the base config
ABLATIONS = (
    ("SFA2o", dict(scorer="sfa", sfa_first_order=True, second_order=True, sfa_second_order=True)),
    ("-2o", dict(scorer="sfa", sfa_first_order=True, second_order=True, sfa_second_order=False)),
    ("-1o", dict(scorer="sfa", sfa_first_order=False, second_order=True, sfa_second_order=True)),
    ("SFA", dict(scorer="sfa", sfa_first_order=True, second_order=False)),
    ("BiAF", dict(scorer="biaffine", second_order=False)),
)


def _split(data_dir: Path, name: str, required: bool = True):
    path = data_dir / f"{name}.json"
    if not path.exists():
        if required:
            raise CorpusError(f"{data_dir}: missing {name}.json")
        return None
    report = LoadReport()
    items = load_corpus(path, report)
    for line in report.warnings:
        logger.warning(line)
    return items


def _config(args) -> TrainConfig:
    cfg = load_config(args.config)
    if getattr(args, "set", None):
        changes = dict(kv.split("=", 1) for kv in args.set)
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **changes})
    return cfg


def cmd_train(args) -> int:
    from .training import evaluate_model, train

    cfg = _config(args)
    data = Path(args.data)
    train_items = _split(data, "train")
    dev_items = _split(data, "dev", required=False)
    result = train(cfg, train_items, dev_items, out_dir=args.out)
    print(f"best_epoch={result.best_epoch} checkpoint={Path(args.out) / 'model.ckpt'}")
    test_items = _split(data, "test", required=False)
    if test_items:
        metrics, _ = evaluate_model(result.model, test_items)
        print(format_report(metrics))
    return 0


def cmd_eval(args) -> int:
    gold = load_corpus(args.data)
    if args.pred:
        pred = load_corpus(args.pred)
        gold_t = [(s.id, ts) for s, ts in gold]
        pred_t = [(s.id, ts) for s, ts in pred]
        print(format_report(evaluate(gold_t, pred_t)))
        return 0
    from .training import evaluate_model, load_checkpoint

    model = load_checkpoint(args.model)
    report = DecodeReport()
    metrics, _ = evaluate_model(model, gold, report)
    print(format_report(metrics))
    logger.info("decode dropped %d edges and %d tokens", report.dropped_edges, report.dropped_tokens)
    return 0


def cmd_predict(args) -> int:
    from .training import load_checkpoint

    model = load_checkpoint(args.model)
    if args.threshold is not None:
        model.cfg = model.cfg.replace(threshold=args.threshold)
    report = DecodeReport()
    preds, graphs = [], []
    for sentence, _ in load_corpus(args.data):
        graph, tuples = model.predict(sentence, report)
        preds.append((sentence, tuples))
        graphs.append((sentence, graph))
    write_corpus(args.out, preds)
    if args.graph_out:
        write_graph_tsv(args.graph_out, graphs)
    print(f"sentences={len(preds)} dropped_edges={report.dropped_edges} dropped_tokens={report.dropped_tokens}")
    return 0


def cmd_convert(args) -> int:
    items = load_corpus(args.data)
    graphs, mismatches, failures = [], [], 0
    for sentence, tuples in items:
        try:
            graph = tuples_to_graph(sentence, tuples, args.head_rule)
        except ConversionError as err:
            logger.warning("%s: %s", sentence.id, err)
            failures += 1
            continue
        graphs.append((sentence, graph))
        if Counter(graph_to_tuples(graph, args.head_rule)) != Counter(tuples):
            mismatches.append(sentence.id)
    write_graph_tsv(args.out, graphs)
    print(f"sentences={len(items)} converted={len(graphs)} conversion_errors={failures} round_trip_mismatches={len(mismatches)}")
    for sent_id in mismatches:
        print(f"mismatch {sent_id}")
    return 0 if not mismatches and not failures else 1


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    report = run_suite(args.seed)
    worst = 0.0
    for name, err in report.items():
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        print(f"{name:28s} {err:.3e} {status}")
        worst = max(worst, err)
    print(f"max_rel_err={worst:.3e} tolerance={GRAD_TOLERANCE:g}")
    return 0 if worst < GRAD_TOLERANCE else 1


def run_ablation(cfg: TrainConfig, train_items, dev_items, test_items=None, log=None) -> list:
    """Train the five toggle configurations on identical splits and seeds."""
    from .training import evaluate_model, train

    eval_items = test_items or dev_items or train_items
    rows = []
    for name, changes in ABLATIONS:
        result = train(cfg.replace(**changes), train_items, dev_items)
        metrics, _ = evaluate_model(result.model, eval_items)
        row = {"model": name, "best_epoch": result.best_epoch, **metrics}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def format_table(rows: list) -> str:
    header = f"{'model':<6} {'parsing_graph_f1':>16} {'sentiment_graph_f1':>18} {'span_avg_f1':>11} {'best_epoch':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['model']:<6} {r['parsing_graph_f1']:>16.4f} {r['sentiment_graph_f1']:>18.4f}"
            f" {r['span_avg_f1']:>11.4f} {r['best_epoch']:>10d}"
        )
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    rows = run_ablation(
        cfg, _split(data, "train"), _split(data, "dev", required=False), _split(data, "test", required=False),
        log=lambda r: logger.info("%s done", r["model"]),
    )
    print(format_table(rows))
    if args.out:
        Path(args.out).write_text("\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfa-parser", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")

    p = sub.add_parser("train", help="train a model")
    add_config(p)
    p.add_argument("--data", required=True, help="directory with train.json and optional dev.json/test.json")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and metrics.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file against gold")
    p.add_argument("--data", required=True, help="gold corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="checkpoint to decode with")
    src.add_argument("--pred", help="prediction corpus to compare")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="decode a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predicted corpus (JSON)")
    p.add_argument("--graph-out", help="optional graph TSV dump")
    p.add_argument("--threshold", type=float, help="edge probability threshold")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("convert", help="write gold graphs as TSV and check the round trip")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head-rule", choices=("final", "first"), default="final")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the five-way SFA ablation matrix")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="optional JSON-lines file with one row per configuration")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusError, EvaluationError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
