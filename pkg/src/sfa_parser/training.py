"""Loss, optimiser, training loop, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .corpus import (
    ConversionError,
    DecodeReport,
    DepGraph,
    LabelSet,
    Vocab,
    build_vocab,
    tuples_to_graph,
)
from .encoder import Features, load_vectors
from .metrics import evaluate
from .model import Parser
from .scorers import ScoreSet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SFAPARSE"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- loss


def gold_arrays(graph: DepGraph, labels: LabelSet) -> tuple:
    """Edge indicator matrix plus (heads, deps, label ids) of the gold edges."""
    target = np.zeros((graph.n, graph.n))
    cells = sorted(graph.edges)
    for h, d in cells:
        target[h, d] = 1.0
    heads = np.array([h for h, _ in cells], dtype=np.int64)
    deps = np.array([d for _, d in cells], dtype=np.int64)
    ids = np.array([labels.index(graph.edges[c]) for c in cells], dtype=np.int64)
    return target, heads, deps, ids


def compute_loss(scores: ScoreSet, gold: DepGraph, labels: LabelSet) -> Tensor:
    """Mean per-cell binary cross-entropy on edges plus mean label
    cross-entropy over gold edges, weighted 1:1."""
    n = scores.edge.shape[0]
    if gold.n != n:
        raise ValueError(f"gold graph has {gold.n} nodes, scores cover {n}")
    target, heads, deps, ids = gold_arrays(gold, labels)
    loss = ad.binary_cross_entropy(scores.edge, target)
    if len(ids):
        loss = loss + ad.cross_entropy(scores.label[heads, deps], ids)
    return loss


# ----------------------------------------------------------- optimiser


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Rate for optimiser step ``step`` (0-based): multiplied by ``decay`` every ``decay_steps``."""
    return cfg.lr * cfg.decay ** (step // cfg.decay_steps)


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.9, eps: float = 1e-12):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ------------------------------------------------------------- examples


@dataclass
class Example:
    sentence: object
    tuples: list
    graph: DepGraph
    feats: Features


def gold_graph(sentence, tuples, head_rule: str) -> DepGraph:
    """Gold graph; on conflicting tuples falls back to the largest consistent prefix."""
    try:
        return tuples_to_graph(sentence, tuples, head_rule)
    except ConversionError as err:
        logger.warning("sentence %r: %s; keeping a consistent subset", sentence.id, err)
        kept = []
        for t in tuples:
            try:
                tuples_to_graph(sentence, kept + [t], head_rule)
            except ConversionError:
                continue
            kept.append(t)
        return tuples_to_graph(sentence, kept, head_rule)


def make_examples(model: Parser, items) -> list:
    return [Example(s, ts, gold_graph(s, ts, model.cfg.head_rule), model.featurize(s)) for s, ts in items]


def evaluate_model(model: Parser, items, report: Optional[DecodeReport] = None) -> tuple:
    """Returns ``(metrics, predictions)``; predictions are ``(Sentence, tuples, graph)``."""
    gold_t, pred_t, gold_g, pred_g, preds = {}, {}, {}, {}, []
    for sentence, tuples in items:
        graph, pred = model.predict(sentence, report)
        gold_t[sentence.id] = tuples
        pred_t[sentence.id] = pred
        gold_g[sentence.id] = gold_graph(sentence, tuples, model.cfg.head_rule)
        pred_g[sentence.id] = graph
        preds.append((sentence, pred, graph))
    return evaluate(gold_t, pred_t, gold_g, pred_g), preds


# ------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: Parser
    history: list = field(default_factory=list)
    best_epoch: int = 0


def _snapshot(model: Parser) -> dict:
    return {name: t.data.copy() for name, t in model.params.items()}


def _restore(model: Parser, snap: dict) -> None:
    for name, t in model.params.items():
        t.data[...] = snap[name]


def _dump_batch(out_dir, epoch, batch, losses) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_batch_epoch{epoch}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {"sent_id": ex.sentence.id, "tokens": ex.sentence.tokens, "loss": loss}
        for ex, loss in zip(batch, losses)
    ]
    path.write_text(json.dumps(rows, indent=1))
    return path


def train(
    cfg: TrainConfig,
    train_items,
    dev_items=None,
    out_dir=None,
    external: Optional[tuple] = None,
    target_f1: Optional[float] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train a parser with Adam and step decay.

    After every epoch the dev set (the training set when ``dev_items`` is
    None) is decoded; the parameters with the best dev sentiment-graph F1 are
    restored at the end.  Training stops after ``patience`` epochs without
    improvement, or as soon as dev F1 reaches ``target_f1``.
    """
    if cfg.external_vectors and external is None:
        external = load_vectors(cfg.external_vectors)
    with threadpool_limits(limits=1):
        return _train(cfg, list(train_items), dev_items, out_dir, external, target_f1, log)


def _train(cfg, train_items, dev_items, out_dir, external, target_f1, log) -> TrainResult:
    vocab = build_vocab(train_items)
    model = Parser(cfg, vocab, external=external)
    examples = make_examples(model, train_items)
    dev_items = train_items if dev_items is None else list(dev_items)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult(model)
    log_file = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_file = open(Path(out_dir) / "metrics.jsonl", "w", encoding="utf-8")
    best_f1, best, stale = -1.0, _snapshot(model), 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(examples))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [examples[k] for k in order[start : start + cfg.batch_size]]
                opt.zero_grad()
                losses = []
                for ex in batch:
                    with Tape() as tape:
                        loss = compute_loss(model.scores(ex.feats, True, rng), ex.graph, model.labels)
                        losses.append(float(loss.data))
                        if not math.isfinite(losses[-1]):
                            dump = _dump_batch(out_dir, epoch, batch, losses)
                            raise TrainingError(
                                f"non-finite loss at epoch {epoch} on sentence {ex.sentence.id!r}"
                                + (f"; batch dumped to {dump}" if dump else "")
                            )
                        tape.backward(loss, np.asarray(1.0 / len(batch), dtype=loss.dtype))
                opt.step(learning_rate(cfg, opt.t))
                total += sum(losses)
            metrics, _ = evaluate_model(model, dev_items)
            row = {"epoch": epoch, "loss": total / max(len(examples), 1), "lr": learning_rate(cfg, opt.t)}
            row.update({f"dev_{k}": v for k, v in metrics.items()})
            result.history.append(row)
            if log_file is not None:
                log_file.write(json.dumps(row, sort_keys=True) + "\n")
                log_file.flush()
            if log is not None:
                log(row)
            f1 = metrics["sentiment_graph_f1"]
            if f1 > best_f1:
                best_f1, best, stale, result.best_epoch = f1, _snapshot(model), 0, epoch
            else:
                stale += 1
            if target_f1 is not None and f1 >= target_f1:
                break
            if stale >= cfg.patience:
                break
    finally:
        if log_file is not None:
            log_file.close()
    _restore(model, best)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "model.ckpt")
    return result


# ---------------------------------------------------------- checkpoints


def save_checkpoint(model: Parser, path) -> None:
    """Versioned container: magic, version, JSON header, raw little-endian arrays."""
    arrays = [(name, t.data) for name, t in model.params.items()]
    external_words = None
    if model.encoder.external is not None:
        index, table = model.encoder.external
        external_words = sorted(index, key=index.get)
        arrays.append(("external.table", np.asarray(table)))
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.to_dict(),
        "labels": model.labels.labels,
        "external_words": external_words,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Parser:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parser checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + head_len].decode("utf-8"))
    body = memoryview(raw)[pos + head_len :]
    arrays = {}
    for e in header["tensors"]:
        dtype = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="))
    external = None
    if header["external_words"] is not None:
        external = ({w: i for i, w in enumerate(header["external_words"])}, arrays.pop("external.table"))
    cfg = TrainConfig.from_dict(header["config"])
    model = Parser(cfg, Vocab.from_dict(header["vocab"]), LabelSet(header["labels"]), external)
    if set(arrays) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match the configured model")
    for name, t in model.params.items():
        if t.data.shape != arrays[name].shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        t.data[...] = arrays[name]
    return model
