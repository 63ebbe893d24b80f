"""Sentiment corpora, vocabularies and the tuple <-> dependency graph encoding.

Corpus files are JSON arrays of sentence objects::

    {"sent_id": "s1", "text": "I love this laptop",
     "opinions": [{"Source": [["I"], ["0:1"]],
                   "Target": [["this laptop"], ["7:18"]],
                   "Polar_expression": [["love"], ["2:6"]],
                   "Polarity": "Positive"}]}

Optional ``tokens``, ``pos`` and ``lemmas`` lists override whitespace
tokenization and supply extra features.

In the graph encoding node 0 is a virtual root and token ``k`` is node
``k + 1``.  Each span is headed by its last token (or first, with
``head_rule="first"``); the root points at the expression head with an
``exp:<polarity>`` label, the expression head points at the holder and
target heads, and every span head points at the rest of its span.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

POLARITIES = ("Positive", "Negative", "Neutral")
LABELS = ("exp:Positive", "exp:Negative", "exp:Neutral", "exp", "hold", "targ")
ROLE_LABELS = {"expression": "exp", "holder": "hold", "target": "targ"}
HEAD_RULES = ("final", "first")

PAD, UNK = "<pad>", "<unk>"

Span = Optional[tuple]


class CorpusError(ValueError):
    """Malformed corpus file or sentence object."""


class ConversionError(ValueError):
    """Tuples that cannot be encoded as one consistent graph."""


@dataclass
class Sentence:
    id: str
    tokens: list
    text: str = ""
    offsets: list = field(default_factory=list)
    pos: Optional[list] = None
    lemmas: Optional[list] = None

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"sentence {self.id!r} has no tokens")
        for name in ("pos", "lemmas"):
            feats = getattr(self, name)
            if feats is not None and len(feats) != len(self.tokens):
                raise CorpusError(
                    f"sentence {self.id!r}: {len(feats)} {name} for {len(self.tokens)} tokens"
                )
        if not self.text:
            self.text = " ".join(self.tokens)
        if not self.offsets:
            self.offsets = token_offsets(self.text, self.tokens, self.id)

    def __len__(self):
        return len(self.tokens)

    @property
    def chars(self) -> list:
        return [list(tok) for tok in self.tokens]


@dataclass(frozen=True)
class SentimentTuple:
    """One opinion.  Spans are half-open token ranges ``(start, end)``; ``None`` is empty."""

    holder: Span
    target: Span
    expression: tuple
    polarity: str

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.expression is None or self.expression[1] <= self.expression[0]:
            raise ValueError("expression span must be non-empty")
        for span in (self.holder, self.target):
            if span is not None and span[1] <= span[0]:
                raise ValueError(f"invalid span {span}; use None for an empty span")

    def check(self, n: int) -> None:
        for span in (self.holder, self.target, self.expression):
            if span is not None and not (0 <= span[0] < span[1] <= n):
                raise ValueError(f"span {span} out of range for {n} tokens")


class LabelSet:
    def __init__(self, labels: Sequence[str] = LABELS):
        if not labels:
            raise ValueError("label set must not be empty")
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels")
        self.labels = list(labels)
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self.labels == other.labels

    def index(self, label: str) -> int:
        return self._index[label]

    def label(self, i: int) -> str:
        return self.labels[i]


class DepGraph:
    """Labeled directed graph over ``n`` nodes, node 0 being the root."""

    def __init__(self, n: int, edges: Optional[dict] = None):
        self.n = n
        self.edges: dict = {}
        for (head, dep), label in (edges or {}).items():
            self.add(head, dep, label)

    def add(self, head: int, dep: int, label: str) -> None:
        if not (0 <= head < self.n and 0 <= dep < self.n):
            raise ValueError(f"edge {head}->{dep} out of range for {self.n} nodes")
        if head == dep:
            raise ValueError(f"self-loop on node {head}")
        old = self.edges.get((head, dep))
        if old is not None and old != label:
            raise ValueError(f"edge {head}->{dep} already labeled {old!r}, not {label!r}")
        self.edges[(head, dep)] = label

    def triples(self) -> set:
        return {(h, d, lab) for (h, d), lab in self.edges.items()}

    def children(self, head: int, label: Optional[str] = None) -> list:
        return sorted(d for (h, d), lab in self.edges.items() if h == head and (label is None or lab == label))

    def validate(self, labels: Optional[LabelSet] = None) -> None:
        for (h, d), lab in self.edges.items():
            if not (0 <= h < self.n and 0 <= d < self.n) or h == d:
                raise ValueError(f"bad edge {h}->{d}")
            if labels is not None and lab not in labels._index:
                raise ValueError(f"unknown label {lab!r}")
            if h == 0 and not lab.startswith("exp:"):
                raise ValueError(f"root edge to {d} labeled {lab!r}")

    def __eq__(self, other):
        return isinstance(other, DepGraph) and self.n == other.n and self.edges == other.edges

    def __repr__(self):
        return f"DepGraph(n={self.n}, edges={sorted(self.triples())})"


@dataclass
class LoadReport:
    sentences: int = 0
    opinions: int = 0
    skipped: int = 0
    warnings: list = field(default_factory=list)

    def warn(self, msg: str) -> None:
        self.skipped += 1
        self.warnings.append(msg)
        logger.warning(msg)


@dataclass
class DecodeReport:
    dropped_edges: int = 0
    dropped_tokens: int = 0

    def merge(self, other: "DecodeReport") -> None:
        self.dropped_edges += other.dropped_edges
        self.dropped_tokens += other.dropped_tokens


# ------------------------------------------------------------------ loading


def token_offsets(text: str, tokens: Sequence[str], sent_id: str = "") -> list:
    offsets, cursor = [], 0
    for tok in tokens:
        start = text.find(tok, cursor)
        if start < 0:
            raise CorpusError(f"sentence {sent_id!r}: token {tok!r} not found in text")
        offsets.append((start, start + len(tok)))
        cursor = start + len(tok)
    return offsets


def align_interval(offsets: Sequence[tuple], start: int, end: int) -> Span:
    """Tokens whose character interval overlaps ``[start, end)``."""
    hit = [k for k, (a, b) in enumerate(offsets) if a < end and b > start]
    if not hit:
        return None
    return (hit[0], hit[-1] + 1)


def _align_field(sentence: Sentence, value, what: str) -> tuple:
    """Returns ``(ok, span)``; an empty field is ``(True, None)``."""
    if not value:
        return True, None
    if not isinstance(value, list) or len(value) != 2:
        raise CorpusError(f"sentence {sentence.id!r}: {what} is not a [strings, offsets] pair")
    if not value[1]:
        return True, None
    pieces = []
    for off in value[1]:
        try:
            a, b = (int(x) for x in str(off).split(":"))
        except ValueError:
            raise CorpusError(f"sentence {sentence.id!r}: bad offset {off!r} in {what}") from None
        span = align_interval(sentence.offsets, a, b)
        if span is None:
            return False, None
        pieces.append(span)
    pieces.sort()
    start, end = pieces[0]
    for a, b in pieces[1:]:
        if a > end:
            # discontinuous fragments cannot be expressed as one span
            return False, None
        end = max(end, b)
    return True, (start, end)


def parse_sentence(obj: dict, report: Optional[LoadReport] = None) -> tuple:
    report = report if report is not None else LoadReport()
    if not isinstance(obj, dict):
        raise CorpusError(f"sentence object expected, got {type(obj).__name__}")
    sent_id = str(obj.get("sent_id", obj.get("id", "")))
    if "text" not in obj:
        raise CorpusError(f"sentence {sent_id!r}: missing 'text'")
    text = obj["text"]
    tokens = obj.get("tokens") or text.split()
    sentence = Sentence(
        id=sent_id, tokens=list(tokens), text=text, pos=obj.get("pos"), lemmas=obj.get("lemmas")
    )
    tuples = []
    for k, op in enumerate(obj.get("opinions") or []):
        if not isinstance(op, dict):
            raise CorpusError(f"sentence {sent_id!r}: opinion {k} is not an object")
        polarity = op.get("Polarity")
        if polarity not in POLARITIES:
            report.warn(f"sentence {sent_id!r}: opinion {k} has unsupported polarity {polarity!r}; skipped")
            continue
        spans = {}
        ok = True
        for role, key in (("holder", "Source"), ("target", "Target"), ("expression", "Polar_expression")):
            good, span = _align_field(sentence, op.get(key), f"opinion {k} {key}")
            if not good:
                report.warn(f"sentence {sent_id!r}: opinion {k} {key} cannot be aligned to tokens; skipped")
                ok = False
                break
            spans[role] = span
        if not ok:
            continue
        if spans["expression"] is None:
            report.warn(f"sentence {sent_id!r}: opinion {k} has no expression; skipped")
            continue
        tuples.append(SentimentTuple(polarity=polarity, **spans))
        report.opinions += 1
    report.sentences += 1
    return sentence, tuples


def load_corpus(path, report: Optional[LoadReport] = None) -> list:
    """Load a corpus as a list of ``(Sentence, [SentimentTuple])`` pairs."""
    report = report if report is not None else LoadReport()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        raise CorpusError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(data, list):
        raise CorpusError(f"{path}: expected a JSON array of sentences")
    return [parse_sentence(obj, report) for obj in data]


def _span_field(sentence: Sentence, span: Span) -> list:
    if span is None:
        return [[], []]
    a = sentence.offsets[span[0]][0]
    b = sentence.offsets[span[1] - 1][1]
    return [[sentence.text[a:b]], [f"{a}:{b}"]]


def sentence_to_json(sentence: Sentence, tuples: Iterable[SentimentTuple]) -> dict:
    obj = {"sent_id": sentence.id, "text": sentence.text}
    if sentence.tokens != sentence.text.split():
        obj["tokens"] = sentence.tokens
    if sentence.pos is not None:
        obj["pos"] = sentence.pos
    if sentence.lemmas is not None:
        obj["lemmas"] = sentence.lemmas
    obj["opinions"] = [
        {
            "Source": _span_field(sentence, t.holder),
            "Target": _span_field(sentence, t.target),
            "Polar_expression": _span_field(sentence, t.expression),
            "Polarity": t.polarity,
        }
        for t in tuples
    ]
    return obj


def write_corpus(path, items: Iterable[tuple]) -> None:
    data = [sentence_to_json(s, ts) for s, ts in items]
    Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


# --------------------------------------------------------- graph encoding


def _span_head(span: tuple, head_rule: str) -> int:
    # returns a graph node index (token index + 1)
    return (span[1] if head_rule == "final" else span[0] + 1)


def tuples_to_graph(sentence, tuples: Sequence[SentimentTuple], head_rule: str = "final") -> DepGraph:
    """Encode tuples as a labeled graph; ``sentence`` may also be a token count."""
    if head_rule not in HEAD_RULES:
        raise ValueError(f"head_rule must be one of {HEAD_RULES}")
    n_tokens = sentence if isinstance(sentence, int) else len(sentence)
    graph = DepGraph(n_tokens + 1)
    owner: dict = {}

    def put(head, dep, label, k):
        key = (head, dep)
        if head == dep:
            raise ConversionError(f"tuple {k} ({tuples[k]}) maps to a self-loop on node {head}")
        if key in graph.edges and graph.edges[key] != label:
            j = owner[key]
            raise ConversionError(
                f"edge {head}->{dep} labeled both {graph.edges[key]!r} by tuple {j} ({tuples[j]}) "
                f"and {label!r} by tuple {k} ({tuples[k]})"
            )
        graph.edges[key] = label
        owner.setdefault(key, k)

    for k, tup in enumerate(tuples):
        tup.check(n_tokens)
        exp_head = _span_head(tup.expression, head_rule)
        put(0, exp_head, f"exp:{tup.polarity}", k)
        for role in ("expression", "holder", "target"):
            span = getattr(tup, role)
            if span is None:
                continue
            label = ROLE_LABELS[role]
            head = _span_head(span, head_rule)
            if role != "expression":
                put(exp_head, head, label, k)
            for node in range(span[0] + 1, span[1] + 1):
                if node != head:
                    put(head, node, label, k)
    return graph


def _grow(graph: DepGraph, head: int, label: str, used: set, report: DecodeReport) -> tuple:
    """Token span reached from ``head`` along ``label`` edges, as a token range."""
    seen = {head}
    frontier = [head]
    while frontier:
        node = frontier.pop()
        for dep in graph.children(node, label):
            used.add((node, dep))
            if dep not in seen and dep != 0:
                seen.add(dep)
                frontier.append(dep)
    lo = hi = head
    while lo - 1 in seen:
        lo -= 1
    while hi + 1 in seen:
        hi += 1
    report.dropped_tokens += len(seen) - (hi - lo + 1)
    return (lo - 1, hi)


def graph_to_tuples(
    graph: DepGraph, head_rule: str = "final", report: Optional[DecodeReport] = None
) -> list:
    """Recover tuples from a (possibly predicted) graph.  Never raises.

    One tuple family per ``exp:<polarity>`` root edge; holder and target
    heads attached to the expression head combine as a cross product.
    Edges not reached by this walk are dropped and counted in ``report``.
    """
    report = report if report is not None else DecodeReport()
    used: set = set()
    out = []
    for exp_head in graph.children(0):
        label = graph.edges[(0, exp_head)]
        if not label.startswith("exp:") or label[4:] not in POLARITIES:
            continue
        used.add((0, exp_head))
        polarity = label[4:]
        expression = _grow(graph, exp_head, "exp", used, report)
        holders, targets = [], []
        for role, bucket in (("hold", holders), ("targ", targets)):
            for head in graph.children(exp_head, role):
                used.add((exp_head, head))
                span = _grow(graph, head, role, used, report)
                if span not in bucket:
                    bucket.append(span)
        for holder in holders or [None]:
            for target in targets or [None]:
                out.append(SentimentTuple(holder=holder, target=target, expression=expression, polarity=polarity))
    report.dropped_edges += len(set(graph.edges) - used)
    return out


# ------------------------------------------------------------ TSV dump


def write_graph_tsv(path, items: Iterable[tuple]) -> None:
    """Dump ``(Sentence, DepGraph)`` pairs as ``id  form  heads  labels`` rows.

    Multiple heads and labels are pipe-separated in matching order; ``_``
    marks a token without incoming edges.
    """
    lines = []
    for sentence, graph in items:
        lines.append(f"# sent_id = {sentence.id}")
        for k, tok in enumerate(sentence.tokens, start=1):
            incoming = sorted((h, lab) for (h, d), lab in graph.edges.items() if d == k)
            heads = "|".join(str(h) for h, _ in incoming) or "_"
            labels = "|".join(lab for _, lab in incoming) or "_"
            lines.append(f"{k}\t{tok}\t{heads}\t{labels}")
        lines.append("")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph_tsv(path) -> list:
    """Inverse of :func:`write_graph_tsv`; returns ``(sent_id, tokens, DepGraph)`` triples."""
    out = []
    sent_id, rows = None, []

    def flush():
        if sent_id is None and not rows:
            return
        graph = DepGraph(len(rows) + 1)
        for k, (_, heads, labels) in enumerate(rows, start=1):
            if heads != "_":
                for h, lab in zip(heads.split("|"), labels.split("|")):
                    graph.add(int(h), k, lab)
        out.append((sent_id, [r[0] for r in rows], graph))

    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# sent_id = "):
            sent_id = line[len("# sent_id = "):]
        elif not line.strip():
            flush()
            sent_id, rows = None, []
        else:
            _, form, heads, labels = line.split("\t")
            rows.append((form, heads, labels))
    flush()
    return out


# ----------------------------------------------------------- vocabulary


class Vocab:
    """Index maps for words, characters, POS tags and lemmas.

    Index 0 is padding and 1 is the unknown item in every map; the rest are
    ordered by descending frequency, ties broken alphabetically.
    """

    FIELDS = ("words", "chars", "pos", "lemmas")

    def __init__(self, words, chars, pos, lemmas):
        self.words = words
        self.chars = chars
        self.pos = pos
        self.lemmas = lemmas

    @staticmethod
    def _index(counter: Counter) -> dict:
        ordered = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        table = {PAD: 0, UNK: 1}
        for item, _ in ordered:
            if item not in table:
                table[item] = len(table)
        return table

    @classmethod
    def build(cls, sentences: Iterable[Sentence]) -> "Vocab":
        counts = {name: Counter() for name in cls.FIELDS}
        seen = 0
        for s in sentences:
            seen += 1
            counts["words"].update(s.tokens)
            counts["chars"].update(ch for tok in s.tokens for ch in tok)
            counts["pos"].update(s.pos or [])
            counts["lemmas"].update(s.lemmas or [])
        if seen == 0:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        return cls(*(cls._index(counts[name]) for name in cls.FIELDS))

    @staticmethod
    def lookup(table: dict, items: Iterable[str]) -> list:
        return [table.get(x, 1) for x in items]

    def to_dict(self) -> dict:
        return {name: sorted(getattr(self, name), key=getattr(self, name).get) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocab":
        return cls(*({item: i for i, item in enumerate(data[name])} for name in cls.FIELDS))

    def __eq__(self, other):
        return isinstance(other, Vocab) and all(getattr(self, f) == getattr(other, f) for f in self.FIELDS)


def build_vocab(corpus) -> Vocab:
    """Vocabulary over a corpus of sentences or ``(Sentence, tuples)`` pairs."""
    return Vocab.build(item[0] if isinstance(item, tuple) else item for item in corpus)
