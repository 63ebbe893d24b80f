"""Token embeddings, the stacked BiLSTM and head/dependent projections."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Sentence, Vocab


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Holds named parameter tensors; submodules are flattened with a dotted prefix."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = ad.parameter(value, name=name)
        self.params[name] = t
        return t

    def named_parameters(self, prefix: str = ""):
        for name, t in self.params.items():
            yield prefix + name, t


def load_vectors(path) -> tuple:
    """Read ``word v1 ... vk`` lines; returns ``(index, matrix)``."""
    words, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split()
            if not parts:
                continue
            if rows and len(parts) - 1 != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} values, got {len(parts) - 1}")
            if parts[0] not in words:
                words[parts[0]] = len(rows)
                rows.append([float(x) for x in parts[1:]])
    if not rows:
        raise ValueError(f"{path}: no vectors found")
    return words, np.asarray(rows)


@dataclass
class Features:
    """Index arrays for one sentence (without the root)."""

    words: np.ndarray
    pos: Optional[np.ndarray]
    lemmas: Optional[np.ndarray]
    chars: np.ndarray  # (n, max_len) padded with 0
    char_mask: np.ndarray
    external: Optional[np.ndarray]

    @property
    def n(self) -> int:
        return len(self.words)


def featurize(sentence: Sentence, vocab: Vocab, external: Optional[tuple] = None) -> Features:
    longest = max(len(tok) for tok in sentence.tokens)
    chars = np.zeros((len(sentence), longest), dtype=np.int64)
    mask = np.zeros((len(sentence), longest))
    for k, tok in enumerate(sentence.tokens):
        chars[k, : len(tok)] = vocab.lookup(vocab.chars, tok)
        mask[k, : len(tok)] = 1.0
    ext = None
    if external is not None:
        index, table = external
        ext = np.zeros((len(sentence), table.shape[1]))
        for k, tok in enumerate(sentence.tokens):
            if tok in index:
                ext[k] = table[index[tok]]
    return Features(
        words=np.asarray(vocab.lookup(vocab.words, sentence.tokens)),
        pos=None if sentence.pos is None else np.asarray(vocab.lookup(vocab.pos, sentence.pos)),
        lemmas=None if sentence.lemmas is None else np.asarray(vocab.lookup(vocab.lemmas, sentence.lemmas)),
        chars=chars,
        char_mask=mask,
        external=ext,
    )


class BiLSTM(Module):
    """Stacked bidirectional LSTM; layer outputs are [forward; backward]."""

    def __init__(self, rng, input_dim: int, hidden: int, layers: int, dtype):
        super().__init__()
        self.hidden = hidden
        self.layers = layers
        scale = 1.0 / np.sqrt(hidden)
        width = input_dim
        for layer in range(layers):
            for direction in ("fw", "bw"):
                p = f"l{layer}.{direction}."
                self.add(p + "w_ih", rng.uniform(-scale, scale, (width, 4 * hidden)).astype(dtype))
                self.add(p + "w_hh", rng.uniform(-scale, scale, (hidden, 4 * hidden)).astype(dtype))
                self.add(p + "b", np.zeros(4 * hidden, dtype=dtype))
            width = 2 * hidden

    def _dir(self, layer, direction):
        p = f"l{layer}.{direction}."
        return self.params[p + "w_ih"], self.params[p + "w_hh"], self.params[p + "b"]

    def __call__(self, x: Tensor, mask=None, dropout: float = 0.0, rng=None, train: bool = False) -> Tensor:
        """``x`` is (batch, time, in); dropout is applied between layers only."""
        for layer in range(self.layers):
            if layer > 0:
                x = ad.dropout(x, dropout, rng, train)
            fw = ad.lstm(x, *self._dir(layer, "fw"), mask=mask)
            bw = ad.lstm(x, *self._dir(layer, "bw"), mask=mask, reverse=True)
            x = ad.concat([fw, bw], axis=-1)
        return x


class Encoder(Module):
    def __init__(self, cfg, vocab: Vocab, rng: np.random.Generator, external: Optional[tuple] = None, middle=False):
        super().__init__()
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.external = external
        ext_dim = 0 if external is None else external[1].shape[1]
        if cfg.char_dim % 2:
            raise ValueError("char_dim must be even (two LSTM directions)")
        self.add("word_emb", rng.normal(0.0, 1.0, (len(vocab.words), cfg.word_dim)).astype(dtype))
        self.add("pos_emb", rng.normal(0.0, 1.0, (len(vocab.pos), cfg.pos_dim)).astype(dtype))
        self.add("lemma_emb", rng.normal(0.0, 1.0, (len(vocab.lemmas), cfg.lemma_dim)).astype(dtype))
        self.add("char_emb", rng.normal(0.0, 1.0, (len(vocab.chars), cfg.char_dim)).astype(dtype))
        self.char_lstm = BiLSTM(rng, cfg.char_dim, cfg.char_dim // 2, 1, dtype)
        self.input_dim = cfg.word_dim + cfg.pos_dim + cfg.lemma_dim + cfg.char_dim + ext_dim
        self.add("root", rng.normal(0.0, 1.0, (1, self.input_dim)).astype(dtype))
        self.lstm = BiLSTM(rng, self.input_dim, cfg.lstm_hidden, cfg.lstm_layers, dtype)
        width = 2 * cfg.lstm_hidden
        roles = ("head", "dep", "mid") if middle else ("head", "dep")
        for role in roles:
            self.add(f"{role}_w", glorot(rng, width, cfg.repr_dim, dtype))
            self.add(f"{role}_b", np.zeros(cfg.repr_dim, dtype=dtype))
        self.roles = roles

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        yield from self.char_lstm.named_parameters(prefix + "char_lstm.")
        yield from self.lstm.named_parameters(prefix + "lstm.")

    def embed(self, feats: Features, train: bool = False, rng=None) -> Tensor:
        """(n+1, e) input matrix with the learned root row first."""
        p = self.params
        dtype = p["word_emb"].dtype
        n = feats.n
        parts = [p["word_emb"][feats.words]]
        for ids, table, width in (
            (feats.pos, "pos_emb", self.cfg.pos_dim),
            (feats.lemmas, "lemma_emb", self.cfg.lemma_dim),
        ):
            parts.append(p[table][ids] if ids is not None else ad.tensor(np.zeros((n, width)), dtype))
        chars = p["char_emb"][feats.chars]
        states = self.char_lstm(chars, mask=feats.char_mask)
        half = self.cfg.char_dim // 2
        # forward state is carried to the last column, backward ends at column 0
        parts.append(ad.concat([states[:, -1, :half], states[:, 0, half:]], axis=-1))
        if self.external is not None:
            ext = feats.external if feats.external is not None else np.zeros((n, self.external[1].shape[1]))
            parts.append(ad.tensor(ext, dtype))
        h = ad.concat([p["root"], ad.concat(parts, axis=-1)], axis=0)
        return ad.dropout(h, self.cfg.dropout, rng, train)

    def contextualize(self, h: Tensor, train: bool = False, rng=None) -> Tensor:
        """(n+1, e) -> (n+1, 2 * lstm_hidden)."""
        out = self.lstm(h.reshape(1, *h.shape), dropout=self.cfg.dropout, rng=rng, train=train)
        return out.reshape(out.shape[1], out.shape[2])

    def project(self, h: Tensor) -> tuple:
        """Head and dependent (and middle, when enabled) representations."""
        p = self.params
        return tuple(ad.affine(h, p[f"{role}_w"], p[f"{role}_b"]) for role in self.roles)

    def __call__(self, feats: Features, train: bool = False, rng=None) -> tuple:
        return self.project(self.contextualize(self.embed(feats, train, rng), train, rng))
