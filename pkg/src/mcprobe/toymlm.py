"""A small transformer masked language model over the synthetic languages.

The encoder returns last-layer states; the prediction head is applied
separately (in float64 numpy) so interventions can sit between the two.
The head is a dense + GELU + LayerNorm transform followed by the
unembedding matrix and bias, as in BERT-style models. Heads without a
transform are plain linear maps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.special import erf
from torch import nn

from .alterrep import PushSpec, alter_matrix
from .errors import (
    DimensionMismatch,
    EmptySentence,
    FormatError,
    MaskMissing,
    SequenceTooLong,
    VocabMismatch,
)
from .projection import DirectionBasis

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
SPECIALS = (PAD, MASK, UNK)
SPECIAL_TAG = "*"
MAX_SEQ_LEN = 256


@dataclass
class Vocabulary:
    entries: List[str]
    word_to_pieces: Dict[str, Tuple[int, ...]]
    language_of: List[str]

    def __post_init__(self):
        self.piece_to_id = {p: i for i, p in enumerate(self.entries)}
        if MASK not in self.piece_to_id:
            raise ValueError("vocabulary has no mask entry")
        self.word_language = {
            w: self.language_of[ids[0]] for w, ids in self.word_to_pieces.items()
        }

    @property
    def pad_id(self) -> int:
        return self.piece_to_id[PAD]

    @property
    def mask_id(self) -> int:
        return self.piece_to_id[MASK]

    @property
    def unk_id(self) -> int:
        return self.piece_to_id[UNK]

    def __len__(self) -> int:
        return len(self.entries)

    def words_of(self, tag: str) -> List[str]:
        return [w for w, t in self.word_language.items() if t == tag]

    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "word_to_pieces": {w: list(ids) for w, ids in self.word_to_pieces.items()},
            "language_of": self.language_of,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocabulary":
        return cls(
            list(obj["entries"]),
            {w: tuple(int(i) for i in ids) for w, ids in obj["word_to_pieces"].items()},
            list(obj["language_of"]),
        )


def build_vocabulary(languages) -> Vocabulary:
    """Specials first, then each language's pieces in word order."""
    entries = list(SPECIALS)
    language_of = [SPECIAL_TAG] * len(SPECIALS)
    index: Dict[str, int] = {p: i for i, p in enumerate(entries)}
    word_to_pieces = {}
    for lang in languages:
        for w in lang.words:
            ids = []
            for piece in lang.pieces[w]:
                if piece not in index:
                    index[piece] = len(entries)
                    entries.append(piece)
                    language_of.append(lang.tag)
                ids.append(index[piece])
            word_to_pieces[w] = tuple(ids)
    return Vocabulary(entries, word_to_pieces, language_of)


@dataclass(frozen=True)
class TokenizedSentence:
    ids: Tuple[int, ...]
    spans: Tuple[Tuple[int, int], ...]
    words: Tuple[str, ...]

    def mask_word(self, word_index: int, mask_id: int) -> Tuple[Tuple[int, ...], int]:
        """Replace every piece of one word by a single mask token."""
        start, end = self.spans[word_index]
        ids = self.ids[:start] + (mask_id,) + self.ids[end:]
        return ids, start


def tokenize(sentence, vocab: Vocabulary) -> TokenizedSentence:
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    if not words:
        raise EmptySentence("sentence has no words")
    ids: List[int] = []
    spans = []
    for w in words:
        pieces = vocab.word_to_pieces.get(w, (vocab.unk_id,))
        spans.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
    return TokenizedSentence(tuple(ids), tuple(spans), tuple(words))


@dataclass
class MLMConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 256
    dropout: float = 0.0
    max_len: int = MAX_SEQ_LEN
    epochs: int = 60
    batch_size: int = 32
    lr: float = 4e-3
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    heldout_fraction: float = 0.05
    topk: int = 10
    head_transform: bool = True
    seed: int = 0


class _EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff)
        self.ff2 = nn.Linear(ff, d)
        self.ln2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: Optional[torch.Tensor]) -> torch.Tensor:
        B, T, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if pad is not None:
            scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, d)
        x = self.ln1(x + self.drop(self.out(ctx)))
        return self.ln2(x + self.drop(self.ff2(torch.nn.functional.gelu(self.ff1(x)))))


class EncoderModel(nn.Module):
    def __init__(self, vocab: Vocabulary, config: MLMConfig):
        super().__init__()
        if config.d_model % config.heads:
            raise ValueError("d_model must be divisible by heads")
        torch.manual_seed(config.seed)
        self.vocab = vocab
        self.config = config
        d = config.d_model
        self.tok = nn.Embedding(len(vocab), d)
        self.pos = nn.Embedding(config.max_len, d)
        self.ln = nn.LayerNorm(d)
        self.drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            _EncoderLayer(d, config.heads, config.ff, config.dropout) for _ in range(config.layers)
        )
        if config.head_transform:
            self.transform = nn.Linear(d, d)
            self.transform_ln = nn.LayerNorm(d)
        self.unembed = nn.Linear(d, len(vocab))

    @property
    def dim(self) -> int:
        return self.config.d_model

    def forward(self, ids: torch.Tensor, pad: Optional[torch.Tensor] = None) -> torch.Tensor:
        T = ids.shape[1]
        x = self.drop(self.ln(self.tok(ids) + self.pos(torch.arange(T))[None]))
        for block in self.blocks:
            x = block(x, pad)
        return x

    def logits(self, states: torch.Tensor) -> torch.Tensor:
        if self.config.head_transform:
            states = self.transform_ln(torch.nn.functional.gelu(self.transform(states)))
        return self.unembed(states)

    def head(self) -> "Head":
        def arr(t):
            return t.detach().double().numpy().copy()

        transform = None
        if self.config.head_transform:
            transform = HeadTransform(
                arr(self.transform.weight), arr(self.transform.bias),
                arr(self.transform_ln.weight), arr(self.transform_ln.bias), self.transform_ln.eps,
            )
        return Head(list(self.vocab.entries), arr(self.unembed.weight), arr(self.unembed.bias), transform)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


@dataclass
class HeadTransform:
    """``LayerNorm(gelu(x W^T + b))`` applied before the unembedding."""

    weight: np.ndarray
    bias: np.ndarray
    ln_weight: np.ndarray
    ln_bias: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("weight", "bias", "ln_weight", "ln_bias"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.weight.shape[0] if self.weight.ndim == 2 else -1
        if self.weight.shape != (d, d) or any(
            getattr(self, n).shape != (d,) for n in ("bias", "ln_weight", "ln_bias")
        ):
            raise FormatError(f"inconsistent head transform shapes, weight {self.weight.shape}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = gelu(x @ self.weight.T + self.bias)
        mu = y.mean(axis=-1, keepdims=True)
        var = ((y - mu) ** 2).mean(axis=-1, keepdims=True)
        return (y - mu) / np.sqrt(var + self.eps) * self.ln_weight + self.ln_bias

    def to_dict(self) -> dict:
        return {
            "weight": self.weight.tolist(),
            "bias": self.bias.tolist(),
            "ln_weight": self.ln_weight.tolist(),
            "ln_bias": self.ln_bias.tolist(),
            "eps": self.eps,
        }


@dataclass
class Head:
    """Unembedding matrix ``(V, d)``, bias ``(V,)`` and an optional transform."""

    vocab: List[str]
    unembedding: np.ndarray
    bias: np.ndarray
    transform: Optional[HeadTransform] = None

    def __post_init__(self):
        self.unembedding = np.asarray(self.unembedding, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.unembedding.ndim != 2 or self.unembedding.shape[0] != len(self.vocab):
            raise FormatError(f"unembedding shape {self.unembedding.shape} vs vocab size {len(self.vocab)}")
        if self.bias.shape != (len(self.vocab),):
            raise FormatError(f"bias shape {self.bias.shape} vs vocab size {len(self.vocab)}")
        if self.transform is not None and self.transform.weight.shape[0] != self.unembedding.shape[1]:
            raise FormatError(f"transform dim {self.transform.weight.shape[0]} vs unembedding dim {self.unembedding.shape[1]}")

    @property
    def dim(self) -> int:
        return self.unembedding.shape[1]


@dataclass
class StateBundle:
    tokens: list
    states: np.ndarray
    lang: object = None

    def __post_init__(self):
        self.states = np.asarray(self.states)
        if self.states.ndim != 2 or self.states.shape[0] != len(self.tokens):
            raise DimensionMismatch(f"{len(self.tokens)} tokens but states of shape {self.states.shape}")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def _as_head(model_or_head) -> Head:
    return model_or_head if isinstance(model_or_head, Head) else model_or_head.head()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logits_from_state(state, model_or_head) -> np.ndarray:
    """Log-probabilities over the vocabulary; accepts a single state or a matrix."""
    head = _as_head(model_or_head)
    s = np.asarray(state, dtype=np.float64)
    if s.shape[-1] != head.dim:
        raise DimensionMismatch(f"state dim {s.shape[-1]}, head dim {head.dim}")
    if head.transform is not None:
        s = head.transform(s)
    return log_softmax(s @ head.unembedding.T + head.bias)


def _pad_batch(seqs: Sequence[Sequence[int]], pad_id: int):
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return ids, ids.eq(pad_id)


def encode_batch(seqs: Sequence[Sequence[int]], model: EncoderModel, batch_size: int = 256) -> List[np.ndarray]:
    """Last-layer states (float64) for each sequence."""
    for s in seqs:
        if len(s) > model.config.max_len:
            raise SequenceTooLong(f"{len(s)} tokens > max {model.config.max_len}")
        if len(s) == 0:
            raise EmptySentence("empty token sequence")
    out: List[np.ndarray] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            ids, pad = _pad_batch(chunk, model.vocab.pad_id)
            states = model(ids, pad).double().numpy()
            out.extend(states[i, : len(s)].copy() for i, s in enumerate(chunk))
    return out


def encode(ids: Sequence[int], model: EncoderModel) -> StateBundle:
    ids = list(ids)
    states = encode_batch([ids], model)[0]
    lang = [model.vocab.language_of[i] for i in ids]
    return StateBundle(ids, states, lang)


def masked_states(items: Sequence[Tuple[Sequence[int], int]], model: EncoderModel) -> np.ndarray:
    """States at the mask position of each ``(ids, position)`` pair, stacked."""
    for ids, pos in items:
        if ids[pos] != model.vocab.mask_id:
            raise MaskMissing(f"position {pos} does not hold the mask token")
    states = encode_batch([ids for ids, _ in items], model)
    return np.stack([s[pos] for s, (_, pos) in zip(states, items)])


def predict_masked(ids: Sequence[int], position: int, model: EncoderModel,
                   intervention: Optional[Tuple[DirectionBasis, PushSpec]] = None) -> np.ndarray:
    """Log-probabilities at ``position``, optionally after altering that state."""
    state = masked_states([(list(ids), position)], model)
    if intervention is not None:
        basis, push = intervention
        state = alter_matrix(state, basis, push.alpha)
    return logits_from_state(state[0], model)


# --- training -------------------------------------------------------------


def _mask_sentence(pieces: List[Tuple[int, ...]], rng: np.random.Generator, rate: float, mask_id: int):
    n = len(pieces)
    k = max(1, int(math.floor(rate * n + 0.5)))
    chosen = set(rng.choice(n, k, replace=False).tolist())
    ids, targets = [], []
    for i, p in enumerate(pieces):
        if i in chosen:
            targets.append((len(ids), p))
            ids.append(mask_id)
        else:
            ids.extend(p)
    return ids, targets


def _batch_loss(model, batch_ids, batch_targets, V):
    ids, pad = _pad_batch(batch_ids, model.vocab.pad_id)
    states = model(ids, pad)
    rows, cols, weights, positions = [], [], [], []
    for b, targets in enumerate(batch_targets):
        for pos, pieces in targets:
            r = len(positions)
            positions.append((b, pos))
            for p in pieces:
                rows.append(r)
                cols.append(p)
                weights.append(1.0 / len(pieces))
    bi = torch.tensor([p[0] for p in positions])
    ti = torch.tensor([p[1] for p in positions])
    logp = torch.log_softmax(model.logits(states[bi, ti]), dim=-1)
    target = torch.zeros(len(positions), V)
    target[torch.tensor(rows), torch.tensor(cols)] = torch.tensor(weights)
    return -(target * logp).sum(dim=-1).mean()


def _word_pieces(sentences, vocab: Vocabulary) -> List[List[Tuple[int, ...]]]:
    out = []
    for s in sentences:
        row = []
        for w in s:
            if w not in vocab.word_to_pieces:
                raise VocabMismatch(f"word {w!r} is not in the vocabulary")
            row.append(vocab.word_to_pieces[w])
        out.append(row)
    return out


@dataclass
class MLMReport:
    heldout_top1: float
    heldout_topk: float
    topk: int
    epochs: int
    losses: List[float] = field(default_factory=list)


def train_toy_mlm(corpus: Sequence[Sequence[str]], vocab: Vocabulary, config: MLMConfig = None):
    """Train on whole-word masking with a single mask token per word.

    A masked multi-piece word gets a uniform target over its pieces, matching
    how word scores average piece log-probabilities at one position.
    Returns ``(model, MLMReport)``.
    """
    config = config or MLMConfig()
    if not corpus:
        raise VocabMismatch("empty corpus")
    pieces = _word_pieces(corpus, vocab)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pieces))
    n_held = int(round(config.heldout_fraction * len(pieces)))
    held = [pieces[i] for i in order[:n_held]]
    train = [pieces[i] for i in order[n_held:]]
    model = EncoderModel(vocab, config)
    torch.manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    total = max(1, steps_per_epoch * config.epochs)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: min(1.0, (step + 1) / max(1, total // 20)) * max(0.0, 1 - step / total)
    )
    V = len(vocab)
    losses = []
    for epoch in range(config.epochs):
        model.train()
        perm = rng.permutation(len(train))
        running = 0.0
        for start in range(0, len(train), config.batch_size):
            batch = [_mask_sentence(train[i], rng, config.mask_rate, vocab.mask_id)
                     for i in perm[start:start + config.batch_size]]
            loss = _batch_loss(model, [b[0] for b in batch], [b[1] for b in batch], V)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += float(loss.detach())
        losses.append(running / steps_per_epoch)
    model.eval()
    top1, topk = _heldout_accuracy(model, held, config, vocab) if held else (float("nan"),) * 2
    return model, MLMReport(top1, topk, config.topk, config.epochs, losses)


def _heldout_accuracy(model, held, config, vocab):
    rng = np.random.default_rng([config.seed, 1])
    items, gold = [], []
    for row in held:
        w = int(rng.integers(len(row)))
        ids, targets = _mask_sentence_at(row, w, vocab.mask_id)
        items.append((ids, targets))
        gold.append(row[w][0])
    logp = logits_from_state(masked_states(items, model), model)
    ranks = (logp > logp[np.arange(len(gold)), gold][:, None]).sum(axis=1)
    return float(np.mean(ranks < 1)), float(np.mean(ranks < config.topk))


def _mask_sentence_at(row, w, mask_id):
    ids = []
    pos = 0
    for i, p in enumerate(row):
        if i == w:
            pos = len(ids)
            ids.append(mask_id)
        else:
            ids.extend(p)
    return ids, pos


# --- persistence ----------------------------------------------------------


def save_model(model: EncoderModel, path) -> None:
    """Single JSON document with config, vocabulary and every parameter."""
    doc = {
        "config": asdict(model.config),
        "vocab": model.vocab.to_dict(),
        "params": {k: v.detach().numpy().tolist() for k, v in model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> EncoderModel:
    try:
        doc = json.loads(Path(path).read_text())
        model = EncoderModel(Vocabulary.from_dict(doc["vocab"]), MLMConfig(**doc["config"]))
        model.load_state_dict({k: torch.tensor(v, dtype=torch.float32) for k, v in doc["params"].items()})
    except json.JSONDecodeError as exc:
        raise FormatError(str(exc), path=path, line=exc.lineno) from exc
    except (KeyError, TypeError, RuntimeError) as exc:
        raise FormatError(f"bad checkpoint: {exc}", path=path) from exc
    model.eval()
    return model
