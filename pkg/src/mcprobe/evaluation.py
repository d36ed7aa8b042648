"""Masked-word evaluation of interventions.

Each item masks one dictionary-covered word and scores five candidates: the
gold word, its translation, a random word from each of the two languages
(piece-count matched), and a random third-language control.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .alterrep import DEFAULT_ALPHA, PushSpec, alter_matrix
from .classifier import Side, TokenDataset
from .corpus import BilingualDictionary
from .errors import EmptyDataset, EmptyRecords, NoCoveredWord, ThresholdNeverMet, UnknownPiece
from .inlp import InlpConfig, InlpResult, step_inlp
from .projection import DirectionBasis
from .toymlm import EncoderModel, Vocabulary, logits_from_state, masked_states, tokenize

CANDIDATES = ("target_original", "target_translation", "random_original", "random_pushed", "third_language")
CLASSES = (
    "target_pushed_to",
    "random_pushed_to",
    "target_pushed_away",
    "random_pushed_away",
    "third_language",
)
DIRECTIONS = ("opposite", "same")


@dataclass(frozen=True)
class Candidate:
    word: str
    pieces: Tuple[int, ...]
    lang: str


@dataclass(frozen=True)
class EvalItem:
    item_id: int
    words: Tuple[str, ...]
    template_lang: str
    other_lang: str
    mask_index: int
    ids: Tuple[int, ...]
    mask_position: int
    candidates: Dict[str, Candidate]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates"] = {k: asdict(v) for k, v in self.candidates.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalItem":
        cands = {k: Candidate(v["word"], tuple(v["pieces"]), v["lang"]) for k, v in d["candidates"].items()}
        return cls(d["item_id"], tuple(d["words"]), d["template_lang"], d["other_lang"], d["mask_index"],
                   tuple(d["ids"]), d["mask_position"], cands)


def _pick(rng, pool: Sequence[str], n_pieces: int, vocab: Vocabulary, exclude: str) -> str:
    matched = [w for w in pool if len(vocab.word_to_pieces[w]) == n_pieces and w != exclude]
    if not matched:
        matched = [w for w in pool if w != exclude]
    return matched[int(rng.integers(len(matched)))]


def build_eval_item(sentence, dictionary: BilingualDictionary, vocab: Vocabulary,
                    third_words: Sequence[str], seed: int, item_id: int = 0) -> EvalItem:
    """Mask one covered word and assemble its five candidates."""
    words = tuple(sentence.split() if isinstance(sentence, str) else sentence)
    covered = [i for i, w in enumerate(words) if dictionary.covers(w) and dictionary.translate(w) in vocab.word_to_pieces]
    if not covered:
        raise NoCoveredWord(f"no dictionary match in: {' '.join(words)}")
    rng = np.random.default_rng(seed)
    mask_index = covered[int(rng.integers(len(covered)))]
    target = words[mask_index]
    translation = dictionary.translate(target)
    src, tgt = dictionary.src_tag, dictionary.tgt_tag
    n_target = len(vocab.word_to_pieces[target])
    n_trans = len(vocab.word_to_pieces[translation])
    rand_orig = _pick(rng, vocab.words_of(src), n_target, vocab, target)
    rand_push = _pick(rng, vocab.words_of(tgt), n_trans, vocab, translation)
    third = _pick(rng, list(third_words), n_target, vocab, "")
    third_lang = vocab.word_language[third]
    tok = tokenize(words, vocab)
    ids, pos = tok.mask_word(mask_index, vocab.mask_id)
    cands = {
        "target_original": Candidate(target, vocab.word_to_pieces[target], src),
        "target_translation": Candidate(translation, vocab.word_to_pieces[translation], tgt),
        "random_original": Candidate(rand_orig, vocab.word_to_pieces[rand_orig], src),
        "random_pushed": Candidate(rand_push, vocab.word_to_pieces[rand_push], tgt),
        "third_language": Candidate(third, vocab.word_to_pieces[third], third_lang),
    }
    return EvalItem(item_id, words, src, tgt, mask_index, ids, pos, cands)


def build_eval_items(sentences, dictionary, vocab, third_words, seed, start_id=0):
    """Items for every sentence with a dictionary match; returns ``(items, skipped)``."""
    items, skipped = [], []
    seeds = np.random.SeedSequence(seed).generate_state(len(sentences)) if len(sentences) else []
    for k, (s, sd) in enumerate(zip(sentences, seeds)):
        try:
            items.append(build_eval_item(s, dictionary, vocab, third_words, int(sd), start_id + len(items)))
        except NoCoveredWord as exc:
            skipped.append((k, str(exc)))
    return items, skipped


def word_logprob(logp: np.ndarray, pieces: Sequence[int]) -> float:
    """Mean of the pieces' log-probabilities at one masked position."""
    if len(pieces) == 0:
        raise UnknownPiece("word has no pieces")
    for p in pieces:
        if not 0 <= p < logp.shape[-1]:
            raise UnknownPiece(p)
    return float(np.mean(logp[list(pieces)]))


@dataclass
class ShiftRecord:
    item_id: int
    template_lang: str
    pushed_to: str
    direction: str
    alpha: float
    iterations: int
    before: Dict[str, float]
    after: Dict[str, float]

    def delta(self, name: str) -> float:
        return self.after[name] - self.before[name]

    def to_dict(self) -> dict:
        return asdict(self)


def push_for(item: EvalItem, direction: str, inlp: InlpResult, magnitude: float = DEFAULT_ALPHA):
    """Push spec toward the template language (``same``) or the other one (``opposite``)."""
    target = item.template_lang if direction == "same" else item.other_lang
    l1, l2 = inlp.names
    if target == l1:
        side = Side.L1
    elif target == l2:
        side = Side.L2
    else:
        raise ValueError(f"language {target!r} is neither {l1!r} nor {l2!r}")
    return PushSpec.toward(side, magnitude), target


def _scores(logp: np.ndarray, item: EvalItem) -> Dict[str, float]:
    return {k: word_logprob(logp, c.pieces) for k, c in item.candidates.items()}


def score_items(items: Sequence[EvalItem], model: EncoderModel, inlp: InlpResult, direction: str,
                magnitude: float = DEFAULT_ALPHA, states: Optional[np.ndarray] = None) -> List[ShiftRecord]:
    """Before/after candidate scores for every item, intervening at the mask only.

    ``states`` may carry precomputed mask-position states in item order.
    """
    if not items:
        return []
    if states is None:
        states = masked_states([(list(it.ids), it.mask_position) for it in items], model)
    head = model.head() if hasattr(model, "head") else model
    before = logits_from_state(states, head)
    records = []
    for side_alpha, group in _group_by_alpha(items, inlp, direction, magnitude).items():
        idx = [i for i, _ in group]
        after = logits_from_state(alter_matrix(states[idx], inlp.basis, side_alpha), head)
        for row, (i, target) in enumerate(group):
            it = items[i]
            records.append(ShiftRecord(it.item_id, it.template_lang, target, direction, side_alpha,
                                       inlp.iterations, _scores(before[i], it), _scores(after[row], it)))
    records.sort(key=lambda r: r.item_id)
    return records


def _group_by_alpha(items, inlp, direction, magnitude):
    groups: Dict[float, list] = defaultdict(list)
    for i, it in enumerate(items):
        push, target = push_for(it, direction, inlp, magnitude)
        groups[push.alpha].append((i, target))
    return groups


def score_item(item: EvalItem, model: EncoderModel, inlp: InlpResult, push: PushSpec) -> ShiftRecord:
    state = masked_states([(list(item.ids), item.mask_position)], model)
    before = logits_from_state(state[0], model)
    after = logits_from_state(alter_matrix(state, inlp.basis, push.alpha)[0], model)
    if push.alpha == 0:
        target, direction = "", "amnesic"
    else:
        side = Side.L1 if push.alpha > 0 else Side.L2
        target = inlp.names[0] if side is Side.L1 else inlp.names[1]
        direction = "same" if target == item.template_lang else "opposite"
    return ShiftRecord(item.item_id, item.template_lang, target, direction, push.alpha, inlp.iterations,
                       _scores(before, item), _scores(after, item))


def classify(record: ShiftRecord) -> Dict[str, str]:
    """Map each candidate to its table class given the push direction."""
    if record.direction == "opposite":
        return {
            "target_translation": "target_pushed_to",
            "random_pushed": "random_pushed_to",
            "target_original": "target_pushed_away",
            "random_original": "random_pushed_away",
            "third_language": "third_language",
        }
    if record.direction == "same":
        return {
            "target_original": "target_pushed_to",
            "random_original": "random_pushed_to",
            "target_translation": "target_pushed_away",
            "random_pushed": "random_pushed_away",
            "third_language": "third_language",
        }
    raise ValueError(f"record has no push direction ({record.direction!r})")


def expected_sign(cls: str) -> int:
    return 1 if cls.endswith("pushed_to") else -1


@dataclass
class MetricsRow:
    template_dir: str
    candidate_class: str
    n: int
    n_expected: int
    n_ties: int
    sum_delta: float
    deltas: List[float] = field(default_factory=list, repr=False)

    @property
    def proportion_expected(self) -> float:
        return self.n_expected / self.n if self.n else 0.0

    @property
    def mean_delta_logp(self) -> float:
        return self.sum_delta / self.n if self.n else 0.0

    @property
    def median_abs_delta(self) -> float:
        return float(np.median(np.abs(self.deltas))) if self.deltas else 0.0


@dataclass
class MetricsTable:
    rows: Dict[Tuple[str, str], MetricsRow]

    def row(self, template_dir: str, candidate_class: str) -> MetricsRow:
        return self.rows[(template_dir, candidate_class)]

    def ordered(self) -> List[MetricsRow]:
        return [self.rows[k] for k in sorted(self.rows, key=lambda k: (DIRECTIONS.index(k[0]), CLASSES.index(k[1])))]

    def merge(self, other: "MetricsTable") -> "MetricsTable":
        out = {}
        for key in set(self.rows) | set(other.rows):
            parts = [t.rows[key] for t in (self, other) if key in t.rows]
            out[key] = MetricsRow(key[0], key[1], sum(p.n for p in parts), sum(p.n_expected for p in parts),
                                  sum(p.n_ties for p in parts), sum(p.sum_delta for p in parts),
                                  [d for p in parts for d in p.deltas])
        return MetricsTable(out)

    def to_csv(self) -> str:
        lines = ["template_dir,candidate_class,proportion_expected,mean_delta_logp,n"]
        for r in self.ordered():
            lines.append(f"{r.template_dir},{r.candidate_class},{r.proportion_expected:.6f},{r.mean_delta_logp:.6f},{r.n}")
        return "\n".join(lines) + "\n"

    def summary(self) -> List[dict]:
        return [
            {
                "template_dir": r.template_dir,
                "candidate_class": r.candidate_class,
                "proportion_expected": r.proportion_expected,
                "mean_delta_logp": r.mean_delta_logp,
                "median_abs_delta_logp": r.median_abs_delta,
                "n": r.n,
                "n_expected": r.n_expected,
                "n_ties": r.n_ties,
            }
            for r in self.ordered()
        ]


def aggregate(records: Iterable[ShiftRecord]) -> MetricsTable:
    """Proportion moving in the expected direction and mean per-item delta.

    Ties (zero change) never count as expected; they are tallied separately.
    The third-language class expects a decrease and is descriptive only.
    """
    rows: Dict[Tuple[str, str], MetricsRow] = {}
    any_record = False
    for rec in records:
        any_record = True
        for cand, cls in classify(rec).items():
            key = (rec.direction, cls)
            row = rows.setdefault(key, MetricsRow(rec.direction, cls, 0, 0, 0, 0.0))
            d = rec.delta(cand)
            row.n += 1
            row.sum_delta += d
            row.deltas.append(d)
            if d == 0:
                row.n_ties += 1
            elif np.sign(d) == expected_sign(cls):
                row.n_expected += 1
    if not any_record:
        raise EmptyRecords("no records to aggregate")
    return MetricsTable(rows)


# --- MLM accuracy and iteration selection ---------------------------------


@dataclass(frozen=True)
class MaskedProbe:
    ids: Tuple[int, ...]
    position: int
    gold: Tuple[int, ...]


def make_probes(sentences, vocab: Vocabulary, seed: int) -> List[MaskedProbe]:
    """One randomly masked word per sentence."""
    rng = np.random.default_rng(seed)
    probes = []
    for s in sentences:
        tok = tokenize(s, vocab)
        w = int(rng.integers(len(tok.words)))
        ids, pos = tok.mask_word(w, vocab.mask_id)
        start, end = tok.spans[w]
        probes.append(MaskedProbe(ids, pos, tok.ids[start:end]))
    return probes


def _topk_hits(logp: np.ndarray, gold_first: np.ndarray, k: int) -> np.ndarray:
    gold_scores = logp[np.arange(len(gold_first)), gold_first]
    rank = (logp > gold_scores[:, None]).sum(axis=1)
    return rank < k


def mlm_topk_accuracy(model, probes: Sequence[MaskedProbe], k: int = 10,
                      intervention: Optional[Tuple[DirectionBasis, PushSpec]] = None,
                      states: Optional[np.ndarray] = None) -> float:
    """Fraction of probes whose gold first piece ranks in the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not probes:
        raise EmptyDataset("no probes")
    if states is None:
        states = masked_states([(list(p.ids), p.position) for p in probes], model)
    if intervention is not None:
        basis, push = intervention
        states = alter_matrix(states, basis, push.alpha)
    logp = logits_from_state(states, model)
    gold = np.array([p.gold[0] for p in probes])
    return float(np.mean(_topk_hits(logp, gold, k)))


@dataclass
class TracePoint:
    m: int
    classifier_acc: float
    mlm_topk: float


@dataclass
class Selection:
    chosen_m: int
    trace: List[TracePoint]
    inlp: InlpResult
    threshold: float
    k: int
    full: Optional[InlpResult] = None

    def trace_dicts(self) -> List[dict]:
        return [asdict(t) for t in self.trace]


def select_iterations(model, data: TokenDataset, heldout: TokenDataset, probes: Sequence[MaskedProbe],
                      max_m: int, threshold: float = 0.9, k: int = 10,
                      config: Optional[InlpConfig] = None) -> Selection:
    """Largest ``m <= max_m`` whose amnesic MLM top-k accuracy stays >= threshold.

    The trace holds, for m = 0..max_m, the held-out accuracy of a classifier
    trained after m projections and the MLM top-k accuracy with the first m
    directions erased at the mask position.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if max_m > data.dim:
        raise ValueError(f"max_m {max_m} exceeds dimension {data.dim}")
    config = config or InlpConfig()
    states = masked_states([(list(p.ids), p.position) for p in probes], model)
    state = InlpResult.empty(data.dim, data.names)
    steps = min(max_m + 1, data.dim)
    for _ in range(steps):
        state = step_inlp(state, data, heldout, config)
    trace = []
    for m in range(max_m + 1):
        sub = state.truncated(m)
        acc = state.accuracy_trace[m] if m < len(state.accuracy_trace) else float("nan")
        mlm = mlm_topk_accuracy(model, probes, k, (sub.basis, PushSpec(0.0)), states=states)
        trace.append(TracePoint(m, acc, mlm))
    ok = [t.m for t in trace if t.mlm_topk >= threshold]
    if not ok:
        sel = Selection(0, trace, state.truncated(0), threshold, k, state)
        raise ThresholdNeverMet(f"no m in 0..{max_m} keeps MLM top-{k} >= {threshold}", sel)
    chosen = max(ok)
    return Selection(chosen, trace, state.truncated(chosen), threshold, k, state)


# --- alpha sweep and completions ------------------------------------------


def alpha_sweep(model, items: Sequence[EvalItem], inlp: InlpResult, grid: Sequence[float],
                direction: str = "opposite") -> List[Tuple[float, MetricsTable]]:
    if not grid:
        raise ValueError("empty alpha grid")
    for a in grid:
        if not np.isfinite(a):
            raise ValueError(f"non-finite alpha {a}")
    states = masked_states([(list(it.ids), it.mask_position) for it in items], model)
    return [(float(a), aggregate(score_items(items, model, inlp, direction, a, states=states))) for a in grid]


def top_completions(model, ids: Sequence[int], position: int,
                    intervention: Optional[Tuple[DirectionBasis, PushSpec]] = None,
                    k: int = 7) -> List[Tuple[str, float]]:
    """Top-k whole words at the mask, multi-piece words scored by piece average."""
    if k < 1:
        raise ValueError("k must be >= 1")
    state = masked_states([(list(ids), position)], model)
    if intervention is not None:
        basis, push = intervention
        state = alter_matrix(state, basis, push.alpha)
    logp = logits_from_state(state[0], model)
    vocab = model.vocab
    words = sorted(vocab.word_to_pieces)
    scores = np.array([np.mean(logp[list(vocab.word_to_pieces[w])]) for w in words])
    order = np.lexsort((np.arange(len(words)), -scores))[:k]
    return [(words[i], float(scores[i])) for i in order]


def records_to_jsonl(records: Iterable) -> str:
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in records)
