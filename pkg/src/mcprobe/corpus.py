"""Synthetic languages, bilingual dictionaries and code-mixed text.

Languages generated together share one index-level grammar: a Markov chain
over word ranks whose stationary distribution is Zipfian. Each language only
supplies surface forms, so word ``i`` of language A and word ``i`` of
language B are exact translation equivalents occupying the same slot.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, InsufficientData, InventoryCollision, SpecMismatch

log = logging.getLogger(__name__)

MIN_WORDS = 50
SENTENCE_LENGTH = (6, 20)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LanguageSpec:
    tag: str
    consonants: str
    vowels: str
    word_count: int = 200
    cv_pattern: str = "CV"
    syllables: Tuple[int, int] = (2, 3)
    zipf_exponent: float = 1.0
    successors: int = 4
    head_successors: int = 3
    split_fraction: float = 0.2

    def __post_init__(self):
        if self.word_count < MIN_WORDS:
            raise ValueError(f"word_count must be >= {MIN_WORDS}")


DEFAULT_SPECS = (
    LanguageSpec("A", consonants="ptkmns", vowels="aiu"),
    LanguageSpec("B", consonants="bdglrv", vowels="eoy"),
    LanguageSpec("C", consonants="κλμνπρστ", vowels="αεο"),
)


@dataclass(frozen=True)
class Grammar:
    """Index-level bigram chain with a Zipfian stationary distribution."""

    unigram: np.ndarray
    transition: np.ndarray
    support: np.ndarray

    @property
    def size(self) -> int:
        return self.unigram.shape[0]

    def sample(self, rng: np.random.Generator, length: Optional[int] = None) -> np.ndarray:
        if length is None:
            length = int(rng.integers(SENTENCE_LENGTH[0], SENTENCE_LENGTH[1] + 1))
        u = rng.random(length)
        out = np.empty(length, dtype=np.int64)
        out[0] = min(int(np.searchsorted(self._cdf0, u[0], side="right")), self.size - 1)
        cdf = self._cdf
        for t in range(1, length):
            out[t] = min(int(np.searchsorted(cdf[out[t - 1]], u[t], side="right")), self.size - 1)
        return out

    @property
    def _cdf0(self) -> np.ndarray:
        return np.cumsum(self.unigram)

    @property
    def _cdf(self) -> np.ndarray:
        cached = self.__dict__.get("_cdf_cache")
        if cached is None:
            cached = np.cumsum(self.transition, axis=1)
            object.__setattr__(self, "_cdf_cache", cached)
        return cached

    def log_prob(self, indices: Sequence[int]) -> float:
        idx = list(indices)
        lp = math.log(self.unigram[idx[0]])
        for a, b in zip(idx, idx[1:]):
            lp += math.log(self.transition[a, b])
        return lp


def make_grammar(word_count: int, zipf_exponent: float, successors: int, head_successors: int,
                 seed: int) -> Grammar:
    """Sparse random successor sets balanced by Sinkhorn scaling so that the
    unigram distribution is stationary under the transition matrix."""
    rng = np.random.default_rng(seed)
    n = word_count
    ranks = np.arange(1, n + 1, dtype=np.float64)
    pi = ranks ** -zipf_exponent
    pi /= pi.sum()
    support = np.zeros((n, n), dtype=bool)
    cover = rng.permutation(n)
    for i in range(n):
        support[i, rng.choice(n, successors, replace=False, p=pi)] = True
        support[i, cover[i]] = True
        support[i, :head_successors] = True
    # a tiny dense floor keeps the scaling problem feasible
    K = support * rng.uniform(0.5, 1.5, (n, n)) + 1e-7
    for _ in range(5000):
        K *= (pi / K.sum(axis=1))[:, None]
        K *= (pi / K.sum(axis=0))[None, :]
    P = K / K.sum(axis=1, keepdims=True)
    return Grammar(pi, P, support)


@dataclass
class Language:
    spec: LanguageSpec
    words: List[str]
    pieces: Dict[str, Tuple[str, ...]]
    grammar: Grammar

    @property
    def tag(self) -> str:
        return self.spec.tag

    def render(self, indices: Iterable[int]) -> List[str]:
        return [self.words[i] for i in indices]

    def sample_indices(self, n: int, seed: int) -> List[np.ndarray]:
        rng = np.random.default_rng(seed)
        return [self.grammar.sample(rng) for _ in range(n)]

    def sample_sentences(self, n: int, seed: int) -> List[List[str]]:
        return [self.render(ix) for ix in self.sample_indices(n, seed)]

    def index_of(self, word: str) -> int:
        return self._index[word]

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}

    def __contains__(self, word: str) -> bool:
        return word in self._index


def _make_words(spec: LanguageSpec, rng: np.random.Generator) -> List[List[str]]:
    """Unique words as syllable lists."""
    seen = set()
    words = []
    lo, hi = spec.syllables
    attempts = 0
    while len(words) < spec.word_count:
        attempts += 1
        if attempts > 200 * spec.word_count:
            raise InventoryCollision(f"cannot build {spec.word_count} distinct words for {spec.tag}")
        syl = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            s = "".join(
                spec.consonants[rng.integers(len(spec.consonants))] if ch == "C"
                else spec.vowels[rng.integers(len(spec.vowels))]
                for ch in spec.cv_pattern
            )
            syl.append(s)
        w = "".join(syl)
        if w not in seen:
            seen.add(w)
            words.append(syl)
    return words


def _build_language(spec: LanguageSpec, grammar: Grammar, seed: int) -> Language:
    rng = np.random.default_rng(np.random.SeedSequence([seed, *spec.tag.encode()]))
    syllabled = _make_words(spec, rng)
    words = ["".join(s) for s in syllabled]
    n_split = round_half_up(spec.split_fraction * spec.word_count)
    multi = [i for i, s in enumerate(syllabled) if len(s) >= 2]
    split_ids = set(rng.choice(multi, min(n_split, len(multi)), replace=False).tolist())
    pieces = {}
    for i, syl in enumerate(syllabled):
        if i in split_ids:
            cut = int(rng.integers(1, len(syl)))
            pieces[words[i]] = ("".join(syl[:cut]), "##" + "".join(syl[cut:]))
        else:
            pieces[words[i]] = (words[i],)
    return Language(spec, words, pieces, grammar)


def _grammar_for(spec: LanguageSpec, seed: int) -> Grammar:
    return make_grammar(spec.word_count, spec.zipf_exponent, spec.successors, spec.head_successors, seed)


def gen_language(spec: LanguageSpec, seed: int) -> Language:
    return _build_language(spec, _grammar_for(spec, seed), seed)


def check_disjoint(languages: Sequence[Language]) -> None:
    owner: Dict[str, str] = {}
    for lang in languages:
        for w in lang.words:
            for piece in set(lang.pieces[w]) | {w}:
                key = piece.lstrip("#")
                if key in owner and owner[key] != lang.tag:
                    raise InventoryCollision(f"'{piece}' appears in both {owner[key]} and {lang.tag}")
                owner[key] = lang.tag


@dataclass
class BilingualDictionary:
    """Word mapping ``src -> [tgt, ...]``; lookups return the first-listed entry."""

    src_tag: str
    tgt_tag: str
    pairs: Dict[str, List[str]] = field(default_factory=dict)

    def add(self, src: str, tgt: str) -> None:
        targets = self.pairs.setdefault(src, [])
        if tgt not in targets:
            targets.append(tgt)

    def translate(self, word: str) -> Optional[str]:
        t = self.pairs.get(word)
        return t[0] if t else None

    def covers(self, word: str) -> bool:
        return word in self.pairs

    def inverse(self) -> "BilingualDictionary":
        inv = BilingualDictionary(self.tgt_tag, self.src_tag)
        for s, ts in self.pairs.items():
            for t in ts:
                inv.add(t, s)
        return inv

    def __len__(self) -> int:
        return sum(len(v) for v in self.pairs.values())

    def is_bijection(self) -> bool:
        targets = [t for ts in self.pairs.values() for t in ts]
        return all(len(ts) == 1 for ts in self.pairs.values()) and len(set(targets)) == len(targets)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s, ts in self.pairs.items():
                for t in ts:
                    fh.write(f"{s} {t}\n")


def related_languages(specs: Sequence[LanguageSpec], seed: int) -> List[Language]:
    """Several languages over one shared grammar."""
    sizes = {s.word_count for s in specs}
    if len(sizes) != 1:
        raise SpecMismatch(f"word counts differ: {sorted(sizes)}")
    grammar = _grammar_for(specs[0], seed)
    langs = [_build_language(s, grammar, seed) for s in specs]
    check_disjoint(langs)
    return langs


def dictionary_between(a: Language, b: Language) -> BilingualDictionary:
    d = BilingualDictionary(a.tag, b.tag)
    for wa, wb in zip(a.words, b.words):
        d.add(wa, wb)
    return d


def paired_languages(spec_a: LanguageSpec, spec_b: LanguageSpec, seed: int):
    lang_a, lang_b = related_languages([spec_a, spec_b], seed)
    return lang_a, lang_b, dictionary_between(lang_a, lang_b)


@dataclass(frozen=True)
class MixedSentence:
    words: List[str]
    tags: List[str]
    substituted: int
    covered: int
    uncovered: List[str]

    @property
    def text(self) -> str:
        return " ".join(self.words)


def code_mix(sentence, dictionary: BilingualDictionary, rate: float, seed: int) -> MixedSentence:
    """Replace ``round(rate * covered)`` dictionary-covered words by their translations."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate {rate} outside [0, 1]")
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    covered = [i for i, w in enumerate(words) if dictionary.covers(w)]
    uncovered = [w for w in words if not dictionary.covers(w)]
    if uncovered:
        log.debug("code_mix: %d words not in dictionary: %s", len(uncovered), uncovered)
    k = round_half_up(rate * len(covered))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(covered, k, replace=False).tolist()) if k else set()
    out, tags = [], []
    for i, w in enumerate(words):
        if i in chosen:
            out.append(dictionary.translate(w))
            tags.append(dictionary.tgt_tag)
        else:
            out.append(w)
            tags.append(dictionary.src_tag)
    return MixedSentence(out, tags, len(chosen), len(covered), uncovered)


def code_mix_corpus(sentences: Sequence, dictionary: BilingualDictionary, rate: float,
                    seed: int) -> List[MixedSentence]:
    seeds = np.random.SeedSequence(seed).generate_state(len(sentences)) if sentences else []
    return [code_mix(s, dictionary, rate, int(sd)) for s, sd in zip(sentences, seeds)]


def load_muse_dictionary(path, src_tag: str = "src", tgt_tag: str = "tgt") -> BilingualDictionary:
    d = BilingualDictionary(src_tag, tgt_tag)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise FormatError(f"expected 'source target', got {line.rstrip()!r}", path=path, line=lineno)
            d.add(fields[0], fields[1])
    return d


@dataclass
class CorpusSplit:
    train: Dict[str, list]
    validation: Dict[str, list]
    test: Dict[str, list]


def make_splits(sentences: Mapping[str, Sequence], sizes: Tuple[int, int, int], seed: int) -> CorpusSplit:
    n_train, n_val, n_test = sizes
    need = n_train + n_val + n_test
    train, val, test = {}, {}, {}
    for k, (tag, sents) in enumerate(sorted(sentences.items())):
        if len(sents) < need:
            raise InsufficientData(f"{tag}: {len(sents)} sentences, need {need}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        order = rng.permutation(len(sents))
        train[tag] = [sents[i] for i in order[:n_train]]
        val[tag] = [sents[i] for i in order[n_train:n_train + n_val]]
        test[tag] = [sents[i] for i in order[n_train + n_val:need]]
    return CorpusSplit(train, val, test)


def write_corpus(path, sentences: Sequence[Sequence[str]], tags: Sequence[Sequence[str]]) -> None:
    """One sentence per line plus a ``.tags`` sidecar with one tag per word."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(" ".join(s) + "\n")
    with open(tag_path(path), "w", encoding="utf-8") as fh:
        for s, t in zip(sentences, tags):
            if len(s) != len(t):
                raise ValueError("sentence and tag lengths differ")
            fh.write(" ".join(t) + "\n")


def tag_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".tags")


def read_corpus(path) -> Tuple[List[List[str]], List[List[str]]]:
    path = Path(path)
    sentences = [line.split() for line in path.read_text(encoding="utf-8").splitlines()]
    tp = tag_path(path)
    if not tp.exists():
        raise FormatError("missing tag sidecar", path=tp)
    tags = [line.split() for line in tp.read_text(encoding="utf-8").splitlines()]
    if len(tags) != len(sentences):
        raise FormatError(f"{len(sentences)} sentences but {len(tags)} tag lines", path=tp)
    for i, (s, t) in enumerate(zip(sentences, tags), start=1):
        if len(s) != len(t):
            raise FormatError(f"{len(s)} words but {len(t)} tags", path=tp, line=i)
    return sentences, tags
