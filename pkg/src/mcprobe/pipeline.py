"""End-to-end experiment orchestration.

Stages write into one output directory, each to its own files, renamed into
place only once complete:

    gen-corpus    corpus/*.txt, dictionaries
    train-mlm     model.json, mlm_report.json
    export-states head.json, states/*.jsonl
    select-iters  trace.json, inlp_full.json
    train-inlp    inlp.json
    alter-eval    records.jsonl, metrics.csv, metrics.json, completions.txt
    alpha-sweep   alpha_sweep.csv, alpha_sweep.json
    report        figures/*.png, report.md
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .alterrep import DEFAULT_ALPHA, DEFAULT_ALPHA_GRID, PushSpec
from .classifier import ClassifierConfig, Side, TokenDataset, balanced_sample
from .corpus import (
    DEFAULT_SPECS,
    Language,
    LanguageSpec,
    code_mix,
    dictionary_between,
    read_corpus,
    related_languages,
    write_corpus,
)
from .errors import ReportError, StageError, ThresholdNeverMet
from .evaluation import (
    EvalItem,
    MaskedProbe,
    aggregate,
    alpha_sweep,
    build_eval_items,
    make_probes,
    records_to_jsonl,
    score_items,
    select_iterations,
    top_completions,
)
from .inlp import InlpConfig, InlpResult, run_inlp
from .interchange import export_head, export_states, import_states
from .toymlm import (
    EncoderModel,
    MLMConfig,
    StateBundle,
    build_vocabulary,
    encode_batch,
    load_model,
    masked_states,
    save_model,
    tokenize,
    train_toy_mlm,
)

log = logging.getLogger(__name__)

STAGES = (
    "gen-corpus",
    "train-mlm",
    "export-states",
    "select-iters",
    "train-inlp",
    "alter-eval",
    "alpha-sweep",
    "report",
)
RECIPES = ("monolingual", "code_mixed")


@dataclass
class CorpusSizes:
    mlm_per_language: int = 3000
    classifier_per_language: int = 1500
    heldout_per_language: int = 250
    probes_per_language: int = 1000
    eval_per_language: int = 250


@dataclass
class ExperimentConfig:
    """Everything a run depends on. Unset fields take artifact defaults."""

    languages: List[LanguageSpec] = field(default_factory=lambda: list(DEFAULT_SPECS))
    pair: Tuple[str, str] = ("A", "B")
    third: str = "C"
    recipe: str = "monolingual"
    code_mix_rate: float = 0.3
    sizes: CorpusSizes = field(default_factory=CorpusSizes)
    mlm: MLMConfig = field(default_factory=MLMConfig)
    classifier: ClassifierConfig = field(default_factory=lambda: ClassifierConfig(epochs=50))
    max_tokens_per_class: int = 5000
    masking_rate: float = 0.15
    iterations: Optional[int] = None
    threshold: float = 0.9
    max_iterations: int = 16
    topk: int = 10
    alpha: float = DEFAULT_ALPHA
    alpha_grid: Tuple[float, ...] = DEFAULT_ALPHA_GRID
    completions: int = 5
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.languages = [s if isinstance(s, LanguageSpec) else _spec_from_dict(s) for s in self.languages]
        if isinstance(self.sizes, dict):
            self.sizes = CorpusSizes(**self.sizes)
        elif self.recipe == "code_mixed" and "sizes" not in self._explicit:
            self.sizes = CorpusSizes(classifier_per_language=3000, heldout_per_language=500, eval_per_language=500)
        if isinstance(self.mlm, dict):
            self.mlm = MLMConfig(**self.mlm)
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        self.pair = tuple(self.pair)
        self.alpha_grid = tuple(float(a) for a in self.alpha_grid)
        tags = [s.tag for s in self.languages]
        if len(set(tags)) != len(tags):
            raise ValueError(f"duplicate language tags {tags}")
        for t in (*self.pair, self.third):
            if t not in tags:
                raise ValueError(f"language {t!r} is not defined (have {tags})")
        if len({*self.pair, self.third}) != 3:
            raise ValueError("pair and third language must be three distinct tags")
        if self.recipe not in RECIPES:
            raise ValueError(f"recipe must be one of {RECIPES}")
        if self.recipe == "code_mixed" and self.iterations is None and "iterations" not in self._explicit:
            self.iterations = 16
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")

    _explicit: frozenset = field(default=frozenset(), repr=False, compare=False)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"_explicit"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**obj, _explicit=frozenset(obj))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("_explicit")
        d["pair"] = list(self.pair)
        d["alpha_grid"] = list(self.alpha_grid)
        return d

    def language(self, tag: str) -> LanguageSpec:
        return next(s for s in self.languages if s.tag == tag)


def _spec_from_dict(d: dict) -> LanguageSpec:
    d = dict(d)
    if "syllables" in d:
        d["syllables"] = tuple(d["syllables"])
    return LanguageSpec(**d)


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# --- atomic output ----------------------------------------------------------


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


class _Staged:
    """Context manager: writes go to a scratch directory moved into place on success."""

    def __init__(self, out: Path):
        self.out = out

    def __enter__(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.out, prefix=".stage-"))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for p in sorted(self.tmp.rglob("*")):
                    if p.is_file():
                        dest = self.out / p.relative_to(self.tmp)
                        dest.parent.mkdir(parents=True, exist_ok=True)
                        os.replace(p, dest)
        finally:
            for p in sorted(self.tmp.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
            self.tmp.rmdir()
        return False


# --- the experiment ---------------------------------------------------------


@dataclass
class TokenStates:
    """Per-sentence encoder output and, per token, the state seen when its word is masked."""

    sentences: List[List[str]]
    bundles: List[StateBundle]
    masked: List[StateBundle]


class Experiment:
    def __init__(self, config: ExperimentConfig, out_dir=None):
        self.config = config
        self.out = Path(out_dir or config.out_dir)
        self._languages: Optional[List[Language]] = None
        self._model: Optional[EncoderModel] = None

    # shared lazily-built objects

    @property
    def languages(self) -> Dict[str, Language]:
        if self._languages is None:
            self._languages = related_languages(self.config.languages, self.config.seed)
        return {l.tag: l for l in self._languages}

    @property
    def model(self) -> EncoderModel:
        if self._model is None:
            self._model = load_model(self.out / "model.json")
        return self._model

    def _path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _corpus(self, name: str) -> Tuple[List[List[str]], List[List[str]]]:
        return read_corpus(self._path("corpus", name + ".txt"))

    # stages

    def gen_corpus(self) -> None:
        cfg, langs = self.config, self.languages
        l1, l2 = cfg.pair
        sz = cfg.sizes
        with _Staged(self.out) as tmp:
            corpus_dir = tmp / "corpus"
            corpus_dir.mkdir()
            mlm, mlm_tags = [], []
            for k, spec in enumerate(cfg.languages):
                sents = langs[spec.tag].sample_sentences(sz.mlm_per_language, _sub_seed(cfg.seed, 1, k))
                mlm += sents
                mlm_tags += [[spec.tag] * len(s) for s in sents]
            write_corpus(corpus_dir / "mlm_train.txt", mlm, mlm_tags)
            plan = (
                ("classifier_train", sz.classifier_per_language, 2),
                ("classifier_heldout", sz.heldout_per_language, 3),
                ("probes", sz.probes_per_language, 4),
                ("eval", sz.eval_per_language, 5),
            )
            for name, n, key in plan:
                sents, tags = [], []
                for j, tag in enumerate((l1, l2)):
                    part = langs[tag].sample_sentences(n, _sub_seed(cfg.seed, key, j))
                    if cfg.recipe == "code_mixed" and name.startswith("classifier"):
                        part, part_tags = self._mix(part, tag, _sub_seed(cfg.seed, key, j, 1))
                    else:
                        part_tags = [[tag] * len(s) for s in part]
                    sents += part
                    tags += part_tags
                write_corpus(corpus_dir / f"{name}.txt", sents, tags)
            for a, b in ((l1, l2), (l2, l1)):
                dictionary_between(langs[a], langs[b]).save(corpus_dir / f"dict_{a}_{b}.txt")

    def _mix(self, sentences, tag, seed):
        cfg = self.config
        other = cfg.pair[1] if tag == cfg.pair[0] else cfg.pair[0]
        d = dictionary_between(self.languages[tag], self.languages[other])
        seeds = np.random.SeedSequence(seed).generate_state(len(sentences))
        out, tags = [], []
        for s, sd in zip(sentences, seeds):
            mixed = code_mix(s, d, cfg.code_mix_rate, int(sd))
            out.append(list(mixed.words))
            tags.append(list(mixed.tags))
        return out, tags

    def train_mlm(self) -> None:
        cfg = self.config
        sents, _ = self._corpus("mlm_train")
        vocab = build_vocabulary([self.languages[s.tag] for s in cfg.languages])
        mlm_cfg = MLMConfig(**{**asdict(cfg.mlm), "seed": _sub_seed(cfg.seed, 10)})
        model, report = train_toy_mlm(sents, vocab, mlm_cfg)
        with _Staged(self.out) as tmp:
            save_model(model, tmp / "model.json")
            write_json_atomic(tmp / "mlm_report.json", asdict(report))
        self._model = model

    def token_states(self, sentences: Sequence[Sequence[str]]) -> TokenStates:
        model, vocab = self.model, self.model.vocab
        toks = [tokenize(s, vocab) for s in sentences]
        plain = encode_batch([list(t.ids) for t in toks], model)
        items, owner = [], []
        for k, t in enumerate(toks):
            for w in range(len(t.words)):
                items.append(t.mask_word(w, vocab.mask_id))
                owner.append(k)
        mstates = masked_states([(list(i), p) for i, p in items], model) if items else np.zeros((0, model.dim))
        bundles, masked = [], []
        row = 0
        for t, S in zip(toks, plain):
            lang = [vocab.language_of[i] for i in t.ids]
            per_tok = np.repeat(mstates[row:row + len(t.words)], [b - a for a, b in t.spans], axis=0)
            row += len(t.words)
            bundles.append(StateBundle(list(t.ids), S, lang))
            masked.append(StateBundle(list(t.ids), per_tok, lang))
        return TokenStates([list(s) for s in sentences], bundles, masked)

    def export_states(self) -> None:
        with _Staged(self.out) as tmp:
            export_head(self.model, tmp / "head.json")
            (tmp / "states").mkdir()
            for name in ("classifier_train", "classifier_heldout"):
                sents, _ = self._corpus(name)
                ts = self.token_states(sents)
                export_states(ts.bundles, tmp / "states" / f"{name}.jsonl")
                export_states(ts.masked, tmp / "states" / f"{name}_masked.jsonl")

    def _datasets(self) -> Tuple[TokenDataset, TokenDataset]:
        cfg = self.config
        train = dataset_from_bundles(import_states(self._path("states", "classifier_train.jsonl")),
                                     cfg.pair, import_states(self._path("states", "classifier_train_masked.jsonl")))
        held = dataset_from_bundles(import_states(self._path("states", "classifier_heldout.jsonl")), cfg.pair)
        train = balanced_sample(train, _sub_seed(cfg.seed, 20), cfg.max_tokens_per_class)
        held = balanced_sample(held, _sub_seed(cfg.seed, 21), cfg.max_tokens_per_class)
        return train, held

    def _inlp_config(self, iterations: int = 0) -> InlpConfig:
        cfg = self.config
        return InlpConfig(iterations, cfg.classifier, cfg.masking_rate, _sub_seed(cfg.seed, 22))

    def probes(self) -> List[MaskedProbe]:
        sents, _ = self._corpus("probes")
        return make_probes(sents, self.model.vocab, _sub_seed(self.config.seed, 30))

    def select_iters(self, topk: Optional[int] = None) -> int:
        cfg = self.config
        train, held = self._datasets()
        k = topk or cfg.topk
        max_m = max(cfg.max_iterations, cfg.iterations or 0)
        try:
            sel = select_iterations(self.model, train, held, self.probes(), max_m, cfg.threshold, k,
                                    self._inlp_config())
            never_met = False
        except ThresholdNeverMet as exc:
            sel, never_met = exc.selection, True
            log.warning("%s; falling back to m=0", exc)
        trace = {"threshold": cfg.threshold, "k": k, "chosen_m": sel.chosen_m,
                 "threshold_never_met": never_met, "trace": sel.trace_dicts()}
        with _Staged(self.out) as tmp:
            write_json_atomic(tmp / "trace.json", trace)
            sel.full.save(tmp / "inlp_full.json")
        return sel.chosen_m

    def train_inlp(self, iterations: Optional[int] = None) -> InlpResult:
        cfg = self.config
        m = iterations if iterations is not None else cfg.iterations
        full_path = self._path("inlp_full.json")
        if m is None:
            if not self._path("trace.json").exists():
                self.select_iters()
            m = json.loads(self._path("trace.json").read_text())["chosen_m"]
        if full_path.exists() and InlpResult.load(full_path).iterations >= m:
            result = InlpResult.load(full_path).truncated(m)
        else:
            train, held = self._datasets()
            result = run_inlp(train, held, self._inlp_config(m))
        with _Staged(self.out) as tmp:
            result.save(tmp / "inlp.json")
        return result

    def eval_items(self) -> List[EvalItem]:
        cfg = self.config
        sents, tags = self._corpus("eval")
        langs = self.languages
        vocab = self.model.vocab
        third = langs[cfg.third].words
        items: List[EvalItem] = []
        for j, (a, b) in enumerate((cfg.pair, cfg.pair[::-1])):
            part = [s for s, t in zip(sents, tags) if t and t[0] == a]
            built, _ = build_eval_items(part, dictionary_between(langs[a], langs[b]), vocab, third,
                                        _sub_seed(cfg.seed, 40, j), start_id=len(items))
            items += built
        return items

    def alter_eval(self, alpha: Optional[float] = None) -> dict:
        cfg = self.config
        alpha = cfg.alpha if alpha is None else alpha
        inlp = InlpResult.load(self._path("inlp.json"))
        items = self.eval_items()
        model = self.model
        states = masked_states([(list(it.ids), it.mask_position) for it in items], model)
        records = []
        for direction in ("opposite", "same"):
            records += score_items(items, model, inlp, direction, alpha, states=states)
        table = aggregate(records)
        summary = {"alpha": alpha, "iterations": inlp.iterations, "items": len(items), "rows": table.summary()}
        with _Staged(self.out) as tmp:
            write_text_atomic(tmp / "items.jsonl", "".join(json.dumps(it.to_dict(), ensure_ascii=False) + "\n" for it in items))
            write_text_atomic(tmp / "records.jsonl", records_to_jsonl(records))
            write_text_atomic(tmp / "metrics.csv", table.to_csv())
            write_json_atomic(tmp / "metrics.json", summary)
            write_text_atomic(tmp / "completions.txt", self._completions(items, inlp, alpha))
        return summary

    def _completions(self, items: Sequence[EvalItem], inlp: InlpResult, alpha: float) -> str:
        cfg, model = self.config, self.model
        l1, l2 = inlp.names
        rng = np.random.default_rng(_sub_seed(cfg.seed, 50))
        chosen = sorted(rng.choice(len(items), min(cfg.completions, len(items)), replace=False).tolist()) if items else []
        lines = []
        for i in chosen:
            it = items[i]
            shown = list(it.words)
            shown[it.mask_index] = "[MASK]"
            lines.append(" ".join(shown))
            rows = [
                ("pre", None),
                (f"pushed to {l2}", (inlp.basis, PushSpec.toward(Side.L2, abs(alpha)))),
                (f"pushed to {l1}", (inlp.basis, PushSpec.toward(Side.L1, abs(alpha)))),
            ]
            width = max(len(r[0]) for r in rows)
            for label, iv in rows:
                words = top_completions(model, it.ids, it.mask_position, iv, k=cfg.topk)
                lines.append(f"  {label:<{width}} | " + ", ".join(w for w, _ in words))
            lines.append("")
        return "\n".join(lines)

    def alpha_sweep(self) -> List[dict]:
        cfg = self.config
        inlp = InlpResult.load(self._path("inlp.json"))
        out = []
        csv = ["alpha,template_dir,candidate_class,proportion_expected,mean_delta_logp,n"]
        for a, table in alpha_sweep(self.model, self.eval_items(), inlp, cfg.alpha_grid, "opposite"):
            out.append({"alpha": a, "rows": table.summary()})
            for r in table.ordered():
                csv.append(f"{a:g},{r.template_dir},{r.candidate_class},{r.proportion_expected:.6f},"
                           f"{r.mean_delta_logp:.6f},{r.n}")
        with _Staged(self.out) as tmp:
            write_text_atomic(tmp / "alpha_sweep.csv", "\n".join(csv) + "\n")
            write_json_atomic(tmp / "alpha_sweep.json", out)
        return out

    def report(self) -> List[Path]:
        from .report import emit_report

        return emit_report(self.out)

    def manifest(self, stages: Sequence[str]) -> dict:
        import matplotlib
        import torch

        def digest(p: Path) -> str:
            return hashlib.sha256(p.read_bytes()).hexdigest()

        files = {str(p.relative_to(self.out)): digest(p)
                 for p in sorted(self.out.rglob("*"))
                 if p.is_file() and p.name != "manifest.json" and not p.name.startswith(".")}
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "stages": list(stages),
            "versions": {
                "mcprobe": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
                "matplotlib": matplotlib.__version__,
            },
            "files": files,
        }

    def run_stage(self, stage: str, **kw):
        fn = {
            "gen-corpus": self.gen_corpus,
            "train-mlm": self.train_mlm,
            "export-states": self.export_states,
            "select-iters": self.select_iters,
            "train-inlp": self.train_inlp,
            "alter-eval": self.alter_eval,
            "alpha-sweep": self.alpha_sweep,
            "report": self.report,
        }.get(stage)
        if fn is None:
            raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
        log.info("stage %s", stage)
        try:
            return fn(**kw)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc


def dataset_from_bundles(bundles: Sequence[StateBundle], pair: Tuple[str, str],
                         masked: Optional[Sequence[StateBundle]] = None) -> TokenDataset:
    """Token dataset labelled by per-token language; tokens of other languages are dropped."""
    l1, l2 = pair
    X, M, y = [], [], []
    for k, b in enumerate(bundles):
        langs = b.lang if isinstance(b.lang, list) else [b.lang] * len(b.tokens)
        keep = np.array([t in (l1, l2) for t in langs], dtype=bool)
        X.append(b.states[keep])
        y.append(np.where(np.array(langs, dtype=object)[keep] == l1, 1, -1))
        if masked is not None:
            M.append(masked[k].states[keep])
    dim = bundles[0].dim if bundles else 0
    emb = np.vstack(X) if X else np.zeros((0, dim))
    return TokenDataset(emb, np.concatenate(y).astype(np.int64) if y else np.zeros(0, np.int64),
                        mask_embeddings=np.vstack(M) if masked is not None else None, names=(l1, l2))


def run_experiment(config, out_dir=None, stages: Optional[Sequence[str]] = None,
                   alpha: Optional[float] = None, iterations: Optional[int] = None,
                   topk: Optional[int] = None) -> dict:
    """Run the listed stages (all by default) and write ``manifest.json``."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.load(config)
    exp = Experiment(config, out_dir)
    stages = list(stages or STAGES)
    for stage in stages:
        kw = {}
        if stage == "alter-eval" and alpha is not None:
            kw["alpha"] = alpha
        if stage == "train-inlp" and iterations is not None:
            kw["iterations"] = iterations
        if stage == "select-iters" and topk is not None:
            kw["topk"] = topk
        if stage == "select-iters" and (iterations is not None or config.iterations is not None):
            continue
        exp.run_stage(stage, **kw)
    manifest = exp.manifest(stages)
    write_json_atomic(exp.out / "manifest.json", manifest)
    return manifest
