import json
import time
from pathlib import Path

import pytest

from mcprobe.classifier import ClassifierConfig
from mcprobe.corpus import LanguageSpec, related_languages
from mcprobe.pipeline import CorpusSizes, Experiment, ExperimentConfig, run_experiment
from mcprobe.toymlm import MLMConfig, build_vocabulary, train_toy_mlm

SMALL_SPECS = (
    LanguageSpec("A", consonants="ptkmns", vowels="aiu", word_count=60),
    LanguageSpec("B", consonants="bdglrv", vowels="eoy", word_count=60),
    LanguageSpec("C", consonants="κλμνπρστ", vowels="αεο", word_count=60),
)
TINY_MLM = MLMConfig(d_model=16, layers=1, heads=2, ff=32, epochs=2, batch_size=16, seed=3)


@pytest.fixture(scope="session")
def small_languages():
    return related_languages(SMALL_SPECS, seed=0)


@pytest.fixture(scope="session")
def small_vocab(small_languages):
    return build_vocabulary(small_languages)


@pytest.fixture(scope="session")
def tiny_model(small_languages, small_vocab):
    corpus = [s for lang in small_languages for s in lang.sample_sentences(60, seed=1)]
    model, report = train_toy_mlm(corpus, small_vocab, TINY_MLM)
    return model


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        languages=list(SMALL_SPECS),
        sizes=CorpusSizes(mlm_per_language=120, classifier_per_language=30, heldout_per_language=20,
                          probes_per_language=30, eval_per_language=15),
        mlm=TINY_MLM,
        classifier=ClassifierConfig(epochs=5),
        max_iterations=3,
        threshold=0.01,
        alpha_grid=(1.0, 3.0),
        completions=2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    manifest = run_experiment(tiny_config(), out)
    return out, manifest


class FullRun:
    """Artifacts of one default-configuration run, loaded lazily."""

    def __init__(self, out: Path, manifest: dict, seconds: float):
        self.out = out
        self.manifest = manifest
        self.seconds = seconds
        self.experiment = Experiment(ExperimentConfig(), out)

    def json(self, name):
        return json.loads((self.out / name).read_text())


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full_run")
    start = time.perf_counter()
    manifest = run_experiment(ExperimentConfig(), out)
    return FullRun(out, manifest, time.perf_counter() - start)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
