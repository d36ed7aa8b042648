import numpy as np
import pytest

from mcprobe.corpus import (
    DEFAULT_SPECS,
    BilingualDictionary,
    LanguageSpec,
    check_disjoint,
    code_mix,
    code_mix_corpus,
    gen_language,
    load_muse_dictionary,
    make_grammar,
    make_splits,
    paired_languages,
    read_corpus,
    related_languages,
    round_half_up,
    write_corpus,
)
from mcprobe.errors import FormatError, InsufficientData, InventoryCollision, SpecMismatch

A, B, C = DEFAULT_SPECS


@pytest.fixture(scope="module")
def pair():
    return paired_languages(A, B, seed=0)


class TestLanguages:
    def test_disjoint_inventories(self):
        langs = related_languages(DEFAULT_SPECS, seed=0)
        assert not set(langs[0].words) & set(langs[1].words)
        assert not set(langs[1].words) & set(langs[2].words)

    def test_same_seed_same_inventory(self):
        assert gen_language(A, 3).words == gen_language(A, 3).words
        assert gen_language(A, 3).pieces == gen_language(A, 3).pieces

    def test_collision_detected(self):
        clash = LanguageSpec("Z", consonants=A.consonants, vowels=A.vowels)
        with pytest.raises(InventoryCollision):
            check_disjoint([gen_language(A, 0), gen_language(clash, 0)])

    def test_word_count_floor(self):
        with pytest.raises(ValueError):
            LanguageSpec("X", "pt", "a", word_count=49)

    def test_sentence_lengths(self):
        sents = gen_language(A, 1).sample_sentences(200, seed=2)
        assert all(6 <= len(s) <= 20 for s in sents)

    def test_split_pieces_rejoin(self):
        lang = gen_language(A, 0)
        split = [w for w in lang.words if len(lang.pieces[w]) == 2]
        assert len(split) == round_half_up(0.2 * A.word_count)
        for w in split:
            first, second = lang.pieces[w]
            assert second.startswith("##") and first + second[2:] == w

    def test_zipf_slope(self):
        # Monte-Carlo rank-frequency fit over the stationary chain
        lang = gen_language(A, 0)
        rng = np.random.default_rng(11)
        toks = np.concatenate([lang.grammar.sample(rng) for _ in range(8000)])[:100_000]
        assert len(toks) == 100_000
        counts = np.sort(np.bincount(toks, minlength=lang.grammar.size))[::-1]
        top = counts[:100]
        slope = np.polyfit(np.log(np.arange(1, 101)), np.log(top), 1)[0]
        assert abs(slope + 1.0) <= 0.1

    def test_grammar_is_stationary(self):
        g = make_grammar(80, 1.0, 4, 3, seed=5)
        np.testing.assert_allclose(g.transition.sum(axis=1), 1.0)
        np.testing.assert_allclose(g.unigram @ g.transition, g.unigram, atol=1e-6)


class TestPairs:
    def test_bijection(self, pair):
        a, b, d = pair
        assert d.is_bijection() and len(d) == A.word_count
        assert d.translate(a.words[7]) == b.words[7]
        assert d.inverse().translate(b.words[7]) == a.words[7]

    def test_translation_keeps_bigram_validity(self, pair):
        a, b, d = pair
        for ix in a.sample_indices(50, seed=4):
            translated = [d.translate(w) for w in a.render(ix)]
            back = [b.index_of(w) for w in translated]
            assert all(a.grammar.support[i, j] or a.grammar.transition[i, j] > 0
                       for i, j in zip(back, back[1:]))
            assert back == list(ix)

    def test_spec_mismatch(self):
        with pytest.raises(SpecMismatch):
            paired_languages(A, LanguageSpec("B", "bdglrv", "eoy", word_count=120), seed=0)


def toy_dict(n=10):
    d = BilingualDictionary("A", "B")
    for i in range(n):
        d.add(f"a{i}", f"b{i}")
    return d


class TestCodeMix:
    def test_rounding_rule(self):
        out = code_mix([f"a{i}" for i in range(10)], toy_dict(), 0.3, seed=0)
        assert out.substituted == 3 and out.covered == 10
        assert sum(t == "B" for t in out.tags) == 3
        assert all(w.startswith("b") == (t == "B") for w, t in zip(out.words, out.tags))

    def test_rate_zero_unchanged(self):
        words = [f"a{i}" for i in range(10)]
        out = code_mix(words, toy_dict(), 0.0, seed=0)
        assert out.words == words and set(out.tags) == {"A"}

    def test_uncovered_skipped(self):
        out = code_mix(["a1", "zz", "a2", "a3"], toy_dict(), 1.0, seed=0)
        assert out.uncovered == ["zz"] and out.covered == 3
        assert out.words == ["b1", "zz", "b2", "b3"]

    def test_half_up(self):
        # 5 covered words at 0.3 gives 1.5 which rounds up
        assert code_mix([f"a{i}" for i in range(5)], toy_dict(), 0.3, seed=1).substituted == 2

    def test_deterministic(self):
        words = [f"a{i}" for i in range(10)]
        assert code_mix(words, toy_dict(), 0.5, 7).words == code_mix(words, toy_dict(), 0.5, 7).words

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            code_mix(["a1"], toy_dict(), 1.2, 0)

    def test_corpus_fraction(self, pair):
        a, _, d = pair
        sents = a.sample_sentences(1200, seed=3)
        mixed = code_mix_corpus(sents, d, 0.3, seed=0)
        covered = sum(m.covered for m in mixed)
        assert covered >= 10_000
        assert abs(sum(m.substituted for m in mixed) / covered - 0.3) <= 0.03
        assert all(m.substituted == round_half_up(0.3 * m.covered) for m in mixed)


class TestMuse:
    def test_two_pairs(self, tmp_path):
        p = tmp_path / "en-es.txt"
        p.write_text("cherry cereza\npencil lapiz\n", encoding="utf-8")
        d = load_muse_dictionary(p)
        assert len(d) == 2 and d.translate("cherry") == "cereza"

    def test_blank_lines_and_duplicates(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text("\ncherry cereza\n\ncherry cereza\ncherry guinda\n", encoding="utf-8")
        d = load_muse_dictionary(p)
        assert d.pairs == {"cherry": ["cereza", "guinda"]}
        assert d.translate("cherry") == "cereza"

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text("cherry cereza\npencil\n", encoding="utf-8")
        with pytest.raises(FormatError) as exc:
            load_muse_dictionary(p)
        assert exc.value.line == 2

    def test_save_round_trip(self, tmp_path):
        d = toy_dict(4)
        d.save(tmp_path / "d.txt")
        assert load_muse_dictionary(tmp_path / "d.txt", "A", "B").pairs == d.pairs


class TestSplits:
    def sentences(self, n):
        return {"A": [[f"s{i}"] for i in range(n)], "B": [[f"t{i}"] for i in range(n)]}

    @pytest.mark.parametrize("sizes,n", [((1500, 250, 250), 2000), ((3000, 500, 500), 4000)])
    def test_exact_and_disjoint(self, sizes, n):
        sp = make_splits(self.sentences(n), sizes, seed=0)
        for tag in "AB":
            parts = [sp.train[tag], sp.validation[tag], sp.test[tag]]
            assert tuple(map(len, parts)) == sizes
            flat = [s[0] for part in parts for s in part]
            assert len(set(flat)) == sum(sizes)

    def test_deterministic(self):
        a = make_splits(self.sentences(100), (50, 25, 25), seed=4)
        b = make_splits(self.sentences(100), (50, 25, 25), seed=4)
        assert a.train == b.train

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            make_splits(self.sentences(100), (80, 20, 20), seed=0)


def test_corpus_files(tmp_path):
    path = tmp_path / "c.txt"
    write_corpus(path, [["a", "b"], ["c"]], [["A", "B"], ["A"]])
    assert read_corpus(path) == ([["a", "b"], ["c"]], [["A", "B"], ["A"]])
    (tmp_path / "c.txt.tags").write_text("A\nA\n")
    with pytest.raises(FormatError):
        read_corpus(path)
