import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from mcprobe.alterrep import PushSpec
from mcprobe.errors import DimensionMismatch, EmptySentence, MaskMissing, SequenceTooLong, VocabMismatch
from mcprobe.projection import orthonormalize, project_nullspace_batch
from mcprobe.toymlm import (
    Head,
    MLMConfig,
    encode,
    load_model,
    logits_from_state,
    masked_states,
    predict_masked,
    save_model,
    tokenize,
    train_toy_mlm,
)

from conftest import TINY_MLM


def single_and_split(vocab):
    single = [w for w, p in vocab.word_to_pieces.items() if len(p) == 1]
    split = [w for w, p in vocab.word_to_pieces.items() if len(p) == 2]
    return single, split


class TestTokenize:
    def test_single_piece_words(self, small_vocab):
        single, _ = single_and_split(small_vocab)
        t = tokenize(single[:5], small_vocab)
        assert len(t.ids) == 5 and t.spans == tuple((i, i + 1) for i in range(5))

    def test_two_piece_word(self, small_vocab):
        _, split = single_and_split(small_vocab)
        t = tokenize([split[0]], small_vocab)
        assert len(t.ids) == 2 and t.spans == ((0, 2),)

    def test_unknown_and_empty(self, small_vocab):
        assert tokenize("zzzq", small_vocab).ids == (small_vocab.unk_id,)
        with pytest.raises(EmptySentence):
            tokenize("", small_vocab)

    def test_mask_word_collapses_pieces(self, small_vocab):
        single, split = single_and_split(small_vocab)
        t = tokenize([single[0], split[0], single[1]], small_vocab)
        ids, pos = t.mask_word(1, small_vocab.mask_id)
        assert pos == 1 and len(ids) == 3 and ids[1] == small_vocab.mask_id


class TestEncode:
    def test_deterministic_and_shape(self, tiny_model, small_vocab):
        ids = list(tokenize(single_and_split(small_vocab)[0][:6], small_vocab).ids)
        a, b = encode(ids, tiny_model), encode(ids, tiny_model)
        assert a.states.tobytes() == b.states.tobytes()
        assert encode(ids[:1], tiny_model).states.shape == (1, TINY_MLM.d_model)

    def test_too_long(self, tiny_model):
        with pytest.raises(SequenceTooLong):
            encode([5] * (TINY_MLM.max_len + 1), tiny_model)


class TestLogits:
    def test_normalized(self, tiny_model):
        rng = np.random.default_rng(0)
        out = logits_from_state(rng.standard_normal((4, TINY_MLM.d_model)) * 5, tiny_model)
        np.testing.assert_allclose(logsumexp(out, axis=1), 0.0, atol=1e-6)

    def test_zero_state_zero_bias_uniform(self):
        head = Head(list("abcd"), np.random.default_rng(1).standard_normal((4, 3)), np.zeros(4))
        np.testing.assert_allclose(logits_from_state(np.zeros(3), head), np.log(0.25), atol=1e-12)

    def test_orthogonal_direction_leaves_output(self):
        rng = np.random.default_rng(2)
        U = rng.standard_normal((3, 6))
        head = Head(list("abc"), U, rng.standard_normal(3))
        # complement of the unembedding row space, found numerically
        null = np.linalg.svd(U)[2][3:]
        h = rng.standard_normal(6)
        shifted = h + 7.5 * null[0] - 2.0 * null[2]
        np.testing.assert_allclose(logits_from_state(shifted, head), logits_from_state(h, head), atol=1e-10)

    def test_numpy_head_matches_torch(self, tiny_model):
        x = torch.randn(5, TINY_MLM.d_model, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            ref = torch.log_softmax(tiny_model.logits(x), dim=-1).double().numpy()
        np.testing.assert_allclose(logits_from_state(x.double().numpy(), tiny_model), ref, atol=1e-4)

    def test_dimension_mismatch(self, tiny_model):
        with pytest.raises(DimensionMismatch):
            logits_from_state(np.zeros(TINY_MLM.d_model + 1), tiny_model)


class TestTraining:
    def corpus(self, langs):
        return [s for lang in langs for s in lang.sample_sentences(30, seed=9)]

    def test_same_seed_identical_parameters(self, small_languages, small_vocab):
        cfg = MLMConfig(d_model=8, layers=1, heads=2, ff=16, epochs=1, seed=5)
        a, _ = train_toy_mlm(self.corpus(small_languages), small_vocab, cfg)
        b, _ = train_toy_mlm(self.corpus(small_languages), small_vocab, cfg)
        for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(va, vb), k

    def test_zero_epochs_is_chance(self, small_languages, small_vocab):
        corpus = [s for lang in small_languages for s in lang.sample_sentences(700, seed=2)]
        cfg = MLMConfig(d_model=16, layers=1, heads=2, ff=32, epochs=0, heldout_fraction=0.5, seed=1)
        _, report = train_toy_mlm(corpus, small_vocab, cfg)
        # about 1000 held-out masks; chance is 1/V with V around 190
        assert report.heldout_top1 <= 4 / len(small_vocab)

    def test_vocab_mismatch(self, small_vocab):
        with pytest.raises(VocabMismatch):
            train_toy_mlm([["notaword"]], small_vocab, TINY_MLM)

    def test_save_load(self, tiny_model, tmp_path, small_vocab):
        save_model(tiny_model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        ids = list(tokenize(single_and_split(small_vocab)[0][:4], small_vocab).ids)
        np.testing.assert_array_equal(encode(ids, back).states, encode(ids, tiny_model).states)


class TestPredictMasked:
    def masked_ids(self, vocab):
        ids = list(tokenize(single_and_split(vocab)[0][:6], vocab).ids)
        ids[2] = vocab.mask_id
        return ids

    def test_mask_missing(self, tiny_model, small_vocab):
        ids = self.masked_ids(small_vocab)
        with pytest.raises(MaskMissing):
            predict_masked(ids, 1, tiny_model)

    def test_no_intervention_is_plain_head(self, tiny_model, small_vocab):
        ids = self.masked_ids(small_vocab)
        plain = logits_from_state(encode(ids, tiny_model).states[2], tiny_model)
        np.testing.assert_array_equal(predict_masked(ids, 2, tiny_model), plain)

    def test_alpha_zero_is_amnesic(self, tiny_model, small_vocab):
        ids = self.masked_ids(small_vocab)
        basis = orthonormalize(np.random.default_rng(0).standard_normal((2, TINY_MLM.d_model)))
        state = masked_states([(ids, 2)], tiny_model)
        expected = logits_from_state(project_nullspace_batch(state, basis)[0], tiny_model)
        got = predict_masked(ids, 2, tiny_model, (basis, PushSpec(0.0)))
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(logsumexp(got), 0.0, atol=1e-6)
