import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from capfuse import tensor as T
from capfuse.semantic import (AttributeVocab, assemble_semantic_feature, attribute_targets, bce_loss,
                              build_attribute_vocab, default_stopwords, init_semantic, semantic_forward)
from capfuse.tensor import Tensor


class TestAttributeVocab:
    def test_top_k_skips_stopwords(self):
        corpus = [["a", "dog", "runs"], ["the", "dog", "jumps"], ["dog", "runs"]]
        assert build_attribute_vocab(corpus, k=2).tokens == ["dog", "runs"]

    def test_shortfall_reports_counts(self):
        with pytest.raises(ValueError, match="only 2 eligible tokens, 5 requested"):
            build_attribute_vocab([["dog", "cat", "the"]], k=5)

    def test_single_letter_tokens_excluded(self):
        assert build_attribute_vocab([["x", "yy", "x", "x"]], k=1, stopwords=()).tokens == ["yy"]

    def test_stopword_list_ships_with_package(self):
        sw = default_stopwords()
        assert {"the", "a", "is"} <= sw and "dog" not in sw

    def test_save_load(self, tmp_path):
        v = AttributeVocab(["dog", "runs"])
        v.save(tmp_path / "attrs.txt")
        assert AttributeVocab.load(tmp_path / "attrs.txt") == v

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.sampled_from(["dog", "cat", "man", "run", "the", "x"]), max_size=5),
                    min_size=1, max_size=10), st.randoms())
    def test_shuffle_invariant(self, corpus, rnd):
        shuffled = list(corpus)
        rnd.shuffle(shuffled)
        try:
            a = build_attribute_vocab(corpus, k=2)
        except ValueError:
            with pytest.raises(ValueError):
                build_attribute_vocab(shuffled, k=2)
            return
        assert build_attribute_vocab(shuffled, k=2) == a


class TestTargets:
    attrs = AttributeVocab(["dog", "runs"])

    def test_no_overlap(self):
        np.testing.assert_array_equal(attribute_targets([["cat", "sleeps"]], self.attrs), [0, 0])

    def test_all_present(self):
        np.testing.assert_array_equal(attribute_targets([["dog"], ["runs"]], self.attrs), [1, 1])

    def test_example(self):
        np.testing.assert_array_equal(attribute_targets([["a", "dog", "sits"]], self.attrs), [1, 0])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.sampled_from(["dog", "runs", "cat"]), max_size=4), max_size=6), st.randoms())
    def test_reference_order_invariant(self, refs, rnd):
        shuffled = list(refs)
        rnd.shuffle(shuffled)
        np.testing.assert_array_equal(attribute_targets(refs, self.attrs), attribute_targets(shuffled, self.attrs))


class TestClassifier:
    def test_zero_params_give_half(self):
        p = {k: Tensor(np.zeros_like(v.data)) for k, v in init_semantic(np.random.default_rng(0), 6, 4, 5).items()}
        np.testing.assert_array_equal(semantic_forward(Tensor(np.ones((1, 6))), p).data, [[0.5] * 4])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_outputs_in_open_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        p = init_semantic(rng, 6, 4, 5)
        y = semantic_forward(Tensor(rng.standard_normal((3, 6))), p).data
        assert y.shape == (3, 4) and np.all((y > 0) & (y < 1))

    def test_dim_mismatch(self):
        p = init_semantic(np.random.default_rng(0), 6, 4, 5)
        with pytest.raises(T.ShapeError, match="input dim 7"):
            semantic_forward(Tensor(np.ones((1, 7))), p)


class TestBCE:
    def test_half_is_ln2(self):
        assert bce_loss(Tensor([0.5, 0.5]), [1, 0]).data.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_saturated_prediction_is_clamped(self):
        assert bce_loss(Tensor([1.0, 0.0]), [1, 0]).data.item() <= 2e-7

    def test_matches_oracle(self, rng):
        p = rng.uniform(0.01, 0.99, size=9).astype(np.float32)
        t = (rng.random(9) < 0.5).astype(np.float32)
        assert bce_loss(Tensor(p), t).data.item() == pytest.approx(O.bce(p.astype(np.float64), t), rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            bce_loss(Tensor([0.5, 0.5]), [1, 0, 1])


class TestAssemble:
    def test_rows_repeat_concatenation(self):
        attrs = Tensor(np.arange(3, dtype=np.float32))
        aux = Tensor(np.array([0.25, 0.75], np.float32))
        out = assemble_semantic_feature(attrs, [aux], 4).data
        assert out.shape == (4, 5)
        for row in out:
            np.testing.assert_array_equal(row, [0, 1, 2, 0.25, 0.75])

    def test_single_frame(self):
        assert assemble_semantic_feature(Tensor(np.ones(3)), [], 1).shape == (1, 3)

    def test_full_width(self):
        out = assemble_semantic_feature(Tensor(np.zeros((2, 300))), [Tensor(np.zeros((2, 1000)))], 32)
        assert out.shape == (2, 32, 1300)

    def test_zero_frames_rejected(self):
        with pytest.raises(ValueError):
            assemble_semantic_feature(Tensor(np.ones(3)), [], 0)
