import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medbert import autograd as ag
from medbert.autograd import ParameterStore, Tensor
from medbert.baselines import (
    Artifacts, GruParams, SequenceClassifier, SkipGramParams, compose_inputs, gru_forward, gru_states, init_gru,
    init_retain, retain_forward, reverse_within_length, skipgram_loss, skipgram_pairs, train_skipgram, visit_sums,
)
from medbert.ehr import Vocabulary, build_vocabulary, encode_patient, make_patient
from medbert.errors import ConfigError, ShapeError
from medbert.gradchecks import gru_check, retain_check, skipgram_check
from medbert.model import MedBert, MedBertConfig, collate


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def gru_store(d, h, seed=0, dtype=np.float64):
    store = ParameterStore(dtype)
    return store, init_gru(store, "g", d, h, np.random.default_rng(seed))


class TestGru:
    def test_zero_weights_fixed_point(self, rng):
        store, params = gru_store(3, 4)
        for t in params:
            t.data[:] = 0
        out = gru_forward(Tensor(rng.normal(size=(6, 3))), params)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_single_cell_by_hand(self):
        store, p = gru_store(2, 2)
        p.w_x.data[:] = [[0.5, -0.3, 0.2, 0.1, 0.7, -0.4], [0.1, 0.4, -0.6, 0.3, -0.2, 0.9]]
        p.b.data[:] = [0.1, 0.0, -0.1, 0.2, 0.05, -0.05]
        x = np.array([1.0, -1.0])
        pre = x @ p.w_x.data + p.b.data
        z = sigmoid(pre[2:4])
        cand = np.tanh(pre[4:6])  # h0 = 0 removes the recurrent terms
        expected = z * cand
        np.testing.assert_allclose(gru_forward(Tensor(x[None, :]), p).data, expected, rtol=1e-12)

    def test_two_steps_by_hand(self, rng):
        store, p = gru_store(2, 3, seed=1)
        p.b.data[:] = rng.normal(size=9)
        xs = rng.normal(size=(2, 2))
        h = np.zeros(3)
        for x in xs:
            pre = x @ p.w_x.data + p.b.data
            rz = sigmoid(pre[:6] + h @ p.w_rz.data)
            r, z = rz[:3], rz[3:]
            c = np.tanh(pre[6:] + (r * h) @ p.w_h.data)
            h = (1 - z) * h + z * c
        np.testing.assert_allclose(gru_forward(Tensor(xs), p).data, h, rtol=1e-12)

    def test_bidirectional_dims(self, rng):
        store = ParameterStore(np.float64)
        pair = (init_gru(store, "f", 3, 5, rng), init_gru(store, "b", 3, 5, rng))
        assert gru_forward(Tensor(rng.normal(size=(4, 3))), pair, bidirectional=True).shape == (10,)
        assert gru_forward(Tensor(rng.normal(size=(2, 4, 3))), pair, True, [4, 2]).shape == (2, 10)

    def test_backward_half_reads_reversed(self, rng):
        store = ParameterStore(np.float64)
        f, b = init_gru(store, "f", 3, 4, rng), init_gru(store, "b", 3, 4, rng)
        x = rng.normal(size=(5, 3))
        out = gru_forward(Tensor(x), (f, b), True).data
        np.testing.assert_allclose(out[4:], gru_forward(Tensor(x[::-1].copy()), b).data, rtol=1e-12)

    def test_lengths_respected(self, rng):
        _, p = gru_store(3, 4)
        x = rng.normal(size=(1, 6, 3))
        padded = x.copy()
        padded[0, 4:] = 99.0
        a = gru_forward(Tensor(x[:, :4]), p, lengths=[4]).data
        b = gru_forward(Tensor(padded), p, lengths=[4]).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_reverse_within_length(self):
        np.testing.assert_array_equal(reverse_within_length([3, 1], 4), [[2, 1, 0, 3], [0, 1, 2, 3]])

    @given(st.integers(0, 1000), st.integers(1, 8))
    def test_states_bounded(self, seed, n):
        rng = np.random.default_rng(seed)
        _, p = gru_store(3, 4, seed=seed)
        for state in gru_states(Tensor(rng.uniform(-3, 3, size=(n, 3))), p):
            assert np.all(np.abs(state.data) < 1)

    def test_shape_error(self, rng):
        _, p = gru_store(3, 4)
        with pytest.raises(ShapeError):
            gru_forward(Tensor(rng.normal(size=(5, 2))), p)

    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_grad_check(self, bidirectional):
        assert gru_check(bidirectional).passed


class TestRetain:
    def params(self, d=3, h=4, seed=0):
        store = ParameterStore(np.float64)
        return init_retain(store, "r", d, h, np.random.default_rng(seed))

    def test_single_visit(self, rng):
        out = retain_forward(Tensor(rng.normal(size=(1, 3))), self.params())
        np.testing.assert_array_equal(out.alphas.data, [1.0])

    @given(st.integers(0, 1000), st.integers(1, 7))
    def test_alpha_beta_ranges(self, seed, n):
        rng = np.random.default_rng(seed)
        out = retain_forward(Tensor(rng.normal(scale=2, size=(n, 3))), self.params(seed=seed))
        np.testing.assert_allclose(out.alphas.data.sum(), 1.0, atol=1e-6)
        assert np.all(out.alphas.data >= 0)
        assert np.all(np.abs(out.betas.data) <= 1)

    def test_alpha_shift_invariant(self, rng):
        p = self.params()
        v = Tensor(rng.normal(size=(4, 3)))
        a = retain_forward(v, p).alphas.data
        p.b_alpha.data += 3.0
        np.testing.assert_allclose(retain_forward(v, p).alphas.data, a, rtol=1e-12)

    def test_logit_formula(self, rng):
        p = self.params()
        v = rng.normal(size=(3, 3))
        out = retain_forward(Tensor(v), p)
        context = (out.alphas.data[:, None] * out.betas.data * v).sum(0)
        np.testing.assert_allclose(out.logit.item(), context @ p.w_out.data[:, 0] + p.b_out.data[0], rtol=1e-12)

    def test_reverse_time(self, rng):
        # the attention state of the last visit depends on that visit alone
        p = self.params()
        v = rng.normal(size=(3, 3))
        full = retain_forward(Tensor(v), p).betas.data[-1]
        alone = retain_forward(Tensor(v[-1:]), p).betas.data[0]
        np.testing.assert_allclose(full, alone, rtol=1e-12)

    def test_padded_visits_zero_weight(self, rng):
        p = self.params()
        v = rng.normal(size=(2, 4, 3))
        out = retain_forward(Tensor(v), p, [4, 2])
        assert np.all(out.alphas.data[1, 2:] == 0)
        single = retain_forward(Tensor(v[1, :2]), p)
        np.testing.assert_allclose(out.logit.data[1], single.logit.item(), rtol=1e-10)

    def test_grad_check(self):
        assert retain_check().passed


class TestSkipGram:
    def test_zero_tables_ln2(self):
        store = ParameterStore(np.float64)
        store.add("sg.input", np.zeros((5, 3)))
        store.add("sg.output", np.zeros((5, 3)))
        loss = skipgram_loss(store, np.array([1]), np.array([2]), np.zeros((1, 0), dtype=int))
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_pairs(self):
        pairs = skipgram_pairs([np.array([5, 6, 7])], 1)
        assert sorted(map(tuple, pairs)) == [(5, 6), (6, 5), (6, 7), (7, 6)]

    def test_grad_check(self):
        report = skipgram_check()
        assert report.worst < 1e-5

    def test_cooccurrence(self):
        rng = np.random.default_rng(0)
        patients = []
        for i in range(300):
            if i % 2:
                visit = ["A", "B"] + [f"x{j}" for j in rng.choice(8, 2, replace=False)]
            else:
                visit = ["C"] + [f"y{j}" for j in rng.choice(8, 3, replace=False)]
            patients.append(make_patient(f"p{i}", [list(rng.permutation(visit))]))
        vocab = build_vocabulary(patients)
        sg = train_skipgram(patients, vocab, dim=16, window=3, negatives=3, steps=600, seed=1)

        def cos(a, b):
            u, w = sg.input_table[vocab.lookup(a)], sg.input_table[vocab.lookup(b)]
            return u @ w / np.linalg.norm(u) / np.linalg.norm(w)

        assert cos("A", "B") > cos("A", "C")

    def test_deterministic(self, small_cohort, small_vocab):
        a = train_skipgram(small_cohort, small_vocab, dim=8, steps=20, seed=3)
        b = train_skipgram(small_cohort, small_vocab, dim=8, steps=20, seed=3)
        np.testing.assert_array_equal(a.input_table, b.input_table)

    def test_vocab_too_small(self):
        p = make_patient("p", [["A", "B"]])
        with pytest.raises(ConfigError):
            train_skipgram([p], build_vocabulary([p]), negatives=5)

    def test_save_load(self, tmp_path, small_cohort, small_vocab):
        sg = train_skipgram(small_cohort, small_vocab, dim=8, steps=5)
        sg.save(tmp_path / "sg.ckpt")
        back = SkipGramParams.load(tmp_path / "sg.ckpt")
        np.testing.assert_array_equal(back.input_table, sg.input_table)
        assert (back.window, back.negatives) == (sg.window, sg.negatives)


@pytest.fixture(scope="module")
def artifacts(small_cohort, small_vocab, tmp_path_factory):
    path = tmp_path_factory.mktemp("bert") / "m.ckpt"
    MedBert(MedBertConfig(len(small_vocab), max_seq_len=64, max_visits=64), seed=0).save(path)
    sg = train_skipgram(small_cohort, small_vocab, dim=32, steps=10)
    return Artifacts(small_vocab, sg, str(path))


class TestCompose:
    def test_med_bert_length(self, small_cohort, artifacts):
        p = small_cohort[0]
        out = compose_inputs(p, "med_bert", artifacts)
        assert out.shape == (encode_patient(p, artifacts.vocab, 64).length, 32)

    def test_skipgram_rows(self, small_cohort, artifacts):
        p = small_cohort[1]
        out = compose_inputs(p, "skipgram", artifacts)
        ids = encode_patient(p, artifacts.vocab).code_ids
        np.testing.assert_array_equal(out.data, artifacts.skipgram.input_table[ids])

    def test_one_hot_fresh(self, small_cohort, artifacts):
        out = compose_inputs(small_cohort[2], "one_hot_embed", artifacts)
        assert out.shape[1] == 32

    def test_retain_visit_rows(self, small_cohort, small_vocab):
        p = small_cohort[3]
        mi = encode_patient(p, small_vocab)
        x = Tensor(np.arange(mi.length * 2, dtype=float).reshape(1, mi.length, 2))
        sums, n = visit_sums(x, mi.visit_ids[None, :])
        assert sums.shape[1] == n[0] == len(p.visits)
        for j in range(n[0]):
            np.testing.assert_allclose(sums.data[0, j], x.data[0, mi.visit_ids == j + 1].sum(0))

    def test_missing_artifacts(self, small_vocab):
        with pytest.raises(ConfigError):
            SequenceClassifier("gru", "skipgram", Artifacts(small_vocab))
        with pytest.raises(ConfigError):
            SequenceClassifier("gru", "med_bert", Artifacts(small_vocab))
        with pytest.raises(ConfigError):
            SequenceClassifier("med_bert_only", "one_hot_embed", Artifacts(small_vocab))

    @pytest.mark.parametrize("base", ["gru", "bigru", "retain"])
    @pytest.mark.parametrize("mode", ["one_hot_embed", "skipgram", "med_bert"])
    def test_logits_per_patient(self, base, mode, artifacts, small_inputs):
        clf = SequenceClassifier(base, mode, artifacts, hidden_dim=8, seed=1)
        batch = collate(small_inputs[:5])
        logits = clf.logits(batch).data
        assert logits.shape == (5,)
        one = clf.logits(collate(small_inputs[2:3])).data
        np.testing.assert_allclose(logits[2], one[0], atol=1e-5)

    def test_freeze_encoder(self, artifacts, small_inputs):
        clf = SequenceClassifier("gru", "med_bert", artifacts, hidden_dim=8, freeze_encoder=True)
        before = clf.store["emb.code"].data.copy()
        ag.backward(clf.loss(collate(small_inputs[:4])))
        ag.adamw_step(clf.store, 1e-2)
        np.testing.assert_array_equal(clf.store["emb.code"].data, before)

    def test_med_bert_only_fresh_head(self, artifacts):
        clf = SequenceClassifier("med_bert_only", "med_bert", artifacts, seed=0)
        assert "cls_head.cls.w" in clf.store and "los_head.cls.w" in clf.store
