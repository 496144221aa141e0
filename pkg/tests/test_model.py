import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medbert import autograd as ag
from medbert.autograd import Tensor
from medbert.ehr import ModelInput
from medbert.errors import ConfigError, ContractError, RangeError, ShapeError, VocabRangeError
from medbert.model import MedBert, MedBertConfig, collate

V = 20


def make_input(codes, visit_sizes, los=False, outcome=None):
    ser = np.concatenate([np.arange(s) for s in visit_sizes])
    vis = np.repeat(np.arange(1, len(visit_sizes) + 1), visit_sizes)
    return ModelInput(np.asarray(codes), ser, vis, len(codes), los, outcome)


@pytest.fixture(scope="module")
def model():
    config = MedBertConfig(V, dropout_rate=0.1, max_seq_len=32, max_visits=16)
    return MedBert(config, seed=3, dtype=np.float64)


@pytest.fixture(scope="module")
def patients():
    rng = np.random.default_rng(0)
    out = []
    for sizes in ([2, 3, 1], [4], [1, 1, 2, 2], [3, 2]):
        out.append(make_input(rng.integers(3, V, size=sum(sizes)), sizes, los=bool(len(out) % 2)))
    return out


class TestConfig:
    def test_head_product(self):
        with pytest.raises(ConfigError) as err:
            MedBertConfig(10, hidden_dim=30, n_heads=2, head_dim=16)
        assert err.value.field == "hidden_dim"

    def test_full_size_shapes(self):
        m = MedBert(MedBertConfig.full_size(100))
        assert m["emb.code"].shape == (100, 192)
        assert m["emb.visit"].shape == (513, 192)
        assert m["emb.serial"].shape == (64, 192)
        assert m["layer5.attn.q.w"].shape == (192, 192)
        assert "layer6.attn.q.w" not in m.store
        assert m["mlm.out.w"].shape == (192, 100)

    def test_init_std(self):
        m = MedBert(MedBertConfig(500, hidden_dim=64, n_heads=4, head_dim=16), seed=0)
        w = m["emb.code"].data
        assert abs(w.std() - 0.02 * 0.88) < 0.002  # truncation at 2 sd shrinks the spread
        assert np.abs(w).max() <= 0.04 + 1e-7


class TestEmbedding:
    def test_zero_tables(self, patients):
        m = MedBert(MedBertConfig(V), seed=0)
        for name in ("emb.code", "emb.serial", "emb.visit"):
            m[name].data[:] = 0
        np.testing.assert_array_equal(m.embed_inputs(collate(patients)).data, 0.0)

    def test_single_code_sum(self):
        m = MedBert(MedBertConfig(V), seed=0, dtype=np.float64)
        e1, e2, e3 = m["emb.code"].data[7], m["emb.serial"].data[0], m["emb.visit"].data[1]
        out = m.embed_inputs(collate([make_input([7], [1])])).data[0, 0]
        np.testing.assert_array_equal(out, e1 + e2 + e3)

    def test_reference_gathers(self, model, patients):
        batch = collate(patients)
        ref = (model["emb.code"].data[batch.code_ids] + model["emb.serial"].data[batch.serialization_ids]
               + model["emb.visit"].data[batch.visit_ids])
        np.testing.assert_array_equal(model.embed_inputs(batch).data, ref)

    def test_serial_clamped(self):
        m = MedBert(MedBertConfig(V, max_codes_per_visit=4), seed=0, dtype=np.float64)
        out = m.embed_inputs(collate([make_input(np.full(6, 5), [6])])).data[0]
        np.testing.assert_array_equal(out[5], out[3])

    def test_out_of_range(self, model):
        with pytest.raises(VocabRangeError):
            model.embed_inputs(collate([make_input([V], [1])]))
        with pytest.raises(VocabRangeError):
            model.embed_inputs(collate([make_input(np.full(17, 4), [1] * 17)]))

    def test_too_long(self, model):
        with pytest.raises(ShapeError):
            model.embed_inputs(collate([make_input(np.full(33, 4), [33])]))


class TestEncoder:
    def test_two_token_hand_computed(self):
        config = MedBertConfig(V, hidden_dim=2, n_heads=1, head_dim=2, n_layers=1, ffn_dim=1, dropout_rate=0.0)
        m = MedBert(config, dtype=np.float64)
        for proj in "qkvo":
            m[f"layer0.attn.{proj}.w"].data = np.eye(2)
        m["layer0.ffn.in.w"].data[:] = 0
        m["layer0.ffn.out.w"].data[:] = 0
        x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        out = m.encoder_forward(Tensor(x), np.ones((1, 2), bool))
        # scores = x x^T / sqrt(2); rows softmaxed by hand
        a = 1 / math.sqrt(2)
        p0 = math.exp(a) / (math.exp(a) + 1)
        p1 = 1 / (1 + math.exp(4 * a))
        expected_maps = np.array([[p0, 1 - p0], [p1, 1 - p1]])
        np.testing.assert_allclose(out.attention_maps[0][0, 0], expected_maps, rtol=1e-12)
        resid = x[0] + expected_maps @ x[0]
        ln = (resid - resid.mean(1, keepdims=True)) / resid.std(1, keepdims=True)
        np.testing.assert_allclose(out.hidden_states.data[0], ln, atol=1e-9)

    def test_attention_rows_and_pads(self, model, patients):
        batch = collate(patients, pad_to=10)
        out = model.encode(batch)
        for maps in out.attention_maps:
            assert maps.shape == (len(patients), 2, 10, 10)
            assert np.all(maps >= 0)
            np.testing.assert_allclose(maps.sum(-1), 1.0, atol=1e-6)
            for b, n in enumerate(batch.lengths):
                assert np.all(maps[b, :, :, n:] == 0.0)

    def test_padding_invariance(self, model, patients):
        for p in patients:
            alone = model.encode(collate([p]))
            padded = model.encode(collate([p], pad_to=p.length + 5))
            n = p.length
            np.testing.assert_allclose(padded.hidden_states.data[0, :n], alone.hidden_states.data[0], atol=1e-5)
            la = model.pooled_logit(alone.hidden_states, [n]).data
            lp = model.pooled_logit(padded.hidden_states, [n]).data
            np.testing.assert_allclose(lp, la, atol=1e-5)

    @given(st.permutations(range(4)), st.integers(0, 10))
    def test_within_visit_permutation(self, perm, seed):
        config = MedBertConfig(V, dropout_rate=0.0)
        m = MedBert(config, seed=seed, dtype=np.float64)
        m["emb.serial"].data[:] = 0
        codes = np.array([5, 6, 7, 8, 9, 10, 11])
        permuted = codes.copy()
        permuted[1:5] = codes[1:5][list(perm)]
        logits = []
        for c in (codes, permuted):
            h = m.encode(collate([make_input(c, [1, 4, 2])])).hidden_states
            logits.append(m.pooled_logit(h, [7]).item())
        assert abs(logits[0] - logits[1]) <= 1e-5

    def test_deterministic_bitwise(self, patients):
        a = MedBert(MedBertConfig(V), seed=9)
        b = MedBert(MedBertConfig(V), seed=9)
        batch = collate(patients)
        ha, hb = a.encode(batch).hidden_states.data, b.encode(batch).hidden_states.data
        assert ha.tobytes() == hb.tobytes()

    def test_dropout_changes_train_output(self, model, patients):
        batch = collate(patients)
        rng = np.random.default_rng(0)
        train = model.encode(batch, train=True, rng=rng).hidden_states.data
        assert not np.allclose(train, model.encode(batch).hidden_states.data)

    def test_mask_shape_mismatch(self, model):
        with pytest.raises(ShapeError):
            model.encoder_forward(Tensor(np.zeros((1, 3, 32))), np.ones((1, 4), bool))

    def test_pre_norm_flag(self, patients):
        m = MedBert(MedBertConfig(V, pre_norm=True), seed=0)
        assert "final_ln.gain" in m.store
        assert np.isfinite(m.encode(collate(patients)).hidden_states.data).all()


class TestHeads:
    def test_mlm_uniform_when_zero(self, model):
        m = MedBert(MedBertConfig(V), seed=0, dtype=np.float64)
        for name in ("mlm.dense.w", "mlm.out.w", "mlm.out.b"):
            m[name].data[:] = 0
        logits = m.masked_lm_logits(Tensor(np.zeros((3, 32))), [0, 2]).data
        assert logits.shape == (2, V)
        assert np.all(logits == logits[0, 0])

    def test_mlm_shape_and_range(self, model, patients):
        h = model.encode(collate(patients[:1])).hidden_states
        assert model.masked_lm_logits(h[0], [1]).shape == (1, V)
        with pytest.raises(RangeError):
            model.masked_lm_logits(h[0], [patients[0].length + 20])

    def test_tied_weights(self):
        m = MedBert(MedBertConfig(V, tie_mlm_weights=True), seed=0)
        assert "mlm.out.w" not in m.store
        assert m.masked_lm_logits(Tensor(np.ones((2, 32), np.float32)), [1]).shape == (1, V)

    def test_pooled_constant_states(self):
        m = MedBert(MedBertConfig(V), seed=1, dtype=np.float64)
        v = np.linspace(-1, 1, 32)
        hidden = Tensor(np.tile(v, (1, 5, 1)))
        z = m["los_head.ffl.w"].data.T @ v + m["los_head.ffl.b"].data
        z = ag.gelu(Tensor(z)).data
        expected = z @ m["los_head.cls.w"].data[:, 0] + m["los_head.cls.b"].data[0]
        np.testing.assert_allclose(m.pooled_logit(hidden, [3]).item(), expected, rtol=1e-12)

    def test_pooled_zero_weights(self):
        m = MedBert(MedBertConfig(V), seed=1, dtype=np.float64)
        m["los_head.cls.w"].data[:] = 0
        assert m.pooled_logit(Tensor(np.ones((4, 32))), [4]).item() == 0.0

    def test_pooled_length_zero(self, model):
        with pytest.raises(ContractError):
            model.pooled_logit(Tensor(np.ones((4, 32))), [0])

    def test_separate_heads(self):
        m = MedBert(MedBertConfig(V), seed=1, heads=("los_head", "cls_head"))
        assert not np.array_equal(m["los_head.cls.w"].data, m["cls_head.cls.w"].data)
        with pytest.raises(ContractError):
            m.add_head("cls_head")


class TestPersistence:
    def test_round_trip(self, tmp_path, model, patients):
        path = tmp_path / "m.ckpt"
        model.save(path)
        back = MedBert.load(path, dtype=np.float64)
        assert back.config == model.config and back.heads == model.heads
        batch = collate(patients)
        np.testing.assert_array_equal(back.encode(batch).hidden_states.data, model.encode(batch).hidden_states.data)
        back.save(tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "x.ckpt"
        ag.save_checkpoint(path, {"a": np.zeros(1)}, "skipgram")
        with pytest.raises(ConfigError):
            MedBert.load(path)
