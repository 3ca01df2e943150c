import math
from dataclasses import replace

import numpy as np
import pytest

from hiersum.data import RawExample, gen_synthetic
from hiersum.model import (ConfigError, ForwardTrace, HierSumModel, ModelConfig, doc_scaled_softmax,
                           init_params, parameter_count)
from hiersum.tensor import Tensor, check_gradients, masked_softmax, no_grad

from conftest import batch_for, tiny_config
from oracles import doc_scaled_oracle, layout as layout1


def layout(lengths, pad=0):
    return tuple(x[None] for x in layout1(lengths, pad))


class TestDocScaledSoftmax:
    def test_equal_scores(self):
        doc, sod, pad = layout([2, 3])
        rec = []
        w = doc_scaled_softmax(Tensor(np.zeros((1, 1, 1, 5))), doc, sod, pad, record=rec).data
        np.testing.assert_allclose(rec[0].doc_scaling[0, 0, 0], [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(w[0, 0, 0], [0.25, 0.25, 1 / 6, 1 / 6, 1 / 6], atol=1e-12)

    def test_hand_example(self):
        doc, sod, pad = layout([2, 1])
        rec = []
        w = doc_scaled_softmax(Tensor(np.array([[[[1.0, 0.0, 0.0]]]])), doc, sod, pad, record=rec).data
        r = rec[0]
        np.testing.assert_allclose(r.doc_scaling[0, 0, 0], [0.7311, 0.2689], atol=1e-4)
        np.testing.assert_allclose(r.per_doc_weights[0, 0, 0], [0.7311, 0.2689, 1.0], atol=1e-4)
        np.testing.assert_allclose(w[0, 0, 0], [0.5344, 0.1966, 0.2689], atol=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        lengths = list(r.integers(1, 6, size=r.integers(1, 5)))
        doc, sod, pad = layout(lengths, pad=int(r.integers(0, 3)))
        a = r.normal(0, 3, (1, 2, 3, doc.shape[1]))
        w = doc_scaled_softmax(Tensor(a), doc, sod, pad).data
        np.testing.assert_allclose(w, doc_scaled_oracle(a, doc, sod, pad), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_sum_invariants(self, seed):
        r = np.random.default_rng(100 + seed)
        doc, sod, pad = layout(list(r.integers(1, 7, size=4)), pad=2)
        rec = []
        doc_scaled_softmax(Tensor(r.normal(0, 2, (1, 3, 4, doc.shape[1]))), doc, sod, pad, record=rec)
        c = rec[0]
        member = (doc[0][:, None] == np.arange(4)).astype(float)
        np.testing.assert_allclose(c.per_doc_weights @ member, 1.0, atol=1e-9)
        np.testing.assert_allclose(c.doc_scaling.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(c.normalized_weights.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(c.normalized_weights @ member, c.doc_scaling, atol=1e-9)
        assert (c.normalized_weights[..., pad[0]] == 0).all()
        heavy = (c.normalized_weights @ member).argmax(-1)
        assert (heavy == c.doc_scaling.argmax(-1)).all()

    def test_single_document_equals_softmax(self, rng):
        doc, sod, pad = layout([6], pad=2)
        a = rng.normal(0, 2, (1, 2, 3, 8))
        w = doc_scaled_softmax(Tensor(a), doc, sod, pad).data
        np.testing.assert_allclose(w, masked_softmax(Tensor(a), ~pad[:, None, None, :]).data, atol=1e-12)

    def test_gradient(self, rng):
        doc, sod, pad = layout([2, 3, 1], pad=1)
        a = Tensor(rng.normal(size=(1, 2, 2, 7)), requires_grad=True, name="a")
        proj = rng.normal(size=(1, 2, 2, 7))
        errs = check_gradients(lambda: (doc_scaled_softmax(a, doc, sod, pad) * proj).sum(), [a])
        assert errs["a"] < 1e-6

    def test_missing_sod(self):
        doc, sod, pad = layout([2, 2])
        sod[0, 2] = False
        with pytest.raises(ConfigError):
            doc_scaled_softmax(Tensor(np.zeros((1, 1, 1, 4))), doc, sod, pad)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3).validate()

    @pytest.mark.parametrize("flag", ["hier_enc", "hier_dec"])
    def test_hier_needs_sod(self, flag):
        with pytest.raises(ConfigError):
            ModelConfig(**{"use_sod": False, "hier_enc": False, "hier_dec": False, flag: True}).validate()

    def test_dict_round_trip(self):
        cfg = tiny_config(30, pos_restart=False)
        assert ModelConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg


class TestInit:
    def test_deterministic(self):
        cfg = tiny_config(20)
        a, b = init_params(cfg, 3), init_params(cfg, 3)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert not np.array_equal(a["tok_emb"].data, init_params(cfg, 4)["tok_emb"].data)

    def test_norm_gains_are_one(self):
        params = init_params(tiny_config(20), 0)
        gains = [p.data for k, p in params.items() if k.endswith(".g")]
        assert gains and all((g == 1.0).all() for g in gains)

    @pytest.mark.parametrize("kw", [{}, dict(d_model=32, n_heads=4, d_ff=64),
                                    dict(n_enc_layers=3, n_dec_layers=1), dict(max_positions=7)])
    def test_parameter_count(self, kw):
        cfg = tiny_config(37, **kw)
        assert sum(p.data.size for p in init_params(cfg, 0).values()) == parameter_count(cfg)

    def test_value_projection_shape(self):
        assert init_params(tiny_config(20), 0)["enc.0.self.v.w"].shape == (16, 16)


def single_doc(corpus):
    return [RawExample(e.documents[:1], e.summary) for e in corpus[:4]]


class TestForward:
    def test_initial_loss_near_uniform(self, corpus, vocab):
        cfg = tiny_config(len(vocab))
        with no_grad():
            loss = HierSumModel(cfg, seed=0).forward_train(batch_for(corpus[:16], vocab, cfg)).item()
        assert abs(loss - math.log(len(vocab))) < 0.15 * math.log(len(vocab))

    def test_every_parameter_gets_finite_gradient(self, corpus, vocab):
        cfg = tiny_config(len(vocab))
        model = HierSumModel(cfg, seed=0)
        model.forward_train(batch_for(corpus[:4], vocab, cfg)).backward()
        for name, p in model.params.items():
            assert p.grad is not None and np.isfinite(p.grad).all(), name

    def test_duplicate_row(self, corpus, vocab):
        cfg = tiny_config(len(vocab))
        model = HierSumModel(cfg, seed=0)
        with no_grad():
            one = model.forward_train(batch_for(corpus[:1], vocab, cfg)).item()
            two = model.forward_train(batch_for(corpus[:1] * 2, vocab, cfg)).item()
        assert abs(one - two) < 1e-9

    @pytest.mark.parametrize("flag", ["hier_enc", "hier_dec"])
    def test_single_document_degeneracy(self, corpus, vocab, flag):
        on = tiny_config(len(vocab))
        off = replace(on, **{flag: False})
        params = init_params(on, 5)
        batch = batch_for(single_doc(corpus), vocab, on)
        with no_grad():
            m_on, m_off = HierSumModel(on, params), HierSumModel(off, params)
            e_on, e_off = m_on.encode(batch), m_off.encode(batch)
            np.testing.assert_allclose(e_on.data, e_off.data, atol=1e-12, rtol=0)
            l_on = m_on.decode(batch.decoder_input_ids, e_on, batch).data
            l_off = m_off.decode(batch.decoder_input_ids, e_off, batch).data
        np.testing.assert_allclose(l_on, l_off, atol=1e-12, rtol=0)

    def test_encoder_locality(self, corpus, vocab):
        cfg = tiny_config(len(vocab))
        batch = batch_for(corpus[:8], vocab, cfg)
        trace = ForwardTrace.empty()
        with no_grad():
            HierSumModel(cfg, seed=2).encode(batch, trace)
        for w in trace.encoder_self:
            for b in range(batch.input_ids.shape[0]):
                di, keep = batch.doc_index[b], ~batch.sod_mask[b] & ~batch.pad_mask[b]
                other = di[:, None] != di[None, :]
                assert (w[b][:, keep] * other[keep]).max() == 0.0

    def test_pad_keys_get_no_weight(self, corpus, vocab):
        cfg = tiny_config(len(vocab), hier_enc=False, hier_dec=False)
        batch = batch_for(corpus[:8], vocab, cfg)
        assert batch.pad_mask.any()
        trace = ForwardTrace.empty()
        with no_grad():
            m = HierSumModel(cfg, seed=2)
            m.decode(batch.decoder_input_ids, m.encode(batch, trace), batch, trace)
        for w in trace.encoder_self + trace.decoder_cross:
            assert (w * batch.pad_mask[:, None, None, :]).max() == 0.0

    def test_document_order_permutation(self, vocab):
        cfg = tiny_config(len(vocab))
        ex = next(e for e in gen_synthetic(4, 50) if len(e.documents) == 3)
        perm = [2, 0, 1]
        swapped = RawExample(tuple(ex.documents[i] for i in perm), ex.summary)
        model = HierSumModel(cfg, seed=9)
        recs = []
        for e in (ex, swapped):
            batch = batch_for([e], vocab, cfg)
            trace = ForwardTrace.empty()
            with no_grad():
                model.decode(batch.decoder_input_ids, model.encode(batch), batch, trace)
            recs.append((batch, trace.cross_records))
        (b0, r0), (b1, r1) = recs
        for c0, c1 in zip(r0, r1):
            np.testing.assert_allclose(c1.doc_scaling[..., :], c0.doc_scaling[..., perm], atol=1e-9)
            for new, old in enumerate(perm):
                np.testing.assert_allclose(c1.per_doc_weights[..., b1.doc_index[0] == new],
                                           c0.per_doc_weights[..., b0.doc_index[0] == old], atol=1e-9)

    def test_sod_presence_checked(self, corpus, vocab):
        cfg = tiny_config(len(vocab))
        batch = batch_for(corpus[:2], vocab, replace(cfg, use_sod=False, hier_enc=False, hier_dec=False))
        with pytest.raises(ConfigError):
            HierSumModel(cfg).encode(batch)


class TestPositions:
    def test_wraps_table(self):
        model = HierSumModel(tiny_config(20, max_positions=8, src_trunc=20))
        assert model._positions(np.arange(12), 20).tolist() == list(range(8)) + [0, 1, 2, 3]

    def test_beyond_extended_table(self):
        model = HierSumModel(tiny_config(20, max_positions=8, src_trunc=20))
        with pytest.raises(ConfigError):
            model._positions(np.array([24]), 20)


def test_small_model_gradcheck(corpus, vocab):
    cfg = tiny_config(len(vocab), d_model=8, d_ff=8, n_enc_layers=1, n_dec_layers=1, max_positions=12,
                      src_trunc=24, tgt_trunc=8)
    model = HierSumModel(cfg, seed=1)
    batch = batch_for([corpus[0], corpus[3]], vocab, cfg)
    names = ["dec.0.cross.q.w", "dec.0.cross.k.w", "enc.0.self.v.w", "enc.0.ln1.g", "tok_emb"]
    errs = check_gradients(lambda: model.forward_train(batch), [model[n] for n in names])
    assert max(errs.values()) < 1e-4, errs
