import json
from dataclasses import replace

import numpy as np
import pytest

from hiersum.experiment import ABLATION_ROWS, FLAG_NAMES
from hiersum.model import HierSumModel
from hiersum.tensor import Tensor
from hiersum.training import (CheckpointError, NonFiniteGradientError, OptimizerState, TrainConfig, adam_step,
                              batch_indices, clip_grad_norm, load_checkpoint, model_from_checkpoint,
                              save_checkpoint, train_loop)

from conftest import tiny_config


def params(**arrays):
    return {k: Tensor(np.asarray(v, dtype=float), requires_grad=True, name=k) for k, v in arrays.items()}


class TestAdam:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.beta1, c.beta2, c.eps, c.warmup_steps, c.weight_decay) == \
            (5e-5, 0.9, 0.999, 1e-8, 0, 0.0)

    def test_first_step(self):
        p = params(w=[1.0])
        adam_step(p, {"w": np.array([1.0])}, OptimizerState(), TrainConfig(learning_rate=0.1))
        assert p["w"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_gradient(self):
        p = params(w=[1.0, -2.0])
        state = OptimizerState()
        cfg = TrainConfig(learning_rate=0.1)
        adam_step(p, {"w": np.array([1.0, 1.0])}, state, cfg)
        before, m_before = p["w"].data.copy(), state.m["w"].copy()
        adam_step(p, {"w": np.zeros(2)}, state, replace(cfg, learning_rate=0.0))
        np.testing.assert_array_equal(p["w"].data, before)
        np.testing.assert_allclose(state.m["w"], 0.9 * m_before)

    def test_zero_gradient_from_scratch(self):
        p = params(w=[3.0])
        adam_step(p, {"w": np.zeros(1)}, OptimizerState(), TrainConfig(learning_rate=0.1))
        assert p["w"].data[0] == 3.0

    def test_symmetry(self, rng):
        g = rng.normal(size=4)
        p = params(a=np.ones(4), b=np.ones(4))
        state = OptimizerState()
        for _ in range(3):
            adam_step(p, {"a": g.copy(), "b": g.copy()}, state, TrainConfig(learning_rate=0.01))
        np.testing.assert_array_equal(p["a"].data, p["b"].data)

    def test_lr_zero_bit_identical(self, rng):
        w = rng.normal(size=(3, 3))
        p = params(w=w)
        adam_step(p, {"w": rng.normal(size=(3, 3))}, OptimizerState(), TrainConfig(learning_rate=0.0))
        assert np.array_equal(p["w"].data, w)

    def test_non_finite_names_parameter(self):
        p = params(good=[1.0], bad=[1.0])
        state = OptimizerState()
        with pytest.raises(NonFiniteGradientError, match="bad"):
            adam_step(p, {"good": np.ones(1), "bad": np.array([np.nan])}, state, TrainConfig())
        assert state.step == 0 and p["good"].data[0] == 1.0


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)[0] == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.1


class TestBatchOrder:
    def test_epoch_is_a_permutation(self):
        idx = np.concatenate([batch_indices(20, 5, 3, s) for s in range(4)])
        assert sorted(idx.tolist()) == list(range(20))

    def test_deterministic(self):
        assert np.array_equal(batch_indices(50, 8, 1, 9), batch_indices(50, 8, 1, 9))
        assert not np.array_equal(batch_indices(50, 8, 1, 0), batch_indices(50, 8, 2, 0))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        cfg = tiny_config(25)
        model = HierSumModel(cfg, seed=3)
        state = OptimizerState({k: rng.normal(size=p.shape) for k, p in model.params.items()},
                               {k: rng.random(p.shape) for k, p in model.params.items()}, 17)
        save_checkpoint(tmp_path / "c.bin", model.params, state, cfg, TrainConfig(seed=4))
        ck = load_checkpoint(tmp_path / "c.bin", cfg)
        for k, p in model.params.items():
            assert np.array_equal(ck.params[k], p.data.astype(np.float32))
            assert np.array_equal(ck.opt_state.m[k], state.m[k].astype(np.float32))
        assert ck.opt_state.step == 17 and ck.train_config.seed == 4 and ck.model_config == cfg
        save_checkpoint(tmp_path / "d.bin", model_from_checkpoint(ck).params, ck.opt_state, cfg, TrainConfig(seed=4))
        assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()

    @pytest.mark.parametrize("cut", [1, 100, 5000])
    def test_truncated(self, tmp_path, cut):
        cfg = tiny_config(25)
        save_checkpoint(tmp_path / "c.bin", HierSumModel(cfg).params, None, cfg)
        blob = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(blob[:-cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")

    def test_corrupted_byte(self, tmp_path):
        cfg = tiny_config(25)
        save_checkpoint(tmp_path / "c.bin", HierSumModel(cfg).params, None, cfg)
        blob = bytearray((tmp_path / "c.bin").read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        (tmp_path / "c.bin").write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(tmp_path / "c.bin")

    def test_config_mismatch(self, tmp_path):
        cfg = tiny_config(25)
        save_checkpoint(tmp_path / "c.bin", HierSumModel(cfg).params, None, cfg)
        with pytest.raises(CheckpointError, match="d_model"):
            load_checkpoint(tmp_path / "c.bin", replace(cfg, d_model=32))

    def test_unwritable_path(self, tmp_path):
        cfg = tiny_config(25)
        with pytest.raises(OSError, match="missing"):
            save_checkpoint(tmp_path / "missing" / "c.bin", HierSumModel(cfg).params, None, cfg)


@pytest.fixture(scope="module")
def task(corpus, vocab):
    return corpus, vocab, tiny_config(len(vocab))


class TestLoop:
    def test_deterministic(self, task):
        train, vocab, cfg = task
        tc = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=5, seed=2)
        a = train_loop(HierSumModel(cfg, seed=0), train, vocab, tc).losses
        b = train_loop(HierSumModel(cfg, seed=0), train, vocab, tc).losses
        assert a == b

    def test_resume_matches(self, task, tmp_path):
        train, vocab, cfg = task
        tc = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=12, seed=2)
        full = train_loop(HierSumModel(cfg, seed=0), train, vocab, tc).losses
        first = HierSumModel(cfg, seed=0)
        half = train_loop(first, train, vocab, replace(tc, max_steps=6))
        save_checkpoint(tmp_path / "c.bin", first.params, half.opt_state, cfg, tc)
        ck = load_checkpoint(tmp_path / "c.bin", cfg)
        rest = train_loop(model_from_checkpoint(ck), train, vocab, tc, opt_state=ck.opt_state).losses
        assert len(rest) == 6
        np.testing.assert_allclose(rest, full[6:], atol=1e-6, rtol=0)

    def test_metrics_and_checkpoint(self, task, tmp_path):
        train, vocab, cfg = task
        tc = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=4, eval_every=2, eval_examples=4,
                         checkpoint_path=str(tmp_path / "c.bin"))
        res = train_loop(HierSumModel(cfg), train, vocab, tc, heldout=train[:4],
                         metrics_path=tmp_path / "m.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        assert "rouge1" in rows[1] and "rouge1" not in rows[0]
        assert [e["step"] for e in res.evals] == [2, 4]
        assert load_checkpoint(tmp_path / "c.bin").opt_state.step == 4

    def test_empty_dataset(self, task):
        _, vocab, cfg = task
        with pytest.raises(ValueError):
            train_loop(HierSumModel(cfg), [], vocab, TrainConfig(max_steps=1))

    @pytest.mark.parametrize("row", sorted(ABLATION_ROWS))
    def test_every_ablation_row_learns(self, task, row):
        train, vocab, cfg = task
        cfg = replace(cfg, **dict(zip(FLAG_NAMES, ABLATION_ROWS[row])))
        losses = train_loop(HierSumModel(cfg, seed=0), train, vocab,
                            TrainConfig(learning_rate=3e-3, batch_size=16, max_steps=30)).losses
        assert np.mean(losses[-5:]) < losses[0]
