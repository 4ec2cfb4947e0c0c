"""Tests for loss, Adam, and the gated training loop."""

import json
import math

import numpy as np
import pytest

from conftest import random_params, tiny_config
from volformer import model as M
from volformer import tensor as T
from volformer import training as TR
from volformer.data import Volume, gen_synthetic
from volformer.errors import ConfigError, DataError, NumericError, UsageError


def synthetic_sets(tmp_path, n_train=4, n_val=2):
    cfg = tiny_config()
    train = gen_synthetic(n_train, cfg.input_shape, seed=11,
                          out_dir=tmp_path / "tr").load_volumes()
    val = gen_synthetic(n_val, cfg.input_shape, seed=22,
                        out_dir=tmp_path / "va").load_volumes()
    return cfg, train, val


class TestConfig:
    @pytest.mark.parametrize("bad", [
        dict(learning_rate=0.0),
        dict(beta1=1.0),
        dict(beta2=0.0),
        dict(epsilon=0.0),
        dict(batch_size=0),
        dict(monitor="train_loss"),
    ])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ConfigError):
            TR.TrainConfig(**bad)


class TestLoss:
    def test_perfect_prediction_gives_zero(self):
        probs = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert TR.sparse_ce_loss(probs, [0, 2]) == 0.0

    def test_uniform_prediction_gives_ln3(self):
        probs = np.full((4, 3), 1 / 3)
        np.testing.assert_allclose(TR.sparse_ce_loss(probs, [0, 1, 2, 0]),
                                   math.log(3.0), atol=1e-12)

    def test_fused_form_matches_probability_form(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((8, 3))
        labels = rng.integers(0, 3, size=8)
        fused = float(TR.sparse_ce_loss_from_logits(T.Tensor(logits), labels).data)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(fused, TR.sparse_ce_loss(probs, labels),
                                   atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 3, size=5)
        err = T.finite_difference_check(
            lambda t: TR.sparse_ce_loss_from_logits(t, labels),
            T.Tensor(rng.standard_normal((5, 3))), step=1e-5)
        assert err < 1e-6

    def test_out_of_range_label_rejected(self):
        with pytest.raises(DataError):
            TR.sparse_ce_loss(np.full((1, 3), 1 / 3), [5])


class TestAdam:
    def _setup(self, dtype=np.float32):
        cfg = tiny_config(num_layers=1)
        params = random_params(cfg, seed=1, dtype=dtype)
        return cfg, params, TR.AdamState(params)

    def test_zero_gradient_is_noop(self):
        _, params, state = self._setup()
        before = {n: t.data.copy() for n, t in params.named_parameters()}
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
        TR.adam_step(params, state, TR.TrainConfig())
        for name, t in params.named_parameters():
            assert (t.data == before[name]).all(), name
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        """With g=1 everywhere the first update is lr/(1 + eps), downhill."""
        _, params, state = self._setup(dtype=np.float64)
        before = {n: t.data.copy() for n, t in params.named_parameters()}
        for t in params.tensors():
            t.grad = np.ones_like(t.data)
        cfg = TR.TrainConfig(learning_rate=1e-4, epsilon=1e-7)
        TR.adam_step(params, state, cfg)
        expected = 1e-4 * 1.0 / (1.0 + 1e-7)
        for name, t in params.named_parameters():
            np.testing.assert_allclose(before[name] - t.data, expected,
                                       rtol=1e-12, err_msg=name)

    def test_first_step_sign_symmetry(self):
        _, params, state = self._setup(dtype=np.float64)
        g = np.random.default_rng(2).standard_normal(params.embed_bias.shape)
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
        params.embed_bias.grad = g.copy()
        before = params.embed_bias.data.copy()
        TR.adam_step(params, state, TR.TrainConfig())
        delta_pos = params.embed_bias.data - before

        _, params2, state2 = self._setup(dtype=np.float64)
        for t in params2.tensors():
            t.grad = np.zeros_like(t.data)
        params2.embed_bias.grad = -g
        before2 = params2.embed_bias.data.copy()
        TR.adam_step(params2, state2, TR.TrainConfig())
        delta_neg = params2.embed_bias.data - before2
        np.testing.assert_array_equal(delta_pos, -delta_neg)

    def test_nonfinite_gradient_aborts_without_mutation(self):
        _, params, state = self._setup()
        before = {n: t.data.copy() for n, t in params.named_parameters()}
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
        params.head_bias.grad = np.array([np.nan, 0.0, 0.0], dtype=np.float32)
        with pytest.raises(NumericError):
            TR.adam_step(params, state, TR.TrainConfig())
        assert state.step_count == 0
        for name, t in params.named_parameters():
            assert (t.data == before[name]).all()

    def test_missing_gradient_rejected(self):
        _, params, state = self._setup()
        with pytest.raises(UsageError):
            TR.adam_step(params, state, TR.TrainConfig())

    def test_state_scalar_count(self):
        _, params, state = self._setup()
        assert state.scalar_count == 2 * params.num_params()


class TestTrainLoop:
    def test_checkpoint_gate_strict_improvement(self, tmp_path, monkeypatch):
        """Scripted validation losses 1.0, 0.9, 0.95, 0.8 must checkpoint
        after epochs 1, 2, and 4 only."""
        script = iter([(1.0, 0.3), (0.9, 0.4), (0.95, 0.5), (0.8, 0.6)])
        monkeypatch.setattr(TR, "evaluate",
                            lambda *a, **k: next(script))
        cfg = tiny_config(num_layers=0)
        params = M.ModelParams.initialize(cfg, seed=0)
        vol = Volume("v", 0, np.zeros(cfg.input_shape, np.float32))
        result = TR.train(params, cfg, [vol], [vol],
                          TR.TrainConfig(epochs=4, batch_size=1),
                          checkpoint_path=tmp_path / "m.vvck")
        assert [r["checkpointed"] for r in result.history] == [True, True, False, True]
        assert result.best_epoch == 4
        assert result.best_value == 0.8

    def test_same_seed_bit_identical_history(self, tmp_path):
        cfg, train, val = synthetic_sets(tmp_path)
        histories = []
        for _ in range(2):
            params = M.ModelParams.initialize(cfg, seed=3)
            result = TR.train(params, cfg, train, val,
                              TR.TrainConfig(epochs=5, batch_size=4, seed=9,
                                             learning_rate=1e-3))
            histories.append(json.dumps(result.history))
        assert histories[0] == histories[1]

    def test_history_file_schema(self, tmp_path):
        cfg, train, val = synthetic_sets(tmp_path)
        params = M.ModelParams.initialize(cfg, seed=3)
        path = tmp_path / "history.jsonl"
        TR.train(params, cfg, train, val,
                 TR.TrainConfig(epochs=3, batch_size=4, seed=1),
                 history_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2, 3]
        assert all(set(r) == {"epoch", "train_loss", "val_loss", "val_acc",
                              "checkpointed"} for r in rows)

    def test_checkpoint_reproduces_validation_metrics(self, tmp_path):
        from volformer.checkpoint import load_checkpoint

        cfg, train, val = synthetic_sets(tmp_path)
        params = M.ModelParams.initialize(cfg, seed=3)
        ckpt = tmp_path / "best.vvck"
        result = TR.train(params, cfg, train, val,
                          TR.TrainConfig(epochs=6, batch_size=4, seed=4,
                                         learning_rate=1e-3),
                          checkpoint_path=ckpt)
        best_row = result.history[result.best_epoch - 1]
        _, best_params = load_checkpoint(ckpt)
        val_loss, val_acc = TR.evaluate(best_params, cfg, val, batch_size=4)
        assert val_loss == best_row["val_loss"]
        assert val_acc == best_row["val_acc"]

    def test_empty_split_rejected(self, tmp_path):
        cfg, train, _ = synthetic_sets(tmp_path)
        params = M.ModelParams.initialize(cfg, seed=0)
        with pytest.raises(DataError):
            TR.train(params, cfg, train, [], TR.TrainConfig(epochs=1))

    def test_partial_final_batch_kept(self, tmp_path):
        cfg, train, val = synthetic_sets(tmp_path, n_train=3, n_val=1)
        params = M.ModelParams.initialize(cfg, seed=0)
        seen = []
        original = TR.adam_step

        def spy(params, state, cfg_):
            seen.append(state.step_count)
            return original(params, state, cfg_)

        TR.adam_step, spy_token = spy, None
        try:
            TR.train(params, cfg, train, val,
                     TR.TrainConfig(epochs=1, batch_size=4, seed=0))
        finally:
            TR.adam_step = original
        # 9 volumes in batches of 4 -> 3 steps (4, 4, 1)
        assert len(seen) == 3
