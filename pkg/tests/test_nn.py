import numpy as np
import pytest

from imix.checkpoint import load_checkpoint, save_checkpoint
from imix.errors import ConfigError, ShapeError, UsageError
from imix.mathcore import Rng
from imix.nn import (DenseLayer, Encoder, EncoderSpec, EncoderState, LayerSpec,
                     Schedule, ema_update, lr_at, sgd_step)
from imix.verify import finite_diff_grad, max_rel_err


def identity_layer(dim, activation="identity"):
    layer = DenseLayer(LayerSpec(dim, dim, activation), rng=None)
    layer.W[...] = np.eye(dim)
    return layer


class TestForward:
    def test_identity_layer_passthrough(self):
        layer = identity_layer(3)
        x = Rng(0).normal((4, 3))
        out, _ = layer.forward(x, "train")
        assert np.array_equal(out, x)

    def test_eval_mode_is_pure(self):
        rng = Rng(1)
        spec = EncoderSpec(in_dim=8, hidden_dims=(16, 16), batch_norm=True,
                           maxout_sets=2, proj_hidden=8, proj_dim=4)
        enc = Encoder(spec, rng)
        x = rng.normal((5, 8))
        a, _ = enc.forward(x, "eval")
        b, _ = enc.forward(x, "eval")
        assert np.array_equal(a, b)

    def test_train_mode_updates_running_stats(self):
        rng = Rng(2)
        layer = DenseLayer(LayerSpec(4, 4, "relu", batch_norm=True), rng)
        before = layer.run_mean.copy()
        layer.forward(rng.normal((16, 4)), "train")
        assert not np.array_equal(before, layer.run_mean)

    def test_key_mode_leaves_running_stats(self):
        rng = Rng(3)
        layer = DenseLayer(LayerSpec(4, 4, "relu", batch_norm=True), rng)
        before = layer.run_mean.copy()
        layer.forward(rng.normal((16, 4)), "key")
        assert np.array_equal(before, layer.run_mean)

    def test_output_shape(self):
        rng = Rng(4)
        spec = EncoderSpec(in_dim=8, hidden_dims=(32,), batch_norm=False,
                           maxout_sets=2, proj_hidden=16, proj_dim=16)
        enc = Encoder(spec, rng)
        out, _ = enc.forward(rng.normal((4, 8)), "train")
        assert out.shape == (4, 16)

    def test_dimension_mismatch(self):
        enc = Encoder(EncoderSpec(in_dim=8, hidden_dims=(8,), maxout_sets=1),
                      Rng(0))
        with pytest.raises(ShapeError):
            enc.forward(np.zeros((4, 5)), "train")

    def test_maxout_needs_divisible_width(self):
        with pytest.raises(ConfigError):
            LayerSpec(4, 9, "maxout", maxout_sets=2)

    def test_maxout_ties_take_lowest_slot(self):
        layer = DenseLayer(LayerSpec(2, 4, "maxout", maxout_sets=2), rng=None)
        layer.W[...] = 0.0
        layer.b[...] = np.array([1.0, 1.0, 0.0, 2.0])  # group 0 ties at 1.0
        out, cache = layer.forward(np.zeros((1, 2)), "train")
        assert np.array_equal(out, [[1.0, 2.0]])
        d_in, grads = layer.backward(cache, np.ones((1, 2)))
        # subgradient routed to the first (lowest) slot of the tied group
        assert np.array_equal(grads["b"], [1.0, 0.0, 0.0, 1.0])


class TestBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = Rng(5)
        enc = Encoder(EncoderSpec(in_dim=6, hidden_dims=(8, 8), maxout_sets=2),
                      rng)
        _, cache = enc.forward(rng.normal((4, 6)), "train")
        grads = enc.backward(cache, np.zeros((4, 4 * 0 + enc.spec.proj_dim)))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_linear_layer_closed_form(self):
        layer = DenseLayer(LayerSpec(3, 2, "identity"), Rng(6))
        x = Rng(7).normal((5, 3))
        _, cache = layer.forward(x, "train")
        _, grads = layer.backward(cache, np.ones((5, 2)))
        assert np.allclose(grads["W"], x.T @ np.ones((5, 2)))
        assert np.allclose(grads["b"], 5.0)

    def test_backward_without_cache_rejected(self):
        layer = DenseLayer(LayerSpec(3, 2, "identity"), Rng(0))
        out, cache = layer.forward(np.zeros((2, 3)), "eval")
        with pytest.raises(UsageError):
            layer.backward(cache, np.ones((2, 2)))

    def test_finite_difference_all_layer_types(self):
        # linear, relu, batch norm (train-stat path), maxout, both heads
        worst = 0.0
        for trial in range(3):
            rng = Rng(100 + trial)
            spec = EncoderSpec(in_dim=5, hidden_dims=(8, 8), batch_norm=True,
                               maxout_sets=2, proj_hidden=6, proj_dim=4,
                               predictor=True)
            enc = Encoder(spec, rng)
            x = rng.normal((6, 5))
            direction = rng.normal((6, 4))

            def value():
                z, _ = enc.forward(x, "key")
                p, _ = enc.forward_prediction(z, "key")
                return float((p * direction).sum())

            z, cache = enc.forward(x, "key")
            _, pcache = enc.forward_prediction(z, "key")
            dz, grads = enc.backward_prediction(pcache, direction)
            grads.update(enc.backward(cache, dz))
            params = enc.named_params()
            for name, g in grads.items():
                worst = max(worst, max_rel_err(g, finite_diff_grad(value, params[name])))
        assert worst < 1e-4


class TestSgd:
    def _state(self, seed=0):
        spec = EncoderSpec(in_dim=3, hidden_dims=(4,), batch_norm=False,
                           maxout_sets=1, proj_hidden=4, proj_dim=2)
        return EncoderState.create(spec, Rng(seed))

    def test_vanilla_step(self):
        state = self._state()
        params = state.encoder.named_params()
        before = {k: v.copy() for k, v in params.items()}
        grads = {k: np.ones_like(v) for k, v in params.items()}
        sgd_step(state, grads, lr=0.1, momentum=0.0, weight_decay=0.0)
        for k, v in params.items():
            assert np.allclose(v, before[k] - 0.1)

    def test_zero_lr_freezes(self):
        state = self._state()
        params = state.encoder.named_params()
        before = {k: v.copy() for k, v in params.items()}
        grads = {k: np.ones_like(v) for k, v in params.items()}
        sgd_step(state, grads, lr=0.0, momentum=0.9, weight_decay=1e-4)
        assert all(np.array_equal(params[k], before[k]) for k in params)

    def test_two_steps_momentum_displacement(self):
        # constant gradient g: buffers are g then 1.9 g, so the total
        # displacement is lr * (g + 1.9 g)
        state = self._state()
        params = state.encoder.named_params()
        before = {k: v.copy() for k, v in params.items()}
        grads = {k: np.full_like(v, 2.0) for k, v in params.items()}
        for _ in range(2):
            sgd_step(state, grads, lr=0.1, momentum=0.9, weight_decay=0.0)
        for k, v in params.items():
            assert np.allclose(before[k] - v, 0.1 * (2.0 + 1.9 * 2.0))

    def test_weight_decay_enters_buffer(self):
        state = self._state()
        params = state.encoder.named_params()
        name = next(iter(params))
        p0 = params[name].copy()
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        sgd_step(state, grads, lr=1.0, momentum=0.0, weight_decay=0.5)
        assert np.allclose(params[name], p0 - 0.5 * p0)

    def test_shape_mismatch(self):
        state = self._state()
        with pytest.raises(UsageError):
            sgd_step(state, {"backbone.0.W": np.zeros((1, 1))}, lr=0.1)


class TestSchedule:
    def test_warmup_endpoint_hits_scaled_lr(self):
        sch = Schedule(base_lr=0.125, batch_size=512, warmup_epochs=10,
                       total_epochs=100)
        assert lr_at(sch, 10) == sch.scaled_lr == 0.25

    def test_final_epoch_is_zero(self):
        sch = Schedule(base_lr=0.1, batch_size=256, warmup_epochs=10,
                       total_epochs=100)
        assert lr_at(sch, 100) == pytest.approx(0.0, abs=1e-16)

    def test_cosine_midpoint_is_half(self):
        sch = Schedule(base_lr=0.1, batch_size=256, warmup_epochs=10,
                       total_epochs=110)
        assert lr_at(sch, 60) == pytest.approx(sch.scaled_lr / 2)

    def test_continuity_at_boundary(self):
        sch = Schedule(base_lr=0.3, batch_size=512, warmup_epochs=5,
                       total_epochs=50)
        eps = 1e-9
        assert abs(lr_at(sch, 5 - eps) - lr_at(sch, 5 + eps)) < 1e-7

    def test_linear_ramp_starts_at_zero(self):
        sch = Schedule(base_lr=0.3, batch_size=256, warmup_epochs=5,
                       total_epochs=50)
        assert lr_at(sch, 0) == 0.0
        assert lr_at(sch, 2.5) == pytest.approx(sch.scaled_lr / 2)

    def test_step_mode(self):
        sch = Schedule(base_lr=1.0, batch_size=256, warmup_epochs=0,
                       total_epochs=100, mode="step", milestones=(80, 90, 95),
                       factor=0.2)
        assert lr_at(sch, 10) == 1.0
        assert lr_at(sch, 85) == pytest.approx(0.2)
        assert lr_at(sch, 99) == pytest.approx(0.2 ** 3)

    def test_warmup_must_fit(self):
        with pytest.raises(ConfigError):
            Schedule(base_lr=0.1, batch_size=256, warmup_epochs=10,
                     total_epochs=10)

    def test_out_of_range_epoch(self):
        sch = Schedule(base_lr=0.1, batch_size=256, warmup_epochs=1,
                       total_epochs=10)
        with pytest.raises(ConfigError):
            lr_at(sch, 11)


class TestEma:
    def _state(self):
        spec = EncoderSpec(in_dim=3, hidden_dims=(4,), batch_norm=True,
                           maxout_sets=1, proj_hidden=4, proj_dim=2)
        state = EncoderState.create(spec, Rng(8), with_ema=True)
        return state

    def test_m_zero_copies_live(self):
        state = self._state()
        for p in state.encoder.named_params().values():
            p += 1.0
        ema_update(state, 0.0)
        live = state.encoder.named_params()
        shadow = state.ema.named_params()
        assert all(np.array_equal(live[k], shadow[k]) for k in live)

    def test_geometric_convergence(self):
        state = self._state()
        name = "backbone.0.W"
        live = state.encoder.named_params()[name]
        live += 1.0
        gap0 = np.abs(state.ema.named_params()[name] - live).max()
        for _ in range(10):
            ema_update(state, 0.5)
        gap = np.abs(state.ema.named_params()[name] - live).max()
        assert gap == pytest.approx(gap0 * 0.5 ** 10, rel=1e-9)

    def test_shadow_never_sees_gradients(self):
        state = self._state()
        shadow_before = {k: v.copy() for k, v in state.ema.named_params().items()}
        grads = {k: np.ones_like(v) for k, v in
                 state.encoder.named_params().items()}
        sgd_step(state, grads, lr=0.1, momentum=0.9, weight_decay=1e-4)
        shadow_after = state.ema.named_params()
        assert all(np.array_equal(shadow_before[k], shadow_after[k])
                   for k in shadow_before)

    def test_missing_shadow_rejected(self):
        spec = EncoderSpec(in_dim=3, hidden_dims=(4,), maxout_sets=1)
        state = EncoderState.create(spec, Rng(0), with_ema=False)
        with pytest.raises(UsageError):
            ema_update(state, 0.9)

    def test_prediction_head_requires_flag(self):
        spec = EncoderSpec(in_dim=3, hidden_dims=(4,), maxout_sets=1,
                           predictor=False)
        enc = Encoder(spec, Rng(0))
        with pytest.raises(UsageError):
            enc.forward_prediction(np.zeros((2, spec.proj_dim)))

    def test_prediction_head_preserves_dim(self):
        spec = EncoderSpec(in_dim=3, hidden_dims=(4,), maxout_sets=1,
                           proj_dim=6, predictor=True)
        enc = Encoder(spec, Rng(1))
        out, _ = enc.forward_prediction(Rng(2).normal((5, 6)), "train")
        assert out.shape == (5, 6)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = EncoderSpec(in_dim=5, hidden_dims=(8, 8), batch_norm=True,
                           maxout_sets=2, proj_hidden=6, proj_dim=4,
                           predictor=True)
        state = EncoderState.create(spec, Rng(9), with_ema=True)
        # move stats off their init values
        state.encoder.forward(Rng(10).normal((16, 5)), "train")
        ema_update(state, 0.5)
        path = str(tmp_path / "ckpt.json")
        save_checkpoint(path, state, meta={"run_id": "abc"})
        loaded = load_checkpoint(path)
        src_p = state.encoder.named_params()
        dst_p = loaded.encoder.named_params()
        assert all(np.array_equal(src_p[k], dst_p[k]) for k in src_p)
        src_s = state.encoder.named_stats()
        dst_s = loaded.encoder.named_stats()
        assert all(np.array_equal(src_s[k], dst_s[k]) for k in src_s)
        ema_src = state.ema.named_params()
        ema_dst = loaded.ema.named_params()
        assert all(np.array_equal(ema_src[k], ema_dst[k]) for k in ema_src)

    def test_checkpoint_is_versioned_json(self, tmp_path):
        import json
        spec = EncoderSpec(in_dim=3, hidden_dims=(4,), maxout_sets=1)
        state = EncoderState.create(spec, Rng(0))
        path = str(tmp_path / "c.json")
        save_checkpoint(path, state)
        doc = json.loads(open(path).read())
        assert doc["format"] == "imix-checkpoint"
        assert doc["version"] == 1
        assert doc["spec"]["in_dim"] == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / "nope.json"))
