import math
from dataclasses import replace

import numpy as np
import pytest

from radapter.adapter import EVAL, effective_matrix
from radapter.errors import NumericalError, SpecError
from radapter.model import LOG_TAU_BOUNDS, AdapterBank, DualEncoder, embed, merge_into
from radapter.numerics import SeededRng, finite_diff_check
from radapter.synthdata import RecordSet, TaskSpec, TaskWorld, gen_split, sample_batch
from radapter.trainer import (
    OptimState,
    TrainConfig,
    adamw_step,
    compute_gradients,
    encoder_configs,
    finetune,
    lr_at,
    pretrain,
    pretrain_defaults,
    train_step,
)

SPEC = TaskSpec(n_classes_pretrain=16, n_classes_task=4, n_pretrain=128, n_id_train=64, n_id_test=32,
                n_ood_test=32, img_seq_len=6, txt_seq_len=8, img_vocab=16, txt_vocab=24)
TINY = dict(d=8, k=2, layers=1, embed_dim=4, batch=8)


@pytest.fixture(scope="module")
def data():
    return {k: RecordSet(v) for k, v in gen_split(SPEC).items()}


@pytest.fixture(scope="module")
def base(data):
    return pretrain(data["pretrain"], SPEC, pretrain_defaults(seed=1, **TINY), steps=20).model


def _batch(data, seed=0, mpc=2):
    return sample_batch(data["id_train"], 8, SeededRng(seed), mpc, TaskWorld(SPEC))


class TestSchedule:
    def test_warmup_start_and_end(self):
        assert lr_at(0, 5e-4, 500, 5000) == 0.0
        assert lr_at(500, 5e-4, 500, 5000) == 5e-4

    def test_final_step_zero(self):
        assert abs(lr_at(5000, 5e-4, 500, 5000)) < 1e-12

    def test_midpoint(self):
        assert lr_at(2750, 1.0, 500, 5000) == pytest.approx(0.5, abs=1e-12)

    def test_monotone_decay(self):
        lrs = [lr_at(s, 1.0, 10, 100) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup(self):
        assert lr_at(0, 2.0, 0, 10) == 2.0

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at(-1, 1.0, 0, 10)

    def test_default_warmup_fraction(self):
        assert TrainConfig().warmup_for(320) == 16
        assert TrainConfig(warmup_steps=500).warmup_for(320) == 500


class TestAdam:
    def test_zero_grad_no_change(self):
        p = {"w": np.array([1.0, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, OptimState(), 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        g = np.array([0.3, -2.0, 1e-3])
        p = {"w": np.zeros(3)}
        adamw_step(p, {"w": g}, OptimState(), 0.01)
        np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)

    def test_two_step_recurrence(self):
        g, lr = 0.7, 0.05
        p = {"w": np.array([1.0])}
        opt = OptimState()
        for _ in range(2):
            adamw_step(p, {"w": np.array([g])}, opt, lr)
        x, m, v = 1.0, 0.0, 0.0
        for t in (1, 2):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p["w"][0] - x) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState(), 0.1)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lr_init=0.0), dict(warmup_steps=-1), dict(mask="x"),
                                    dict(loss="x"), dict(loss_scaling="x")])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            TrainConfig(**kw)

    def test_roundtrip(self):
        cfg = TrainConfig(rank=2, seed=4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestStep:
    def test_adapters_only_freezes_backbone(self, base, data):
        model = base.copy()
        bank = AdapterBank.attach(model, drop_p=0.2)
        before = {k: v.copy() for k, v in model.named_tensors().items()}
        cfg = TrainConfig(seed=0, **TINY)
        train_step(model, bank, _batch(data), cfg, SeededRng(0), OptimState(), 1e-2)
        for k, v in model.named_tensors().items():
            assert v.tobytes() == before[k].tobytes(), k
        assert any(np.any(p != 0) for p in bank.named_parameters().values())

    def test_ema_m0_tracks_adapter(self, base, data):
        model = base.copy()
        bank = AdapterBank.attach(model, rank=3, drop_p=0.0, momentum=0.0)
        train_step(model, bank, _batch(data), TrainConfig(**TINY), SeededRng(0), OptimState(), 1e-2)
        for t in ("image", "text"):
            for site, aw in bank.adapters[t].items():
                np.testing.assert_array_equal(bank.emas[t][site].shadow, effective_matrix(aw))

    def test_mpm_identity_matches_infonce(self, base, data):
        model = base.copy()
        bank = AdapterBank.attach(model, drop_p=0.0)
        batch = _batch(data, mpc=1)
        batch.y = np.eye(8)
        common = dict(TINY, drop_p=0.0, delta=0.0, epsilon=0.0, tau=0.01)
        g_m = compute_gradients(model, bank, batch, TrainConfig(loss="mpm", **common), SeededRng(0))
        g_i = compute_gradients(model, bank, batch, TrainConfig(loss="infonce", **common), SeededRng(0))
        assert g_m.loss == pytest.approx(g_i.loss, abs=1e-10)
        for name in bank.named_parameters():
            np.testing.assert_allclose(g_m.grads[name], g_i.grads[name], atol=1e-10, rtol=0)

    def test_sum_scaling_is_batch_times_mean(self, base, data):
        model = base.copy()
        bank = AdapterBank.attach(model, drop_p=0.0)
        batch = _batch(data)
        gm = compute_gradients(model, bank, batch, TrainConfig(**TINY), SeededRng(0))
        gs = compute_gradients(model, bank, batch, TrainConfig(loss_scaling="sum", **TINY), SeededRng(0))
        assert gs.loss == pytest.approx(8 * gm.loss, rel=1e-12)

    def test_temperature_gradient_fd(self, base, data):
        model = base.copy()
        batch = _batch(data, mpc=1)
        cfg = pretrain_defaults(**TINY)
        res = compute_gradients(model, None, batch, cfg, None, EVAL, learn_temperature=True)
        f = lambda _=None: compute_gradients(model, None, batch, cfg, None, EVAL, True).loss  # noqa: E731
        assert finite_diff_check(f, model.log_temperature, res.grads["log_temperature"]) < 1e-6

    def test_temperature_clamped(self, base, data):
        model = base.copy()
        model.log_temperature[:] = LOG_TAU_BOUNDS[0]
        cfg = pretrain_defaults(**TINY)
        train_step(model, None, _batch(data, mpc=1), cfg, SeededRng(0), OptimState(), 10.0, True)
        assert LOG_TAU_BOUNDS[0] <= model.log_temperature[0] <= LOG_TAU_BOUNDS[1]

    def test_nonfinite_loss_aborts(self, base, data):
        model = base.copy()
        model.image.projection[0, 0] = np.nan
        with pytest.raises(NumericalError):
            compute_gradients(model, None, _batch(data), pretrain_defaults(**TINY), None, EVAL)


class TestLoops:
    def test_loss_trajectory_reproducible(self, base, data):
        cfg = TrainConfig(seed=3, **TINY)
        a = finetune(base, data["id_train"], SPEC, cfg, steps=50).losses
        b = finetune(base, data["id_train"], SPEC, cfg, steps=50).losses
        assert a == b and len(a) == 50

    def test_pretrain_reproducible_and_finite(self, data):
        cfg = pretrain_defaults(seed=2, **TINY)
        a = pretrain(data["pretrain"], SPEC, cfg, steps=10)
        b = pretrain(data["pretrain"], SPEC, cfg, steps=10)
        assert a.losses == b.losses and all(math.isfinite(x) for x in a.losses)

    def test_epoch_log_format(self, base, data):
        res = finetune(base, data["id_train"], SPEC, TrainConfig(epochs=2, **TINY))
        assert len(res.epoch_log) == 2
        fields = dict(kv.split("=") for kv in res.epoch_log[-1].split())
        assert set(fields) == {"epoch", "step", "lr", "train_loss", "wall_ms"}
        assert fields["epoch"] == "2" and int(fields["step"]) == 2 * (64 // 8)

    def test_zero_steps_merge_is_base(self, base, data):
        res = finetune(base, data["id_train"], SPEC, TrainConfig(**TINY), steps=0)
        toks = data["id_test"].img[:5]
        for alpha in (0.0, 0.5, 1.0):
            merged = merge_into(res.model, res.bank, alpha)
            np.testing.assert_array_equal(embed(merged, "image", toks), embed(base, "image", toks))

    def test_finetune_does_not_touch_base(self, base, data):
        before = {k: v.copy() for k, v in base.named_tensors().items()}
        finetune(base, data["id_train"], SPEC, TrainConfig(**TINY), steps=3)
        assert all(np.array_equal(v, before[k]) for k, v in base.named_tensors().items())

    def test_incompatible_spec(self, base, data):
        with pytest.raises(SpecError):
            finetune(base, data["id_train"], replace(SPEC, img_vocab=32), TrainConfig(**TINY))

    def test_encoder_configs_follow_spec(self):
        img, txt = encoder_configs(SPEC, TrainConfig(**TINY))
        assert (img.seq_len, img.vocab_size, txt.seq_len, txt.vocab_size) == (6, 16, 8, 24)


class TestModel:
    def test_merge_matches_scaled_adapters(self, base, data):
        model = base.copy()
        bank = AdapterBank.attach(model, drop_p=0.0)
        rng = SeededRng(5)
        for t in ("image", "text"):
            for site in bank.adapters[t]:
                bank.emas[t][site].shadow = 0.3 * rng.normals(64).reshape(8, 8)
        toks = data["id_test"].txt[:6]
        for alpha in (0.0, 0.25, 1.0):
            merged = merge_into(model, bank, alpha)
            live = embed(model, "text", toks, bank.scaled_eval_adapters("text", alpha))
            np.testing.assert_allclose(embed(merged, "text", toks), live, atol=1e-9)

    def test_init_seeded(self):
        cfgs = encoder_configs(SPEC, TrainConfig(**TINY))
        a, b = DualEncoder.init(*cfgs, seed=4), DualEncoder.init(*cfgs, seed=4)
        assert all(np.array_equal(v, b.named_tensors()[k]) for k, v in a.named_tensors().items())
        assert a.temperature == pytest.approx(0.07)
