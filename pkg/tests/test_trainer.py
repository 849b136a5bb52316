"""Optimizer, schedule, and the per-utterance training loop."""

import numpy as np
import pytest

from permsep.errors import ConfigurationError, NonFiniteLossError
from permsep.losses import GammaParam
from permsep.separator import SeparatorModel, load_checkpoint
from permsep.trainer import (
    Adam,
    EpochRecord,
    TrainConfig,
    evaluate_objective,
    export_error_pairs,
    flip_rate,
    lr_schedule_step,
    resume_training,
    train,
)

from conftest import mag_grid, toy_utterances


def _records_sans_time(records):
    rows = []
    for r in records:
        d = r.to_dict()
        d.pop("wall_time_s")
        rows.append(d)
    return rows


def _toy_model(f=5, h=6, **kw):
    kw.setdefault("init_seed", 0)
    return SeparatorModel(n_freq=f, hidden=h, **kw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdam:
    def test_matches_scalar_reference(self):
        # reference written as a per-element Python loop from the update
        # equations, sharing nothing with the vectorized implementation
        rng = np.random.default_rng(0)
        size, steps, lr = 5, 30, 1e-3
        b1, b2, eps = 0.9, 0.999, 1e-8
        grads = rng.standard_normal((steps, size))

        ref = np.zeros(size)
        m = [0.0] * size
        v = [0.0] * size
        for t in range(1, steps + 1):
            for i in range(size):
                g = grads[t - 1, i]
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                m_hat = m[i] / (1 - b1**t)
                v_hat = v[i] / (1 - b2**t)
                ref[i] -= lr * m_hat / (v_hat**0.5 + eps)

        params = np.zeros(size)
        adam = Adam(size, lr)
        for t in range(steps):
            adam.step(params, grads[t])
        np.testing.assert_allclose(params, ref, atol=1e-14)

    def test_state_round_trip_continues_identically(self):
        rng = np.random.default_rng(1)
        grads = rng.standard_normal((20, 4))

        straight = np.ones(4)
        a = Adam(4, 1e-3)
        for g in grads:
            a.step(straight, g)

        broken = np.ones(4)
        b = Adam(4, 1e-3)
        for g in grads[:10]:
            b.step(broken, g)
        c = Adam.from_state(b.state_dict())
        for g in grads[10:]:
            c.step(broken, g)
        np.testing.assert_array_equal(straight, broken)

    def test_zero_gradient_slot_is_inert(self):
        # a slot that always receives zero gradient never moves, which is
        # how a non-trainable gamma rides along in the joint vector
        params = np.array([1.0, 2.0])
        adam = Adam(2, 1e-2)
        for _ in range(50):
            adam.step(params, np.array([0.3, 0.0]))
        assert params[1] == 2.0
        assert params[0] != 1.0


# ---------------------------------------------------------------------------
# Schedule and flip rate
# ---------------------------------------------------------------------------


class TestSchedule:
    def test_two_small_improvements_decay_once(self):
        history = []
        lr = lr_schedule_step(10.0, 9.998, history, 5e-4)
        assert lr == 5e-4 and len(history) == 1
        lr = lr_schedule_step(9.998, 9.996, history, lr)
        assert lr == pytest.approx(3.5e-4)
        assert history == []  # reset after the decay

    def test_four_small_improvements_decay_twice(self):
        cv = [10.0, 9.999, 9.998, 9.997, 9.996]
        lr, history = 5e-4, []
        for prev, curr in zip(cv, cv[1:]):
            lr = lr_schedule_step(prev, curr, history, lr)
        assert lr == pytest.approx(5e-4 * 0.7 * 0.7)

    def test_good_epoch_resets_patience(self):
        lr, history = 1e-3, []
        lr = lr_schedule_step(10.0, 9.999, history, lr)  # small
        lr = lr_schedule_step(9.999, 5.0, history, lr)  # big improvement
        lr = lr_schedule_step(5.0, 4.999, history, lr)  # small
        assert lr == 1e-3  # never two smalls in a row
        lr = lr_schedule_step(4.999, 4.998, history, lr)
        assert lr == pytest.approx(7e-4)

    def test_threshold_is_strict(self):
        history = []
        # improvement of exactly the threshold counts as a good epoch
        lr = lr_schedule_step(1.0, 1.0 - 0.003, history, 1e-3)
        assert history == [] and lr == 1e-3

    def test_worsening_cv_counts_as_small_improvement(self):
        history = []
        lr = lr_schedule_step(1.0, 1.5, history, 1e-3)
        lr = lr_schedule_step(1.5, 2.0, history, lr)
        assert lr == pytest.approx(7e-4)


def test_flip_rate():
    assert flip_rate({"a": 0, "b": 1}, {"a": 1, "b": 1}) == 0.5
    assert flip_rate({"a": 0}, {"a": 0}) == 0.0
    assert flip_rate({}, {}) == 0.0
    with pytest.raises(ValueError):
        flip_rate({"a": 0}, {"b": 0})


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss_mode="soft")
    with pytest.raises(ConfigurationError):
        TrainConfig(gamma_init=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(reduction="max")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TestTrainingLoop:
    def test_objective_improves_on_toy_data(self):
        utts = toy_utterances(16, t=14, f=5, seed=0)
        model = _toy_model()
        cfg = TrainConfig(epochs=5, learning_rate=2e-3, loss_mode="pit", seed=0)
        records = train(model, utts, utts[:4], cfg)
        assert len(records) == 5
        values = [r.train_objective for r in records]
        non_decreasing = sum(b >= a for a, b in zip(values, values[1:]))
        assert non_decreasing >= 3, values  # at most one dip in 5 epochs
        assert records[-1].train_objective > records[0].train_objective

    def test_records_carry_loop_state(self):
        utts = toy_utterances(8, seed=1)
        model = _toy_model()
        cfg = TrainConfig(epochs=3, learning_rate=1e-3, seed=0)
        records = train(model, utts, utts[:2], cfg)
        assert [r.epoch for r in records] == [1, 2, 3]
        assert records[0].flip_rate == 0.0
        for r in records:
            assert 0.0 <= r.flip_rate <= 1.0
            assert r.learning_rate > 0
            assert np.isfinite(r.cv_objective)

    def test_training_is_seed_deterministic(self):
        cfg = TrainConfig(epochs=3, learning_rate=1e-3, seed=7)
        runs = []
        for _ in range(2):
            model = _toy_model()
            records = train(model, toy_utterances(8, seed=2), toy_utterances(2, seed=3), cfg)
            runs.append((_records_sans_time(records), model.params.copy()))
        assert runs[0][0] == runs[1][0]
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_pit_and_gamma_zero_softmin_train_identically(self):
        train_set = toy_utterances(8, seed=4)
        dev_set = toy_utterances(2, seed=5)

        model_a = _toy_model()
        rec_a = train(model_a, train_set, dev_set,
                      TrainConfig(epochs=3, loss_mode="pit", seed=1))
        model_b = _toy_model()
        model_b.gamma = GammaParam(0.0)
        rec_b = train(model_b, train_set, dev_set,
                      TrainConfig(epochs=3, loss_mode="softmin_const", seed=1))
        assert _records_sans_time(rec_a) == _records_sans_time(rec_b)
        np.testing.assert_array_equal(model_a.params, model_b.params)

    def test_trainable_gamma_moves_and_stays_feasible(self):
        train_set = toy_utterances(8, seed=6, scale=3.0)
        model = _toy_model(gamma=GammaParam(0.5, trainable=True))
        cfg = TrainConfig(epochs=4, learning_rate=2e-3,
                          loss_mode="softmin_trainable", gamma_init=0.5, seed=0)
        records = train(model, train_set, train_set[:2], cfg)
        gammas = [r.gamma for r in records]
        assert all(g >= 0.0 and np.isfinite(g) for g in gammas)
        assert model.gamma.value != 0.5  # it actually trained

    def test_trainable_mode_requires_trainable_gamma(self):
        model = _toy_model()  # default gamma is fixed
        cfg = TrainConfig(epochs=1, loss_mode="softmin_trainable", gamma_init=1.0)
        with pytest.raises(ConfigurationError):
            train(model, toy_utterances(2), toy_utterances(2), cfg)

    def test_empty_split_rejected(self):
        model = _toy_model()
        cfg = TrainConfig(epochs=1)
        with pytest.raises(ConfigurationError):
            train(model, [], toy_utterances(2), cfg)

    def test_non_finite_loss_aborts_with_example_id(self):
        # enormous magnitudes keep the error table finite but overflow
        # d(objective)/d(gamma) = sum(w e) / gamma_eff^2 at the floor
        utts = toy_utterances(1, t=10, f=5, seed=0, scale=3e146)
        model = _toy_model(gamma=GammaParam(0.0, trainable=True))
        cfg = TrainConfig(epochs=1, loss_mode="softmin_trainable", gamma_init=0.0)
        with pytest.raises(NonFiniteLossError) as exc_info:
            train(model, utts, utts, cfg)
        assert exc_info.value.example_id == "toy000"


class TestCheckpointing:
    def test_resume_is_bit_exact(self, tmp_path):
        train_set = toy_utterances(8, seed=8)
        dev_set = toy_utterances(2, seed=9)
        cfg = TrainConfig(epochs=4, learning_rate=1e-3, seed=3)

        straight_dir = tmp_path / "straight"
        straight_dir.mkdir()
        model_a = _toy_model()
        rec_a = train(model_a, train_set, dev_set, cfg, checkpoint_dir=str(straight_dir))

        short_dir = tmp_path / "short"
        short_dir.mkdir()
        model_b = _toy_model()
        train(model_b, train_set, dev_set,
              TrainConfig(epochs=2, learning_rate=1e-3, seed=3),
              checkpoint_dir=str(short_dir))
        model_c, rec_c = resume_training(
            str(short_dir / "epoch002.json"), train_set, dev_set, cfg
        )
        assert [r.epoch for r in rec_c] == [3, 4]
        assert _records_sans_time(rec_a[2:]) == _records_sans_time(rec_c)
        np.testing.assert_array_equal(model_a.params, model_c.params)

    def test_checkpoints_written_per_epoch(self, tmp_path):
        model = _toy_model()
        cfg = TrainConfig(epochs=3, seed=0)
        train(model, toy_utterances(4), toy_utterances(2), cfg,
              checkpoint_dir=str(tmp_path), config_hash="deadbeef")
        names = sorted(p.name for p in tmp_path.glob("epoch*.json"))
        assert names == ["epoch001.json", "epoch002.json", "epoch003.json"]
        ck = load_checkpoint(tmp_path / "epoch003.json")
        assert ck["epoch"] == 3
        assert ck["config_hash"] == "deadbeef"
        assert ck["optimizer"]["t"] == 12  # 3 epochs x 4 utterances

    def test_resume_needs_optimizer_state(self, tmp_path):
        from permsep.separator import save_checkpoint

        model = _toy_model()
        path = tmp_path / "bare.json"
        save_checkpoint(path, model, epoch=1)  # no optimizer block
        with pytest.raises(ConfigurationError):
            resume_training(str(path), toy_utterances(2), toy_utterances(2),
                            TrainConfig(epochs=2))


# ---------------------------------------------------------------------------
# Split evaluation helpers
# ---------------------------------------------------------------------------


def test_evaluate_objective_matches_manual_loop():
    from permsep.losses import pit_cost
    from permsep.permutation import error_table
    from permsep.separator import forward

    utts = toy_utterances(3, seed=10)
    model = _toy_model()
    got = evaluate_objective(model, utts, pit_cost)
    manual = 0.0
    for u in utts:
        _, trace = forward(model, u.mix_mag, mode="eval")
        manual += pit_cost(error_table(list(u.source_mags), list(trace.outputs))).objective
    assert got == pytest.approx(manual / 3, rel=1e-12)
    with pytest.raises(ConfigurationError):
        evaluate_objective(model, [], pit_cost)


def test_export_error_pairs():
    from permsep.permutation import error_table
    from permsep.separator import forward

    utts = toy_utterances(2, seed=11)
    model = _toy_model()
    rows = export_error_pairs(model, utts)
    assert [r[0] for r in rows] == ["toy000", "toy001"]
    _, trace = forward(model, utts[0].mix_mag, mode="eval")
    table = error_table(list(utts[0].source_mags), list(trace.outputs))
    assert rows[0][1] == float(table.errors[0])
    assert rows[0][2] == float(table.errors[1])

    wide = _toy_model(n_sources=3)
    with pytest.raises(ConfigurationError):
        export_error_pairs(wide, utts)


def test_load_split_reads_features(tmp_path):
    from permsep.dsp import magnitude_phase, read_wav, stft
    from permsep.mixgen import DatasetConfig, build_dataset
    from permsep.trainer import load_split

    manifest = build_dataset(DatasetConfig(
        out_dir=str(tmp_path / "ds"),
        counts={"train": 2, "dev": 1, "test": 1},
        duration_s=0.8,
        min_utterance_s=0.3,
    ))
    utts = load_split(manifest, "train", frame_ms=32.0)
    assert len(utts) == 2
    u = utts[0]
    assert u.source_mags.shape == (2,) + u.mix_mag.frames.shape
    entry = manifest.splits["train"][0]
    wav = read_wav(manifest.resolve(entry.mixture_path))
    mag, _ = magnitude_phase(stft(wav, 32.0))
    np.testing.assert_array_equal(u.mix_mag.frames, mag.frames)
    assert load_split(manifest, "missing") == []
