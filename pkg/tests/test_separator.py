"""Separator forward/backward, recurrence kernels, checkpointing."""

import numpy as np
import pytest

from permsep import _recurrence
from permsep.errors import CheckpointError, ConfigurationError, GeometryError
from permsep.losses import GammaParam
from permsep.separator import (
    SeparatorModel,
    backward,
    forward,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
)
from permsep.trainer import Adam

from conftest import random_mag


def _model(f=7, h=5, **kw):
    kw.setdefault("init_seed", 0)
    return SeparatorModel(n_freq=f, hidden=h, **kw)


# ---------------------------------------------------------------------------
# Recurrence kernels
# ---------------------------------------------------------------------------


@pytest.mark.skipif(
    _recurrence.BACKEND != "numba", reason="numba backend not active"
)
def test_numba_kernels_match_numpy():
    rng = np.random.default_rng(0)
    t, h = 9, 6
    zx = rng.standard_normal((t, 4 * h))
    u = rng.standard_normal((4 * h, h)) * 0.3
    ifog_nb, c_nb, tc_nb, h_nb = _recurrence.lstm_forward(zx, u)
    ifog_np, c_np, tc_np, h_np = _recurrence.lstm_forward_numpy(zx, u)
    np.testing.assert_allclose(ifog_nb, ifog_np, atol=1e-13)
    np.testing.assert_allclose(c_nb, c_np, atol=1e-13)
    np.testing.assert_allclose(tc_nb, tc_np, atol=1e-13)
    np.testing.assert_allclose(h_nb, h_np, atol=1e-13)

    dh = rng.standard_normal((t, h))
    ut = np.ascontiguousarray(u.T)
    dz_nb = _recurrence.lstm_backward(dh, ifog_np, c_np, tc_np, ut)
    dz_np = _recurrence.lstm_backward_numpy(dh, ifog_np, c_np, tc_np, ut)
    np.testing.assert_allclose(dz_nb, dz_np, atol=1e-12)


def test_lstm_forward_respects_gate_algebra():
    # single step: c = i*g, h = o*tanh(c), gates from the packed block
    rng = np.random.default_rng(1)
    h = 4
    zx = rng.standard_normal((1, 4 * h))
    u = np.zeros((4 * h, h))  # no recurrence on the first step anyway
    ifog, c, tc, hidden = _recurrence.lstm_forward_numpy(zx, u)

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i, f, o, g = np.split(zx[0], 4)
    np.testing.assert_allclose(c[0], sig(i) * np.tanh(g), atol=1e-14)
    np.testing.assert_allclose(hidden[0], sig(o) * np.tanh(c[0]), atol=1e-14)
    np.testing.assert_allclose(ifog[0], np.concatenate([sig(i), sig(f), sig(o), np.tanh(g)]), atol=1e-14)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


def test_param_layout_and_views():
    m = _model(f=7, h=5, n_sources=2)
    expected = 4 * 5 * 7 + 4 * 5 * 5 + 4 * 5  # lstm1
    expected += 4 * 5 * 5 + 4 * 5 * 5 + 4 * 5  # lstm2
    expected += 2 * (7 * 5 + 7)  # heads
    assert m.n_params == expected
    assert m.view("lstm1.w_in").shape == (20, 7)
    assert m.view("head1.bias").shape == (7,)
    # views alias the flat store
    m.view("head0.weight")[:] = 3.5
    assert np.all(m.view("head0.weight") == 3.5)
    sl = m._index["head0.weight"][0]
    assert np.all(m.params[sl] == 3.5)


def test_init_is_seed_deterministic():
    a = _model(init_seed=4).params
    b = _model(init_seed=4).params
    c = _model(init_seed=5).params
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_model_validation():
    with pytest.raises(ConfigurationError):
        SeparatorModel(n_freq=0, hidden=4)
    with pytest.raises(ConfigurationError):
        SeparatorModel(n_freq=4, hidden=4, dropout_rate=1.0)
    with pytest.raises(ConfigurationError):
        SeparatorModel(n_freq=4, hidden=4, n_sources=9)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def test_forward_shapes_and_mask_range():
    m = _model()
    mix = random_mag(11, 7, seed=2)
    outputs, trace = forward(m, mix)
    assert len(outputs) == 2
    for out in outputs:
        assert out.frames.shape == (11, 7)
        assert out.frame_len == mix.frame_len and out.n_samples == mix.n_samples
    # logistic masks stay strictly inside (0, 1)
    assert np.all(trace.sig > 0.0) and np.all(trace.sig < 1.0)
    np.testing.assert_allclose(trace.outputs, trace.sig * mix.frames, atol=1e-15)


def test_forward_softmax_rows_normalize():
    m = _model(softmax_after_recurrent=True)
    mix = random_mag(6, 7, seed=3)
    _, trace = forward(m, mix)
    np.testing.assert_allclose(trace.p.sum(axis=1), 1.0, atol=1e-12)
    m2 = _model(softmax_after_recurrent=False)
    _, trace2 = forward(m2, mix)
    # without the normalization stage the head input is the raw h2
    np.testing.assert_array_equal(trace2.p, trace2.h2)


def test_eval_mode_is_deterministic_and_dropout_free():
    m = _model(dropout_rate=0.5)
    mix = random_mag(8, 7, seed=4)
    out1, t1 = forward(m, mix, mode="eval", seed=0)
    out2, t2 = forward(m, mix, mode="eval", seed=99)
    np.testing.assert_array_equal(t1.outputs, t2.outputs)
    assert t1.mask1 is None and t1.mask2 is None


def test_train_mode_dropout_depends_on_seed():
    m = _model(dropout_rate=0.5)
    mix = random_mag(8, 7, seed=5)
    _, a = forward(m, mix, mode="train", seed=1)
    _, b = forward(m, mix, mode="train", seed=1)
    _, c = forward(m, mix, mode="train", seed=2)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    assert not np.array_equal(a.outputs, c.outputs)
    # inverted dropout: surviving entries scaled by 1/keep
    vals = np.unique(a.mask1)
    np.testing.assert_allclose(np.sort(vals), [0.0, 2.0], atol=1e-12)


def test_zero_dropout_train_equals_eval():
    m = _model(dropout_rate=0.0)
    mix = random_mag(8, 7, seed=6)
    _, tr = forward(m, mix, mode="train", seed=3)
    _, ev = forward(m, mix, mode="eval")
    np.testing.assert_array_equal(tr.outputs, ev.outputs)


def test_forward_rejects_wrong_width_and_mode():
    m = _model(f=7)
    with pytest.raises(GeometryError):
        forward(m, random_mag(5, 9))
    with pytest.raises(ConfigurationError):
        forward(m, random_mag(5, 7), mode="test")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def test_backward_shape_and_staleness_guard():
    m = _model()
    mix = random_mag(9, 7, seed=7)
    _, trace = forward(m, mix, mode="train", seed=0)
    g_out = np.random.default_rng(8).standard_normal(trace.outputs.shape)
    grads = backward(m, trace, g_out)
    assert grads.shape == m.params.shape
    assert np.all(np.isfinite(grads))

    m.params[0] += 1e-3  # parameters moved; the trace is now stale
    with pytest.raises(GeometryError, match="stale"):
        backward(m, trace, g_out)


def test_backward_rejects_bad_gradient_shape():
    m = _model()
    mix = random_mag(9, 7, seed=9)
    _, trace = forward(m, mix)
    with pytest.raises(GeometryError):
        backward(m, trace, np.zeros((2, 9, 6)))


def test_backward_zero_upstream_gives_zero_grads():
    m = _model()
    mix = random_mag(9, 7, seed=10)
    _, trace = forward(m, mix)
    grads = backward(m, trace, np.zeros_like(trace.outputs))
    np.testing.assert_array_equal(grads, np.zeros_like(grads))


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


def test_reconstruct_round_trips_unit_masks():
    from permsep.dsp import Waveform, istft, magnitude_phase, stft

    rng = np.random.default_rng(11)
    wav = Waveform(rng.standard_normal(800), 8000)
    spec = stft(wav, 32.0)
    mag, phase = magnitude_phase(spec)
    outs = reconstruct([mag, mag], phase)
    assert len(outs) == 2
    reference = istft(spec)
    np.testing.assert_allclose(outs[0].samples, reference.samples, atol=1e-12)
    assert len(outs[0]) == 800


def test_reconstruct_checks_geometry():
    from permsep.dsp import Waveform, magnitude_phase, stft

    mag, phase = magnitude_phase(stft(Waveform(np.ones(800), 8000), 32.0))
    with pytest.raises(GeometryError):
        reconstruct([mag], phase[:-1, :])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = _model(f=9, h=4, n_sources=2)
    m.gamma = GammaParam(1.25, trainable=True)
    adam = Adam(m.n_params + 1, 3e-4)
    adam.m[:] = np.random.default_rng(12).standard_normal(adam.m.size)
    adam.v[:] = np.abs(np.random.default_rng(13).standard_normal(adam.v.size))
    adam.t = 17
    opt_state = adam.state_dict()
    opt_state["lr"] = 2.1e-4

    path = tmp_path / "ck.json"
    save_checkpoint(
        path,
        m,
        optimizer=opt_state,
        trainer_state={"schedule_history": [0.001], "prev_cv_loss": 4.0,
                       "prev_selections": {"a": 0}},
        epoch=17,
        config_hash="abc123",
    )
    ck = load_checkpoint(path)
    m2 = ck["model"]
    np.testing.assert_array_equal(m2.params, m.params)
    assert m2.config_dict() == m.config_dict()
    assert m2.gamma.value == 1.25 and m2.gamma.trainable
    np.testing.assert_array_equal(ck["optimizer"]["m"], adam.m)
    np.testing.assert_array_equal(ck["optimizer"]["v"], adam.v)
    assert ck["optimizer"]["t"] == 17
    assert ck["optimizer"]["lr"] == 2.1e-4
    assert ck["epoch"] == 17
    assert ck["config_hash"] == "abc123"
    assert ck["trainer_state"]["prev_selections"] == {"a": 0}


def test_checkpoint_rejects_corruption(tmp_path):
    m = _model()
    path = tmp_path / "ck.json"
    save_checkpoint(path, m, epoch=1)

    import json

    blob = json.loads(path.read_text())
    blob["format_version"] = 99
    bad = tmp_path / "bad_version.json"
    bad.write_text(json.dumps(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    blob = json.loads(path.read_text())
    blob["model"]["n_freq"] = 50  # params no longer match the declared shape
    bad2 = tmp_path / "bad_shape.json"
    bad2.write_text(json.dumps(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad2)

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
