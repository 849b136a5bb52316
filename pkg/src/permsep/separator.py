"""Mask-estimation separator: 2-layer LSTM, optional softmax, S mask heads.

The network maps a mixture magnitude spectrogram (T, F) to S logistic
masks that multiply the mixture magnitude elementwise. Parameters live in
one flat float64 vector with named views, so the optimizer treats the
whole model (plus gamma, appended by the trainer) as a single array.

`forward` records everything `backward` needs in a ForwardTrace;
`backward` consumes a gradient on the output grids and returns the exact
analytic gradient over the flat parameter vector via backprop through
time (verified against central finite differences in the tests).
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from ._recurrence import lstm_backward, lstm_forward
from .dsp import MagSpectrogram, istft, rebuild_complex, same_geometry
from .errors import CheckpointError, ConfigurationError, GeometryError
from .losses import GammaParam
from .seeding import derive_seed

CHECKPOINT_VERSION = 1


def _sigmoid(x):
    """Logistic function, stable for large |x|."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class SeparatorModel:
    """Configuration plus the flat parameter store.

    Parameter layout (names map to slices of `params`):
        lstm1.w_in (4H, F)   lstm1.w_rec (4H, H)   lstm1.bias (4H,)
        lstm2.w_in (4H, H)   lstm2.w_rec (4H, H)   lstm2.bias (4H,)
        head{s}.weight (F, H)   head{s}.bias (F,)   for s in 0..S-1

    Initialization draws each tensor from uniform(-1/sqrt(fan_in),
    1/sqrt(fan_in)); fan_in is the input width for input weights and the
    hidden width for recurrent weights, heads, and biases.
    """

    def __init__(self, n_freq, hidden, n_sources=2, softmax_after_recurrent=True,
                 dropout_rate=0.2, init_seed=0, gamma=None):
        if n_freq < 1 or hidden < 1:
            raise ConfigurationError(f"n_freq={n_freq}, hidden={hidden} must be >= 1")
        if not 1 <= n_sources <= 8:
            raise ConfigurationError(f"n_sources must be in 1..8, got {n_sources}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        self.n_freq = int(n_freq)
        self.hidden = int(hidden)
        self.n_sources = int(n_sources)
        self.softmax_after_recurrent = bool(softmax_after_recurrent)
        self.dropout_rate = float(dropout_rate)
        self.gamma = gamma if gamma is not None else GammaParam(0.0)

        f, h, s = self.n_freq, self.hidden, self.n_sources
        spec = [
            ("lstm1.w_in", (4 * h, f), f),
            ("lstm1.w_rec", (4 * h, h), h),
            ("lstm1.bias", (4 * h,), h),
            ("lstm2.w_in", (4 * h, h), h),
            ("lstm2.w_rec", (4 * h, h), h),
            ("lstm2.bias", (4 * h,), h),
        ]
        for k in range(s):
            spec.append((f"head{k}.weight", (f, h), h))
            spec.append((f"head{k}.bias", (f,), h))
        self._index = {}
        offset = 0
        for name, shape, fan_in in spec:
            size = int(np.prod(shape))
            self._index[name] = (slice(offset, offset + size), shape, fan_in)
            offset += size
        self.params = np.zeros(offset, dtype=np.float64)
        self.init_params(init_seed)

    @property
    def n_params(self):
        return self.params.size

    def param_names(self):
        return list(self._index)

    def view(self, name):
        """Writable view of one named tensor inside the flat store."""
        sl, shape, _ = self._index[name]
        return self.params[sl].reshape(shape)

    def init_params(self, seed):
        rng = np.random.default_rng(derive_seed(seed, "init"))
        for name, (sl, shape, fan_in) in self._index.items():
            bound = 1.0 / np.sqrt(fan_in)
            self.params[sl] = rng.uniform(-bound, bound, self.params[sl].size)

    def fingerprint(self):
        """Cheap stamp of the current parameter values for stale-trace checks."""
        return (float(self.params.sum()), float(np.dot(self.params, self.params)))

    def config_dict(self):
        return {
            "n_freq": self.n_freq,
            "hidden": self.hidden,
            "n_sources": self.n_sources,
            "softmax_after_recurrent": self.softmax_after_recurrent,
            "dropout_rate": self.dropout_rate,
        }


@dataclass
class ForwardTrace:
    """Every intermediate `backward` needs, plus staleness bookkeeping."""

    mode: str
    y: np.ndarray
    ifog1: np.ndarray = field(repr=False, default=None)
    c1: np.ndarray = field(repr=False, default=None)
    tc1: np.ndarray = field(repr=False, default=None)
    h1: np.ndarray = field(repr=False, default=None)
    in2: np.ndarray = field(repr=False, default=None)  # layer-2 input (dropout applied)
    ifog2: np.ndarray = field(repr=False, default=None)
    c2: np.ndarray = field(repr=False, default=None)
    tc2: np.ndarray = field(repr=False, default=None)
    h2: np.ndarray = field(repr=False, default=None)
    mask1: np.ndarray = field(repr=False, default=None)  # scaled dropout masks
    mask2: np.ndarray = field(repr=False, default=None)
    p: np.ndarray = field(repr=False, default=None)  # head input (post-softmax)
    sig: np.ndarray = field(repr=False, default=None)  # (S, T, F) logistic masks
    outputs: np.ndarray = field(repr=False, default=None)  # (S, T, F)
    fingerprint: tuple = None


def forward(model, mixture_mag, mode="eval", seed=0):
    """Run the separator on one utterance.

    Args:
        model: SeparatorModel.
        mixture_mag: MagSpectrogram with n_bins == model.n_freq.
        mode: "train" applies inverted dropout to each LSTM layer's
            output; "eval" is deterministic.
        seed: dropout seed (ignored in eval mode).

    Returns:
        (outputs, trace): outputs is a list of S MagSpectrograms, each
        the mixture magnitude under one estimated mask; trace feeds
        `backward`.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mixture_mag.n_bins != model.n_freq:
        raise GeometryError(
            f"spectrogram has {mixture_mag.n_bins} bins, model expects {model.n_freq}"
        )
    y = mixture_mag.frames
    t_len = y.shape[0]
    rate = model.dropout_rate
    rng = np.random.default_rng(derive_seed(seed, "dropout")) if mode == "train" else None

    def dropout_mask(shape):
        if mode != "train" or rate == 0.0:
            return None
        return (rng.random(shape) >= rate).astype(np.float64) / (1.0 - rate)

    trace = ForwardTrace(mode=mode, y=y)

    zx1 = y @ model.view("lstm1.w_in").T + model.view("lstm1.bias")
    trace.ifog1, trace.c1, trace.tc1, trace.h1 = lstm_forward(zx1, model.view("lstm1.w_rec"))
    trace.mask1 = dropout_mask(trace.h1.shape)
    trace.in2 = trace.h1 if trace.mask1 is None else trace.h1 * trace.mask1

    zx2 = trace.in2 @ model.view("lstm2.w_in").T + model.view("lstm2.bias")
    trace.ifog2, trace.c2, trace.tc2, trace.h2 = lstm_forward(zx2, model.view("lstm2.w_rec"))
    trace.mask2 = dropout_mask(trace.h2.shape)
    r = trace.h2 if trace.mask2 is None else trace.h2 * trace.mask2

    if model.softmax_after_recurrent:
        shifted = np.exp(r - r.max(axis=1, keepdims=True))
        trace.p = shifted / shifted.sum(axis=1, keepdims=True)
    else:
        trace.p = r

    sig = np.empty((model.n_sources, t_len, model.n_freq))
    outputs = np.empty_like(sig)
    for s in range(model.n_sources):
        logits = trace.p @ model.view(f"head{s}.weight").T + model.view(f"head{s}.bias")
        sig[s] = _sigmoid(logits)
        outputs[s] = sig[s] * y
    trace.sig = sig
    trace.outputs = outputs
    trace.fingerprint = model.fingerprint()
    return [mixture_mag.with_frames(outputs[s]) for s in range(model.n_sources)], trace


def backward(model, trace, grad_wrt_outputs):
    """Exact gradient over the flat parameter vector.

    Args:
        model: the SeparatorModel `trace` came from, with unchanged
            parameters (a stale trace raises GeometryError).
        trace: ForwardTrace from `forward`.
        grad_wrt_outputs: (S, T, F) gradient of the scalar being
            differentiated w.r.t. the output grids.

    Returns:
        Flat (n_params,) gradient aligned with model.params.
    """
    if trace.fingerprint != model.fingerprint():
        raise GeometryError("trace is stale: model parameters changed since forward")
    g = np.asarray(grad_wrt_outputs, dtype=np.float64)
    if g.shape != trace.outputs.shape:
        raise GeometryError(
            f"gradient shape {g.shape} != outputs shape {trace.outputs.shape}"
        )
    grads = np.zeros_like(model.params)

    def gview(name):
        sl, shape, _ = model._index[name]
        return grads[sl].reshape(shape)

    t_len = trace.y.shape[0]
    dp = np.zeros_like(trace.p)
    for s in range(model.n_sources):
        dmask = g[s] * trace.y
        dlogits = dmask * trace.sig[s] * (1.0 - trace.sig[s])
        gview(f"head{s}.weight")[:] = dlogits.T @ trace.p
        gview(f"head{s}.bias")[:] = dlogits.sum(axis=0)
        dp += dlogits @ model.view(f"head{s}.weight")

    if model.softmax_after_recurrent:
        dr = trace.p * (dp - np.sum(dp * trace.p, axis=1, keepdims=True))
    else:
        dr = dp
    dh2 = dr if trace.mask2 is None else dr * trace.mask2

    ut2 = np.ascontiguousarray(model.view("lstm2.w_rec").T)
    dz2 = lstm_backward(dh2, trace.ifog2, trace.c2, trace.tc2, ut2)
    h2_prev = np.zeros_like(trace.h2)
    if t_len > 1:
        h2_prev[1:] = trace.h2[:-1]
    gview("lstm2.w_in")[:] = dz2.T @ trace.in2
    gview("lstm2.w_rec")[:] = dz2.T @ h2_prev
    gview("lstm2.bias")[:] = dz2.sum(axis=0)
    din2 = dz2 @ model.view("lstm2.w_in")

    dh1 = din2 if trace.mask1 is None else din2 * trace.mask1
    ut1 = np.ascontiguousarray(model.view("lstm1.w_rec").T)
    dz1 = lstm_backward(dh1, trace.ifog1, trace.c1, trace.tc1, ut1)
    h1_prev = np.zeros_like(trace.h1)
    if t_len > 1:
        h1_prev[1:] = trace.h1[:-1]
    gview("lstm1.w_in")[:] = dz1.T @ trace.y
    gview("lstm1.w_rec")[:] = dz1.T @ h1_prev
    gview("lstm1.bias")[:] = dz1.sum(axis=0)
    return grads


def reconstruct(outputs, mixture_phase):
    """Waveforms from separated magnitude grids plus the mixture phase.

    All outputs must share one geometry; the phase array must match it.
    """
    if not outputs:
        raise GeometryError("no outputs to reconstruct")
    first = outputs[0]
    for other in outputs[1:]:
        if not same_geometry(first, other):
            raise GeometryError("outputs disagree on spectrogram geometry")
    return [istft(rebuild_complex(mag, mixture_phase)) for mag in outputs]


def _encode(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _decode(text):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


def save_checkpoint(path, model, optimizer=None, trainer_state=None, epoch=0,
                    config_hash=None):
    """Write a bit-exact JSON checkpoint.

    Float arrays are base64-encoded little-endian float64, so a
    save/load cycle reproduces every value exactly. `optimizer` is a
    dict with m/v/t/lr (see trainer.Adam.state_dict); `trainer_state`
    holds schedule history, previous selections, and similar loop state.
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config_dict(),
        "params": _encode(model.params),
        "gamma": {
            "value": model.gamma.value,
            "trainable": model.gamma.trainable,
            "epsilon_floor": model.gamma.epsilon_floor,
            "lower_bound": model.gamma.lower_bound,
        },
        "optimizer": None,
        "trainer_state": trainer_state,
        "epoch": int(epoch),
        "config_hash": config_hash,
    }
    if optimizer is not None:
        payload["optimizer"] = {
            "m": _encode(optimizer["m"]),
            "v": _encode(optimizer["v"]),
            "t": int(optimizer["t"]),
            "lr": float(optimizer["lr"]),
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns a dict with a rebuilt `model`.

    Raises CheckpointError on version or size mismatches.
    """
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    gamma_cfg = payload["gamma"]
    gamma = GammaParam(
        value=gamma_cfg["value"],
        trainable=gamma_cfg["trainable"],
        epsilon_floor=gamma_cfg["epsilon_floor"],
        lower_bound=gamma_cfg["lower_bound"],
    )
    model = SeparatorModel(gamma=gamma, **payload["model"])
    params = _decode(payload["params"])
    if params.size != model.n_params:
        raise CheckpointError(
            f"checkpoint has {params.size} parameters, model wants {model.n_params}"
        )
    model.params[:] = params
    optimizer = None
    if payload.get("optimizer") is not None:
        opt = payload["optimizer"]
        optimizer = {
            "m": _decode(opt["m"]),
            "v": _decode(opt["v"]),
            "t": opt["t"],
            "lr": opt["lr"],
        }
    return {
        "model": model,
        "optimizer": optimizer,
        "trainer_state": payload.get("trainer_state"),
        "epoch": payload["epoch"],
        "config_hash": payload.get("config_hash"),
    }
