"""Per-utterance training loop with Adam and a patience LR schedule.

The loop maximizes the selected objective by stepping Adam along its
negated gradient, one update per utterance. Gamma, when trainable, sits
in an extra slot of the same optimizer vector and is projected back to
its lower bound after every step.

All randomness (epoch shuffles, dropout masks) is derived statelessly
from (config.seed, epoch, example index), which is what makes resuming
from a checkpoint bit-exact: nothing depends on how many draws happened
before.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .dsp import magnitude_phase, read_wav, stft
from .errors import ConfigurationError, GeometryError, NonFiniteLossError
from .losses import make_loss
from .permutation import error_table
from .seeding import derive_seed, rng_for
from .separator import backward, forward, load_checkpoint, save_checkpoint

LOSS_MODES = ("pit", "softmin_const", "softmin_trainable")


class Adam:
    """Adam with bias correction, operating in place on a flat vector."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params, grad):
        """One descent step along `grad`; `params` is updated in place."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t, "lr": self.lr}

    @classmethod
    def from_state(cls, state, beta1=0.9, beta2=0.999, eps=1e-8):
        adam = cls(state["m"].size, state["lr"], beta1, beta2, eps)
        adam.m[:] = state["m"]
        adam.v[:] = state["v"]
        adam.t = int(state["t"])
        return adam


def lr_schedule_step(prev_cv, curr_cv, history, lr, threshold=0.003, factor=0.7):
    """Patience schedule on cross-validation loss.

    `history` is the mutable list of consecutive sub-threshold
    improvements; an improvement of at least `threshold` clears it.
    Two consecutive small improvements decay the rate by `factor` and
    reset the history, so four sub-threshold epochs in a row decay
    twice.

    Returns the (possibly decayed) learning rate.
    """
    improvement = prev_cv - curr_cv
    if improvement < threshold:
        history.append(improvement)
    else:
        history.clear()
    if len(history) >= 2:
        history.clear()
        return lr * factor
    return lr


def flip_rate(prev_selections, selections):
    """Fraction of examples whose best permutation changed."""
    if set(prev_selections) != set(selections):
        raise ValueError("selection dicts cover different examples")
    if not selections:
        return 0.0
    changed = sum(1 for k in selections if selections[k] != prev_selections[k])
    return changed / len(selections)


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 5e-4
    lr_decay_factor: float = 0.7
    cv_improvement_threshold: float = 3e-3
    loss_mode: str = "pit"
    gamma_init: float = 0.0
    reduction: str = "sum"
    normalization: str = "paper_eq17"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must be in (0, 1]")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}"
            )
        if self.gamma_init < 0:
            raise ConfigurationError("gamma_init must be >= 0")
        if self.reduction not in ("sum", "mean"):
            raise ConfigurationError(f"bad reduction {self.reduction!r}")


@dataclass
class EpochRecord:
    """One row of the training log.

    learning_rate is the rate in effect during the epoch; the schedule
    update it may trigger applies from the next epoch. flip_rate is 0.0
    on the first epoch (nothing to compare against).
    """

    epoch: int
    train_objective: float
    cv_objective: float
    learning_rate: float
    gamma: float
    flip_rate: float
    wall_time_s: float

    FIELDS = ("epoch", "train_objective", "cv_objective", "learning_rate",
              "gamma", "flip_rate", "wall_time_s")

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass
class Utterance:
    """Precomputed features for one example."""

    example_id: str
    mix_mag: object
    source_mags: np.ndarray  # (S, T, F)


def load_split(manifest, split, frame_ms=32.0):
    """Read a manifest split and precompute magnitude features."""
    utterances = []
    for entry in manifest.splits.get(split, []):
        mix = read_wav(manifest.resolve(entry.mixture_path),
                       expected_rate=manifest.sample_rate)
        mix_mag, _ = magnitude_phase(stft(mix, frame_ms))
        mags = []
        for rel in entry.source_paths:
            src = read_wav(manifest.resolve(rel), expected_rate=manifest.sample_rate)
            mag, _ = magnitude_phase(stft(src, frame_ms))
            if mag.frames.shape != mix_mag.frames.shape:
                raise GeometryError(
                    f"{entry.example_id}: source grid {mag.frames.shape} vs "
                    f"mixture {mix_mag.frames.shape}"
                )
            mags.append(mag.frames)
        utterances.append(Utterance(entry.example_id, mix_mag, np.stack(mags)))
    return utterances


def _check_gamma_mode(model, config):
    if config.loss_mode == "softmin_trainable" and not model.gamma.trainable:
        raise ConfigurationError(
            "loss_mode softmin_trainable needs a trainable gamma on the model"
        )


def evaluate_objective(model, utterances, loss_fn, reduction="sum"):
    """Mean objective over a split, dropout off."""
    if not utterances:
        raise ConfigurationError("cannot evaluate an empty split")
    total = 0.0
    for utt in utterances:
        _, trace = forward(model, utt.mix_mag, mode="eval")
        table = error_table(list(utt.source_mags), list(trace.outputs), reduction)
        total += loss_fn(table).objective
    return total / len(utterances)


def export_error_pairs(model, utterances, reduction="sum"):
    """Per-utterance permutation errors for two-source models.

    Returns (example_id, error_identity, error_swap) tuples from a
    deterministic eval-mode forward; handy for scatter plots of the
    permutation landscape.
    """
    if model.n_sources != 2:
        raise ConfigurationError("error pairs are defined for 2-source models")
    rows = []
    for utt in utterances:
        _, trace = forward(model, utt.mix_mag, mode="eval")
        table = error_table(list(utt.source_mags), list(trace.outputs), reduction)
        rows.append((utt.example_id, float(table.errors[0]), float(table.errors[1])))
    return rows


@dataclass
class _LoopState:
    lr: float
    schedule_history: list = field(default_factory=list)
    prev_cv_loss: float = None
    prev_selections: dict = None
    epochs_done: int = 0


def _run_epochs(model, train_set, dev_set, config, adam, state,
                checkpoint_dir=None, config_hash=None, log_cb=None):
    if not train_set:
        raise ConfigurationError("training split is empty")
    _check_gamma_mode(model, config)
    loss_fn = make_loss(config.loss_mode, model.gamma, config.normalization)
    gamma_trained = config.loss_mode == "softmin_trainable"
    n_p = model.n_params
    vec = np.empty(n_p + 1)
    grad = np.empty(n_p + 1)
    records = []
    for epoch in range(state.epochs_done + 1, config.epochs + 1):
        tic = time.perf_counter()
        order = rng_for(config.seed, "shuffle", epoch).permutation(len(train_set))
        selections = {}
        total_obj = 0.0
        for idx in order:
            idx = int(idx)
            utt = train_set[idx]
            _, trace = forward(
                model, utt.mix_mag, mode="train",
                seed=derive_seed(config.seed, "dropout", epoch, idx),
            )
            table = error_table(list(utt.source_mags), list(trace.outputs),
                                config.reduction)
            res = loss_fn(table)
            grad_theta = backward(model, trace, res.grad_wrt_outputs)
            if not np.isfinite(res.objective) or not np.all(np.isfinite(grad_theta)) \
                    or not np.isfinite(res.grad_wrt_gamma):
                raise NonFiniteLossError(
                    f"non-finite objective or gradient at epoch {epoch}",
                    example_id=utt.example_id,
                )
            vec[:n_p] = model.params
            vec[n_p] = model.gamma.value
            grad[:n_p] = -grad_theta
            grad[n_p] = -res.grad_wrt_gamma if gamma_trained else 0.0
            adam.lr = state.lr
            adam.step(vec, grad)
            model.params[:] = vec[:n_p]
            if gamma_trained:
                model.gamma.value = float(vec[n_p])
                model.gamma.project()
            selections[utt.example_id] = table.argmin_index
            total_obj += res.objective
        cv_obj = evaluate_objective(model, dev_set, loss_fn, config.reduction)
        fr = 0.0
        if state.prev_selections is not None:
            fr = flip_rate(state.prev_selections, selections)
        lr_used = state.lr
        cv_loss = -cv_obj
        if state.prev_cv_loss is not None:
            state.lr = lr_schedule_step(
                state.prev_cv_loss, cv_loss, state.schedule_history, state.lr,
                threshold=config.cv_improvement_threshold,
                factor=config.lr_decay_factor,
            )
        state.prev_cv_loss = cv_loss
        state.prev_selections = selections
        state.epochs_done = epoch
        record = EpochRecord(
            epoch=epoch,
            train_objective=total_obj / len(train_set),
            cv_objective=cv_obj,
            learning_rate=lr_used,
            gamma=model.gamma.value,
            flip_rate=fr,
            wall_time_s=time.perf_counter() - tic,
        )
        records.append(record)
        if log_cb is not None:
            log_cb(record)
        if checkpoint_dir is not None:
            opt_state = adam.state_dict()
            opt_state["lr"] = state.lr
            save_checkpoint(
                f"{checkpoint_dir}/epoch{epoch:03d}.json",
                model,
                optimizer=opt_state,
                trainer_state={
                    "schedule_history": list(state.schedule_history),
                    "prev_cv_loss": state.prev_cv_loss,
                    "prev_selections": state.prev_selections,
                },
                epoch=epoch,
                config_hash=config_hash,
            )
    return records


def train(model, train_set, dev_set, config, checkpoint_dir=None,
          config_hash=None, log_cb=None):
    """Train from scratch; returns the list of EpochRecords.

    The model is updated in place. When `checkpoint_dir` is given, a
    full checkpoint is written after every epoch.
    """
    adam = Adam(model.n_params + 1, config.learning_rate)
    state = _LoopState(lr=config.learning_rate)
    return _run_epochs(model, train_set, dev_set, config, adam, state,
                       checkpoint_dir, config_hash, log_cb)


def resume_training(checkpoint_path, train_set, dev_set, config,
                    checkpoint_dir=None, config_hash=None, log_cb=None):
    """Continue a run from a checkpoint, bit-exact with the unbroken run.

    Returns (model, records) where records cover only the newly run
    epochs; epoch numbering continues from the checkpoint.
    """
    ck = load_checkpoint(checkpoint_path)
    if ck["optimizer"] is None:
        raise ConfigurationError(
            f"{checkpoint_path} carries no optimizer state; cannot resume"
        )
    model = ck["model"]
    adam = Adam.from_state(ck["optimizer"])
    ts = ck["trainer_state"] or {}
    state = _LoopState(
        lr=ck["optimizer"]["lr"],
        schedule_history=list(ts.get("schedule_history", [])),
        prev_cv_loss=ts.get("prev_cv_loss"),
        prev_selections=ts.get("prev_selections"),
        epochs_done=ck["epoch"],
    )
    records = _run_epochs(model, train_set, dev_set, config, adam, state,
                          checkpoint_dir, config_hash, log_cb)
    return model, records
