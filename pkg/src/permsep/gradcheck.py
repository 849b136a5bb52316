"""Finite-difference verification of the analytic gradients.

Central differences with step 1e-5 against tiny random problems. Errors
are reported as |a - n| / max(|a| + |n|, 1e-3), which behaves like a
relative error for real-sized components while absorbing FD roundoff
noise on near-zero ones; the pass threshold is 1e-4.

Hard-min objectives are piecewise smooth, so cases where the two best
permutations are close enough for an FD step to cross the boundary are
redrawn (the analytic gradient is correct there, the numeric one is
garbage).

`run_gradcheck(corrupt="sign_flip")` flips the sign of the largest
analytic gradient component before comparing, as a negative control:
the suite must fail loudly on a wrong gradient.
"""

from dataclasses import dataclass

import numpy as np

from .dsp import MagSpectrogram
from .losses import GammaParam, make_loss
from .permutation import error_table
from .seeding import derive_seed
from .separator import SeparatorModel, backward, forward

FD_STEP = 1e-5
TOLERANCE = 1e-4
ERROR_FLOOR = 1e-3
# Minimum gap between the two best permutation errors for hard-min cases.
_TIE_MARGIN = 1e-3

MODES = ("pit", "softmin_const", "softmin_trainable")


def central_difference(fn, x, h=FD_STEP):
    """Numeric gradient of scalar fn at x, one central difference per entry."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=ERROR_FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))


def _gamma_for(mode, rng):
    if mode == "pit":
        return GammaParam(0.0)
    value = float(rng.uniform(0.2, 4.0))
    return GammaParam(value, trainable=(mode == "softmin_trainable"))


def _min_gap(errors):
    if errors.size < 2:
        return np.inf
    top = np.sort(errors)[:2]
    return float(top[1] - top[0])


def _loss_case(seed, mode):
    """Max error over output-grid and gamma gradients at the loss level."""
    for attempt in range(50):
        rng = np.random.default_rng(derive_seed(seed, "losscase", attempt))
        n_sources = int(rng.choice([2, 3]))
        t_len, n_freq = 3, 2
        reduction = str(rng.choice(["sum", "mean"]))
        labels = rng.uniform(0.0, 2.0, (n_sources, t_len, n_freq))
        outputs = rng.uniform(0.0, 2.0, (n_sources, t_len, n_freq))
        gamma = _gamma_for(mode, rng)
        table = error_table(list(labels), list(outputs), reduction)
        if mode == "pit" and _min_gap(table.errors) < _TIE_MARGIN:
            continue
        loss_fn = make_loss(mode, gamma)
        res = loss_fn(table)

        def objective_of_outputs(flat):
            grids = flat.reshape(outputs.shape)
            return make_loss(mode, gamma)(
                error_table(list(labels), list(grids), reduction)
            ).objective

        numeric = central_difference(objective_of_outputs, outputs.ravel())
        worst = max_relative_error(res.grad_wrt_outputs.ravel(), numeric)

        if mode == "softmin_trainable":
            def objective_of_gamma(g):
                probe = GammaParam(float(g[0]), trainable=True)
                return make_loss(mode, probe)(
                    error_table(list(labels), list(outputs), reduction)
                ).objective

            numeric_gamma = central_difference(
                objective_of_gamma, np.array([gamma.value])
            )
            worst = max(
                worst,
                max_relative_error(
                    np.array([res.grad_wrt_gamma]), numeric_gamma
                ),
            )
        return worst
    raise RuntimeError(f"could not draw a tie-free case for seed {seed}")


def _end_to_end_case(seed, mode, corrupt=None):
    """Max error over all model parameters (and gamma) through the network."""
    t_len, n_freq, hidden, n_sources = 6, 5, 4, 2
    frame_len, hop = 8, 4
    for attempt in range(50):
        rng = np.random.default_rng(derive_seed(seed, "e2ecase", attempt))
        softmax = bool(rng.integers(2))
        dropout = float(rng.choice([0.0, 0.3]))
        gamma = _gamma_for(mode, rng)
        model = SeparatorModel(
            n_freq, hidden, n_sources,
            softmax_after_recurrent=softmax,
            dropout_rate=dropout,
            init_seed=derive_seed(seed, "init", attempt),
            gamma=gamma,
        )
        mag = MagSpectrogram(
            frames=rng.uniform(0.0, 1.5, (t_len, n_freq)),
            frame_len=frame_len, hop=hop,
            sample_rate=8000, n_samples=t_len * hop,
        )
        labels = rng.uniform(0.0, 1.5, (n_sources, t_len, n_freq))
        drop_seed = derive_seed(seed, "dropmask", attempt)
        loss_fn = make_loss(mode, gamma)

        def objective_of_params(flat):
            saved = model.params.copy()
            model.params[:] = flat
            _, trace = forward(model, mag, mode="train", seed=drop_seed)
            value = loss_fn(
                error_table(list(labels), list(trace.outputs), "sum")
            ).objective
            model.params[:] = saved
            return value

        _, trace = forward(model, mag, mode="train", seed=drop_seed)
        table = error_table(list(labels), list(trace.outputs), "sum")
        if mode == "pit" and _min_gap(table.errors) < _TIE_MARGIN:
            continue
        res = loss_fn(table)
        analytic = backward(model, trace, res.grad_wrt_outputs)
        if corrupt == "sign_flip":
            j = int(np.argmax(np.abs(analytic)))
            analytic = analytic.copy()
            analytic[j] = -analytic[j]
        numeric = central_difference(objective_of_params, model.params.copy())
        worst = max_relative_error(analytic, numeric)

        if mode == "softmin_trainable":
            def objective_of_gamma(g):
                probe = GammaParam(float(g[0]), trainable=True)
                return make_loss(mode, probe)(
                    error_table(list(labels), list(trace.outputs), "sum")
                ).objective

            numeric_gamma = central_difference(
                objective_of_gamma, np.array([gamma.value])
            )
            worst = max(
                worst,
                max_relative_error(np.array([res.grad_wrt_gamma]), numeric_gamma),
            )
        return worst
    raise RuntimeError(f"could not draw a tie-free case for seed {seed}")


@dataclass
class SuiteResult:
    suite: str
    mode: str
    n_seeds: int
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def run_gradcheck(n_seeds=100, modes=MODES, corrupt=None, base_seed=0):
    """Run both suites over every mode.

    Args:
        n_seeds: random cases per (suite, mode).
        modes: loss modes to cover.
        corrupt: None for the real check; "sign_flip" flips the largest
            analytic component in one end-to-end case so the suite must
            report a failure (negative control).
        base_seed: offsets the case seeds.

    Returns:
        list of SuiteResult.
    """
    results = []
    for mode in modes:
        worst = max(
            _loss_case(derive_seed(base_seed, "loss", k), mode)
            for k in range(n_seeds)
        )
        results.append(SuiteResult("loss_gradients", mode, n_seeds, worst, TOLERANCE))
    for mode in modes:
        worst = max(
            _end_to_end_case(derive_seed(base_seed, "e2e", k), mode, corrupt=corrupt)
            for k in range(n_seeds)
        )
        results.append(SuiteResult("end_to_end", mode, n_seeds, worst, TOLERANCE))
    return results
