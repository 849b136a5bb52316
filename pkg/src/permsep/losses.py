"""Permutation-invariant training objectives, hard and soft.

All three losses return an *objective to maximize*. With e_i the table
errors:

  pit_cost          J = -min_i e_i
  softmin_loglik    J = gamma_eff * log sum_i exp(-e_i / gamma_eff)
                      = -e_min + gamma_eff * log1p(sum_{i != argmin}
                            exp((e_min - e_i) / gamma_eff))
  trainable_loglik  J = 1/gamma_eff + logsumexp(-e / gamma_eff)
                    (the 1/gamma_eff term is dropped when
                     normalization="none")

The second form of softmin_loglik is how it is computed: exponent
arguments are <= 0, so nothing overflows no matter how large the errors
get, while a naive evaluation of the first form underflows every term to
zero once e_i / gamma is a few hundred. gamma_eff = gamma.value +
gamma.epsilon_floor keeps 1/gamma finite when a trainable gamma reaches
the lower bound; at gamma.value == 0 exactly, softmin_loglik short-
circuits to the hard-min path so it is numerically identical to
pit_cost, epsilon floor notwithstanding.

Posterior weights w_i = softmax(-e_i / gamma_eff) are written back onto
the table. Objective gradients with respect to the output grids are
-sum_i w_i grad e_i for the constant-gamma losses and that divided by
gamma_eff for the trainable one; d J / d gamma is
(sum_i w_i e_i) / gamma_eff^2, minus 1/gamma_eff^2 when the trainable
normalization term is kept.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .permutation import weighted_error_gradient


@dataclass
class GammaParam:
    """Soft-min temperature, optionally trainable.

    epsilon_floor is added to `value` wherever a division by gamma
    occurs; lower_bound is the projection target after gradient steps.
    """

    value: float
    trainable: bool = False
    epsilon_floor: float = 1e-8
    lower_bound: float = 0.0

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise ValueError(f"gamma must be finite, got {self.value}")
        if self.value < 0:
            raise ValueError(f"gamma must be >= 0, got {self.value}")
        if self.epsilon_floor <= 0:
            raise ValueError("epsilon_floor must be > 0")

    @property
    def effective(self):
        return self.value + self.epsilon_floor

    def project(self):
        """Clamp value to the feasible set after an optimizer step."""
        if self.value < self.lower_bound:
            self.value = self.lower_bound


@dataclass
class LossResult:
    """Objective value plus everything backprop needs.

    grad_wrt_outputs is (S, T, F) aligned with the separator outputs, or
    None when the table was synthetic. grad_wrt_gamma is 0.0 for modes
    that do not train gamma. The table is the input table with `weights`
    filled in.
    """

    objective: float
    table: object
    grad_wrt_outputs: np.ndarray
    grad_wrt_gamma: float
    mode: str


def _hard_min(table, mode):
    """Shared hard-minimum evaluation: J = -e_min, one-hot weights."""
    k = table.argmin_index
    weights = np.zeros_like(table.errors)
    weights[k] = 1.0
    table.weights = weights
    grad = weighted_error_gradient(table, weights)
    if grad is not None:
        grad = -grad
    return LossResult(
        objective=-float(table.errors[k]),
        table=table,
        grad_wrt_outputs=grad,
        grad_wrt_gamma=0.0,
        mode=mode,
    )


def pit_cost(table):
    """Hard-min objective: the negated error of the best permutation."""
    return _hard_min(table, "pit")


def softmin_loglik(table, gamma):
    """Constant-gamma soft-minimum objective.

    gamma.value == 0 delegates to the hard-min path bit for bit; gamma
    must be nonnegative and finite.
    """
    if gamma.value == 0.0:
        return _hard_min(table, "softmin_const")
    g = gamma.effective
    e = table.errors
    k = table.argmin_index
    d = (e[k] - e) / g  # all <= 0, d[k] == 0 exactly
    ex = np.exp(d)
    total = ex.sum()
    weights = ex / total
    table.weights = weights
    objective = -float(e[k]) + g * np.log1p(total - 1.0)
    grad = weighted_error_gradient(table, weights)
    if grad is not None:
        grad = -grad
    return LossResult(
        objective=float(objective),
        table=table,
        grad_wrt_outputs=grad,
        grad_wrt_gamma=0.0,
        mode="softmin_const",
    )


def trainable_loglik(table, gamma, normalization="paper_eq17"):
    """Soft-minimum objective with gamma as a trained parameter.

    Args:
        table: PermutationErrorTable for the utterance.
        gamma: GammaParam with trainable=True (anything else is a mode
            error); its epsilon floor keeps the objective finite when
            the value sits on the lower bound.
        normalization: "paper_eq17" keeps the + 1/gamma_eff term and its
            -1/gamma_eff^2 gradient contribution; "none" drops both.

    Returns:
        LossResult with grad_wrt_gamma populated.
    """
    if not gamma.trainable:
        raise ConfigurationError("trainable_loglik requires a trainable GammaParam")
    if normalization not in ("paper_eq17", "none"):
        raise ConfigurationError(f"unknown normalization {normalization!r}")
    g = gamma.effective
    e = table.errors
    x = -e / g
    m = x.max()
    ex = np.exp(x - m)
    total = ex.sum()
    weights = ex / total
    table.weights = weights
    lse = m + np.log(total)
    objective = lse
    grad_gamma = float(np.dot(weights, e)) / (g * g)
    if normalization == "paper_eq17":
        objective = objective + 1.0 / g
        grad_gamma -= 1.0 / (g * g)
    grad = weighted_error_gradient(table, weights)
    if grad is not None:
        grad = -grad / g
    return LossResult(
        objective=float(objective),
        table=table,
        grad_wrt_outputs=grad,
        grad_wrt_gamma=grad_gamma,
        mode="softmin_trainable",
    )


def select_test_permutation(table):
    """Hard assignment for evaluation: always the argmin permutation.

    Test-time selection ignores gamma entirely; soft weighting is a
    training-time device.
    """
    return table.perms[table.argmin_index]


def make_loss(mode, gamma, normalization="paper_eq17"):
    """Bind a loss mode name to a `table -> LossResult` callable.

    Modes: "pit", "softmin_const", "softmin_trainable".
    """
    if mode == "pit":
        return pit_cost
    if mode == "softmin_const":
        return lambda table: softmin_loglik(table, gamma)
    if mode == "softmin_trainable":
        return lambda table: trainable_loglik(table, gamma, normalization)
    raise ConfigurationError(f"unknown loss mode {mode!r}")
