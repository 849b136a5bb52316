"""Source-to-output permutations and per-permutation error tables.

The error table is the shared currency between the separator and every
loss: errors[i] is the reduced squared distance between the labels and
the outputs reordered by permutation i. Tables built by `error_table`
keep references to the label/output grids so losses can form analytic
gradients; synthetic tables (`PermutationErrorTable.from_errors`) carry
errors only and yield no output gradient.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

MAX_SOURCES = 8


@dataclass(frozen=True)
class Permutation:
    """Bijection from source slot s to output index mapping[s]."""

    mapping: tuple

    def __post_init__(self):
        m = tuple(int(v) for v in self.mapping)
        object.__setattr__(self, "mapping", m)
        if sorted(m) != list(range(len(m))):
            raise ValueError(f"not a permutation of 0..{len(m) - 1}: {m}")

    def __len__(self):
        return len(self.mapping)

    def inverse(self):
        inv = [0] * len(self.mapping)
        for s, j in enumerate(self.mapping):
            inv[j] = s
        return Permutation(tuple(inv))


def enumerate_permutations(n_sources):
    """All n! permutations of range(n_sources) in lexicographic order.

    Guarded at n <= 8; the factorial table blows up past that and the
    intended use is 2-3 talkers.
    """
    if not 1 <= n_sources <= MAX_SOURCES:
        raise ValueError(f"n_sources must be in 1..{MAX_SOURCES}, got {n_sources}")
    return [Permutation(p) for p in itertools.permutations(range(n_sources))]


def apply_permutation(perm, outputs):
    """Reorder `outputs` so slot s holds outputs[perm.mapping[s]]."""
    if len(perm) != len(outputs):
        raise GeometryError(f"permutation of size {len(perm)} vs {len(outputs)} outputs")
    return [outputs[j] for j in perm.mapping]


def _as_grid(items, what):
    """Stack a sequence of MagSpectrograms or arrays into (S, T, F)."""
    arrays = [np.asarray(getattr(x, "frames", x), dtype=np.float64) for x in items]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise GeometryError(f"{what} shapes differ: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2:
        raise GeometryError(f"{what} must be 2-D grids, got shape {shape}")
    return np.stack(arrays)


_FACTORIALS = {math.factorial(s): s for s in range(1, MAX_SOURCES + 1)}


@dataclass
class PermutationErrorTable:
    """Squared separation errors for every permutation of one utterance.

    errors[i] corresponds to perms[i]; argmin ties break to the first
    occurrence in enumeration order. `weights` is filled in by the loss
    that consumes the table. `labels`/`outputs` are (S, T, F) stacks kept
    for gradient computation and are None on synthetic tables.
    """

    errors: np.ndarray
    perms: list
    argmin_index: int
    reduction: str = "sum"
    weights: np.ndarray = None
    labels: np.ndarray = field(default=None, repr=False)
    outputs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if self.errors.ndim != 1 or self.errors.size != len(self.perms):
            raise GeometryError(
                f"errors shape {self.errors.shape} vs {len(self.perms)} permutations"
            )
        if self.errors.size == 0:
            raise GeometryError("empty error table")
        if not np.all(np.isfinite(self.errors)) or self.errors.min() < 0:
            raise ValueError("errors must be finite and nonnegative")

    @property
    def n_sources(self):
        return len(self.perms[0])

    @property
    def min_error(self):
        return float(self.errors[self.argmin_index])

    @property
    def element_count(self):
        """Entries reduced into each errors[i]; scales `mean` gradients."""
        if self.labels is None:
            return None
        return int(np.prod(self.labels.shape))

    @classmethod
    def from_errors(cls, errors, reduction="sum"):
        """Synthetic table from raw error values (no grids, no gradients).

        The source count is inferred from len(errors), which must be a
        factorial <= 8!.
        """
        errors = np.asarray(errors, dtype=np.float64)
        s = _FACTORIALS.get(errors.size)
        if s is None:
            raise ValueError(f"table size {errors.size} is not a factorial <= {MAX_SOURCES}!")
        return cls(
            errors=errors,
            perms=enumerate_permutations(s),
            argmin_index=int(np.argmin(errors)),
            reduction=reduction,
        )


def error_table(labels, outputs, reduction="sum"):
    """Build the full permutation error table for one utterance.

    Args:
        labels: S reference magnitude grids (MagSpectrogram or (T, F) arrays).
        outputs: S separator output grids, same shape as the labels.
        reduction: "sum" reduces each pairing by plain summation of squared
            differences; "mean" divides by the total entry count S*T*F.

    Returns:
        PermutationErrorTable over all S! permutations, errors[i] being the
        reduction of sum_s ||X_s - O_{perm_i(s)}||^2.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    x = _as_grid(labels, "labels")
    o = _as_grid(outputs, "outputs")
    if x.shape != o.shape:
        raise GeometryError(f"labels shape {x.shape} != outputs shape {o.shape}")
    s = x.shape[0]
    if not 1 <= s <= MAX_SOURCES:
        raise GeometryError(f"source count must be in 1..{MAX_SOURCES}, got {s}")
    # Pairwise grid first: D[s, j] = ||X_s - O_j||^2, then each permutation
    # is a sum of S table lookups instead of a fresh (T, F) reduction.
    diff = x[:, None, :, :] - o[None, :, :, :]
    pair = np.einsum("sjtf,sjtf->sj", diff, diff)
    perms = enumerate_permutations(s)
    errors = np.array([pair[np.arange(s), p.mapping].sum() for p in perms])
    if reduction == "mean":
        errors = errors / x.size
    return PermutationErrorTable(
        errors=errors,
        perms=perms,
        argmin_index=int(np.argmin(errors)),
        reduction=reduction,
        labels=x,
        outputs=o,
    )


def soft_assignment(table, weights):
    """Weight-averaged assignment matrix A[s, j] = sum_{i: perm_i(s)=j} w_i.

    Rows sum to sum(weights); with normalized weights A is doubly
    stochastic. This is the only permutation-dependent factor in the
    gradient of any weighted error sum.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != table.errors.shape:
        raise GeometryError(f"weights shape {weights.shape} vs errors {table.errors.shape}")
    s = table.n_sources
    mappings = np.array([p.mapping for p in table.perms])  # (S!, S)
    a = np.zeros((s, s))
    rows = np.broadcast_to(np.arange(s), mappings.shape)
    np.add.at(a, (rows, mappings), weights[:, None])
    return a


def weighted_error_gradient(table, weights):
    """Gradient of sum_i weights[i] * errors[i] w.r.t. the output grids.

    Returns an (S, T, F) array, or None for synthetic tables that carry
    no grids. For output j the gradient is
        2 * scale * (colsum_j * O_j - sum_s A[s, j] * X_s),
    with A from `soft_assignment` and scale the reduction factor.
    """
    if table.outputs is None:
        return None
    a = soft_assignment(table, weights)
    col = a.sum(axis=0)  # = sum(weights) for every j
    soft_labels = np.tensordot(a, table.labels, axes=(0, 0))  # (S_j, T, F)
    scale = 1.0 if table.reduction == "sum" else 1.0 / table.element_count
    return 2.0 * scale * (col[:, None, None] * table.outputs - soft_labels)
