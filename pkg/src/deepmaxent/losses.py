"""Training objectives on a batch of logits.

Every loss is available as a plain function of a logit matrix (used for
evaluation and tests) and can be recorded on a :class:`~deepmaxent.core.Tape`
through :func:`record_loss`. Logit matrices are ``B x N``: sites by species.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import core
from .errors import ConfigError, ContractError, DataError, DegenerateBatchError, DimensionError


class LossKind(str, enum.Enum):
    DEEPMAXENT_WEIGHTED = "deepmaxent"
    DEEPMAXENT_UNWEIGHTED = "deepmaxent-unweighted"
    POISSON = "poisson"
    CE_SPECIES = "ce"
    BCE = "bce"

    @property
    def uses_pseudocount(self) -> bool:
        return self in (LossKind.DEEPMAXENT_WEIGHTED, LossKind.DEEPMAXENT_UNWEIGHTED)


@dataclass(frozen=True)
class BatchLabels:
    """Counts for one batch.

    ``counts`` already include the pseudo-count; ``present`` is computed
    from the raw counts before it was added.
    """

    counts: np.ndarray
    present: np.ndarray
    delta: float = 0.0

    @classmethod
    def from_counts(cls, raw, delta: float = 0.0) -> "BatchLabels":
        raw = core.as_matrix(raw)
        if np.any(raw < 0):
            raise DataError("occurrence counts must be nonnegative")
        if delta < 0:
            raise ConfigError("pseudo-count delta must be >= 0")
        return cls(counts=raw + delta, present=(raw > 0).astype(np.float64), delta=float(delta))

    @property
    def species_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def site_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def _check(logits, labels: BatchLabels) -> np.ndarray:
    z = core.as_matrix(logits)
    if z.shape != labels.counts.shape:
        raise DimensionError(f"logits {z.shape} vs labels {labels.counts.shape}")
    return z


# -- Poisson --------------------------------------------------------------


def _poisson(z, y):
    bn = z.size
    lam = np.exp(z)
    return float(np.sum(lam - y * z) / bn), (lam - y) / bn


def poisson_loss(logits, labels: BatchLabels) -> float:
    z = _check(logits, labels)
    return _poisson(z, labels.counts)[0]


# -- DeepMaxent -------------------------------------------------------------


def _deepmaxent_coeff(labels: BatchLabels, weighted: bool) -> np.ndarray:
    y = labels.counts
    b, n = y.shape
    if b < 2:
        raise DegenerateBatchError("DeepMaxent loss needs at least 2 sites per batch")
    if weighted:
        return -y / (b * n)
    totals = y.sum(axis=0)
    if np.any(totals <= 0):
        bad = np.flatnonzero(totals <= 0).tolist()
        raise DataError(f"species columns {bad} have zero total in this batch; use a positive pseudo-count")
    return -(y / totals) / (b * n)


def deepmaxent_loss(logits, labels: BatchLabels, weighted: bool = True) -> float:
    """Cross-entropy between batch-normalised counts and intensities.

    With ``weighted`` the normalised label of each species is multiplied
    back by its batch total, i.e. the raw count is used directly.
    """
    z = _check(logits, labels)
    coeff = _deepmaxent_coeff(labels, weighted)
    return float(np.sum(coeff * core.batch_log_softmax_over_sites(z)))


# -- cross-entropy over species ----------------------------------------------


def _ce(z, y):
    totals = y.sum(axis=1)
    keep = totals > 0
    kept = int(keep.sum())
    if kept == 0:
        raise DataError("no site in the batch has a positive count; CE loss undefined")
    target = np.zeros_like(y)
    target[keep] = y[keep] / totals[keep, None]
    logp = core.log_softmax_over_species(z)
    val = -float(np.sum(target[keep] * logp[keep])) / kept
    # d/dz of -sum_j t_j log softmax_j = softmax * sum(t) - t, with sum(t) = 1 on kept rows
    grad = np.zeros_like(z)
    grad[keep] = (np.exp(logp[keep]) - target[keep]) / kept
    return val, grad


def ce_species_loss(logits, labels: BatchLabels) -> float:
    z = _check(logits, labels)
    return _ce(z, labels.counts)[0]


# -- binary cross-entropy ---------------------------------------------------


def _bce(z, yb):
    bn = z.size
    val = -float(np.sum(yb * core.log_sigmoid(z) + (1.0 - yb) * core.log_sigmoid(-z))) / bn
    return val, (core.sigmoid(z) - yb) / bn


def bce_loss(logits, labels: BatchLabels) -> float:
    z = _check(logits, labels)
    return _bce(z, labels.present)[0]


# -- penalty ----------------------------------------------------------------


def l2_penalty(params, tau: float) -> float:
    """``tau/2`` times the squared norm of hidden weights and species head (biases excluded)."""
    if tau < 0:
        raise ConfigError("weight decay must be >= 0")
    arrays = params.arrays()
    return 0.5 * tau * sum(float(np.sum(arrays[k] ** 2)) for k in params.penalized_names())


# -- dispatch ---------------------------------------------------------------


def loss_value(kind: LossKind, logits, labels: BatchLabels) -> float:
    kind = LossKind(kind)
    if kind is LossKind.POISSON:
        return poisson_loss(logits, labels)
    if kind is LossKind.DEEPMAXENT_WEIGHTED:
        return deepmaxent_loss(logits, labels, weighted=True)
    if kind is LossKind.DEEPMAXENT_UNWEIGHTED:
        return deepmaxent_loss(logits, labels, weighted=False)
    if kind is LossKind.CE_SPECIES:
        return ce_species_loss(logits, labels)
    return bce_loss(logits, labels)


def record_loss(tape: core.Tape, logits: int, kind: LossKind, labels: BatchLabels) -> int:
    kind = LossKind(kind)
    z = tape.value(logits)
    if z.shape != labels.counts.shape:
        raise DimensionError(f"logits {z.shape} vs labels {labels.counts.shape}")
    if kind.uses_pseudocount:
        coeff = _deepmaxent_coeff(labels, kind is LossKind.DEEPMAXENT_WEIGHTED)
        return tape.weighted_sum(tape.batch_log_softmax(logits), coeff)
    if kind is LossKind.POISSON:
        return tape.scalar_head(logits, lambda v: _poisson(v, labels.counts))
    if kind is LossKind.CE_SPECIES:
        return tape.scalar_head(logits, lambda v: _ce(v, labels.counts))
    if kind is LossKind.BCE:
        return tape.scalar_head(logits, lambda v: _bce(v, labels.present))
    raise ContractError(f"unknown loss kind {kind!r}")


def record_penalty(tape: core.Tape, params, tau: float) -> int | None:
    if tau < 0:
        raise ConfigError("weight decay must be >= 0")
    if tau == 0:
        return None
    nodes = [tape.param_node(k) for k in params.penalized_names()]
    return tape.sum_squares(nodes, 0.5 * tau)


# -- Poisson / Maxent relation -------------------------------------------------


def maxent_full_loss(lam, y) -> float:
    """Normalised cross-entropy over all K sites, from positive intensities and counts."""
    lam = core.as_matrix(lam)
    y = core.as_matrix(y)
    k, n = lam.shape
    if k < 2:
        raise DegenerateBatchError("normalisation over a single site is degenerate")
    lam_n = lam / lam.sum(axis=0)
    y_n = y / y.sum(axis=0)
    return -float(np.sum(y_n * np.log(lam_n))) / (k * n)


def verify_poisson_maxent_equivalence(lam, y) -> float:
    """Residual of ``L_P(norm lam, norm y) - L_H(lam, y) - 1/K``; zero up to rounding."""
    lam = core.as_matrix(lam)
    y = core.as_matrix(y)
    if lam.shape != y.shape:
        raise DimensionError(f"intensities {lam.shape} vs counts {y.shape}")
    if np.any(lam <= 0) or np.any(y <= 0):
        raise DataError("intensities and counts must be strictly positive (add a pseudo-count)")
    k, n = lam.shape
    lam_n = lam / lam.sum(axis=0)
    y_n = y / y.sum(axis=0)
    lp = float(np.sum(lam_n - y_n * np.log(lam_n))) / (k * n)
    return lp - maxent_full_loss(lam, y) - 1.0 / k
