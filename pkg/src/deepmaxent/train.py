"""Training loop, spatial-block cross-validation and the saturated batch check."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import core, data, evaluation, losses
from . import model as model_mod
from .errors import ConfigError, DataError, NumericalError
from .losses import BatchLabels, LossKind
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind = LossKind.DEEPMAXENT_WEIGHTED
    tgb: bool = True
    batch_size: int = 250
    hidden_layers: int = 2
    hidden_width: int = 128
    weight_decay: float = 3e-4
    learning_rate: float = 2e-4
    epochs: int = 200
    delta: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.hidden_layers < 0 or self.hidden_width < 1:
            raise ConfigError("hidden_layers must be >= 0 and hidden_width >= 1")
        if self.weight_decay < 0 or self.delta < 0:
            raise ConfigError("weight_decay and delta must be >= 0")
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ConfigError("learning_rate must be > 0 and epochs >= 0")

    @property
    def weighted(self) -> bool:
        return self.loss is LossKind.DEEPMAXENT_WEIGHTED

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = self.loss.value
        return d


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def csv(self) -> str:
        rows = [[e + 1, data.fmt_float(l), f"{s:.6f}"] for e, (l, s) in enumerate(zip(self.losses, self.seconds))]
        return data.csv_text(["epoch", "loss", "seconds"], rows)

    def loss_csv(self) -> str:
        """History without wall times, for byte-for-byte comparisons."""
        rows = [[e + 1, data.fmt_float(l)] for e, l in enumerate(self.losses)]
        return data.csv_text(["epoch", "loss"], rows)


def _batch_labels(config: TrainConfig, counts: np.ndarray) -> BatchLabels:
    delta = config.delta if config.loss.uses_pseudocount else 0.0
    return BatchLabels.from_counts(counts, delta)


def _skip_batch(config: TrainConfig, counts: np.ndarray) -> bool:
    # CE is undefined on a batch with no occurrence at all
    return config.loss is LossKind.CE_SPECIES and not np.any(counts.sum(axis=1) > 0)


def batch_objective(params: model_mod.ModelParams, X, counts, config: TrainConfig):
    """Loss plus penalty on one batch and its gradient for every parameter."""
    tape = core.Tape()
    z = model_mod.record_logits(tape, params, X)
    total = losses.record_loss(tape, z, config.loss, _batch_labels(config, counts))
    pen = losses.record_penalty(tape, params, config.weight_decay)
    if pen is not None:
        total = tape.add(total, pen)
    return float(tape.value(total)), tape.backward(total)


def objective_value(params: model_mod.ModelParams, X, counts, config: TrainConfig) -> float:
    """Same objective as :func:`batch_objective`, evaluated without the tape."""
    z = model_mod.logits(params, X)
    value = losses.loss_value(config.loss, z, _batch_labels(config, counts))
    return value + losses.l2_penalty(params, config.weight_decay)


def training_sites(config: TrainConfig, occ: data.OccurrenceMatrix) -> np.ndarray:
    return data.select_tgb_sites(occ) if config.tgb else np.arange(occ.counts.shape[0])


def train(config: TrainConfig, sites: data.SiteTable, occ: data.OccurrenceMatrix, progress=None):
    """Fit a model; returns ``(params, history)``.

    Covariates are standardised with statistics of the sites the model is
    trained on (the target-group background when ``config.tgb`` is set).
    """
    if occ.counts.shape[0] != sites.n_sites:
        raise DataError("occurrence matrix rows do not match the site table")
    idx = training_sites(config, occ)
    if idx.size < 2:
        raise DataError(f"only {idx.size} training site(s); need at least 2")
    mean, std = model_mod.standardization_constants(sites.covariates[idx])
    arch = model_mod.Architecture(sites.n_covariates, config.hidden_width, config.hidden_layers)
    params = model_mod.init(arch, len(occ.species_ids), config.seed, mean, std)
    params.species_ids = list(occ.species_ids)
    params.covariate_names = list(sites.covariate_names)

    X = params.standardize(sites.covariates)
    counts = occ.counts
    state = AdamState(lr=config.learning_rate)
    history = TrainHistory()
    arrays = params.arrays()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        batch_losses = []
        for b, batch in enumerate(data.make_batches(idx, config.batch_size, config.seed, epoch)):
            yb = counts[batch]
            if _skip_batch(config, yb):
                continue
            value, grads = batch_objective(params, X[batch], yb, config)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            try:
                adam_step(state, arrays, grads)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from None
            batch_losses.append(value)
        history.losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        history.seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress(epoch + 1, history.losses[-1])
    return params, history


# -- cross-validation -----------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    auc: float  # mean over species with a defined AUC; NaN if none
    n_species: int
    n_validation_sites: int


@dataclass
class CVResult:
    folds: list[FoldResult]
    mean_auc: float
    assignment: data.BlockAssignment

    def csv(self) -> str:
        rows = [
            [f.fold + 1, data.fmt_float(f.auc) if not np.isnan(f.auc) else "NA", f.n_species, f.n_validation_sites]
            for f in self.folds
        ]
        rows.append(["mean", data.fmt_float(self.mean_auc), "", ""])
        return data.csv_text(["fold", "auc", "n_species", "n_sites"], rows)


def cross_validate(config: TrainConfig, sites, occ, grid_side: int = 5, folds: int = 10) -> CVResult:
    """Spatially blocked CV scored on presence-only data.

    Held-out sites with a positive count are positives for that species,
    all other held-out sites negatives. Species AUCs are averaged within a
    fold and fold means averaged at the end.
    """
    presences = occ.counts.sum(axis=1)
    assignment = data.assign_blocks(sites, grid_side, folds, config.seed, presences)
    site_fold = assignment.site_fold
    results = []
    for f in range(folds):
        held = np.flatnonzero(site_fold == f)
        kept = np.flatnonzero(site_fold != f)
        fold_cfg = dataclasses.replace(config, seed=config.seed * 1000 + f + 1)
        try:
            params, _ = train(fold_cfg, sites.subset(kept), occ.subset(kept))
        except DataError as exc:
            log.warning("fold %d skipped: %s", f + 1, exc)
            results.append(FoldResult(f, float("nan"), 0, held.size))
            continue
        z = model_mod.logits(params, params.standardize(sites.covariates[held]))
        labels = occ.counts[held] > 0
        aucs = [evaluation.auc(z[:, j], labels[:, j]) for j in range(labels.shape[1])]
        aucs = [a for a in aucs if not np.isnan(a)]
        if not aucs:
            log.warning("fold %d skipped: no species has both positives and negatives", f + 1)
            results.append(FoldResult(f, float("nan"), 0, held.size))
            continue
        results.append(FoldResult(f, float(np.mean(aucs)), len(aucs), held.size))
    valid = [r.auc for r in results if not np.isnan(r.auc)]
    mean = float(np.mean(valid)) if valid else float("nan")
    return CVResult(results, mean, assignment)


# -- saturated-model batch property ------------------------------------------------


def verify_batch_property(
    K: int,
    n: int,
    y,
    seed=0,
    delta: float = 1e-6,
    lr: float | None = None,
    max_epochs: int = 20000,
    tol: float = 1e-9,
) -> float:
    """Fit one free logit per site by SGD on size-``n`` batches only.

    Returns ``max_i |norm_lam_i - norm_y_i|`` over all ``K`` sites. Every
    subset of size ``n`` is visited once per epoch (in a shuffled order)
    when there are at most 5000 of them; otherwise each epoch is a random
    partition. Stops when an epoch moves the normalised intensities by
    less than ``tol``.
    """
    if not 1 < n < K:
        raise ConfigError("need 1 < n < K")
    y = np.asarray(y, dtype=np.float64).reshape(K) + delta
    if np.any(y <= 0):
        raise DataError("counts must be positive after the pseudo-count")
    rng = np.random.default_rng(seed)
    exhaustive = _n_choose_k(K, n) <= 5000
    subsets = [np.array(c) for c in itertools.combinations(range(K), n)] if exhaustive else None
    # plain SGD; the batch gradient is (softmax - label) / n, so lr ~ n gives unit steps
    lr = float(n) if lr is None else lr
    theta = np.zeros((K, 1))
    eye = np.eye(K)
    zero_bias = np.zeros(1)
    target = y / y.sum()
    prev = np.full(K, 1.0 / K)
    labels_cache: dict[tuple, BatchLabels] = {}
    for epoch in range(max_epochs):
        if exhaustive:
            order = [subsets[i] for i in rng.permutation(len(subsets))]
        else:
            perm = rng.permutation(K)
            order = [perm[i : i + n] for i in range(0, K - n + 1, n)]
        for batch in order:
            key = tuple(batch)
            if key not in labels_cache:
                labels_cache[key] = BatchLabels.from_counts(y[batch].reshape(-1, 1))
            tape = core.Tape()
            # one-hot rows pick the batch's logits out of the free parameter vector
            z = tape.affine(tape.constant(eye[batch]), tape.param("theta", theta), tape.constant(zero_bias))
            loss = losses.record_loss(tape, z, LossKind.DEEPMAXENT_UNWEIGHTED, labels_cache[key])
            theta = theta - lr * tape.backward(loss)["theta"]
        cur = np.exp(theta[:, 0] - core.logsumexp(theta[:, 0], axis=0))
        if np.max(np.abs(cur - prev)) < tol:
            break
        prev = cur
    else:
        log.warning("saturated fit did not converge in %d epochs", max_epochs)
    return float(np.max(np.abs(cur - target)))


def _n_choose_k(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)
