"""Synthetic presence-only / presence-absence data from a gridded Poisson process.

Covariates are smooth random fields on a G x G grid, true log-intensities
are linear in them, and presence-only counts are Poisson draws from the
true intensity thinned by an accessibility field ``s(x) = exp(-d(x)/scale)``
around a random focal point. Presence-absence surveys are drawn without
bias on a held-out subset of sites.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from . import core
from .data import OccurrenceMatrix, PATable, SiteTable
from .errors import ConfigError, DataError, DegenerateBatchError, DimensionError
from .losses import LossKind


@dataclass(frozen=True)
class SynthSpec:
    grid_side: int = 20
    n_covariates: int = 4
    n_species: int = 5
    expected_occurrences: float = 500.0
    coef_scale: float = 0.8
    bias_scale: float | None = None  # None: no sampling bias
    pa_fraction: float = 0.5
    prevalence: float = 0.2
    n_waves: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.grid_side < 2 or self.n_covariates < 1 or self.n_species < 1:
            raise ConfigError("grid_side >= 2, n_covariates >= 1 and n_species >= 1 required")
        if self.expected_occurrences <= 0:
            raise ConfigError("expected_occurrences must be > 0")
        if self.bias_scale is not None and self.bias_scale <= 0:
            raise ConfigError("bias_scale must be > 0")
        if not 0 < self.pa_fraction <= 1 or not 0 < self.prevalence < 1:
            raise ConfigError("pa_fraction in (0, 1] and prevalence in (0, 1) required")


@dataclass
class SynthData:
    sites: SiteTable
    occurrences: OccurrenceMatrix
    pa: PATable
    true_normalized: np.ndarray  # K x N
    true_coef: np.ndarray  # N x P, on the raw covariate scale
    expected_counts: np.ndarray  # K x N, biased expectation of the PO counts
    bias: np.ndarray  # K, accessibility in (0, 1]
    pa_sites: np.ndarray  # indices of surveyed sites


def _smooth_field(rng, xy: np.ndarray, n_waves: int) -> np.ndarray:
    f = np.zeros(xy.shape[0])
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 2.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        f += amp * np.sin(2 * np.pi * (xy @ freq) + phase)
    return f


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    g = spec.grid_side
    ax = np.arange(g) / (g - 1)
    xx, yy = np.meshgrid(ax, ax)
    xy = np.column_stack([xx.ravel(), yy.ravel()])
    k = xy.shape[0]

    cov = np.column_stack([_smooth_field(rng, xy, spec.n_waves) for _ in range(spec.n_covariates)])
    # z-score so coefficient scales are comparable across covariates
    cov = (cov - cov.mean(axis=0)) / cov.std(axis=0)
    coef = rng.normal(0.0, spec.coef_scale, size=(spec.n_species, spec.n_covariates))
    log_lam = cov @ coef.T
    true_norm = np.exp(log_lam - core.logsumexp(log_lam, axis=0))

    if spec.bias_scale is None:
        bias = np.ones(k)
    else:
        focal = rng.uniform(0, 1, size=2)
        bias = np.exp(-np.linalg.norm(xy - focal, axis=1) / spec.bias_scale)
    weighted = true_norm * bias[:, None]
    expected = spec.expected_occurrences * weighted / weighted.sum(axis=0)
    counts = rng.poisson(expected).astype(np.float64)

    n_pa = max(2, int(round(spec.pa_fraction * k)))
    pa_sites = np.sort(rng.choice(k, size=min(n_pa, k), replace=False))
    pa_sid, pa_sp, pa_pres = [], [], []
    species_ids = [f"sp{j + 1:03d}" for j in range(spec.n_species)]
    site_ids = [f"s{i:05d}" for i in range(k)]
    lam = np.exp(log_lam[pa_sites])
    u = rng.uniform(size=lam.shape)
    for j in range(spec.n_species):
        a = calibrate_detection(lam[:, j], spec.prevalence)
        present = u[:, j] < 1.0 - np.exp(-a * lam[:, j])
        for r, site in enumerate(pa_sites):
            pa_sid.append(site_ids[site])
            pa_sp.append(species_ids[j])
            pa_pres.append(int(present[r]))

    sites = SiteTable(site_ids, xy.copy(), cov, [f"cov{p + 1}" for p in range(spec.n_covariates)])
    return SynthData(
        sites=sites,
        occurrences=OccurrenceMatrix(counts, species_ids),
        pa=PATable(pa_sid, pa_sp, np.array(pa_pres, dtype=int)),
        true_normalized=true_norm,
        true_coef=coef,
        expected_counts=expected,
        bias=bias,
        pa_sites=pa_sites,
    )


def calibrate_detection(lam: np.ndarray, prevalence: float) -> float:
    """Scale ``a`` such that the mean of ``1 - exp(-a * lam)`` equals ``prevalence``."""

    def gap(log_a):
        return np.mean(1.0 - np.exp(-np.exp(log_a) * lam)) - prevalence

    return float(np.exp(brentq(gap, -60.0, 60.0, xtol=1e-12)))


def bias_scale_for_fraction(spec: SynthSpec, fraction: float, threshold: float = 0.1) -> float:
    """Largest bias scale for which at least ``fraction`` of sites have ``s < threshold``.

    Depends on the focal point drawn from ``spec.seed``, so it is computed
    by regenerating the geometry.
    """
    probe = generate(replace(spec, bias_scale=1.0))
    d = -np.log(probe.bias)  # distances, since scale = 1
    # s < threshold  <=>  d > scale * ln(1/threshold)
    cut = np.quantile(d, 1.0 - fraction, method="lower")
    return float(cut / np.log(1.0 / threshold)) * (1 - 1e-9)


# -- transliterated full-loss oracles -------------------------------------------


def oracle_full_loss(lam, y, kind) -> float:
    """Direct double-loop evaluation of each objective over all sites.

    ``lam`` are intensities (not logits) and ``y`` raw counts. Deliberately
    written with scalar loops and no shared helpers so it can check the
    vectorised implementations.
    """
    kind = LossKind(kind)
    lam = np.asarray(lam, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam.ndim != 2 or lam.shape != y.shape:
        raise DimensionError("lam and y must be matching 2-D arrays")
    k, n = lam.shape
    if kind is LossKind.POISSON:
        s = 0.0
        for i in range(k):
            for j in range(n):
                s += lam[i, j] - y[i, j] * np.log(lam[i, j])
        return s / (k * n)
    if kind in (LossKind.DEEPMAXENT_WEIGHTED, LossKind.DEEPMAXENT_UNWEIGHTED):
        if k < 2:
            raise DegenerateBatchError("normalisation over one site is degenerate")
        s = 0.0
        for j in range(n):
            lam_tot = 0.0
            y_tot = 0.0
            for i in range(k):
                lam_tot += lam[i, j]
                y_tot += y[i, j]
            if kind is LossKind.DEEPMAXENT_UNWEIGHTED and y_tot <= 0:
                raise DataError("species with zero total count")
            for i in range(k):
                label = y[i, j] if kind is LossKind.DEEPMAXENT_WEIGHTED else y[i, j] / y_tot
                s += label * np.log(lam[i, j] / lam_tot)
        return -s / (k * n)
    if kind is LossKind.CE_SPECIES:
        s = 0.0
        kept = 0
        for i in range(k):
            y_tot = sum(y[i, j] for j in range(n))
            if y_tot <= 0:
                continue
            kept += 1
            lam_tot = sum(lam[i, j] for j in range(n))
            for j in range(n):
                s += (y[i, j] / y_tot) * np.log(lam[i, j] / lam_tot)
        if kept == 0:
            raise DataError("no site with a positive count")
        return -s / kept
    # BCE: sigmoid(log lam) = lam / (1 + lam)
    s = 0.0
    for i in range(k):
        for j in range(n):
            p = lam[i, j] / (1.0 + lam[i, j])
            yb = 1.0 if y[i, j] > 0 else 0.0
            s += yb * np.log(p) + (1.0 - yb) * np.log(1.0 - p)
    return -s / (k * n)
