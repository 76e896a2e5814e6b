"""AUC and the per-species / group / region aggregation used for reporting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import model as model_mod
from .data import PATable, SiteTable, csv_text, fmt_float
from .errors import DataError

log = logging.getLogger(__name__)

DEFAULT_GROUP = "all"
DEFAULT_REGION = "all"


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks; NaN when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class SpeciesResult:
    species_id: str
    group: str
    region: str
    auc: float
    n_pos: int
    n_neg: int

    @property
    def defined(self) -> bool:
        return not np.isnan(self.auc)


@dataclass
class EvalReport:
    species: list[SpeciesResult]
    group_means: dict[tuple[str, str], float]  # (region, group) -> mean AUC
    region_means: dict[str, float]
    general_average: float
    n_undefined: int = 0
    notes: list[str] = field(default_factory=list)

    def metrics_csv(self) -> str:
        rows = [
            [s.species_id, s.group, s.region, fmt_float(s.auc) if s.defined else "NA", s.n_pos, s.n_neg]
            for s in self.species
        ]
        return csv_text(["species_id", "group", "region", "auc", "n_pos", "n_neg"], rows)

    def summary_csv(self) -> str:
        rows = [[r, fmt_float(v)] for r, v in self.region_means.items()]
        rows.append(["general_avg", fmt_float(self.general_average)])
        return csv_text(["region", "mean_auc"], rows)


def aggregate(results: list[SpeciesResult]) -> EvalReport:
    """Species -> group mean -> region mean -> unweighted mean over regions."""
    per_group: dict[tuple[str, str], list[float]] = {}
    undefined = 0
    for r in results:
        if not r.defined:
            undefined += 1
            continue
        per_group.setdefault((r.region, r.group), []).append(r.auc)
    if undefined:
        log.warning("%d species had no positives or no negatives and were excluded", undefined)
    group_means = {k: float(np.mean(v)) for k, v in sorted(per_group.items())}
    per_region: dict[str, list[float]] = {}
    for (region, _), v in group_means.items():
        per_region.setdefault(region, []).append(v)
    region_means = {r: float(np.mean(v)) for r, v in sorted(per_region.items())}
    general = float(np.mean(list(region_means.values()))) if region_means else float("nan")
    return EvalReport(results, group_means, region_means, general, undefined)


def evaluate(params: model_mod.ModelParams, sites: SiteTable, pa: PATable, grouping=None) -> EvalReport:
    """Score PA sites with the model's logits and compute per-species AUC.

    ``grouping`` maps species id to ``(group, region)``; species missing
    from it fall in a single default group and region.
    """
    grouping = grouping or {}
    index = sites.index()
    missing = sorted({s for s in pa.site_ids if s not in index})
    if missing:
        raise DataError(f"PA table references unknown site_ids: {', '.join(missing[:20])}")
    species_col = {s: j for j, s in enumerate(params.species_ids)}
    unknown_sp = sorted({s for s in pa.species_ids if s not in species_col})
    if unknown_sp:
        raise DataError(f"PA table references species the model does not know: {', '.join(unknown_sp[:20])}")

    rows = np.array([index[s] for s in pa.site_ids], dtype=int)
    used = np.unique(rows)
    z = model_mod.logits(params, params.standardize(sites.covariates[used]))
    pos_of = {int(r): k for k, r in enumerate(used)}

    by_species: dict[str, tuple[list, list]] = {}
    for r, sp, p in zip(rows, pa.species_ids, pa.present):
        sc, lb = by_species.setdefault(sp, ([], []))
        sc.append(z[pos_of[int(r)], species_col[sp]])
        lb.append(int(p))

    results = []
    for sp in params.species_ids:
        if sp not in by_species:
            continue
        sc, lb = by_species[sp]
        # sort by site so the result does not depend on PA row order
        order = np.lexsort((np.asarray(lb), np.asarray(sc)))
        sc = np.asarray(sc)[order]
        lb = np.asarray(lb)[order]
        group, region = grouping.get(sp, (DEFAULT_GROUP, DEFAULT_REGION))
        n_pos = int(lb.sum())
        results.append(SpeciesResult(sp, group, region, auc(sc, lb), n_pos, int(lb.size - n_pos)))
    return aggregate(results)
