"""Site and occurrence tables, CSV I/O, background selection, batching and spatial blocks."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SiteTable:
    site_ids: list[str]
    coords: np.ndarray  # K x 2
    covariates: np.ndarray  # K x P, raw
    covariate_names: list[str]

    def __post_init__(self):
        k = len(self.site_ids)
        if len(set(self.site_ids)) != k:
            raise DataError("site_ids are not unique")
        if self.coords.shape != (k, 2) or self.covariates.shape[0] != k:
            raise DataError("site table arrays do not match the number of sites")
        if self.covariates.shape[1] != len(self.covariate_names):
            raise DataError("covariate names do not match covariate columns")

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.site_ids)}

    def subset(self, rows) -> "SiteTable":
        rows = np.asarray(rows, dtype=int)
        return SiteTable(
            [self.site_ids[i] for i in rows], self.coords[rows], self.covariates[rows], list(self.covariate_names)
        )


@dataclass(frozen=True)
class OccurrenceMatrix:
    counts: np.ndarray  # K x N, nonnegative
    species_ids: list[str]

    def __post_init__(self):
        if self.counts.ndim != 2 or self.counts.shape[1] != len(self.species_ids):
            raise DataError("count matrix does not match species list")
        if np.any(self.counts < 0):
            raise DataError("occurrence counts must be nonnegative")

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def subset(self, rows) -> "OccurrenceMatrix":
        return OccurrenceMatrix(self.counts[np.asarray(rows, dtype=int)], list(self.species_ids))


@dataclass(frozen=True)
class PATable:
    """Presence-absence survey records, one row per (site, species)."""

    site_ids: list[str]
    species_ids: list[str]
    present: np.ndarray  # int 0/1


# -- writing ----------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_float(v: float) -> str:
    # shortest round-trip repr
    return repr(float(v))


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_sites(path, sites: SiteTable) -> None:
    rows = (
        [sid, fmt_float(c[0]), fmt_float(c[1]), *(fmt_float(v) for v in cov)]
        for sid, c, cov in zip(sites.site_ids, sites.coords, sites.covariates)
    )
    atomic_write_text(path, csv_text(["site_id", "x", "y", *sites.covariate_names], rows))


def write_occurrences_long(path, sites: SiteTable, occ: OccurrenceMatrix) -> None:
    rows = []
    for i, sid in enumerate(sites.site_ids):
        for j, sp in enumerate(occ.species_ids):
            c = occ.counts[i, j]
            if c > 0:
                rows.append([sid, sp, str(int(c))])
    atomic_write_text(path, csv_text(["site_id", "species_id", "count"], rows))


def write_occurrences_wide(path, sites: SiteTable, occ: OccurrenceMatrix) -> None:
    rows = ([sid, *(str(int(c)) for c in occ.counts[i])] for i, sid in enumerate(sites.site_ids))
    atomic_write_text(path, csv_text(["site_id", *occ.species_ids], rows))


def write_pa(path, pa: PATable) -> None:
    rows = ([s, sp, str(int(p))] for s, sp, p in zip(pa.site_ids, pa.species_ids, pa.present))
    atomic_write_text(path, csv_text(["site_id", "species_id", "present"], rows))


# -- reading ----------------------------------------------------------------


def _read_rows(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError("file not found", path) from None
    except UnicodeDecodeError as exc:
        raise DataError(f"not valid UTF-8: {exc}", path) from None
    if not rows:
        raise DataError("empty file", path, 1)
    header = [h.strip() for h in rows[0]]
    # (line number, fields); blank lines skipped
    body = [(n, r) for n, r in enumerate(rows[1:], start=2) if any(f.strip() for f in r)]
    return path, header, body


def _parse_float(text: str, path, line: int, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"non-numeric {what}: {text!r}", path, line) from None
    if not math.isfinite(v):
        raise DataError(f"missing or non-finite {what}: {text!r}", path, line)
    return v


def _parse_count(text: str, path, line: int) -> float:
    v = _parse_float(text, path, line, "count")
    if v < 0:
        raise DataError(f"negative count {text!r}", path, line)
    return v


def load_sites(path) -> SiteTable:
    path, header, body = _read_rows(path)
    if header[:3] != ["site_id", "x", "y"]:
        raise DataError("sites header must start with site_id,x,y", path, 1)
    names = header[3:]
    ids, coords, covs, seen = [], [], [], {}
    for line, row in body:
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", path, line)
        sid = row[0].strip()
        if sid in seen:
            raise DataError(f"duplicate site_id {sid!r} (first on line {seen[sid]})", path, line)
        seen[sid] = line
        ids.append(sid)
        coords.append([_parse_float(row[1], path, line, "x"), _parse_float(row[2], path, line, "y")])
        covs.append([_parse_float(v, path, line, f"covariate {names[k]!r}") for k, v in enumerate(row[3:])])
    if not ids:
        raise DataError("no sites", path)
    return SiteTable(ids, np.array(coords, dtype=np.float64), np.array(covs, dtype=np.float64).reshape(len(ids), len(names)), names)


def load_occurrences(path, sites: SiteTable, fmt: str = "auto") -> OccurrenceMatrix:
    """Read long (``site_id,species_id,count``) or wide (``site_id,<sp>...``) occurrences.

    Sites of ``sites`` that never appear get zero counts. Species are sorted
    by id in the long format and keep column order in the wide one.
    """
    path, header, body = _read_rows(path)
    if header[:1] != ["site_id"]:
        raise DataError("occurrence header must start with site_id", path, 1)
    if fmt == "auto":
        fmt = "long" if header == ["site_id", "species_id", "count"] else "wide"
    index = sites.index()

    def site_row(sid: str, line: int) -> int:
        try:
            return index[sid]
        except KeyError:
            raise DataError(f"unknown site_id {sid!r}", path, line) from None

    if fmt == "long":
        if header != ["site_id", "species_id", "count"]:
            raise DataError("long occurrence header must be site_id,species_id,count", path, 1)
        entries = []
        for line, row in body:
            if len(row) != 3:
                raise DataError(f"expected 3 fields, found {len(row)}", path, line)
            entries.append((site_row(row[0].strip(), line), row[1].strip(), _parse_count(row[2], path, line)))
        names = sorted({sp for _, sp, _ in entries})
        col = {sp: j for j, sp in enumerate(names)}
        counts = np.zeros((sites.n_sites, len(names)))
        for i, sp, c in entries:
            counts[i, col[sp]] += c
        return OccurrenceMatrix(counts, names)

    if fmt != "wide":
        raise ConfigError(f"unknown occurrence format {fmt!r}")
    species_ids = header[1:]
    if not species_ids:
        raise DataError("wide occurrence file has no species columns", path, 1)
    if len(set(species_ids)) != len(species_ids):
        raise DataError("duplicate species columns", path, 1)
    counts = np.zeros((sites.n_sites, len(species_ids)))
    for line, row in body:
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", path, line)
        i = site_row(row[0].strip(), line)
        counts[i] += [_parse_count(v, path, line) for v in row[1:]]
    return OccurrenceMatrix(counts, species_ids)


def load_pa(path) -> PATable:
    path, header, body = _read_rows(path)
    if header != ["site_id", "species_id", "present"]:
        raise DataError("PA header must be site_id,species_id,present", path, 1)
    sids, sps, pres = [], [], []
    for line, row in body:
        if len(row) != 3:
            raise DataError(f"expected 3 fields, found {len(row)}", path, line)
        p = row[2].strip()
        if p not in ("0", "1"):
            raise DataError(f"present must be 0 or 1, got {p!r}", path, line)
        sids.append(row[0].strip())
        sps.append(row[1].strip())
        pres.append(int(p))
    return PATable(sids, sps, np.array(pres, dtype=int))


def load_groups(path) -> dict[str, tuple[str, str]]:
    """``species_id,group,region`` -> ``{species: (group, region)}``."""
    path, header, body = _read_rows(path)
    if header != ["species_id", "group", "region"]:
        raise DataError("groups header must be species_id,group,region", path, 1)
    out = {}
    for line, row in body:
        if len(row) != 3:
            raise DataError(f"expected 3 fields, found {len(row)}", path, line)
        out[row[0].strip()] = (row[1].strip(), row[2].strip())
    return out


# -- background, batches, blocks ---------------------------------------------


def select_tgb_sites(occ: OccurrenceMatrix) -> np.ndarray:
    """Indices of sites where at least one target-group record exists."""
    idx = np.flatnonzero(occ.counts.sum(axis=1) > 0)
    if idx.size == 0:
        raise DataError("no site has any occurrence; target-group background is empty")
    return idx


def make_batches(site_indices, batch_size: int, seed, epoch: int) -> list[np.ndarray]:
    """Shuffle once for this epoch and cut into consecutive batches.

    A trailing batch with fewer than two sites is merged into the previous one.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    sites = np.asarray(site_indices, dtype=int)
    rng = np.random.default_rng([_seed_int(seed), int(epoch)])
    order = sites[rng.permutation(sites.size)]
    batches = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _seed_int(seed) -> int:
    return 0 if seed is None else int(seed)


@dataclass(frozen=True)
class BlockAssignment:
    grid_side: int
    site_block: np.ndarray  # per site, block index in [0, grid_side**2)
    block_fold: dict[int, int]  # nonempty block -> fold in [0, folds)
    folds: int

    @property
    def site_fold(self) -> np.ndarray:
        return np.array([self.block_fold[b] for b in self.site_block], dtype=int)

    def fold_loads(self, presences) -> np.ndarray:
        loads = np.zeros(self.folds)
        np.add.at(loads, self.site_fold, np.asarray(presences, dtype=np.float64))
        return loads


def block_of_sites(coords: np.ndarray, grid_side: int) -> np.ndarray:
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = hi - lo
    if np.all(span == 0):
        raise DataError("all sites share the same coordinates; cannot build a block grid")
    cells = np.zeros_like(coords, dtype=int)
    for d in range(2):
        if span[d] > 0:
            cells[:, d] = np.minimum((grid_side * (coords[:, d] - lo[d]) / span[d]).astype(int), grid_side - 1)
    # row-major: y selects the row
    return cells[:, 1] * grid_side + cells[:, 0]


def assign_blocks(sites: SiteTable, grid_side: int = 5, folds: int = 10, seed=0, presences=None) -> BlockAssignment:
    """Grid the bounding box and deal blocks to folds, heaviest first.

    Each block goes to the fold with the smallest presence load so far
    (fewest blocks, then a random draw, breaks ties). ``presences`` is the
    per-site presence total; without it every site weighs 1.
    """
    if grid_side < 1 or folds < 1:
        raise ConfigError("grid_side and folds must be >= 1")
    site_block = block_of_sites(sites.coords, grid_side)
    w = np.ones(sites.n_sites) if presences is None else np.asarray(presences, dtype=np.float64)
    blocks = np.unique(site_block)
    if folds > blocks.size:
        raise ConfigError(f"{folds} folds requested but only {blocks.size} nonempty blocks")
    load = {int(b): float(w[site_block == b].sum()) for b in blocks}
    rng = np.random.default_rng(_seed_int(seed))
    shuffled = [int(b) for b in rng.permutation(blocks)]
    ordered = sorted(shuffled, key=lambda b: -load[b])  # stable, so ties keep the random order
    fold_load = np.zeros(folds)
    fold_count = np.zeros(folds, dtype=int)
    block_fold = {}
    for b in ordered:
        tiebreak = rng.random(folds)
        f = min(range(folds), key=lambda k: (fold_load[k], fold_count[k], tiebreak[k]))
        block_fold[b] = f
        fold_load[f] += load[b]
        fold_count[f] += 1
    return BlockAssignment(grid_side, site_block, block_fold, folds)
