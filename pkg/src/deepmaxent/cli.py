"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, checks, data, evaluation, synth
from . import model as model_mod
from . import train as train_mod
from .errors import ConfigError, DataError, DeepMaxentError, NumericalError
from .losses import LossKind

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("deepmaxent")


class UsageError(DeepMaxentError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- config handling ----------------------------------------------------------

_CONFIG_KEYS = {
    "loss": str,
    "weighted": "bool",
    "tgb": "bool",
    "batch_size": int,
    "hidden_layers": int,
    "hidden_width": int,
    "weight_decay": float,
    "learning_rate": float,
    "epochs": int,
    "delta": float,
    "seed": int,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError("config file not found", path) from None
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{n}: unknown or malformed setting {raw.strip()!r}")
        kind = _CONFIG_KEYS[key]
        try:
            out[key] = _parse_bool(value) if kind == "bool" else kind(value.strip())
        except ValueError:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {value.strip()!r}") from None
    return out


def resolve_config(args) -> train_mod.TrainConfig:
    settings: dict = {}
    if getattr(args, "from_manifest", None):
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        settings.update(manifest["config"])
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    weighted = settings.pop("weighted", None)
    loss = LossKind(settings.get("loss", LossKind.DEEPMAXENT_WEIGHTED.value))
    if weighted is False and loss is LossKind.DEEPMAXENT_WEIGHTED:
        loss = LossKind.DEEPMAXENT_UNWEIGHTED
    elif weighted is True and loss is LossKind.DEEPMAXENT_UNWEIGHTED:
        loss = LossKind.DEEPMAXENT_WEIGHTED
    settings["loss"] = loss
    return train_mod.TrainConfig(**settings)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (overrides --config)")
    g.add_argument("--config", help="flat key=value configuration file")
    g.add_argument("--from-manifest", help="reuse the configuration recorded in a run manifest")
    g.add_argument("--loss", choices=[k.value for k in LossKind])
    g.add_argument("--weighted", dest="weighted", action="store_true", default=None)
    g.add_argument("--unweighted", dest="weighted", action="store_false")
    g.add_argument("--tgb", dest="tgb", action="store_true", default=None)
    g.add_argument("--no-tgb", dest="tgb", action="store_false")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--layers", dest="hidden_layers", type=int)
    g.add_argument("--hidden-width", dest="hidden_width", type=int)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--delta", type=float)
    g.add_argument("--seed", type=int)


# -- manifest -----------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict) -> None:
    doc = {
        "tool": "deepmaxent",
        "version": __version__,
        "command": command,
        "seed": config.get("seed"),
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in sorted(inputs.items())},
    }
    data.atomic_write_text(out_dir / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- heatmaps -----------------------------------------------------------------


def heatmap_pgm(coords: np.ndarray, values: np.ndarray) -> bytes:
    """Binary PGM rasterised on the distinct x / y coordinates.

    Pixels are ``values`` rescaled affinely to [0, 255]; cells without a
    site are 0. The top image row is the largest y.
    """
    xs = np.unique(coords[:, 0])
    ys = np.unique(coords[:, 1])
    col = np.searchsorted(xs, coords[:, 0])
    row = ys.size - 1 - np.searchsorted(ys, coords[:, 1])
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo) * 255.0
    img = np.zeros((ys.size, xs.size), dtype=np.uint8)
    img[row, col] = np.rint(scaled).astype(np.uint8)
    return f"P5\n{xs.size} {ys.size}\n255\n".encode("ascii") + img.tobytes()


def _safe_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        grid_side=args.grid_side,
        n_covariates=args.covariates,
        n_species=args.species,
        expected_occurrences=args.expected,
        coef_scale=args.coef_scale,
        pa_fraction=args.pa_fraction,
        seed=args.seed,
    )
    bias_scale = args.bias_scale
    if args.bias_fraction is not None:
        bias_scale = synth.bias_scale_for_fraction(spec, args.bias_fraction)
    if bias_scale is not None:
        spec = dataclasses.replace(spec, bias_scale=bias_scale)
    d = synth.generate(spec)
    out = Path(args.out)
    data.write_sites(out / "sites.csv", d.sites)
    data.write_occurrences_long(out / "occurrences.csv", d.sites, d.occurrences)
    data.write_pa(out / "pa.csv", d.pa)
    truth_rows = (
        [sid, *(data.fmt_float(v) for v in d.true_normalized[i])] for i, sid in enumerate(d.sites.site_ids)
    )
    data.atomic_write_text(out / "truth.csv", data.csv_text(["site_id", *d.occurrences.species_ids], truth_rows))
    cfg = dataclasses.asdict(spec)
    write_manifest(out, "synth", cfg, {})
    print(f"wrote {d.sites.n_sites} sites, {int(d.occurrences.counts.sum())} occurrences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    sites = data.load_sites(args.sites)
    occ = data.load_occurrences(args.occurrences, sites, args.format)
    out = Path(args.out)

    def progress(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch:4d}  loss {loss:.6f}", file=sys.stderr)

    params, history = train_mod.train(config, sites, occ, progress)
    model_mod.save(params, out / "model.txt")
    data.atomic_write_text(out / "history.csv", history.csv())
    write_manifest(out, "train", config.to_dict(), {"sites": args.sites, "occurrences": args.occurrences})
    print(f"trained {len(occ.species_ids)} species for {config.epochs} epochs; final loss {history.losses[-1] if history.losses else float('nan'):.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    params = model_mod.load(args.model)
    sites = data.load_sites(args.sites)
    pred = model_mod.predict_normalized(params, params.standardize(sites.covariates))
    out = Path(args.out)
    rows = ([sid, *(data.fmt_float(v) for v in pred[i])] for i, sid in enumerate(sites.site_ids))
    data.atomic_write_text(out / "intensities.csv", data.csv_text(["site_id", *params.species_ids], rows))
    if args.heatmap:
        for j, sp in enumerate(params.species_ids):
            data.atomic_write_bytes(out / f"heatmap_{_safe_name(sp)}.pgm", heatmap_pgm(sites.coords, pred[:, j]))
    write_manifest(out, "predict", {}, {"model": args.model, "sites": args.sites})
    return EXIT_OK


def cmd_eval(args) -> int:
    params = model_mod.load(args.model)
    sites = data.load_sites(args.sites)
    pa = data.load_pa(args.pa)
    grouping = data.load_groups(args.groups) if args.groups else None
    report = evaluation.evaluate(params, sites, pa, grouping)
    out = Path(args.out)
    data.atomic_write_text(out / "metrics.csv", report.metrics_csv())
    data.atomic_write_text(out / "summary.csv", report.summary_csv())
    inputs = {"model": args.model, "sites": args.sites, "pa": args.pa}
    if args.groups:
        inputs["groups"] = args.groups
    write_manifest(out, "eval", {}, inputs)
    print(f"general average AUC {report.general_average:.4f} ({report.n_undefined} species undefined)")
    return EXIT_OK


def cmd_cv(args) -> int:
    config = resolve_config(args)
    sites = data.load_sites(args.sites)
    occ = data.load_occurrences(args.occurrences, sites, args.format)
    result = train_mod.cross_validate(config, sites, occ, args.grid_side, args.folds)
    out = Path(args.out)
    data.atomic_write_text(out / "cv.csv", result.csv())
    cfg = {**config.to_dict(), "grid_side": args.grid_side, "folds": args.folds}
    write_manifest(out, "cv", cfg, {"sites": args.sites, "occurrences": args.occurrences})
    print(f"mean CV AUC {result.mean_auc:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = checks.run_suite(seed=args.seed, quick=not args.full)
    ok = True
    for name, passed, detail in results:
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepmaxent", description="Multi-species intensity models from presence-only data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid-side", type=int, default=20)
    s.add_argument("--species", type=int, default=5)
    s.add_argument("--covariates", type=int, default=4)
    s.add_argument("--expected", type=float, default=500.0, help="expected occurrences per species")
    s.add_argument("--coef-scale", type=float, default=0.8)
    s.add_argument("--pa-fraction", type=float, default=0.5)
    bias = s.add_mutually_exclusive_group()
    bias.add_argument("--bias-scale", type=float, default=None, help="decay length of the sampling-bias field")
    bias.add_argument("--bias-fraction", type=float, default=None, help="pick the scale so this share of sites has s < 0.1")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a model on presence-only data")
    t.add_argument("--sites", required=True)
    t.add_argument("--occurrences", required=True)
    t.add_argument("--format", choices=["auto", "long", "wide"], default="auto")
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", "-v", action="store_true")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="normalised intensities per site")
    pr.add_argument("--model", required=True)
    pr.add_argument("--sites", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--heatmap", action="store_true", help="also write one PGM image per species")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="AUC on presence-absence data")
    e.add_argument("--model", required=True)
    e.add_argument("--sites", required=True, help="site table containing the surveyed sites")
    e.add_argument("--pa", required=True)
    e.add_argument("--groups", help="species_id,group,region CSV")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cv", help="spatially blocked cross-validation on presence-only data")
    c.add_argument("--sites", required=True)
    c.add_argument("--occurrences", required=True)
    c.add_argument("--format", choices=["auto", "long", "wide"], default="auto")
    c.add_argument("--out", required=True)
    c.add_argument("--grid-side", type=int, default=5)
    c.add_argument("--folds", type=int, default=10)
    _add_train_flags(c)
    c.set_defaults(func=cmd_cv)

    v = sub.add_parser("verify", help="run the built-in numerical self-checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--full", action="store_true", help="acceptance-sized check counts")
    v.set_defaults(func=cmd_verify)
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
