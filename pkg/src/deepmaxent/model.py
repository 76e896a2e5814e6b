"""Residual MLP feature extractor with log-linear species heads."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .errors import ConfigError, DataError, DimensionError

FORMAT_NAME = "deepmaxent-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_width: int = 128
    hidden_layers: int = 2

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.hidden_layers < 0:
            raise ConfigError("hidden_layers must be >= 0")
        if self.hidden_layers > 0 and self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1 when hidden_layers >= 1")

    @property
    def feature_dim(self) -> int:
        return self.hidden_width if self.hidden_layers > 0 else self.input_dim


@dataclass
class ModelParams:
    """Weights of one model plus the covariate standardisation it expects.

    ``gamma`` is N x C (species by latent feature) and ``bias`` has length N.
    ``weights[l]`` maps layer ``l`` input to output, i.e. has shape
    ``(fan_in, fan_out)``.
    """

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gamma: np.ndarray
    bias: np.ndarray
    cov_mean: np.ndarray
    cov_std: np.ndarray
    species_ids: list[str] = field(default_factory=list)
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.cov_std <= 0):
            raise ConfigError("standardisation constants must have strictly positive std")

    @property
    def n_species(self) -> int:
        return self.gamma.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (live references, not copies)."""
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{l}"] = w
            out[f"b{l}"] = b
        out["gamma"] = self.gamma
        out["bias"] = self.bias
        return out

    def penalized_names(self) -> list[str]:
        return [f"W{l}" for l in range(len(self.weights))] + ["gamma"]

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            gamma=self.gamma.copy(),
            bias=self.bias.copy(),
            cov_mean=self.cov_mean.copy(),
            cov_std=self.cov_std.copy(),
            species_ids=list(self.species_ids),
            covariate_names=list(self.covariate_names),
        )

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        raw = core.as_matrix(raw)
        if raw.shape[1] != self.arch.input_dim:
            raise DimensionError(f"expected {self.arch.input_dim} covariates, got {raw.shape[1]}")
        return (raw - self.cov_mean) / self.cov_std


def standardization_constants(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and std; constant columns get std 1."""
    raw = core.as_matrix(raw)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def init(arch: Architecture, n_species: int, seed, cov_mean=None, cov_std=None) -> ModelParams:
    """He-normal hidden weights, N(0, 1/C) species head, zero biases."""
    if n_species < 1:
        raise ConfigError("n_species must be >= 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = arch.input_dim
    for _ in range(arch.hidden_layers):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, arch.hidden_width)))
        biases.append(np.zeros(arch.hidden_width))
        fan_in = arch.hidden_width
    c = arch.feature_dim
    gamma = rng.normal(0.0, np.sqrt(1.0 / c), size=(n_species, c))
    return ModelParams(
        arch=arch,
        weights=weights,
        biases=biases,
        gamma=gamma,
        bias=np.zeros(n_species),
        cov_mean=np.zeros(arch.input_dim) if cov_mean is None else np.asarray(cov_mean, dtype=np.float64),
        cov_std=np.ones(arch.input_dim) if cov_std is None else np.asarray(cov_std, dtype=np.float64),
    )


def _check_input(params: ModelParams, X) -> np.ndarray:
    X = core.as_matrix(X)
    if X.shape[1] != params.arch.input_dim:
        raise DimensionError(f"expected {params.arch.input_dim} covariates, got {X.shape[1]}")
    return X


def features(params: ModelParams, X) -> np.ndarray:
    h = _check_input(params, X)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = core.relu(core.affine(h, w, b))
        # first layer changes width, so no shortcut there
        h = out if l == 0 else core.residual_add(h, out)
    return h


def logits(params: ModelParams, X) -> np.ndarray:
    """Log-intensity ``gamma_j . g(x_i) + b_j`` for every site and species."""
    return core.affine(features(params, X), params.gamma.T, params.bias)


def predict_normalized(params: ModelParams, X) -> np.ndarray:
    """Intensities normalised per species over the supplied sites."""
    z = logits(params, X)
    return np.exp(z - core.logsumexp(z, axis=0))


def record_logits(tape: core.Tape, params: ModelParams, X) -> int:
    """Replay :func:`logits` on ``tape`` with every array registered as a parameter."""
    X = _check_input(params, X)
    h = tape.constant(X)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = tape.relu(tape.affine(h, tape.param(f"W{l}", w), tape.param(f"b{l}", b)))
        h = out if l == 0 else tape.residual_add(h, out)
    gamma = tape.param("gamma", params.gamma)
    return tape.affine(h, tape.transpose(gamma), tape.param("bias", params.bias))


# -- serialisation ------------------------------------------------------


def _fmt_array(name: str, a: np.ndarray) -> list[str]:
    a = np.atleast_2d(a) if a.ndim == 2 else a.reshape(1, -1)
    rows, cols = a.shape
    lines = [f"array {name} {rows} {cols}"]
    for r in range(rows):
        lines.append(" ".join(float(v).hex() for v in a[r]))
    return lines


def dumps(params: ModelParams) -> str:
    a = params.arch
    lines = [
        f"{FORMAT_NAME} {FORMAT_VERSION}",
        f"input_dim {a.input_dim}",
        f"hidden_width {a.hidden_width}",
        f"hidden_layers {a.hidden_layers}",
        f"n_species {params.n_species}",
        "species_ids " + json.dumps(list(params.species_ids), ensure_ascii=False),
        "covariate_names " + json.dumps(list(params.covariate_names), ensure_ascii=False),
    ]
    lines += _fmt_array("cov_mean", params.cov_mean)
    lines += _fmt_array("cov_std", params.cov_std)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines += _fmt_array(f"W{l}", w)
        lines += _fmt_array(f"b{l}", b)
    lines += _fmt_array("gamma", params.gamma)
    lines += _fmt_array("bias", params.bias)
    return "\n".join(lines) + "\n"


def loads(text: str, source="<string>") -> ModelParams:
    lines = text.splitlines()
    pos = 0

    def take(key: str) -> str:
        nonlocal pos
        if pos >= len(lines):
            raise DataError(f"unexpected end of document, expected {key!r}", source, pos + 1)
        head, _, rest = lines[pos].partition(" ")
        if head != key:
            raise DataError(f"expected {key!r}, found {head!r}", source, pos + 1)
        pos += 1
        return rest

    def take_array(name: str, vector: bool) -> np.ndarray:
        nonlocal pos
        hdr = take("array").split()
        if len(hdr) != 3 or hdr[0] != name:
            raise DataError(f"expected array {name!r}", source, pos)
        rows, cols = int(hdr[1]), int(hdr[2])
        data = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(lines):
                raise DataError(f"array {name!r} truncated", source, pos + 1)
            tokens = lines[pos].split(" ") if cols else []
            if len(tokens) != cols:
                raise DataError(f"array {name!r} row {r} has {len(tokens)} values, expected {cols}", source, pos + 1)
            try:
                data[r] = [float.fromhex(t) for t in tokens]
            except ValueError as exc:
                raise DataError(f"bad number in array {name!r}: {exc}", source, pos + 1) from None
            pos += 1
        return data.reshape(-1) if vector else data

    magic = lines[0].split() if lines else []
    if len(magic) != 2 or magic[0] != FORMAT_NAME:
        raise DataError("not a model document", source, 1)
    if int(magic[1]) != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {magic[1]}", source, 1)
    pos = 1
    arch = Architecture(
        input_dim=int(take("input_dim")),
        hidden_width=int(take("hidden_width")),
        hidden_layers=int(take("hidden_layers")),
    )
    n_species = int(take("n_species"))
    species_ids = json.loads(take("species_ids"))
    covariate_names = json.loads(take("covariate_names"))
    cov_mean = take_array("cov_mean", True)
    cov_std = take_array("cov_std", True)
    weights, biases = [], []
    for l in range(arch.hidden_layers):
        weights.append(take_array(f"W{l}", False))
        biases.append(take_array(f"b{l}", True))
    gamma = take_array("gamma", False)
    bias = take_array("bias", True)
    if gamma.shape != (n_species, arch.feature_dim):
        raise DataError(f"gamma has shape {gamma.shape}, expected {(n_species, arch.feature_dim)}", source)
    return ModelParams(arch, weights, biases, gamma, bias, cov_mean, cov_std, species_ids, covariate_names)


def save(params: ModelParams, path) -> None:
    from .data import atomic_write_text

    atomic_write_text(path, dumps(params))


def load(path) -> ModelParams:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), source=path)
