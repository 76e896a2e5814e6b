"""Self-checks shared by the ``verify`` command and the test-suite."""

from __future__ import annotations

import numpy as np

from . import losses
from . import model as model_mod
from .losses import LossKind
from .train import TrainConfig, batch_objective, objective_value, verify_batch_property

FD_STEP = 1e-5
REL_TOL = 1e-5
ABS_FLOOR = 1e-8


def random_instance(rng, kind: LossKind, max_p=6, max_c=16, max_b=12, max_n=5, layers=None, tau=None):
    """Random small model, batch and counts for a gradient check.

    Resamples until every hidden pre-activation is at least ``1e-3`` away
    from the ReLU kink, where central differences are not valid.
    """
    kind = LossKind(kind)
    while True:
        p = int(rng.integers(1, max_p + 1))
        c = int(rng.integers(1, max_c + 1))
        L = int(rng.integers(0, 4)) if layers is None else layers
        b = int(rng.integers(2, max_b + 1))
        n = int(rng.integers(1, max_n + 1))
        arch = model_mod.Architecture(p, c, L)
        params = model_mod.init(arch, n, int(rng.integers(2**31)))
        for bvec in params.biases:
            bvec[:] = rng.normal(0, 0.3, size=bvec.shape)
        params.bias[:] = rng.normal(0, 0.5, size=n)
        X = rng.normal(size=(b, p))
        counts = rng.poisson(1.5, size=(b, n)).astype(np.float64)
        if kind is LossKind.CE_SPECIES and not np.any(counts.sum(axis=1) > 0):
            continue
        if _min_preactivation(params, X) < 1e-3:
            continue
        wd = float(rng.choice([0.0, 3e-4, 0.1])) if tau is None else tau
        cfg = TrainConfig(loss=kind, weight_decay=wd, delta=1e-6, hidden_layers=L, hidden_width=c)
        return params, X, counts, cfg


def _min_preactivation(params, X) -> float:
    h = X
    lowest = np.inf
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w + b
        lowest = min(lowest, float(np.min(np.abs(pre))))
        out = np.maximum(pre, 0.0)
        h = out if l == 0 else h + out
    return lowest


def gradient_check(params, X, counts, cfg, h: float = FD_STEP) -> float:
    """Largest violation ratio of analytic vs central-difference gradients.

    Each coordinate is scored as ``|a - f| / max(REL_TOL * max(|a|, |f|), ABS_FLOOR)``,
    so a value below 1 means every coordinate passes.
    """
    _, grads = batch_objective(params, X, counts, cfg)
    worst = 0.0
    for name, arr in params.arrays().items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = objective_value(params, X, counts, cfg)
            flat[k] = old - h
            down = objective_value(params, X, counts, cfg)
            flat[k] = old
            fd = (up - down) / (2 * h)
            err = abs(g[k] - fd) / max(REL_TOL * max(abs(g[k]), abs(fd)), ABS_FLOOR)
            worst = max(worst, err)
    return worst


def equivalence_residual(rng, max_k=50, max_n=10) -> float:
    k = int(rng.integers(2, max_k + 1))
    n = int(rng.integers(1, max_n + 1))
    lam = np.exp(rng.normal(0, 2, size=(k, n)))
    y = rng.poisson(2.0, size=(k, n)) + 1e-6
    return abs(losses.verify_poisson_maxent_equivalence(lam, y))


def run_suite(seed: int = 0, quick: bool = True) -> list[tuple[str, bool, str]]:
    """Run the equivalence, batch-property and gradient checks.

    Returns ``(name, passed, detail)`` triples.
    """
    rng = np.random.default_rng(seed)
    out = []

    n_eq = 200 if quick else 1000
    worst = max(equivalence_residual(rng) for _ in range(n_eq))
    out.append(("poisson-maxent-equivalence", worst < 1e-10, f"max residual {worst:.3e} over {n_eq} instances"))

    cases = [(4, 2), (6, 3)] if quick else [(4, 2), (4, 3), (6, 2), (6, 3), (6, 5), (8, 4)]
    for K, n in cases:
        y = rng.integers(1, 10, size=K).astype(float)
        dev = verify_batch_property(K, n, y, seed=seed)
        out.append((f"batch-property K={K} n={n}", dev < 1e-3, f"max |norm_lam - norm_y| = {dev:.3e}"))

    per_kind = 3 if quick else 50
    for kind in LossKind:
        worst = max(gradient_check(*random_instance(rng, kind)) for _ in range(per_kind))
        out.append((f"gradient {kind.value}", worst < 1.0, f"worst tolerance ratio {worst:.3e}"))
    return out
