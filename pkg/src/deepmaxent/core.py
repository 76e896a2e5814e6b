"""Dense float64 kernels and a small reverse-mode tape.

The tape only knows the handful of operations the intensity model needs:
affine layers, ReLU, residual additions, the per-species log-softmax over
the sites of a batch, and a few scalar reductions used to build losses.
Matrices are plain 2-D ``numpy.float64`` arrays.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` with shape checking."""
    x = as_matrix(x)
    w = as_matrix(w)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: input has {x.shape[1]} columns, weights have {w.shape[0]} rows")
    if b.shape[0] != w.shape[1]:
        raise DimensionError(f"affine: bias length {b.shape[0]} != output width {w.shape[1]}")
    return x @ w + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def residual_add(layer_in: np.ndarray, layer_out: np.ndarray) -> np.ndarray:
    if np.shape(layer_in) != np.shape(layer_out):
        raise DimensionError(f"residual_add: shapes {np.shape(layer_in)} and {np.shape(layer_out)} differ")
    return layer_in + layer_out


def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def batch_log_softmax_over_sites(logits: np.ndarray) -> np.ndarray:
    """Log-softmax of each species column over the sites (rows) of a batch."""
    logits = as_matrix(logits)
    if logits.shape[0] < 2:
        raise DegenerateBatchError(f"normalisation over {logits.shape[0]} site(s) is degenerate; need at least 2")
    return logits - logsumexp(logits, axis=0)


def log_softmax_over_species(logits: np.ndarray) -> np.ndarray:
    """Log-softmax of each site row over species (columns)."""
    logits = as_matrix(logits)
    return logits - logsumexp(logits, axis=1)


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log σ(x) = -softplus(-x), stable for large |x|
    return -np.logaddexp(0.0, -x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Records forward values so that :meth:`backward` can replay them.

    Nodes are integer handles. Parameters are registered by name with
    :meth:`param`; :meth:`backward` returns a ``{name: gradient}`` dict.
    A tape is meant for a single forward/backward pass and is not
    thread-safe.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        # (parent handles, fn(upstream) -> tuple of parent gradients)
        self._rules: list[tuple[tuple[int, ...], Callable | None]] = []
        self._params: dict[str, int] = {}

    def __len__(self):
        return len(self._values)

    def _push(self, value, parents=(), rule=None) -> int:
        self._values.append(value)
        self._rules.append((tuple(parents), rule))
        return len(self._values) - 1

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    def param(self, name: str, value) -> int:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._push(np.asarray(value, dtype=np.float64))
        self._params[name] = node
        return node

    def param_node(self, name: str) -> int:
        return self._params[name]

    def constant(self, value) -> int:
        return self._push(np.asarray(value, dtype=np.float64))

    # -- primitives ---------------------------------------------------

    def affine(self, x: int, w: int, b: int) -> int:
        xv, wv = self._values[x], self._values[w]
        out = affine(xv, wv, self._values[b])

        def rule(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0)

        return self._push(out, (x, w, b), rule)

    def transpose(self, x: int) -> int:
        return self._push(self._values[x].T, (x,), lambda g: (g.T,))

    def relu(self, x: int) -> int:
        xv = self._values[x]
        mask = xv > 0.0

        return self._push(relu(xv), (x,), lambda g: (g * mask,))

    def residual_add(self, layer_in: int, layer_out: int) -> int:
        out = residual_add(self._values[layer_in], self._values[layer_out])
        return self._push(out, (layer_in, layer_out), lambda g: (g, g))

    def batch_log_softmax(self, logits: int) -> int:
        out = batch_log_softmax_over_sites(self._values[logits])
        probs = np.exp(out)

        def rule(g):
            return (g - probs * g.sum(axis=0, keepdims=True),)

        return self._push(out, (logits,), rule)

    def weighted_sum(self, x: int, coeff) -> int:
        """Scalar ``sum(coeff * x)`` for a constant coefficient array."""
        coeff = np.asarray(coeff, dtype=np.float64)
        xv = self._values[x]
        if coeff.shape != xv.shape:
            raise DimensionError(f"weighted_sum: coefficients {coeff.shape} vs values {xv.shape}")
        return self._push(np.float64(np.sum(coeff * xv)), (x,), lambda g: (g * coeff,))

    def scalar_head(self, x: int, fn: Callable[[np.ndarray], tuple[float, np.ndarray]]) -> int:
        """Scalar function of ``x`` with a closed-form gradient.

        ``fn(value)`` returns ``(loss, dloss/dvalue)``.
        """
        val, grad = fn(self._values[x])
        grad = np.asarray(grad, dtype=np.float64)
        return self._push(np.float64(val), (x,), lambda g: (g * grad,))

    def sum_squares(self, nodes, scale: float) -> int:
        """``scale * sum_k ||x_k||^2`` over several nodes."""
        nodes = tuple(nodes)
        vals = [self._values[n] for n in nodes]
        total = np.float64(scale * sum(float(np.sum(v * v)) for v in vals))
        return self._push(total, nodes, lambda g: tuple(2.0 * scale * g * v for v in vals))

    def add(self, *scalars: int) -> int:
        total = np.float64(sum(float(self._values[s]) for s in scalars))
        return self._push(total, scalars, lambda g: tuple(g for _ in scalars))

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        lv = self._values[loss]
        if np.ndim(lv) != 0 and np.size(lv) != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {np.shape(lv)}")
        grads: list = [None] * len(self._values)
        grads[loss] = np.ones_like(lv, dtype=np.float64)
        for node in range(loss, -1, -1):
            g = grads[node]
            if g is None:
                continue
            parents, rule = self._rules[node]
            if rule is None:
                continue
            for p, gp in zip(parents, rule(g)):
                gp = np.asarray(gp, dtype=np.float64).reshape(np.shape(self._values[p]))
                grads[p] = gp if grads[p] is None else grads[p] + gp
        return {
            name: (grads[n] if grads[n] is not None else np.zeros_like(self._values[n]))
            for name, n in self._params.items()
        }
