"""Dense float64 primitives with hand-derived reverse-mode gradients.

Every differentiable op comes as a forward function plus a ``*_backward``
function that maps an upstream gradient to input gradients. Matrices are
plain 2-D ``numpy.float64`` arrays; there is no tape.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, MutableMapping

import numpy as np

from .errors import DegenerateEmbeddingError, DimensionError, EvaluationError, ParameterError

NORM_EPS = 1e-12

Tensor2D = np.ndarray


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``a @ b`` given upstream ``grad``: (G bᵀ, aᵀ G)."""
    return grad @ b.T, a.T @ grad


def _check_temperature(temperature: float) -> None:
    if not temperature > 0 or not np.isfinite(temperature):
        raise ParameterError(f"temperature must be positive and finite, got {temperature}")


def softmax_rows(x, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``x / temperature``, stabilized by the row max."""
    _check_temperature(temperature)
    z = as_tensor(x) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(x, temperature: float = 1.0) -> np.ndarray:
    _check_temperature(temperature)
    z = as_tensor(x) / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows_backward(grad: np.ndarray, y: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Input gradient for ``y = softmax_rows(x, temperature)``."""
    return y * (grad - (grad * y).sum(axis=1, keepdims=True)) / temperature


def l2_normalize_rows(x, eps: float = NORM_EPS) -> np.ndarray:
    y, _ = l2_normalize_rows_forward(x, eps)
    return y


def l2_normalize_rows_forward(x, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Return unit rows and the original row norms (needed by the backward pass)."""
    x = as_tensor(x)
    norms = np.sqrt((x * x).sum(axis=1))
    bad = np.flatnonzero(~(norms >= eps))
    if bad.size:
        raise DegenerateEmbeddingError(int(bad[0]), float(norms[bad[0]]))
    return x / norms[:, None], norms


def l2_normalize_rows_backward(grad: np.ndarray, y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # Jacobian of x/|x| is (I - y yᵀ)/|x|
    return (grad - y * (grad * y).sum(axis=1, keepdims=True)) / norms[:, None]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


LossFn = Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]]


def grad_check(params, loss_fn: LossFn, step: float = 1e-5, value_fn=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``params`` is a mutable mapping of name to array (or anything exposing
    ``named_parameters()``). ``loss_fn(params)`` must return ``(loss, grads)``
    with ``grads`` keyed like ``params``. Entries are perturbed in place and
    restored bit-exactly afterwards. ``value_fn(params) -> loss``, when given,
    is used at the probe points to skip the unneeded backward passes.
    """
    if not step > 0:
        raise ParameterError(f"finite-difference step must be positive, got {step}")
    named: MutableMapping[str, np.ndarray] = (
        params.named_parameters() if hasattr(params, "named_parameters") else params
    )
    probe = value_fn if value_fn is not None else (lambda p: loss_fn(p)[0])
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise EvaluationError(f"loss is not finite at the base point: {loss0}")
    worst = 0.0
    for name, arr in named.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != arr.shape:
            raise DimensionError(f"gradient for {name} has shape {analytic.shape}, parameter has {arr.shape}")
        numeric = np.empty(arr.shape)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            lp = probe(params)
            arr[idx] = orig - step
            lm = probe(params)
            arr[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise EvaluationError(f"non-finite loss while probing {name}{list(idx)}")
            numeric[idx] = (lp - lm) / (2.0 * step)
        if arr.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
