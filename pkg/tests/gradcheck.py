"""Central finite-difference gradient checks shared by the nn and acceptance tests."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + eps
        hi = f()
        p[i] = old - eps
        lo = f()
        p[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom else 0.0


def predictor_grad_errors(model, x_nhwc: np.ndarray, loss_fn, target) -> list[float]:
    """Relative error of the analytic gradient for every parameter tensor."""
    def f():
        return loss_fn(model.forward_train(x_nhwc), target)[0]

    _, grad = loss_fn(model.forward_train(x_nhwc), target)
    analytic = model.backward(grad)
    return [rel_error(a, numeric_grad(f, p)) for a, p in zip(analytic, model.params)]
