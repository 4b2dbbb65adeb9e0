"""Central finite differences against the tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelDims, Variant, init_params, sgru_forward
from .tensor import Tensor

# central differences at eps=1e-5 cannot resolve gradients much below this
REL_FLOOR = 1e-6

TINY_DIMS = ModelDims(P=3, F=2, N=4, D=1, D_out=1, d=2, d_emb=3, H=5)


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_grad(f: Callable[[], float], x: Tensor, eps: float = 1e-5, order: int = 2) -> np.ndarray:
    """d f / d x by central differences; f re-reads x.data on every call.

    order=2 is the plain two-point stencil. order=4 uses the five-point stencil,
    whose O(eps**4) truncation lets a larger eps keep rounding noise down.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    grad = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)

    def at(i, offset):
        flat[i] = orig + offset
        return f()

    for i in range(flat.size):
        orig = flat[i]
        if order == 2:
            gflat[i] = (at(i, eps) - at(i, -eps)) / (2.0 * eps)
        else:
            gflat[i] = (8.0 * (at(i, eps) - at(i, -eps)) - (at(i, 2 * eps) - at(i, -2 * eps))) / (12.0 * eps)
        flat[i] = orig
    return grad


_SMOOTH_UNARY = (T.tanh, T.sigmoid, T.square)


def random_graph(rng: np.random.Generator):
    """Compose smooth ops over a handful of small leaves; returns (leaves, f)."""
    m, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    params = [Tensor(rng.normal(size=s), requires_grad=True) for s in ((m, k), (k, m), (k,), (m, 1))]
    plan = rng.integers(0, 100, size=8)
    unary = [_SMOOTH_UNARY[i % 3] for i in plan[:4]]

    def f():
        a, b, bias, col = params
        h = T.softmax_rows(unary[0](T.matmul(a, b)) + col)   # (m, m)
        g = T.concat_last(a + bias, h)
        g = unary[1](g) * T.tanh(g)
        if plan[4] % 2:
            g = T.permute(T.reshape(g, (1,) + g.shape), (0, 2, 1))
        s = T.stack([g, g * 0.5], axis=0)
        return T.mean(unary[3](T.select(s, 0, int(plan[5] % 2))) - s)

    return params, f


def random_graph_errors(rng: np.random.Generator) -> float:
    """Max relative error of one random graph against the five-point stencil at h=1e-3."""
    params, f = random_graph(rng)
    T.zero_grads(params)
    T.backward(f())
    worst = 0.0
    for p in params:
        num = numerical_grad(lambda: f().item(), p, 1e-3, order=4)
        worst = max(worst, float(relative_error(p.grad, num).max()))
    return worst


def check_model_gradients(dims: ModelDims = TINY_DIMS, variant: Variant | str = Variant.SGRU,
                          seed: int = 0, eps: float = 1e-5, batch: int | None = None
                          ) -> dict[str, float]:
    """Max relative error per parameter for d sum(forecast) / d parameter."""
    params = init_params(dims, variant, seed)
    rng = np.random.default_rng([seed, 99])
    shape = (dims.P, dims.N, dims.D) if batch is None else (batch, dims.P, dims.N, dims.D)
    X = rng.normal(size=shape)

    out = T.total(sgru_forward(X, params))
    T.backward(out)

    def f():
        with T.no_grad():
            return float(sgru_forward(X, params).data.sum())

    errors = {}
    for name, p in params.named_parameters():
        numeric = numerical_grad(f, p, eps)
        errors[name] = float(relative_error(p.grad, numeric).max())
    return errors


def group_errors(errors: dict[str, float]) -> dict[str, float]:
    """Collapse per-parameter errors to their top-level group (adjacency, cells.a, ...)."""
    groups: dict[str, float] = {}
    for name, err in errors.items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "cells" else parts[0]
        groups[key] = max(groups.get(key, 0.0), err)
    return groups
