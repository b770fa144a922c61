"""Central finite-difference verification of reverse-mode gradients.

The checker never consults the tape for the numeric side: it re-evaluates
the objective at elementwise +/- epsilon perturbations, so it stays an
independent oracle for whatever analytic gradients the ops produce.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, zero_grads
from .errors import InputError, NumericError


def _tensor_list(params) -> list[Tensor]:
    if isinstance(params, Mapping):
        return list(params.values())
    if isinstance(params, Tensor):
        return [params]
    return list(params)


def _scalar(value) -> float:
    if not isinstance(value, Tensor):
        raise InputError("grad_check objective must return a Tensor")
    if value.data.size != 1:
        raise InputError(f"grad_check objective must be scalar, got shape {value.shape}")
    v = float(value.data.reshape(()))
    if not np.isfinite(v):
        raise NumericError("grad_check objective is non-finite")
    return v


def grad_check(f: Callable, params, epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    `f` maps the parameter container (dict, sequence, or single Tensor)
    to a scalar Tensor. Per element the error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the max over
    every element of every parameter is returned. Parameters are restored
    to their original values. Use double precision and epsilon in
    [1e-6, 1e-3] for trustworthy results.
    """
    tensors = _tensor_list(params)
    for t in tensors:
        t.requires_grad = True
    zero_grads(tensors)
    loss = f(params)
    _scalar(loss)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, copy=True) for t in tensors]

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            f_plus = _scalar(f(params))
            flat[i] = original - epsilon
            f_minus = _scalar(f(params))
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(float(grad_flat[i]) - numeric) / max(abs(float(grad_flat[i])), abs(numeric), 1e-8)
            worst = max(worst, err)
    zero_grads(tensors)
    return worst


def finite_difference_gradient(f: Callable, params, epsilon: float = 1e-5) -> list[np.ndarray]:
    """Full central-difference gradient, one array per parameter."""
    tensors = _tensor_list(params)
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            f_plus = _scalar(f(params))
            flat[i] = original - epsilon
            f_minus = _scalar(f(params))
            flat[i] = original
            g[i] = (f_plus - f_minus) / (2.0 * epsilon)
        grads.append(g.reshape(t.data.shape))
    return grads
