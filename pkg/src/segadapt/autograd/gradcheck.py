"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


# Gradients that are exactly zero analytically (e.g. a bias feeding straight into
# instance norm) come back from finite differences as pure rounding noise, so the
# denominator is floored to keep the ratio meaningful.
NORM_FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = NORM_FLOOR) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numerical_gradient(f: Callable[[], Tensor], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> float:
    """Largest relative error between analytic and numerical gradients over ``inputs``."""
    for t in inputs:
        t.grad = None
    f().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numerical_gradient(f, t.data, step)
        worst = max(worst, relative_error(ga, gn))
    return worst


def check_directional(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
    directions: int = 3,
) -> float:
    """Compare <grad, v> with a central difference along random unit directions ``v``.

    Each direction spans every input jointly. Checking one tensor at a time
    breaks down in small networks where a dead ReLU channel leaves a tensor
    with a gradient near 1e-9, which is below the finite-difference noise.
    """
    for t in inputs:
        t.grad = None
    f().backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    origs = [t.data.copy() for t in inputs]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        for t, o, v in zip(inputs, origs, vs):
            t.data[...] = o + step * v
        fp = f().item()
        for t, o, v in zip(inputs, origs, vs):
            t.data[...] = o - step * v
        fm = f().item()
        for t, o in zip(inputs, origs):
            t.data[...] = o
        num = (fp - fm) / (2 * step)
        ana = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), NORM_FLOOR))
    return worst
