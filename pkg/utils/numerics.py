"""Finite-difference helpers.

Central differences used as oracles for analytic gradients and as the Hessian
policy for models without an analytic second derivative.
"""
from typing import Callable

import numpy as np
import numpy.typing as npt

Vector = npt.NDArray[np.float64]


def _steps(x: Vector, rel_step: float) -> Vector:
    return rel_step * np.maximum(1.0, np.abs(x))


def central_gradient(f: Callable[[Vector], float], x: Vector, rel_step: float = 1e-5) -> Vector:
    """
    Central-difference gradient of a scalar function.

    Args:
        f (Callable): Scalar function of a vector.
        x (numpy.ndarray): Evaluation point.
        rel_step (float): Step relative to max(1, |x_j|).

    Returns:
        numpy.ndarray: Gradient estimate.
    """
    x = np.asarray(x, dtype=np.float64)
    steps = _steps(x, rel_step)
    grad = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        grad[j] = (f(x + e) - f(x - e)) / (2.0 * steps[j])
    return grad


def central_jacobian(g: Callable[[Vector], Vector], x: Vector, rel_step: float = 1e-4) -> npt.NDArray[np.float64]:
    """
    Central-difference Jacobian of a vector function; column j is d g / d x_j.

    Args:
        g (Callable): Vector function of a vector.
        x (numpy.ndarray): Evaluation point.
        rel_step (float): Step relative to max(1, |x_j|).

    Returns:
        numpy.ndarray: Jacobian of shape (len(g(x)), len(x)).
    """
    x = np.asarray(x, dtype=np.float64)
    steps = _steps(x, rel_step)
    columns = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        columns.append((g(x + e) - g(x - e)) / (2.0 * steps[j]))
    return np.column_stack(columns)


def symmetric_hessian(grad: Callable[[Vector], Vector], x: Vector, rel_step: float = 1e-4) -> npt.NDArray[np.float64]:
    """
    Hessian as the central-difference Jacobian of the gradient, symmetrized.

    Args:
        grad (Callable): Gradient function.
        x (numpy.ndarray): Evaluation point.
        rel_step (float): Step relative to max(1, |x_j|).

    Returns:
        numpy.ndarray: Symmetric (d, d) matrix.
    """
    jac = central_jacobian(grad, x, rel_step)
    return 0.5 * (jac + jac.T)


def directional_hvp(grad: Callable[[Vector], Vector], x: Vector, v: Vector, rel_step: float = 1e-4) -> Vector:
    """
    Hessian-vector product by a central difference of the gradient along `v`.

    Args:
        grad (Callable): Gradient function.
        x (numpy.ndarray): Evaluation point.
        v (numpy.ndarray): Direction.
        rel_step (float): Step relative to max(1, ||x||) / ||v||.

    Returns:
        numpy.ndarray: Approximation of H(x) v.
    """
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0:
        return np.zeros_like(x)
    eps = rel_step * max(1.0, float(np.linalg.norm(x))) / norm_v
    return (grad(x + eps * v) - grad(x - eps * v)) / (2.0 * eps)
