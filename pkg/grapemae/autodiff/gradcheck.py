"""Central finite-difference checks of analytic gradients."""
from dataclasses import dataclass
from typing import Callable

import numpy as np
from logzero import logger

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, perturbing `x.data` in place and restoring it."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    grad_flat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(x).item()
            flat[i] = orig - h
            f_minus = f(x).item()
            flat[i] = orig
            grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """
    Compare the reverse-mode gradient of scalar `f` at `x` with central differences.

    `x` may be a free input or a model parameter that `f` closes over; its data
    is left unchanged. Relative error per entry is |a - n| / max(|a|, |n|, abs_floor).
    """
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = numeric_grad(f, x, h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    max_rel = float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0
    logger.debug(f"[gradcheck] {x.name or 'tensor'} {x.shape}: max rel error {max_rel:.3e}")
    return GradCheckReport(max_rel_error=max_rel, tol=tol, analytic=analytic, numeric=numeric)
