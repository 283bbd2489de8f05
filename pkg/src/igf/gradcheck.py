"""Central finite-difference check of analytic gradients (float64)."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidConfigError

# Absolute scale below which a gradient coordinate counts as zero when forming
# the relative error. Central differences at h=1e-4 carry O(h^2) truncation
# error of about 1e-9 for O(1) third derivatives, so a 1e-5 floor keeps the
# relative error meaningful for tiny coordinates without hiding real bugs.
DENOMINATOR_FLOOR = 1e-5


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    n_coordinates: int
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradient(
    loss: Callable[[torch.Tensor], torch.Tensor | float],
    theta: torch.Tensor,
    n_coordinates: int = 1000,
    h: float = 1e-4,
    rng_seed=0,
    analytic: torch.Tensor | None = None,
) -> GradCheckResult:
    """Compare ``d loss / d theta`` with central differences on random coordinates.

    ``analytic`` defaults to the autograd gradient of ``loss`` at ``theta``.
    """
    theta = theta.detach().to(torch.float64)
    if theta.dim() != 1:
        raise InvalidConfigError("theta must be a flat parameter vector")
    n = theta.numel()
    if analytic is None:
        th = theta.clone().requires_grad_(True)
        (analytic,) = torch.autograd.grad(loss(th), th)
    analytic = analytic.detach().numpy()
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(n, size=min(n_coordinates, n), replace=False)
    numeric = np.empty(idx.size)
    with torch.no_grad():
        for j, i in enumerate(idx.tolist()):
            plus = theta.clone()
            plus[i] += h
            minus = theta.clone()
            minus[i] -= h
            numeric[j] = (float(loss(plus)) - float(loss(minus))) / (2 * h)
    a = analytic[idx]
    err = relative_error(a, numeric)
    worst = int(np.argmax(err))
    return GradCheckResult(float(err[worst]), int(idx.size), int(idx[worst]), a, numeric)
