"""Proximal maps and fidelity derivatives shared by both solvers.

``box_clip`` is the dual prox of the weighted l1 term (a pointwise projection
onto [-lam, lam], applied to real and imaginary parts separately for complex
inputs), ``l2_conjugate_prox`` the dual step of the squared-L2 fidelity, and
the ``kl_*`` functions evaluate the log-transformed Poisson fidelity, its
image-space gradient and a Lipschitz bound for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


EXP_CLAMP = 700.0


@dataclass
class KlParams:
    """Photon statistics of the log-transformed count measurement."""

    mu: float
    n0: float

    def __post_init__(self):
        if self.mu <= 0 or self.n0 <= 0:
            raise ValueError("mu and n0 must be positive")


@dataclass
class ClampDiag:
    """Counts how often the exponential overflow guard engaged."""

    events: int = 0
    entries: int = 0

    def tripped(self) -> bool:
        return self.events > 0


def box_clip(q: np.ndarray, lam) -> np.ndarray:
    """Entrywise projection of ``q`` onto the box [-lam, lam].

    Complex inputs are projected per real component, consistent with the
    anisotropic |Re| + |Im| form of the penalty.
    """
    lam = np.asarray(lam)
    if lam.ndim and lam.shape != q.shape:
        raise ValueError(f"bound shape {lam.shape} != field shape {q.shape}")
    if np.iscomplexobj(q):
        re = np.minimum(np.maximum(q.real, -lam), lam)
        im = np.minimum(np.maximum(q.imag, -lam), lam)
        return re + 1j * im
    return np.minimum(np.maximum(q, -lam), lam)


def l2_conjugate_prox(p: np.ndarray, ax: np.ndarray, z: np.ndarray, sigma: float) -> np.ndarray:
    """Dual update of the squared-L2 fidelity: (p + sigma (ax - z)) / (1 + sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if p.shape != ax.shape or ax.shape != z.shape:
        raise ValueError("p, ax and z must share one shape")
    return (p + sigma * (ax - z)) / (1.0 + sigma)


def nonneg_prox(p: np.ndarray) -> np.ndarray:
    """Projection onto the nonnegative orthant."""
    return np.maximum(p, 0.0)


def exp_clamped(a: np.ndarray, diag: ClampDiag | None = None) -> np.ndarray:
    """exp with arguments clamped to +-700 (the float64 overflow margin).

    Clamping is flagged on ``diag`` when provided, never silent in solvers.
    """
    clipped = np.clip(a, -EXP_CLAMP, EXP_CLAMP)
    if diag is not None:
        hits = int(np.count_nonzero(clipped != a))
        if hits:
            diag.events += 1
            diag.entries += hits
    return np.exp(clipped)


def kl_value(ax: np.ndarray, z: np.ndarray, params: KlParams, diag: ClampDiag | None = None) -> float:
    """Kullback-Leibler fidelity of a sinogram against log-count data."""
    if ax.shape != z.shape:
        raise ValueError("sinogram shapes differ")
    mu, n0 = params.mu, params.n0
    val = exp_clamped(-ax * mu, diag) * n0 - exp_clamped(-z * mu, diag) * n0 * (
        -ax * mu + np.log(n0)
    )
    return float(np.sum(val))


def kl_grad_image(x: np.ndarray, A, z: np.ndarray, params: KlParams, diag: ClampDiag | None = None) -> np.ndarray:
    """Image-space gradient mu n0 A^T (exp(-z mu) - exp(-A x mu))."""
    mu, n0 = params.mu, params.n0
    return mu * n0 * A.adjoint(exp_clamped(-z * mu, diag) - exp_clamped(-A.forward(x) * mu, diag))


def kl_grad_sino(ax: np.ndarray, z: np.ndarray, params: KlParams, diag: ClampDiag | None = None) -> np.ndarray:
    """Sinogram-space gradient factor mu n0 (exp(-z mu) - exp(-ax mu))."""
    mu, n0 = params.mu, params.n0
    return mu * n0 * (exp_clamped(-z * mu, diag) - exp_clamped(-ax * mu, diag))


def kl_lipschitz(A, params: KlParams) -> float:
    """Upper bound |A|^2 mu^2 n0 on the Lipschitz constant of the KL gradient,
    valid on the nonnegative orthant the solver is constrained to."""
    return A.norm() ** 2 * params.mu**2 * params.n0
