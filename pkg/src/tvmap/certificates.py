"""Executable certificates for the solver theory: the sub-linear rate bound
of the primal-dual iteration and the Lipschitz bound of the solution map in
the weight field.

Both certificates assemble the involved operators densely (brute-force
symmetric eigensolves provide the constants), so they are restricted to
small real-valued problems with the squared-L2 fidelity, where the fidelity
is 1-strongly convex with 1-Lipschitz gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import GradOp, LinearOperator
from .solvers import Problem, StepParams, pdhg_solve, pdhg_step_params, reference_solve
from .tensors import grad, ndirs


def dense_matrix(apply_fn, in_shape, out_size: int) -> np.ndarray:
    """Materialize a linear map column by column from basis probes."""
    n = int(np.prod(in_shape))
    mat = np.zeros((out_size, n))
    e = np.zeros(in_shape)
    flat = e.reshape(-1)
    for j in range(n):
        flat[j] = 1.0
        mat[:, j] = np.asarray(apply_fn(e)).ravel()
        flat[j] = 0.0
    return mat


@dataclass
class RateCertificate:
    c_lower: float
    c_upper: float
    mu_z: float
    L_z: float
    lam_min_ata: float
    lam_bar: float
    c_za: float
    m_norm_gap: float
    entries: list[tuple[int, float, float]] = field(default_factory=list)

    def holds(self) -> bool:
        return all(measured <= bound for _, measured, bound in self.entries)


def _dense_setup(A: LinearOperator, shape):
    n = int(np.prod(shape))
    m = int(np.prod(A.codomain_shape))
    qn = ndirs(tuple(shape)) * n
    a_mat = dense_matrix(A.forward, shape, m)
    g_mat = dense_matrix(lambda v: grad(v), shape, qn)
    k_mat = np.vstack([a_mat, g_mat])
    return a_mat, k_mat, n, m, qn


def rate_certificate(
    A: LinearOperator,
    z: np.ndarray,
    lam: np.ndarray,
    x0: np.ndarray,
    T_list,
    step: StepParams | None = None,
) -> RateCertificate:
    """Measure |x_T - x*| against the T^(-1/4) bound for each T.

    Constants come from dense eigensolves of the step-size matrix M and of
    A^T A; the limit point is a tightly converged reference solve, with the
    primal dual limit taken as A x* - z and the TV dual limit as the final
    clip iterate.  Raises if M is not positive definite for the step sizes.
    """
    shape = x0.shape
    if int(np.prod(shape)) > 64:
        raise ValueError("dense certificate assembly is limited to 64 pixels")
    if step is None:
        base = pdhg_step_params(A)
        # back off from the boundary so M is safely positive definite
        step = StepParams(sigma=0.9 * base.sigma, tau=0.9 * base.tau, theta=1.0)
    a_mat, k_mat, n, m, qn = _dense_setup(A, shape)
    dim = n + m + qn
    m_mat = np.zeros((dim, dim))
    m_mat[:n, :n] = np.eye(n) / step.tau
    m_mat[n:, n:] = np.eye(m + qn) / step.sigma
    m_mat[:n, n:] = -k_mat.T
    m_mat[n:, :n] = -k_mat
    eigs = np.linalg.eigvalsh(m_mat)
    if eigs[0] <= 0:
        raise ValueError("M is not positive definite; reduce the step sizes")
    c_lower, c_upper = float(np.sqrt(eigs[0])), float(np.sqrt(eigs[-1]))
    lam_min_ata = float(np.linalg.eigvalsh(a_mat.T @ a_mat)[0])
    if lam_min_ata <= 0:
        raise ValueError("A^T A is singular; the certificate needs injective A")

    mu_z = 1.0
    L_z = 1.0
    lam_bar = float(np.linalg.norm(np.asarray(lam).ravel()))
    c_za = max(
        c_upper * L_z * A.norm(), 4.0 * c_upper * lam_bar, 2.0, lam_min_ata * mu_z
    ) / (lam_min_ata * mu_z)

    ref = reference_solve(
        Problem(A=A, z=z), lam, tol=1e-12, T_max=200000, x0=x0, step=step
    )
    x_star = ref.image
    p_star = A.forward(x_star) - z
    q_star = ref.dual_q
    v_gap = np.concatenate(
        [
            (x0 - x_star).ravel(),
            (np.zeros_like(z) - p_star).ravel(),
            (np.zeros_like(q_star) - q_star).ravel(),
        ]
    )
    m_norm_gap = float(np.sqrt(v_gap @ (m_mat @ v_gap)))

    cert = RateCertificate(
        c_lower=c_lower,
        c_upper=c_upper,
        mu_z=mu_z,
        L_z=L_z,
        lam_min_ata=lam_min_ata,
        lam_bar=lam_bar,
        c_za=c_za,
        m_norm_gap=m_norm_gap,
    )
    for T in T_list:
        rep = pdhg_solve(A, z, lam, x0, int(T), step=step)
        measured = float(np.linalg.norm((rep.image - x_star).ravel()))
        bound = 3.0 * c_za / float(T) ** 0.25 * (1.0 + m_norm_gap)
        cert.entries.append((int(T), measured, bound))
    return cert


def lipschitz_probe(
    A: LinearOperator,
    z: np.ndarray,
    lam1: np.ndarray,
    lam2: np.ndarray,
    x0: np.ndarray | None = None,
) -> tuple[float, float]:
    """Compare |S*(lam1) - S*(lam2)| with its theoretical Lipschitz bound
    (2 |grad| / (lam_min(A^T A) mu_z)) |lam1 - lam2|; raises on violation."""
    prob = Problem(A=A, z=z, x0=x0)
    shape = prob.init_image().shape
    ref1 = reference_solve(prob, lam1, tol=1e-12, T_max=200000)
    ref2 = reference_solve(prob, lam2, tol=1e-12, T_max=200000)
    lhs = float(np.linalg.norm((ref1.image - ref2.image).ravel()))
    a_mat = dense_matrix(A.forward, shape, int(np.prod(A.codomain_shape)))
    lam_min_ata = float(np.linalg.eigvalsh(a_mat.T @ a_mat)[0])
    if lam_min_ata <= 0:
        raise ValueError("A^T A is singular; the bound needs injective A")
    grad_norm = GradOp(shape).norm()
    diff = float(np.linalg.norm((np.asarray(lam1) - np.asarray(lam2)).ravel()))
    rhs = 2.0 * grad_norm / (lam_min_ata * 1.0) * diff
    if lhs > rhs + 1e-12:
        raise AssertionError(f"Lipschitz bound violated: {lhs} > {rhs}")
    return lhs, rhs
