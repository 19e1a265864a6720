"""Primal-dual solvers with fixed weight fields, plus reference solves and
scalar grid-search baselines.

Both solvers run an exact, fixed number of iterations and are bit-for-bit
deterministic.  The per-iteration arithmetic here is mirrored operation for
operation by the taped training path in :mod:`tvmap.training`; keep the two
in sync (a test pins them to bit equality).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .fileio import write_csv
from .metrics import psnr
from .operators import LinearOperator
from .prox import (
    ClampDiag,
    KlParams,
    box_clip,
    kl_grad_sino,
    kl_lipschitz,
    kl_value,
    l2_conjugate_prox,
    nonneg_prox,
)
from .tensors import (
    SharingMode,
    constant_map,
    expand_map,
    grad,
    grad_adjoint,
    grad_norm_exact,
    weighted_tv,
)

# Safety factor applied to estimated operator norms before step sizing, so the
# step-size inequalities hold for the true norm and not just the estimate.
NORM_CUSHION = 1.0 + 1e-3


@dataclass
class Problem:
    """One reconstruction instance: operator, data, optional truth and init."""

    A: LinearOperator
    z: np.ndarray
    x_true: np.ndarray | None = None
    x0: np.ndarray | None = None
    kl: KlParams | None = None

    def init_image(self) -> np.ndarray:
        if self.x0 is not None:
            return self.x0
        return self.A.adjoint(self.z)


@dataclass
class StepParams:
    sigma: float
    tau: float
    theta: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("theta must lie in (0, 1]")


@dataclass
class SolveReport:
    image: np.ndarray
    iterations: int
    objective: list[float] = field(default_factory=list)
    step_norm: list[float] = field(default_factory=list)
    data_residual: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    dual_p: np.ndarray | None = None
    dual_q: np.ndarray | None = None
    reached_tol: float | None = None
    converged: bool = True
    clamp: ClampDiag = field(default_factory=ClampDiag)

    def write_diagnostics(self, path) -> None:
        rows = [
            (float(i), o, s, d)
            for i, (o, s, d) in enumerate(
                zip(self.objective, self.step_norm, self.data_residual), start=1
            )
        ]
        write_csv(path, ["iter", "objective", "step_norm", "data_residual"], rows)


def stacked_norm_bound(A: LinearOperator) -> float:
    """Certified upper bound on |[A; grad]|: the estimated |A| (cushioned)
    and the exact gradient norm combine as sqrt(|A|^2 + |grad|^2).  Cached on
    the operator instance; for A = I the bound is tight."""
    cached = getattr(A, "_stacked_norm_bound", None)
    if cached is None:
        cached = float(
            np.sqrt(
                (A.norm() * NORM_CUSHION) ** 2
                + grad_norm_exact(A.domain_shape) ** 2
            )
        )
        A._stacked_norm_bound = cached
    return cached


def pdhg_step_params(A: LinearOperator, theta: float = 1.0) -> StepParams:
    """sigma = tau = 1/L with L the stacked-operator norm bound."""
    L = stacked_norm_bound(A)
    return StepParams(sigma=1.0 / L, tau=1.0 / L, theta=theta)


def _as_field(lam, shape) -> np.ndarray:
    if np.isscalar(lam):
        return constant_map(float(lam), shape)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (grad(np.zeros(shape)).shape[0],) + tuple(shape):
        raise ValueError(f"weight field shape {lam.shape} does not fit image {shape}")
    if np.any(lam <= 0):
        raise ValueError("weight field must be strictly positive")
    return lam


def pdhg_solve(
    A: LinearOperator,
    z: np.ndarray,
    lam,
    x0: np.ndarray,
    T: int,
    step: StepParams | None = None,
    record: bool = False,
    nonneg: bool = False,
    p0: np.ndarray | None = None,
    q0: np.ndarray | None = None,
    _snapshots: dict | None = None,
) -> SolveReport:
    """Exactly ``T`` primal-dual iterations for 0.5|Ax - z|^2 + |lam grad x|_1.

    Per iteration: dual L2 step, dual clip step, primal descent step,
    extrapolation with ``theta``.  Starts from p = 0, q = 0, xbar = x0 unless
    warm-start duals are passed.  ``nonneg`` swaps the identity primal prox
    for a projection onto x >= 0.
    """
    if T < 0:
        raise ValueError("iteration count must be >= 0")
    lam = _as_field(lam, x0.shape)
    if step is None:
        step = pdhg_step_params(A)
    L = stacked_norm_bound(A)
    if step.sigma * step.tau * L * L > 1.0 + 1e-9:
        raise ValueError("step sizes violate sigma * tau * L^2 <= 1")
    sigma, tau, theta = step.sigma, step.tau, step.theta
    t_start = time.perf_counter()
    x = x0.copy()
    xbar = x0.copy()
    p = np.zeros_like(z) if p0 is None else p0.copy()
    q = np.zeros_like(grad(x0)) if q0 is None else q0.copy()
    report = SolveReport(image=x, iterations=T)
    for k in range(T):
        ax = A.forward(xbar)
        p = l2_conjugate_prox(p, ax, z, sigma)
        q = box_clip(q + sigma * grad(xbar), lam)
        x_new = x - tau * A.adjoint(p) - tau * grad_adjoint(q)
        if nonneg:
            x_new = nonneg_prox(x_new)
        xbar = x_new + theta * (x_new - x)
        if record:
            axn = A.forward(x_new)
            report.objective.append(
                0.5 * float(np.sum(np.abs(axn - z) ** 2)) + weighted_tv(x_new, lam)
            )
            report.step_norm.append(float(np.linalg.norm((x_new - x).ravel())))
            report.data_residual.append(float(np.linalg.norm((axn - z).ravel())))
        if _snapshots is not None:
            _snapshots[k] = (x_new.copy(), xbar.copy(), p.copy(), q.copy())
        x = x_new
    report.image = x
    report.dual_p = p
    report.dual_q = q
    report.wall_time = time.perf_counter() - t_start
    return report


def pd3o_step_params(A: LinearOperator, kl: KlParams, grad_norm: float) -> tuple[float, float]:
    """tau = 0.9 * 2 / Lip(grad h), sigma = 1 / (tau |grad|^2)."""
    lip = kl_lipschitz(A, kl)
    tau = 0.9 * 2.0 / lip
    sigma = 1.0 / (tau * grad_norm**2)
    return sigma, tau


def pd3o_solve_ct(
    A: LinearOperator,
    z: np.ndarray,
    lam,
    kl: KlParams | None,
    xbar0: np.ndarray,
    T: int,
    steps: tuple[float, float] | None = None,
    record: bool = False,
    _snapshots: dict | None = None,
) -> SolveReport:
    """Exactly ``T`` three-operator-splitting iterations for the KL fidelity
    plus weighted TV plus a nonnegativity constraint.

    Starts from p = xbar0, q = 0.  ``kl = None`` disables the smooth term
    (the gradient step vanishes), which reduces one iteration to a PDHG
    iteration with the nonnegativity prox; that path exists as a test hook.
    Returns the prox output p_T, which is nonnegative by construction.
    """
    if T < 0:
        raise ValueError("iteration count must be >= 0")
    lam = _as_field(lam, xbar0.shape)
    grad_norm = grad_norm_exact(xbar0.shape)
    if steps is None:
        if kl is None:
            tau = 1.0 / grad_norm
            sigma = 1.0 / (tau * grad_norm**2)
        else:
            sigma, tau = pd3o_step_params(A, kl, grad_norm)
    else:
        sigma, tau = steps
    if sigma * tau * grad_norm**2 > 1.0 + 1e-9:
        raise ValueError("step sizes violate sigma * tau * |grad|^2 <= 1")
    diag = ClampDiag()

    def grad_h(pv: np.ndarray) -> np.ndarray:
        if kl is None:
            return np.zeros_like(pv)
        return A.adjoint(kl_grad_sino(A.forward(pv), z, kl, diag))

    t_start = time.perf_counter()
    p = xbar0.copy()
    xbar = xbar0.copy()
    q = np.zeros_like(grad(xbar0))
    gh = grad_h(p)
    report = SolveReport(image=p, iterations=T, clamp=diag)
    for k in range(T):
        q = box_clip(q + sigma * grad(xbar), lam)
        p_new = nonneg_prox(p - tau * gh - tau * grad_adjoint(q))
        gh_new = grad_h(p_new)
        xbar = 2.0 * p_new - p + tau * gh - tau * gh_new
        if not np.isfinite(p_new).all():
            raise NumericalError(f"non-finite iterate at iteration {k + 1}", iteration=k + 1)
        if record:
            obj = weighted_tv(p_new, lam)
            if kl is not None:
                obj += kl_value(A.forward(p_new), z, kl, diag)
            report.objective.append(obj)
            report.step_norm.append(float(np.linalg.norm((p_new - p).ravel())))
            report.data_residual.append(
                float(np.linalg.norm((A.forward(p_new) - z).ravel()))
            )
        if _snapshots is not None:
            _snapshots[k] = (p_new.copy(), xbar.copy(), q.copy())
        p = p_new
        gh = gh_new
    report.image = p
    report.dual_q = q
    report.wall_time = time.perf_counter() - t_start
    return report


def solve_problem(
    problem: Problem, lam, T: int, record: bool = False, x0: np.ndarray | None = None
) -> SolveReport:
    """Run the solver matching the problem's fidelity (PDHG or PD3O)."""
    start = x0 if x0 is not None else problem.init_image()
    if problem.kl is not None:
        return pd3o_solve_ct(problem.A, problem.z, lam, problem.kl, start, T, record=record)
    return pdhg_solve(problem.A, problem.z, lam, start, T, record=record)


def reference_solve(
    problem: Problem,
    lam,
    tol: float = 1e-10,
    T_max: int = 20000,
    x0: np.ndarray | None = None,
    check_every: int = 50,
    step: StepParams | None = None,
) -> SolveReport:
    """Run the matching solver until the relative step norm drops below
    ``tol`` (or ``T_max`` is reached); a converged-enough stand-in for the
    exact minimizer.  ``report.reached_tol`` records the final step ratio and
    ``report.converged`` whether the tolerance was met.
    """
    start = (x0 if x0 is not None else problem.init_image()).copy()
    lam_field = _as_field(lam, start.shape)
    eps = 1e-30
    done = 0
    x = start
    last_ratio = np.inf
    if problem.kl is not None:
        p = start.copy()
        xbar = start.copy()
        q = np.zeros_like(grad(start))
        grad_norm = grad_norm_exact(start.shape)
        sigma, tau = pd3o_step_params(problem.A, problem.kl, grad_norm)
        diag = ClampDiag()
        gh = problem.A.adjoint(kl_grad_sino(problem.A.forward(p), problem.z, problem.kl, diag))
        while done < T_max:
            block = min(check_every, T_max - done)
            for _ in range(block):
                q = box_clip(q + sigma * grad(xbar), lam_field)
                p_new = nonneg_prox(p - tau * gh - tau * grad_adjoint(q))
                gh_new = problem.A.adjoint(
                    kl_grad_sino(problem.A.forward(p_new), problem.z, problem.kl, diag)
                )
                xbar = 2.0 * p_new - p + tau * gh - tau * gh_new
                p_prev, p = p, p_new
                gh = gh_new
            done += block
            last_ratio = float(
                np.linalg.norm((p - p_prev).ravel())
                / max(np.linalg.norm(p.ravel()), eps)
            )
            if last_ratio <= tol:
                break
        report = SolveReport(image=p, iterations=done, clamp=diag)
        report.dual_q = q
    else:
        if step is None:
            step = pdhg_step_params(problem.A)
        sigma, tau, theta = step.sigma, step.tau, step.theta
        xbar = start.copy()
        p = np.zeros_like(problem.z)
        q = np.zeros_like(grad(start))
        while done < T_max:
            block = min(check_every, T_max - done)
            for _ in range(block):
                ax = problem.A.forward(xbar)
                p = l2_conjugate_prox(p, ax, problem.z, sigma)
                q = box_clip(q + sigma * grad(xbar), lam_field)
                x_new = x - tau * problem.A.adjoint(p) - tau * grad_adjoint(q)
                xbar = x_new + theta * (x_new - x)
                x_prev, x = x, x_new
            done += block
            last_ratio = float(
                np.linalg.norm((x - x_prev).ravel())
                / max(np.linalg.norm(x.ravel()), eps)
            )
            if last_ratio <= tol:
                break
        report = SolveReport(image=x, iterations=done)
        report.dual_p = p
        report.dual_q = q
    report.reached_tol = last_ratio
    report.converged = last_ratio <= tol
    return report


def _lam_for_candidate(cand, mode: SharingMode, shape) -> np.ndarray:
    if mode is SharingMode.XYT:
        chans = np.full((1,) + tuple(shape), float(cand))
    elif mode is SharingMode.XY_T:
        sp, tm = cand
        chans = np.stack([np.full(shape, float(sp)), np.full(shape, float(tm))])
    else:
        raise ValueError("grid search supports modes xyt and xy_t")
    return expand_map(chans, mode)


def grid_search_scalar(
    problems: list[Problem],
    mode: SharingMode,
    grid,
    T: int,
    workers: int = 1,
):
    """Pick the scalar weight(s) maximizing mean PSNR over ``problems``.

    ``grid`` is a list of values for mode xyt, or a pair of lists (spatial,
    temporal) whose Cartesian product is scanned for mode xy_t.  Candidates
    are visited in ascending (lexicographic) order and ties keep the earlier,
    i.e. smaller, candidate.  Returns ``(best, scores)`` with ``scores`` the
    mean PSNR per candidate in scan order.
    """
    if not problems:
        raise ValueError("empty problem list")
    for prob in problems:
        if prob.x_true is None:
            raise ValueError("grid search needs ground-truth images")
    if mode is SharingMode.XYT:
        cands = sorted(float(v) for v in grid)
    else:
        sp, tm = grid
        cands = [(a, b) for a in sorted(map(float, sp)) for b in sorted(map(float, tm))]
    if not cands:
        raise ValueError("empty grid")
    if any((min(c) if isinstance(c, tuple) else c) <= 0 for c in cands):
        raise ValueError("grid values must be strictly positive")

    def score(cand) -> float:
        vals = []
        for prob in problems:
            lam = _lam_for_candidate(cand, mode, prob.init_image().shape)
            rep = solve_problem(prob, lam, T)
            vals.append(psnr(rep.image, prob.x_true))
        return float(np.mean(vals))

    if workers > 1:
        from .parallel import pmap

        scores = pmap(score, cands, workers)
    else:
        scores = [score(c) for c in cands]
    best_i = 0
    for i in range(1, len(cands)):
        if scores[i] > scores[best_i]:
            best_i = i
    return cands[best_i], scores
