"""End-to-end training of the parameter-map network through the unrolled
solver.

Two code paths share every prox formula: a plain numpy path for evaluation
(:func:`reconstruct`) and a taped path for gradients
(:func:`reconstruct_taped`).  The taped path mirrors the solver arithmetic
operation for operation, so with identical weights the two are bit-identical;
a test pins this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .network import NetWeights, UNetConfig, net_forward, net_forward_taped, weight_leaves
from .operators import LinearOperator
from .prox import KlParams
from .solvers import (
    Problem,
    pd3o_solve_ct,
    pd3o_step_params,
    pdhg_solve,
    pdhg_step_params,
)
from .tensors import SharingMode, expand_map, grad_norm_exact


@dataclass
class TrainConfig:
    t_train: int = 64
    t_test: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 40
    batch_size: int = 4
    validate_every: int = 2
    seed: int = 0
    mode: SharingMode = SharingMode.XY_T

    def __post_init__(self):
        if self.t_train < 1:
            raise ValueError("t_train must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


def estimate_weight_field(
    x0: np.ndarray, weights: NetWeights, net_cfg: UNetConfig, mode: SharingMode
) -> np.ndarray:
    chans = net_forward(x0, weights, net_cfg)
    return expand_map(chans, mode)


def reconstruct(
    x0: np.ndarray,
    z: np.ndarray,
    A: LinearOperator,
    weights: NetWeights,
    net_cfg: UNetConfig,
    mode: SharingMode,
    T: int,
    kl: KlParams | None = None,
):
    """Estimate the weight field from ``x0`` and run ``T`` solver iterations
    with it held fixed.  ``T = 0`` returns ``x0`` unchanged."""
    if T == 0:
        return x0.copy()
    lam = estimate_weight_field(x0, weights, net_cfg, mode)
    if kl is not None:
        return pd3o_solve_ct(A, z, lam, kl, x0, T).image
    return pdhg_solve(A, z, lam, x0, T).image


def reconstruct_taped(
    tape: ad.Tape,
    x0: np.ndarray,
    z: np.ndarray,
    A: LinearOperator,
    weight_vars,
    net_cfg: UNetConfig,
    mode: SharingMode,
    T: int,
    kl: KlParams | None = None,
) -> ad.Var:
    """Differentiable twin of :func:`reconstruct` on an explicit tape."""
    x0_var = tape.constant(np.ascontiguousarray(x0))
    chans = net_forward_taped(tape, x0_var, weight_vars, net_cfg)
    q_dirs = 3 if x0.shape[0] > 1 else 2
    lam = ad.expand_channels(chans, mode.channels, q_dirs)
    if kl is not None:
        return _taped_pd3o(tape, x0_var, z, A, lam, kl, T)
    return _taped_pdhg(tape, x0_var, z, A, lam, T)


def _taped_pdhg(tape, x0_var, z, A, lam, T):
    step = pdhg_step_params(A)
    sigma, tau, theta = step.sigma, step.tau, step.theta
    x = x0_var
    xbar = x0_var
    p = tape.constant(np.zeros_like(z))
    q = tape.constant(np.zeros_like(lam.value, dtype=x0_var.value.dtype))
    for _ in range(T):
        ax = ad.apply_forward(A, xbar)
        p = ad.l2_conj_step(p, ax, z, sigma)
        q = ad.box_clip_ad(ad.add_scaled(q, sigma, ad.grad_field(xbar)), lam)
        x_new = ad.add_scaled2(
            x, -tau, ad.apply_adjoint(A, p), -tau, ad.grad_field_adjoint(q)
        )
        xbar = ad.extrapolate(x_new, x, theta)
        x = x_new
    return x


def _taped_pd3o(tape, x0_var, z, A, lam, kl, T):
    grad_norm = grad_norm_exact(x0_var.value.shape)
    sigma, tau = pd3o_step_params(A, kl, grad_norm)
    mu, n0 = kl.mu, kl.n0
    exp_mz = np.exp(np.clip(-z * mu, -700.0, 700.0))

    def grad_h(p_var):
        # scale before the adjoint, matching the plain solver's arithmetic
        ap = ad.apply_forward(A, p_var)
        diff = ad.rsub_const(exp_mz, ad.exp_clamped_ad(ad.scale(ap, -mu)))
        return ad.apply_adjoint(A, ad.scale(diff, mu * n0))

    p = x0_var
    xbar = x0_var
    q = tape.constant(np.zeros_like(lam.value))
    gh = grad_h(p)
    for _ in range(T):
        q = ad.box_clip_ad(ad.add_scaled(q, sigma, ad.grad_field(xbar)), lam)
        p_new = ad.leaky_relu(
            ad.add_scaled2(p, -tau, gh, -tau, ad.grad_field_adjoint(q)), 0.0
        )
        gh_new = grad_h(p_new)
        xbar = ad.pd3o_combine(p_new, p, gh, gh_new, tau)
        p = p_new
        gh = gh_new
    return p


def loss_taped(
    tape: ad.Tape,
    batch: list[Problem],
    weight_vars,
    net_cfg: UNetConfig,
    cfg: TrainConfig,
    T: int | None = None,
    include_decay: bool = True,
) -> ad.Var:
    """Mean reconstruction MSE over the batch plus the L2 weight penalty,
    recorded on one tape (the differentiable training objective)."""
    if not batch:
        raise ValueError("empty batch")
    T = cfg.t_train if T is None else T
    total = None
    for prob in batch:
        x0 = prob.init_image()
        rec = reconstruct_taped(
            tape, x0, prob.z, prob.A, weight_vars, net_cfg, cfg.mode, T, kl=prob.kl
        )
        item = ad.mse(rec, tape.constant(prob.x_true))
        total = item if total is None else ad.add(total, item)
    out = ad.scale(total, 1.0 / len(batch))
    if include_decay and cfg.weight_decay > 0:
        penalty = None
        for kw, bw in weight_vars:
            term = ad.add(
                ad.reduce_sum(ad.mul(kw, kw)), ad.reduce_sum(ad.mul(bw, bw))
            )
            penalty = term if penalty is None else ad.add(penalty, term)
        out = ad.add(out, ad.scale(penalty, cfg.weight_decay))
    return out


def loss_value(
    batch: list[Problem],
    weights: NetWeights,
    net_cfg: UNetConfig,
    cfg: TrainConfig,
    T: int | None = None,
) -> float:
    """Plain (numpy-path) evaluation of the training objective."""
    if not batch:
        raise ValueError("empty batch")
    T = cfg.t_train if T is None else T
    vals = []
    for prob in batch:
        rec = reconstruct(
            prob.init_image(), prob.z, prob.A, weights, net_cfg, cfg.mode, T, kl=prob.kl
        )
        vals.append(float(np.mean(np.abs(rec - prob.x_true) ** 2)))
    out = float(np.mean(vals))
    if cfg.weight_decay > 0:
        out += cfg.weight_decay * float(np.sum(weights.flat() ** 2))
    return out


def batch_gradient(
    batch: list[Problem],
    weights: NetWeights,
    net_cfg: UNetConfig,
    cfg: TrainConfig,
) -> tuple[float, np.ndarray]:
    """Mean MSE and its flat gradient; items use separate tapes so memory
    scales with one unrolled solve, and are reduced in batch order."""
    grad_flat = np.zeros(weights.flat().size)
    total = 0.0
    for prob in batch:
        tape = ad.Tape()
        wv = weight_leaves(tape, weights)
        # decay enters through the decoupled optimizer step, not the tape
        item = loss_taped(tape, [prob], wv, net_cfg, cfg, include_decay=False)
        grads = tape.backward(item)
        parts = []
        for kw, bw in wv:
            gk = grads.get(kw.idx)
            gb = grads.get(bw.idx)
            parts.append(
                (gk if gk is not None else np.zeros_like(kw.value)).ravel()
            )
            parts.append(
                (gb if gb is not None else np.zeros_like(bw.value)).ravel()
            )
        grad_flat += np.concatenate(parts)
        total += float(item.value)
    n = len(batch)
    return total / n, grad_flat / n


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(
    flat: np.ndarray, grad_flat: np.ndarray, state: AdamState, cfg: TrainConfig
) -> np.ndarray:
    """One Adam update with bias correction; weight decay (when set) is
    applied decoupled from the moment estimates."""
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad_flat
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad_flat**2
    m_hat = state.m / (1.0 - cfg.beta1**state.t)
    v_hat = state.v / (1.0 - cfg.beta2**state.t)
    out = flat - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    if cfg.weight_decay > 0:
        out = out - cfg.lr * cfg.weight_decay * flat
    return out


@dataclass
class TrainHistory:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, train, val

    def as_csv_rows(self):
        return [(float(e), t, v) for e, t, v in self.rows]


def train(
    train_items: list[Problem],
    val_items: list[Problem],
    weights: NetWeights,
    net_cfg: UNetConfig,
    cfg: TrainConfig,
) -> tuple[NetWeights, TrainHistory]:
    """Shuffled mini-batch epochs with periodic validation; returns the
    checkpoint with the lowest validation MSE and the loss history."""
    if not train_items or not val_items:
        raise ValueError("need non-empty train and validation splits")
    rng = np.random.default_rng(cfg.seed)
    flat = weights.flat()
    state = AdamState.zeros(flat.size)
    history = TrainHistory()
    best_val = np.inf
    best_flat = flat.copy()

    def val_loss(w: NetWeights) -> float:
        vals = [
            float(
                np.mean(
                    np.abs(
                        reconstruct(
                            p.init_image(), p.z, p.A, w, net_cfg, cfg.mode,
                            cfg.t_train, kl=p.kl,
                        )
                        - p.x_true
                    )
                    ** 2
                )
            )
            for p in val_items
        ]
        return float(np.mean(vals))

    current = weights
    v0 = val_loss(current)
    best_val = v0
    history.rows.append((0, np.nan, v0))
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_items))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_items[i] for i in order[start : start + cfg.batch_size]]
            value, grad_flat = batch_gradient(batch, current, net_cfg, cfg)
            epoch_losses.append(value)
            flat = adam_step(flat, grad_flat, state, cfg)
            current = weights.from_flat(flat)
        if epoch % cfg.validate_every == 0 or epoch == cfg.epochs:
            v = val_loss(current)
            history.rows.append((epoch, float(np.mean(epoch_losses)), v))
            if v < best_val:
                best_val = v
                best_flat = flat.copy()
        else:
            history.rows.append((epoch, float(np.mean(epoch_losses)), np.nan))
    return weights.from_flat(best_flat), history


def evaluate(
    items: list[Problem],
    weights: NetWeights,
    net_cfg: UNetConfig,
    mode: SharingMode,
    T: int,
):
    """Per-item (psnr, nrmse, ssim) of the learned-map reconstructions."""
    from .metrics import nrmse, psnr, ssim

    rows = []
    for prob in items:
        rec = reconstruct(
            prob.init_image(), prob.z, prob.A, weights, net_cfg, mode, T, kl=prob.kl
        )
        rows.append(
            (psnr(rec, prob.x_true), nrmse(rec, prob.x_true), ssim(rec, prob.x_true))
        )
    return rows
