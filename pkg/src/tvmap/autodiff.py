"""Tape-based reverse-mode differentiation for the parameter-map network and
the unrolled solver iterations.

The engine records exactly the primitives those two components need, nothing
more.  Every recorded node stores its forward value and a vector-Jacobian
closure; ``Tape.backward`` walks the nodes in strict reverse creation order,
so gradient accumulation is deterministic.

Complex values are treated as pairs of reals: the gradient ``g`` of a scalar
loss with respect to a complex array ``v`` is the complex array with
``dL = Re <g, dv>``.  Linear-operator nodes therefore backpropagate through
the registered adjoint, and elementwise nodes act on real and imaginary
parts separately.

The tape stores every unrolled iteration in full; at the image sizes this
package targets that is a few hundred megabytes at worst, so no
recompute-from-checkpoint machinery is provided.  If larger problems ever
need it, the natural seam is to segment the iteration loop and re-run
segments inside ``backward``.
"""

from __future__ import annotations

import itertools

import numpy as np

from .prox import EXP_CLAMP
from .tensors import grad as grad_field_fn
from .tensors import grad_adjoint as grad_adjoint_fn


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents, vjp, requires_grad):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad


class Var:
    """Handle to one recorded node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.idx].requires_grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.exp_clamp_entries = 0

    def _emit(self, value, parents=(), vjp=None, requires_grad=False) -> Var:
        self.nodes.append(Node(value, tuple(parents), vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return self._emit(value, requires_grad=requires_grad)

    def constant(self, value) -> Var:
        return self._emit(value, requires_grad=False)

    def nbytes(self) -> int:
        total = 0
        for node in self.nodes:
            if isinstance(node.value, np.ndarray):
                total += node.value.nbytes
            else:
                total += 8
        return total

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every requires-grad leaf,
        keyed by node index.  Accumulation order is fixed by node order."""
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        lval = loss.value
        if isinstance(lval, np.ndarray) and lval.size != 1:
            raise ValueError("loss must be scalar")
        grads: list = [None] * len(self.nodes)
        grads[loss.idx] = 1.0
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            if not node.requires_grad:
                continue
            parent_grads = node.vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        return {
            i: grads[i]
            for i, node in enumerate(self.nodes)
            if node.vjp is None
            and node.requires_grad
            and node.parents == ()
            and grads[i] is not None
        }


def _same_tape(*vars_) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _needs(*vars_) -> bool:
    return any(v.requires_grad for v in vars_)


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    return tape._emit(
        a.value + b.value, (a.idx, b.idx), lambda u: (u, u), _needs(a, b)
    )


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    return tape._emit(
        a.value - b.value, (a.idx, b.idx), lambda u: (u, -u), _needs(a, b)
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._emit(c * a.value, (a.idx,), lambda u: (c * u,), a.requires_grad)


def mul(a: Var, b: Var) -> Var:
    """Elementwise product; complex factors backpropagate conjugated."""
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def vjp(u):
        ga = np.conj(bv) * u if np.iscomplexobj(bv) else bv * u
        gb = np.conj(av) * u if np.iscomplexobj(av) else av * u
        return ga, gb

    return tape._emit(av * bv, (a.idx, b.idx), vjp, _needs(a, b))


def add_scaled(a: Var, c: float, b: Var) -> Var:
    """a + c * b in one node (the dual pre-step of the solvers)."""
    tape = _same_tape(a, b)
    c = float(c)
    return tape._emit(
        a.value + c * b.value, (a.idx, b.idx), lambda u: (u, c * u), _needs(a, b)
    )


def add_scaled2(a: Var, c1: float, b1: Var, c2: float, b2: Var) -> Var:
    """a + c1 * b1 + c2 * b2 in one node (the primal descent step)."""
    tape = _same_tape(a, b1, b2)
    c1, c2 = float(c1), float(c2)
    value = a.value + c1 * b1.value + c2 * b2.value
    return tape._emit(
        value, (a.idx, b1.idx, b2.idx), lambda u: (u, c1 * u, c2 * u), _needs(a, b1, b2)
    )


def extrapolate(x_new: Var, x_old: Var, theta: float) -> Var:
    """x_new + theta (x_new - x_old), the over-relaxation step."""
    tape = _same_tape(x_new, x_old)
    theta = float(theta)
    value = x_new.value + theta * (x_new.value - x_old.value)
    return tape._emit(
        value,
        (x_new.idx, x_old.idx),
        lambda u: ((1.0 + theta) * u, -theta * u),
        _needs(x_new, x_old),
    )


def pd3o_combine(p_new: Var, p_old: Var, gh_old: Var, gh_new: Var, tau: float) -> Var:
    """2 p_new - p_old + tau gh_old - tau gh_new, the three-operator update."""
    tape = _same_tape(p_new, p_old, gh_old, gh_new)
    tau = float(tau)
    value = 2.0 * p_new.value - p_old.value + tau * gh_old.value - tau * gh_new.value
    return tape._emit(
        value,
        (p_new.idx, p_old.idx, gh_old.idx, gh_new.idx),
        lambda u: (2.0 * u, -u, tau * u, -tau * u),
        _needs(p_new, p_old, gh_old, gh_new),
    )


def apply_forward(A, x: Var) -> Var:
    """Record y = A x; the backward rule is the registered adjoint."""
    return x.tape._emit(
        A.forward(x.value), (x.idx,), lambda u: (A.adjoint(u),), x.requires_grad
    )


def apply_adjoint(A, y: Var) -> Var:
    return y.tape._emit(
        A.adjoint(y.value), (y.idx,), lambda u: (A.forward(u),), y.requires_grad
    )


def grad_field(x: Var) -> Var:
    return x.tape._emit(
        grad_field_fn(x.value), (x.idx,), lambda u: (grad_adjoint_fn(u),), x.requires_grad
    )


def grad_field_adjoint(q: Var) -> Var:
    return q.tape._emit(
        grad_adjoint_fn(q.value), (q.idx,), lambda u: (grad_field_fn(u),), q.requires_grad
    )


def box_clip_ad(q: Var, lam: Var) -> Var:
    """Projection onto [-lam, lam]; boundary entries count as interior for q
    and contribute sign(q) to the bound's gradient only outside the box."""
    tape = _same_tape(q, lam)
    qv, lv = q.value, lam.value

    if np.iscomplexobj(qv):
        value = np.minimum(np.maximum(qv.real, -lv), lv) + 1j * np.minimum(
            np.maximum(qv.imag, -lv), lv
        )

        def vjp(u):
            in_re = np.abs(qv.real) <= lv
            in_im = np.abs(qv.imag) <= lv
            gq = np.where(in_re, u.real, 0.0) + 1j * np.where(in_im, u.imag, 0.0)
            gl = np.where(in_re, 0.0, np.sign(qv.real) * u.real) + np.where(
                in_im, 0.0, np.sign(qv.imag) * u.imag
            )
            return gq, gl

    else:
        value = np.minimum(np.maximum(qv, -lv), lv)

        def vjp(u):
            inside = np.abs(qv) <= lv
            gq = np.where(inside, u, 0.0)
            gl = np.where(inside, 0.0, np.sign(qv) * u)
            return gq, gl

    return tape._emit(value, (q.idx, lam.idx), vjp, _needs(q, lam))


def l2_conj_step(p: Var, ax: Var, z: np.ndarray, sigma: float) -> Var:
    """(p + sigma (ax - z)) / (1 + sigma); z is data, not differentiated."""
    tape = _same_tape(p, ax)
    sigma = float(sigma)
    value = (p.value + sigma * (ax.value - z)) / (1.0 + sigma)
    s = 1.0 / (1.0 + sigma)
    return tape._emit(
        value, (p.idx, ax.idx), lambda u: (s * u, sigma * s * u), _needs(p, ax)
    )


def leaky_relu(x: Var, alpha: float) -> Var:
    xv = x.value
    if alpha == 0.0:
        value = np.maximum(xv, 0.0)
    else:
        value = np.where(xv > 0, xv, alpha * xv)

    def vjp(u):
        return (np.where(xv > 0, u, alpha * u),)

    return x.tape._emit(value, (x.idx,), vjp, x.requires_grad)


def softplus(x: Var) -> Var:
    xv = x.value
    value = np.logaddexp(0.0, xv)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return x.tape._emit(value, (x.idx,), lambda u: (sig * u,), x.requires_grad)


def exp_clamped_ad(x: Var) -> Var:
    """exp with the +-700 overflow guard; clamped entries get zero gradient
    and bump the tape's diagnostic counter."""
    xv = x.value
    clipped = np.clip(xv, -EXP_CLAMP, EXP_CLAMP)
    hits = int(np.count_nonzero(clipped != xv))
    if hits:
        x.tape.exp_clamp_entries += hits
    value = np.exp(clipped)
    inside = np.abs(xv) <= EXP_CLAMP
    return x.tape._emit(
        value, (x.idx,), lambda u: (np.where(inside, value * u, 0.0),), x.requires_grad
    )


def rsub_const(c, x: Var) -> Var:
    """c - x for a constant c."""
    return x.tape._emit(c - x.value, (x.idx,), lambda u: (-u,), x.requires_grad)


def reduce_sum(x: Var) -> Var:
    xv = x.value
    if np.iscomplexobj(xv):
        raise ValueError("reduce_sum is defined for real values only")
    return x.tape._emit(
        float(np.sum(xv)), (x.idx,), lambda u: (u * np.ones_like(xv),), x.requires_grad
    )


def mse(a: Var, b: Var) -> Var:
    """Mean squared difference; complex differences contribute |.|^2."""
    tape = _same_tape(a, b)
    diff = a.value - b.value
    n = diff.size
    value = float(np.mean(np.abs(diff) ** 2))

    def vjp(u):
        g = (2.0 / n) * diff * u
        return g, -g

    return tape._emit(value, (a.idx, b.idx), vjp, _needs(a, b))


def split_reim(x: Var) -> Var:
    """Complex image (nt, nx, ny) to a real 2-channel stack."""
    xv = x.value
    value = np.stack([xv.real, xv.imag])
    return x.tape._emit(
        value, (x.idx,), lambda u: (u[0] + 1j * u[1],), x.requires_grad
    )


def concat_channels(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    na = a.value.shape[0]
    value = np.concatenate([a.value, b.value], axis=0)
    return tape._emit(
        value, (a.idx, b.idx), lambda u: (u[:na], u[na:]), _needs(a, b)
    )


def expand_channels(chans: Var, mode_channels: int, q: int) -> Var:
    """Share network output channels across the q difference directions:
    1 channel copies everywhere, 2 channels map to (spatial, spatial,
    temporal), 3 channels pass through."""
    cv = chans.value
    if mode_channels == 1:
        value = np.stack([cv[0]] * q)

        def vjp(u):
            return (np.sum(u, axis=0)[None],)

    elif mode_channels == 2:
        if q != 3:
            raise ValueError("two-channel sharing needs q = 3")
        value = np.stack([cv[0], cv[0], cv[1]])

        def vjp(u):
            return (np.stack([u[0] + u[1], u[2]]),)

    elif mode_channels == 3:
        if q != 3:
            raise ValueError("three-channel sharing needs q = 3")
        value = cv.copy()

        def vjp(u):
            return (u,)

    else:
        raise ValueError(f"unsupported channel count {mode_channels}")
    return chans.tape._emit(value, (chans.idx,), vjp, chans.requires_grad)


def _conv_windows(xp: np.ndarray, kernel_shape, out_shape):
    """Shifted views of a padded input, one per kernel offset, C order."""
    views = []
    for offset in itertools.product(*[range(k) for k in kernel_shape]):
        sl = tuple(slice(o, o + s) for o, s in zip(offset, out_shape))
        views.append(xp[(slice(None),) + sl])
    return views


def conv(x: Var, w: Var, b: Var) -> Var:
    """n-d correlation with stride 1 and zero padding, plus a channel bias.

    ``x`` is (c_in, *spatial), ``w`` is (c_out, c_in, *kernel) with odd
    kernel extents, ``b`` is (c_out,).
    """
    tape = _same_tape(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    c_out, c_in = wv.shape[0], wv.shape[1]
    kernel = wv.shape[2:]
    if xv.shape[0] != c_in:
        raise ValueError(f"input has {xv.shape[0]} channels, kernel expects {c_in}")
    if any(k % 2 == 0 for k in kernel):
        raise ValueError("kernel extents must be odd")
    spatial = xv.shape[1:]
    pad = [(0, 0)] + [(k // 2, k // 2) for k in kernel]
    xp = np.pad(xv, pad)
    windows = np.stack(_conv_windows(xp, kernel, spatial), axis=1)  # (ci, K, *sp)
    k_total = windows.shape[1]
    mat = windows.reshape(c_in * k_total, -1)
    y = (wv.reshape(c_out, c_in * k_total) @ mat).reshape((c_out,) + spatial)
    y = y + bv.reshape((c_out,) + (1,) * len(spatial))

    def vjp(u):
        uf = u.reshape(c_out, -1)
        # input gradient: scatter the transposed mix back through the offsets
        mix = (wv.reshape(c_out, c_in * k_total).T @ uf).reshape(
            (c_in, k_total) + spatial
        )
        gp = np.zeros_like(xp)
        for i, offset in enumerate(itertools.product(*[range(k) for k in kernel])):
            sl = tuple(slice(o, o + s) for o, s in zip(offset, spatial))
            gp[(slice(None),) + sl] += mix[:, i]
        crop = tuple(
            slice(k // 2, k // 2 + s) for k, s in zip(kernel, spatial)
        )
        gx = gp[(slice(None),) + crop]
        gw = (uf @ mat.T).reshape(wv.shape)
        gb = uf.sum(axis=1)
        return gx, gw, gb

    return tape._emit(y, (x.idx, w.idx, b.idx), vjp, _needs(x, w, b))


def avg_pool2(x: Var) -> Var:
    """Average pooling with a factor of 2 along every spatial axis."""
    xv = x.value
    spatial = xv.shape[1:]
    if any(s % 2 for s in spatial):
        raise ValueError(f"spatial shape {spatial} is not divisible by 2")
    rank = len(spatial)
    shape = [xv.shape[0]]
    for s in spatial:
        shape.extend([s // 2, 2])
    blocks = xv.reshape(shape)
    axes = tuple(2 + 2 * i for i in range(rank))
    value = blocks.mean(axis=axes)
    inv = 1.0 / (2**rank)

    def vjp(u):
        g = u * inv
        for ax in range(1, rank + 1):
            g = np.repeat(g, 2, axis=ax)
        return (g,)

    return x.tape._emit(value, (x.idx,), vjp, x.requires_grad)


def upsample_nearest2(x: Var) -> Var:
    """Nearest-neighbour upsampling by 2 along every spatial axis."""
    xv = x.value
    rank = xv.ndim - 1
    value = xv
    for ax in range(1, rank + 1):
        value = np.repeat(value, 2, axis=ax)

    def vjp(u):
        g = u
        for ax in range(1, rank + 1):
            s = g.shape
            new = s[:ax] + (s[ax] // 2, 2) + s[ax + 1 :]
            g = g.reshape(new).sum(axis=ax + 1)
        return (g,)

    return x.tape._emit(value, (x.idx,), vjp, x.requires_grad)


def finite_diff_check(build, leaves, eps: float = 1e-6, trials: int = 20, seed: int = 0):
    """Compare reverse-mode gradients against central finite differences.

    ``build(tape, leaf_vars) -> scalar Var`` records the function under test;
    ``leaves`` is a list of real arrays.  ``trials`` coordinates are sampled
    at random and the maximum relative error
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8) is returned.

    Each coordinate is differenced at ``eps`` and ``10 eps`` and the better
    match counts: cancellation noise shrinks with the larger step and
    truncation error with the smaller one, while a genuinely wrong gradient
    fails at both.
    """
    leaves = [np.asarray(a, dtype=np.float64) for a in leaves]
    tape = Tape()
    leaf_vars = [tape.leaf(a.copy()) for a in leaves]
    loss = build(tape, leaf_vars)
    grads = tape.backward(loss)
    ad = [grads.get(v.idx, np.zeros_like(a)) for v, a in zip(leaf_vars, leaves)]

    def value_at(arrays) -> float:
        t = Tape()
        lv = [t.leaf(a, requires_grad=False) for a in arrays]
        out = build(t, lv)
        return float(out.value)

    def fd_at(li: int, flat: int, h: float) -> float:
        plus = [a.copy() for a in leaves]
        minus = [a.copy() for a in leaves]
        plus[li].ravel()[flat] += h
        minus[li].ravel()[flat] -= h
        return (value_at(plus) - value_at(minus)) / (2 * h)

    rng = np.random.default_rng(seed)
    sizes = [a.size for a in leaves]
    total = sum(sizes)
    worst = 0.0
    for _ in range(trials):
        flat = int(rng.integers(total))
        li = 0
        while flat >= sizes[li]:
            flat -= sizes[li]
            li += 1
        g_ad = float(np.asarray(ad[li]).ravel()[flat])
        err = np.inf
        for h in (eps, 10 * eps):
            g_fd = fd_at(li, flat, h)
            err = min(err, abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8))
        worst = max(worst, err)
    return worst
