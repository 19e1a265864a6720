"""Forward models: identity, multi-coil Cartesian MRI encoder, parallel-beam
Radon transform, plus operator-norm estimation, FBP and the CG initializer.

Every operator exposes ``forward``/``adjoint`` pairs that satisfy
``<A x, y> == <x, A^H y>`` to round-off; the test suite enforces this with
randomized probes on each concrete implementation.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .errors import ConvergenceError
from .tensors import COMPLEX, REAL, grad, grad_adjoint, ndirs


def _vdot(a: np.ndarray, b: np.ndarray) -> complex:
    return complex(np.vdot(a.ravel(), b.ravel()))


class LinearOperator:
    """A forward/adjoint pair with declared domain and codomain shapes."""

    domain_shape: tuple[int, ...]
    codomain_shape: tuple[int, ...]

    def __init__(self, domain_shape, codomain_shape):
        self.domain_shape = tuple(domain_shape)
        # None for operators with composite codomains (e.g. stacked pairs)
        self.codomain_shape = tuple(codomain_shape) if codomain_shape is not None else None
        self._norm_estimate: float | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def norm(self, tol: float = 1e-6, max_iter: int = 20000) -> float:
        """Cached operator-norm estimate, see :func:`op_norm`."""
        if self._norm_estimate is None:
            self._norm_estimate = op_norm(self, tol=tol, max_iter=max_iter)
        return self._norm_estimate


class IdentityOp(LinearOperator):
    def __init__(self, shape):
        super().__init__(shape, shape)
        self._norm_estimate = 1.0

    def forward(self, x):
        return x.copy()

    def adjoint(self, y):
        return y.copy()


def identity_op(shape) -> IdentityOp:
    return IdentityOp(shape)


class GradOp(LinearOperator):
    """The difference stack as an operator, mostly for norm estimation."""

    def __init__(self, shape):
        super().__init__(shape, (ndirs(tuple(shape)),) + tuple(shape))

    def forward(self, x):
        return grad(x)

    def adjoint(self, g):
        return grad_adjoint(g)


class StackedOp(LinearOperator):
    """Vertical stack (A, grad); codomain elements are (data, field) pairs."""

    def __init__(self, inner: LinearOperator):
        super().__init__(inner.domain_shape, None)
        self.inner = inner

    def forward(self, x):
        return (self.inner.forward(x), grad(x))

    def adjoint(self, y):
        return self.inner.adjoint(y[0]) + grad_adjoint(y[1])


class MriEncoder(LinearOperator):
    """Multi-coil Cartesian encoder: mask the orthonormal 2-D FFT per coil.

    ``coil_maps`` has shape (n_c, nx, ny) with unit sum-of-squares per pixel,
    ``masks`` is a boolean or 0/1 array of shape (nt, nx, ny) marking sampled
    k-space positions per frame.  Codomain arrays keep the full grid with
    zeros at unsampled positions.
    """

    def __init__(self, coil_maps: np.ndarray, masks: np.ndarray):
        coil_maps = np.ascontiguousarray(coil_maps, dtype=COMPLEX)
        masks = np.ascontiguousarray(masks).astype(REAL)
        if coil_maps.ndim != 3 or masks.ndim != 3:
            raise ValueError("coil maps need shape (nc, nx, ny), masks (nt, nx, ny)")
        if coil_maps.shape[1:] != masks.shape[1:]:
            raise ValueError(
                f"coil grid {coil_maps.shape[1:]} != mask grid {masks.shape[1:]}"
            )
        if not masks.any(axis=(1, 2)).all():
            raise ValueError("every frame needs at least one sampled position")
        sos = np.sum(np.abs(coil_maps) ** 2, axis=0)
        if not np.allclose(sos, 1.0, atol=1e-8):
            raise ValueError("coil sensitivities must be normalized per pixel")
        n_t = masks.shape[0]
        super().__init__(
            (n_t,) + coil_maps.shape[1:], (coil_maps.shape[0],) + masks.shape
        )
        self.coil_maps = coil_maps
        self.masks = masks
        self.n_coils = coil_maps.shape[0]
        self.n_frames = n_t

    def forward(self, x):
        if x.shape != self.domain_shape:
            raise ValueError(f"image shape {x.shape} != {self.domain_shape}")
        coil_imgs = self.coil_maps[:, None] * x[None]
        k = np.fft.fft2(coil_imgs, axes=(-2, -1), norm="ortho")
        return k * self.masks[None]

    def adjoint(self, z):
        if z.shape != self.codomain_shape:
            raise ValueError(f"k-space shape {z.shape} != {self.codomain_shape}")
        imgs = np.fft.ifft2(z * self.masks[None], axes=(-2, -1), norm="ortho")
        return np.sum(np.conj(self.coil_maps)[:, None] * imgs, axis=0)


class RadonOp(LinearOperator):
    """Discrete parallel-beam Radon transform on an n-by-n grid.

    Rays are sampled at half-pixel steps with bilinear interpolation and
    weighted by the step length; the adjoint is the exact transpose of that
    discretization (the system matrix is materialized as sparse CSR once).
    Detector bins are equidistant and span the grid diagonal.
    """

    def __init__(self, n: int, angles: np.ndarray, n_bins: int, side: float = 1.0):
        angles = np.asarray(angles, dtype=REAL)
        if angles.ndim != 1 or angles.size == 0:
            raise ValueError("need a non-empty 1-d array of angles")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        super().__init__((1, n, n), (angles.size, n_bins))
        self.n = n
        self.angles = angles
        self.n_bins = n_bins
        self.side = float(side)
        self.pixel = self.side / n
        self.diag = self.side * np.sqrt(2.0)
        self.bin_spacing = self.diag / n_bins
        self._matrix = self._build_matrix()
        self._matrix_t = self._matrix.T.tocsr()

    def _build_matrix(self) -> sparse.csr_matrix:
        n, h = self.n, self.pixel
        step = h / 2.0
        n_samples = int(np.ceil(self.diag / step))
        u = -self.diag / 2.0 + (np.arange(n_samples) + 0.5) * step
        t = -self.diag / 2.0 + (np.arange(self.n_bins) + 0.5) * self.bin_spacing
        blocks = []
        for j, theta in enumerate(self.angles):
            c, s = np.cos(theta), np.sin(theta)
            # sample coordinates for all (bin, sample) pairs of this angle
            px = t[:, None] * c - u[None, :] * s
            py = t[:, None] * s + u[None, :] * c
            fx = (px + self.side / 2.0) / h - 0.5
            fy = (py + self.side / 2.0) / h - 0.5
            ix = np.floor(fx).astype(np.int64)
            iy = np.floor(fy).astype(np.int64)
            wx = fx - ix
            wy = fy - iy
            rows = np.broadcast_to(
                (j * self.n_bins + np.arange(self.n_bins))[:, None], fx.shape
            )
            data, rr, cc = [], [], []
            for dx, dy, w in (
                (0, 0, (1 - wx) * (1 - wy)),
                (1, 0, wx * (1 - wy)),
                (0, 1, (1 - wx) * wy),
                (1, 1, wx * wy),
            ):
                gx, gy = ix + dx, iy + dy
                ok = (gx >= 0) & (gx < n) & (gy >= 0) & (gy < n) & (w > 0)
                data.append((w[ok] * step).ravel())
                rr.append(rows[ok].ravel())
                cc.append((gx[ok] * n + gy[ok]).ravel())
            blocks.append(
                sparse.coo_matrix(
                    (np.concatenate(data), (np.concatenate(rr), np.concatenate(cc))),
                    shape=(self.angles.size * self.n_bins, n * n),
                )
            )
        mat = sparse.csr_matrix(sum(blocks))
        mat.sum_duplicates()
        return mat

    def forward(self, x):
        if x.shape not in (self.domain_shape, self.domain_shape[1:]):
            raise ValueError(f"image shape {x.shape} != {self.domain_shape}")
        s = self._matrix @ np.asarray(x, dtype=REAL).ravel()
        return s.reshape(self.codomain_shape)

    def adjoint(self, s):
        if s.shape != self.codomain_shape:
            raise ValueError(f"sinogram shape {s.shape} != {self.codomain_shape}")
        x = self._matrix_t @ np.asarray(s, dtype=REAL).ravel()
        return x.reshape(self.domain_shape)

    def geometry(self) -> dict[str, str]:
        return {
            "n": str(self.n),
            "n_angles": str(self.angles.size),
            "n_bins": str(self.n_bins),
            "side": repr(self.side),
        }


def equispaced_angles(n_angles: int) -> np.ndarray:
    return np.arange(n_angles) * (np.pi / n_angles)


def fbp(op: RadonOp, sino: np.ndarray) -> np.ndarray:
    """Filtered backprojection baseline: band-limited ramp filter with Hann
    apodization in the detector frequency domain, backprojection via the
    exact adjoint.

    The ramp is the spectrum of the discrete ramp kernel (rather than |freq|
    sampled directly), which avoids a DC bias in the reconstruction.  The
    scale ``pi / n_angles * bin_spacing / pixel_area`` converts the adjoint
    smear into the continuous backprojection integral.
    """
    sino = np.asarray(sino, dtype=REAL)
    n_angles, n_bins = sino.shape
    pad = 1 << max(6, int(np.ceil(np.log2(2 * n_bins))))
    db = op.bin_spacing
    # discrete ramp kernel: 1/(4 db^2) at 0, -1/(pi n db)^2 at odd offsets
    idx = np.fft.fftfreq(pad) * pad
    kernel = np.zeros(pad)
    kernel[0] = 1.0 / (4.0 * db * db)
    odd = np.abs(idx.astype(np.int64)) % 2 == 1
    kernel[odd] = -1.0 / (np.pi * idx[odd] * db) ** 2
    ramp = np.real(np.fft.fft(kernel)) * db
    freqs = np.fft.fftfreq(pad, d=db)
    nyquist = 0.5 / db
    hann = 0.5 * (1.0 + np.cos(np.pi * freqs / nyquist))
    filt = ramp * hann
    spect = np.fft.fft(sino, n=pad, axis=1) * filt[None, :]
    filtered = np.real(np.fft.ifft(spect, axis=1))[:, :n_bins]
    back = op.adjoint(np.ascontiguousarray(filtered))
    scale = (np.pi / n_angles) * op.bin_spacing / (op.pixel**2)
    return back * scale


def op_norm(op: LinearOperator, tol: float = 1e-6, max_iter: int = 20000) -> float:
    """Largest singular value of ``op`` by power iteration on ``A^H A``.

    Deterministic fixed-seed start; stops when the symmetric-eigenvalue
    residual bound certifies relative accuracy ``tol``.  Raises
    :class:`ConvergenceError` (carrying the last estimate) if the budget runs
    out first.
    """
    rng = np.random.default_rng(0x5EED)
    v = rng.standard_normal(op.domain_shape)
    nv = np.linalg.norm(v.ravel())
    if nv == 0:
        raise ValueError("operator domain is empty")
    v = v / nv
    est = 0.0
    for _ in range(max_iter):
        w = op.adjoint(op.forward(v))
        est = float(np.real(_vdot(v, w)))
        if est <= 0:
            raise ValueError("operator appears to be zero")
        resid = np.linalg.norm((w - est * v).ravel())
        if resid <= tol * est:
            return float(np.sqrt(est))
        v = w / np.linalg.norm(w.ravel())
    raise ConvergenceError(
        f"power iteration did not reach tol={tol} in {max_iter} iterations",
        estimate=float(np.sqrt(est)),
    )


def cg_normal_init(A: LinearOperator, z: np.ndarray, iters: int) -> np.ndarray:
    """Conjugate gradients on the normal equations ``A^H A x = A^H z`` from 0.

    ``iters == 0`` returns the plain adjoint reconstruction ``A^H z``.  Early
    stopping (small ``iters``) is the intended use on noisy data.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    b = A.adjoint(z)
    if iters == 0:
        return b
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(np.real(_vdot(r, r)))
    for _ in range(iters):
        if rs == 0.0:
            break
        ap = A.adjoint(A.forward(p))
        denom = float(np.real(_vdot(p, ap)))
        # breakdown guard: a vanishing Rayleigh quotient means the search
        # direction sits in the normal operator's numerical null space
        if denom <= 1e-12 * float(np.real(_vdot(p, p))):
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(np.real(_vdot(r, r)))
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def make_cartesian_mask(
    n_x: int,
    n_y: int,
    n_t: int,
    R: float,
    center_fraction: float = 0.08,
    seed: int = 0,
) -> np.ndarray:
    """Per-frame ky-line undersampling masks of shape (nt, nx, ny).

    The low-frequency band (``center_fraction`` of the ky lines around DC in
    unshifted FFT order) is always sampled; the remaining lines are drawn
    uniformly at random per frame so the total is about ``n_y / R``.
    """
    if R < 1:
        raise ValueError("acceleration R must be >= 1")
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_t, n_x, n_y), dtype=REAL)
    n_center = max(1, int(round(center_fraction * n_y)))
    center = (np.arange(n_center) - n_center // 2) % n_y
    target = max(n_center, int(round(n_y / R)))
    rest = np.setdiff1d(np.arange(n_y), center)
    for t in range(n_t):
        lines = set(center.tolist())
        extra = target - len(lines)
        if extra > 0 and rest.size:
            lines |= set(rng.choice(rest, size=min(extra, rest.size), replace=False).tolist())
        masks[t, :, sorted(lines)] = 1.0
    return masks


def synth_coil_maps(n_x: int, n_y: int, n_c: int) -> np.ndarray:
    """Synthetic coil sensitivities: Gaussian bumps centered on the image
    border with a gentle linear phase, normalized so sum_k |C_k|^2 = 1."""
    if n_c < 1:
        raise ValueError("need at least one coil")
    gx, gy = np.meshgrid(np.arange(n_x), np.arange(n_y), indexing="ij")
    gx = (gx + 0.5) / n_x - 0.5
    gy = (gy + 0.5) / n_y - 0.5
    width = 0.45
    maps = np.empty((n_c, n_x, n_y), dtype=COMPLEX)
    for k in range(n_c):
        phi = 2.0 * np.pi * k / n_c
        cx, cy = 0.55 * np.cos(phi), 0.55 * np.sin(phi)
        mag = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * width**2))
        phase = np.pi * (np.cos(phi) * gx + np.sin(phi) * gy)
        maps[k] = mag * np.exp(1j * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / sos[None]
