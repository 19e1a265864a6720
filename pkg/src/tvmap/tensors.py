"""Dense image tensors and the discrete difference machinery on them.

Conventions used throughout the package:

* An image is a numpy array of dtype float64 or complex128 with shape
  ``(nt, nx, ny)``.  Static problems use ``nt = 1``.  Memory order is C
  (row-major), so the time axis is outermost.
* A gradient field stacks the directional forward differences into shape
  ``(q, nt, nx, ny)`` with direction order ``(x, y)`` for static images
  (``q = 2``) and ``(x, y, t)`` for dynamic ones (``q = 3``).
* Forward differences use a replicate (Neumann) boundary: the difference at
  the last index along a direction is zero.  With this choice the composition
  ``grad_adjoint(grad(x))`` is the free path-graph Laplacian per direction and
  the gradient operator norm satisfies ``|grad|^2 <= 4 q``.
* For complex images the real and imaginary parts are differenced
  independently but kept together as one complex component.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

REAL = np.float64
COMPLEX = np.complex128


class SharingMode(Enum):
    """How network output channels are shared across gradient directions."""

    XYT = "xyt"      # one channel used for every direction
    XY_T = "xy_t"    # one spatial channel (x and y), one temporal channel
    X_Y_T = "x_y_t"  # three channels, one per direction

    @property
    def channels(self) -> int:
        return {SharingMode.XYT: 1, SharingMode.XY_T: 2, SharingMode.X_Y_T: 3}[self]


def as_image(data, nt: int | None = None) -> np.ndarray:
    """Validate and canonicalize an array to image shape ``(nt, nx, ny)``.

    2-D input is promoted to a single frame.  Rejects non-finite values and
    anything that is not 2- or 3-dimensional.
    """
    arr = np.asarray(data)
    if np.iscomplexobj(arr):
        arr = np.ascontiguousarray(arr, dtype=COMPLEX)
    else:
        arr = np.ascontiguousarray(arr, dtype=REAL)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise ValueError(f"expected 2- or 3-d image data, got ndim={arr.ndim}")
    if nt is not None and arr.shape[0] != nt:
        raise ValueError(f"expected nt={nt}, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    return arr


def ndirs(shape: tuple[int, ...]) -> int:
    """Number of difference directions for an image shape: 2 static, 3 dynamic."""
    return 3 if shape[0] > 1 else 2


def grad(x: np.ndarray) -> np.ndarray:
    """Forward differences of ``x`` per direction, zero at the trailing edge.

    Returns an array of shape ``(q,) + x.shape``; directions are ordered
    ``(x, y)`` or ``(x, y, t)``.
    """
    q = ndirs(x.shape)
    g = np.zeros((q,) + x.shape, dtype=x.dtype)
    g[0, :, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    g[1, :, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    if q == 3:
        g[2, :-1, :, :] = x[1:, :, :] - x[:-1, :, :]
    return g


def grad_adjoint(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`grad`: ``<grad(x), g> == <x, grad_adjoint(g)>``.

    Note this is the transpose, not the negative divergence; callers supply
    the sign they need.
    """
    if g.ndim != 4:
        raise ValueError("gradient field must have shape (q, nt, nx, ny)")
    q = g.shape[0]
    if q != ndirs(g.shape[1:]):
        raise ValueError(f"field has {q} components, expected {ndirs(g.shape[1:])}")
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    out[:, :-1, :] -= g[0, :, :-1, :]
    out[:, 1:, :] += g[0, :, :-1, :]
    out[:, :, :-1] -= g[1, :, :, :-1]
    out[:, :, 1:] += g[1, :, :, :-1]
    if q == 3:
        out[:-1, :, :] -= g[2, :-1, :, :]
        out[1:, :, :] += g[2, :-1, :, :]
    return out


def abs_parts(g: np.ndarray) -> np.ndarray:
    """Anisotropic magnitude of a (possibly complex) field: |Re| + |Im|."""
    if np.iscomplexobj(g):
        return np.abs(g.real) + np.abs(g.imag)
    return np.abs(g)


def weighted_tv(x: np.ndarray, lam) -> float:
    """Weighted anisotropic total variation ``sum_d sum_z lam_d(z) |grad_d x(z)|``.

    ``lam`` is a positive scalar or an array matching ``(q,) + x.shape``.
    Complex images contribute ``|Re| + |Im|`` per difference.
    """
    g = grad(x)
    lam = np.asarray(lam, dtype=REAL)
    if lam.ndim and lam.shape != g.shape:
        raise ValueError(f"weight shape {lam.shape} does not match field {g.shape}")
    return float(np.sum(lam * abs_parts(g)))


def expand_map(channels: np.ndarray, mode: SharingMode) -> np.ndarray:
    """Expand 1/2/3 network output channels to a q-component weight field.

    ``channels`` has shape ``(c, nt, nx, ny)``.  XYT copies the single channel
    to every direction; XY_T maps ``(a, b)`` to ``(a, a, b)``; X_Y_T passes
    three channels through unchanged.  The two temporal modes require a
    dynamic image (``nt > 1``).
    """
    channels = np.asarray(channels, dtype=REAL)
    if channels.ndim != 4:
        raise ValueError("channel stack must have shape (c, nt, nx, ny)")
    c = channels.shape[0]
    if c != mode.channels:
        raise ValueError(f"mode {mode.value} expects {mode.channels} channels, got {c}")
    q = ndirs(channels.shape[1:])
    if mode is SharingMode.XYT:
        return np.stack([channels[0]] * q)
    if q != 3:
        raise ValueError(f"mode {mode.value} needs a dynamic image (nt > 1)")
    if mode is SharingMode.XY_T:
        return np.stack([channels[0], channels[0], channels[1]])
    return channels.copy()


def constant_map(value: float, shape: tuple[int, int, int]) -> np.ndarray:
    """Uniform positive weight field for an image shape."""
    if value <= 0:
        raise ValueError("weight must be strictly positive")
    return np.full((ndirs(shape),) + shape, float(value), dtype=REAL)


def grad_norm_exact(shape) -> float:
    """Exact operator norm of :func:`grad` on a grid.

    The per-direction difference operators commute on the product grid, so
    the squared norm is the sum of the 1-d free-Laplacian extremes
    ``4 sin^2((n - 1) pi / (2 n))`` over the axes.
    """
    total = 0.0
    for n in shape:
        if n > 1:
            total += 4.0 * np.sin((n - 1) * np.pi / (2 * n)) ** 2
    return float(np.sqrt(total))
