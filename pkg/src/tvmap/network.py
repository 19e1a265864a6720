"""The parameter-map estimator: a small convolutional encoder/decoder whose
softplus output, scaled by a positive factor, becomes the per-voxel
regularization weight channels.

The network is expressed entirely in autodiff primitives so the same code
serves plain evaluation (throwaway tape) and end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class UNetConfig:
    rank: int = 3                # 2 for static images, 3 for dynamic
    stages: int = 2              # encoding stages (>= 1)
    convs_per_stage: int = 2
    base_filters: int = 8
    kernel: int = 3
    out_channels: int = 2        # 1, 2 or 3, matching the sharing mode
    in_channels: int = 1         # 1 real, 2 complex (re, im)
    alpha: float = 0.01          # leaky-relu negative slope
    scale: float = 0.1           # positive output scale

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValueError("rank must be 2 or 3")
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if self.out_channels not in (1, 2, 3):
            raise ValueError("out_channels must be 1, 2 or 3")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def layer_plan(self) -> list[tuple[str, int, int, int]]:
        """(name, in_ch, out_ch, kernel) for every convolution, in order."""
        f = self.base_filters
        plan = []
        ch = self.in_channels
        enc_out = []
        for s in range(self.stages):
            out = f * (2**s)
            for c in range(self.convs_per_stage):
                plan.append((f"enc{s}_conv{c}", ch, out, self.kernel))
                ch = out
            enc_out.append(out)
        for s in range(self.stages - 2, -1, -1):
            ch_in = ch + enc_out[s]  # upsampled deeper features + skip
            out = enc_out[s]
            for c in range(self.convs_per_stage):
                plan.append((f"dec{s}_conv{c}", ch_in if c == 0 else out, out, self.kernel))
            ch = out
        plan.append(("head", ch, self.out_channels, 1))
        return plan

    def pool_divisor(self) -> int:
        return 2 ** (self.stages - 1)


@dataclass
class NetWeights:
    """Ordered kernels and biases for every convolution."""

    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        parts = []
        for k, b in zip(self.kernels, self.biases):
            parts.append(k.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def from_flat(self, flat: np.ndarray) -> "NetWeights":
        kernels, biases = [], []
        pos = 0
        for k, b in zip(self.kernels, self.biases):
            kernels.append(flat[pos : pos + k.size].reshape(k.shape).copy())
            pos += k.size
            biases.append(flat[pos : pos + b.size].reshape(b.shape).copy())
            pos += b.size
        if pos != flat.size:
            raise ValueError("flat vector does not match the weight layout")
        return NetWeights(kernels, biases, list(self.names))

    def copy(self) -> "NetWeights":
        return NetWeights(
            [k.copy() for k in self.kernels],
            [b.copy() for b in self.biases],
            list(self.names),
        )

    def n_params(self) -> int:
        return sum(k.size + b.size for k, b in zip(self.kernels, self.biases))


def init_weights(cfg: UNetConfig, seed: int) -> NetWeights:
    """Uniform kernels in +-sqrt(1/fan_in), zero biases, and a final conv
    bias of -1 so training starts from weak regularization."""
    rng = np.random.default_rng(seed)
    kernels, biases, names = [], [], []
    plan = cfg.layer_plan()
    for name, c_in, c_out, k in plan:
        shape = (c_out, c_in) + (k,) * cfg.rank
        fan_in = c_in * k**cfg.rank
        bound = np.sqrt(1.0 / fan_in)
        kernels.append(rng.uniform(-bound, bound, size=shape))
        biases.append(np.zeros(c_out))
        names.append(name)
    biases[-1] = np.full(plan[-1][2], -1.0)
    return NetWeights(kernels, biases, names)


def zero_weights(cfg: UNetConfig) -> NetWeights:
    w = init_weights(cfg, seed=0)
    return NetWeights(
        [np.zeros_like(k) for k in w.kernels],
        [np.zeros_like(b) for b in w.biases],
        list(w.names),
    )


def _check_input(x0: np.ndarray, cfg: UNetConfig) -> None:
    if cfg.rank == 2:
        if x0.shape[0] != 1:
            raise ValueError("rank-2 networks take static images (nt = 1)")
        spatial = x0.shape[1:]
    else:
        spatial = x0.shape
    div = cfg.pool_divisor()
    if any(s % div for s in spatial):
        raise ValueError(f"image shape {x0.shape} is not divisible by {div}")
    want = 2 if np.iscomplexobj(x0) else 1
    if cfg.in_channels != want:
        raise ValueError(
            f"config expects {cfg.in_channels} input channels, image needs {want}"
        )


def net_forward_taped(tape: ad.Tape, x0_var: ad.Var, weight_vars, cfg: UNetConfig) -> ad.Var:
    """Record the network on ``tape``; returns the positive channel maps with
    shape (out_channels, nt, nx, ny)."""
    x0 = x0_var.value
    _check_input(x0, cfg)
    if np.iscomplexobj(x0):
        h = ad.split_reim(x0_var)
    else:
        h = tape._emit(
            x0_var.value[None], (x0_var.idx,), lambda u: (u[0],), x0_var.requires_grad
        )
    if cfg.rank == 2:
        # drop the singleton time axis for 2-d convolutions
        h = tape._emit(
            h.value[:, 0], (h.idx,), lambda u: (u[:, None],), h.requires_grad
        )

    layer = 0

    def conv_block(inp, n_convs):
        nonlocal layer
        out = inp
        for _ in range(n_convs):
            kw, bw = weight_vars[layer]
            out = ad.leaky_relu(ad.conv(out, kw, bw), cfg.alpha)
            layer += 1
        return out

    skips = []
    h_cur = h
    for s in range(cfg.stages):
        h_cur = conv_block(h_cur, cfg.convs_per_stage)
        if s < cfg.stages - 1:
            skips.append(h_cur)
            h_cur = ad.avg_pool2(h_cur)
    for s in range(cfg.stages - 2, -1, -1):
        h_cur = ad.concat_channels(ad.upsample_nearest2(h_cur), skips[s])
        h_cur = conv_block(h_cur, cfg.convs_per_stage)
    kw, bw = weight_vars[layer]
    head = ad.conv(h_cur, kw, bw)
    out = ad.scale(ad.softplus(head), cfg.scale)
    if cfg.rank == 2:
        out = tape._emit(
            out.value[:, None], (out.idx,), lambda u: (u[:, 0],), out.requires_grad
        )
    return out


def weight_leaves(tape: ad.Tape, weights: NetWeights, requires_grad: bool = True):
    return [
        (tape.leaf(k, requires_grad), tape.leaf(b, requires_grad))
        for k, b in zip(weights.kernels, weights.biases)
    ]


def net_forward(x0: np.ndarray, weights: NetWeights, cfg: UNetConfig) -> np.ndarray:
    """Plain evaluation of the channel maps (throwaway tape)."""
    tape = ad.Tape()
    x0_var = tape.leaf(np.ascontiguousarray(x0), requires_grad=False)
    wv = weight_leaves(tape, weights, requires_grad=False)
    return net_forward_taped(tape, x0_var, wv, cfg).value
