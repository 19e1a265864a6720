"""Dataset assembly and the command implementations behind the CLI.

Every command derives all randomness from the config seed (see
:mod:`tvmap.config` for the derivation), so a command sequence is exactly
reproducible from the config alone; the data files written by ``gen`` are
exported artifacts, and downstream commands rebuild the same data in memory.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import fileio
from .config import (
    SEED_MASKS,
    SEED_NOISE,
    SEED_PHANTOM,
    ExperimentConfig,
    write_manifest,
)
from .metrics import nrmse, psnr, ssim
from .network import NetWeights, UNetConfig, init_weights
from .operators import (
    MriEncoder,
    RadonOp,
    cg_normal_init,
    equispaced_angles,
    fbp,
    identity_op,
    make_cartesian_mask,
    synth_coil_maps,
)
from .parallel import pmap
from .phantoms import add_gaussian, ct_poisson_log, gen_phantom, moving_disks
from .prox import KlParams
from .qmri import InversionSeries, fit_t1, synth_qmri_series
from .solvers import Problem, grid_search_scalar, solve_problem
from .tensors import SharingMode
from .training import TrainConfig, evaluate, train

SPLIT_OFFSETS = {"train": 0, "val": 100000, "test": 200000}

# Radon system matrices are immutable and expensive to assemble; share them
# across items with the same geometry.
_RADON_MEMO: dict[tuple, RadonOp] = {}


def _radon_for(cfg: ExperimentConfig) -> RadonOp:
    key = (cfg.nx, cfg.angles, cfg.bins, cfg.side)
    if key not in _RADON_MEMO:
        _RADON_MEMO[key] = RadonOp(
            cfg.nx, equispaced_angles(cfg.angles), cfg.bins, side=cfg.side
        )
    return _RADON_MEMO[key]

QMRI_TISSUES = [
    (0.0 + 0.0j, 3.0),        # background: no signal
    (0.85 + 0.1j, 0.35),
    (1.0 - 0.15j, 0.9),
    (0.7 + 0.3j, 1.6),
]


def _phase_ramp(nx: int, ny: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), indexing="ij")
    return np.exp(1j * (0.6 * gx + 0.9 * gy))


def sharing_mode(cfg: ExperimentConfig) -> SharingMode:
    return SharingMode(cfg.mode)


def net_config(cfg: ExperimentConfig) -> UNetConfig:
    rank = 2 if cfg.task == "ct" else 3
    in_channels = 2 if cfg.task in ("mri", "qmri") else 1
    if cfg.task == "ct" and cfg.mode != "xyt":
        raise ValueError("static CT uses sharing mode xyt")
    return UNetConfig(
        rank=rank,
        stages=cfg.stages,
        convs_per_stage=cfg.convs_per_stage,
        base_filters=cfg.filters,
        out_channels=SharingMode(cfg.mode).channels,
        in_channels=in_channels,
    )


def _build_item(cfg: ExperimentConfig, split: str, index: int) -> Problem:
    item = SPLIT_OFFSETS[split] + index
    if cfg.task == "denoise":
        x_true = moving_disks(
            cfg.nx, cfg.ny, cfg.nt, n_disks=cfg.disks,
            seed=cfg.item_seed(SEED_PHANTOM, item),
        )
        z = add_gaussian(x_true, cfg.sigma, seed=cfg.item_seed(SEED_NOISE, item))
        return Problem(A=identity_op(x_true.shape), z=z, x_true=x_true, x0=z)
    if cfg.task == "mri":
        mag = moving_disks(
            cfg.nx, cfg.ny, cfg.nt, n_disks=cfg.disks,
            seed=cfg.item_seed(SEED_PHANTOM, item),
        )
        x_true = mag * _phase_ramp(cfg.nx, cfg.ny)[None]
        coils = synth_coil_maps(cfg.nx, cfg.ny, cfg.coils)
        masks = make_cartesian_mask(
            cfg.nx, cfg.ny, cfg.nt, cfg.accel, cfg.center_fraction,
            seed=cfg.item_seed(SEED_MASKS, item),
        )
        enc = MriEncoder(coils, masks)
        z = enc.forward(x_true)
        z = add_gaussian(z, cfg.sigma, seed=cfg.item_seed(SEED_NOISE, item),
                         complex_noise=True) * masks[None]
        x0 = cg_normal_init(enc, z, cfg.cg_iters)
        return Problem(A=enc, z=z, x_true=x_true, x0=x0)
    if cfg.task == "ct":
        x_true = gen_phantom(
            "ellipse-ct", cfg.nx, cfg.ny, 1, seed=cfg.item_seed(SEED_PHANTOM, item)
        )
        op = _radon_for(cfg)
        kl = KlParams(mu=cfg.mu, n0=cfg.n0)
        z = ct_poisson_log(op, x_true, kl, seed=cfg.item_seed(SEED_NOISE, item))
        x0 = fbp(op, z)
        return Problem(A=op, z=z, x_true=x_true, x0=x0, kl=kl)
    if cfg.task == "qmri":
        from .qmri import concentric_region_labels

        labels = concentric_region_labels(cfg.nx)
        series, _truth = synth_qmri_series(
            labels, QMRI_TISSUES, times=cfg.times, noise_sigma=0.0
        )
        x_true = series.images  # (n_times, nx, ny), complex
        coils = synth_coil_maps(cfg.nx, cfg.ny, cfg.coils)
        masks = make_cartesian_mask(
            cfg.nx, cfg.ny, x_true.shape[0], cfg.accel, cfg.center_fraction,
            seed=cfg.item_seed(SEED_MASKS, item),
        )
        enc = MriEncoder(coils, masks)
        z = enc.forward(x_true)
        z = add_gaussian(z, cfg.sigma, seed=cfg.item_seed(SEED_NOISE, item),
                         complex_noise=True) * masks[None]
        x0 = cg_normal_init(enc, z, cfg.cg_iters)
        return Problem(A=enc, z=z, x_true=x_true, x0=x0)
    raise ValueError(f"unknown task {cfg.task!r}")


def build_split(cfg: ExperimentConfig, split: str) -> list[Problem]:
    count = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}[split]
    return [_build_item(cfg, split, i) for i in range(count)]


def _data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.outdir) / "data"


def cmd_gen(cfg: ExperimentConfig, workers: int = 1) -> Path:
    """Write phantoms and corrupted data as TNSR1 files, plus the manifest."""
    out = _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)

    def write_split(split: str):
        problems = build_split(cfg, split)
        for i, prob in enumerate(problems):
            stem = out / f"{split}_{i:03d}"
            fileio.write_tensor(f"{stem}_true.tnsr", prob.x_true)
            fileio.write_tensor(f"{stem}_z.tnsr", prob.z)
            fileio.write_tensor(f"{stem}_x0.tnsr", prob.init_image())
            if isinstance(prob.A, MriEncoder):
                fileio.write_tensor(f"{stem}_masks.tnsr", prob.A.masks)
                fileio.write_tensor(f"{stem}_coils.tnsr", prob.A.coil_maps)
        return len(problems)

    counts = pmap(write_split, ["train", "val", "test"], workers)
    write_manifest(
        Path(cfg.outdir) / "manifest.txt", cfg, "gen",
        {"items": sum(counts)},
    )
    return out


def cmd_solve(
    cfg: ExperimentConfig,
    lam: float | None = None,
    map_path: str | None = None,
    T: int | None = None,
    item: int = 0,
) -> Path:
    """Reconstruct one test item with a scalar weight or a weight-field file."""
    T = cfg.t_solve if T is None else T
    prob = _build_item(cfg, "test", item)
    if map_path is not None:
        lam_field = fileio.read_tensor(map_path)
    elif lam is not None:
        lam_field = float(lam)
    else:
        lam_field = cfg.lam
    rep = solve_problem(prob, lam_field, T, record=True)
    out = Path(cfg.outdir) / "solve"
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_tensor(out / f"recon_{item:03d}.tnsr", rep.image)
    rep.write_diagnostics(out / f"diagnostics_{item:03d}.csv")
    extra = {
        "item": item,
        "T": T,
        "psnr": fileio.format_float(psnr(rep.image, prob.x_true)),
        "nrmse": fileio.format_float(nrmse(rep.image, prob.x_true)),
    }
    write_manifest(out / "manifest.txt", cfg, "solve", extra)
    return out


def cmd_gridsearch(
    cfg: ExperimentConfig,
    grid: list[float],
    grid_t: list[float] | None = None,
    mode: str | None = None,
    T: int | None = None,
    workers: int = 1,
    split: str = "train",
):
    """Scalar grid search over the chosen split; writes scores and the pick."""
    mode_enum = SharingMode(mode) if mode else sharing_mode(cfg)
    T = cfg.t_solve if T is None else T
    problems = build_split(cfg, split)
    if mode_enum is SharingMode.XYT:
        spec = sorted(grid)
        best, scores = grid_search_scalar(problems, mode_enum, spec, T, workers=workers)
        cands = [(v,) for v in spec]
        header = ["lam", "mean_psnr"]
    else:
        spec = (sorted(grid), sorted(grid_t if grid_t is not None else grid))
        best, scores = grid_search_scalar(problems, mode_enum, spec, T, workers=workers)
        cands = [(a, b) for a in spec[0] for b in spec[1]]
        header = ["lam_spatial", "lam_temporal", "mean_psnr"]
    out = Path(cfg.outdir) / "gridsearch"
    out.mkdir(parents=True, exist_ok=True)
    rows = [tuple(c) + (s,) for c, s in zip(cands, scores)]
    fileio.write_csv(out / f"scores_{mode_enum.value}.csv", header, rows)
    extra = {"mode": mode_enum.value, "T": T, "best": repr(best), "split": split}
    write_manifest(out / "manifest.txt", cfg, "gridsearch", extra)
    return best, scores


def save_checkpoint(
    ckpt_dir: Path,
    weights: NetWeights,
    net_cfg: UNetConfig,
    cfg: ExperimentConfig,
    val_loss: float,
) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for i, (k, b) in enumerate(zip(weights.kernels, weights.biases)):
        fileio.write_tensor(ckpt_dir / f"w{i:02d}_kernel.tnsr", k)
        fileio.write_tensor(ckpt_dir / f"w{i:02d}_bias.tnsr", b)
    pairs = {
        "rank": str(net_cfg.rank),
        "stages": str(net_cfg.stages),
        "convs_per_stage": str(net_cfg.convs_per_stage),
        "base_filters": str(net_cfg.base_filters),
        "kernel": str(net_cfg.kernel),
        "out_channels": str(net_cfg.out_channels),
        "in_channels": str(net_cfg.in_channels),
        "alpha": repr(net_cfg.alpha),
        "scale": repr(net_cfg.scale),
        "mode": cfg.mode,
        "seed": str(cfg.seed),
        "t_train": str(cfg.t_train),
        "t_test": str(cfg.t_test),
        "lr": repr(cfg.lr),
        "weight_decay": repr(cfg.weight_decay),
        "epochs": str(cfg.epochs),
        "batch": str(cfg.batch),
        "validate_every": str(cfg.validate_every),
        "val_loss": fileio.format_float(val_loss),
        "n_layers": str(len(weights.kernels)),
    }
    (ckpt_dir / "checkpoint.txt").write_text(
        "[checkpoint]\n" + "\n".join(f"{k} = {v}" for k, v in pairs.items()) + "\n"
    )


def load_checkpoint(ckpt_dir) -> tuple[NetWeights, UNetConfig, SharingMode]:
    from .config import parse_sections

    ckpt_dir = Path(ckpt_dir)
    info = parse_sections((ckpt_dir / "checkpoint.txt").read_text())["checkpoint"]
    net_cfg = UNetConfig(
        rank=int(info["rank"]),
        stages=int(info["stages"]),
        convs_per_stage=int(info["convs_per_stage"]),
        base_filters=int(info["base_filters"]),
        kernel=int(info["kernel"]),
        out_channels=int(info["out_channels"]),
        in_channels=int(info["in_channels"]),
        alpha=float(info["alpha"]),
        scale=float(info["scale"]),
    )
    n_layers = int(info["n_layers"])
    kernels, biases = [], []
    for i in range(n_layers):
        kernels.append(fileio.read_tensor(ckpt_dir / f"w{i:02d}_kernel.tnsr"))
        biases.append(fileio.read_tensor(ckpt_dir / f"w{i:02d}_bias.tnsr"))
    weights = NetWeights(kernels, biases)
    return weights, net_cfg, SharingMode(info["mode"])


def cmd_train(cfg: ExperimentConfig) -> Path:
    """Train the parameter-map network; writes checkpoint plus history CSV."""
    net_cfg = net_config(cfg)
    tcfg = TrainConfig(
        t_train=cfg.t_train,
        t_test=cfg.t_test,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        validate_every=cfg.validate_every,
        seed=cfg.seed,
        mode=sharing_mode(cfg),
    )
    train_items = build_split(cfg, "train")
    val_items = build_split(cfg, "val")
    w0 = init_weights(net_cfg, seed=cfg.seed)
    best, history = train(train_items, val_items, w0, net_cfg, tcfg)
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    val_rows = [r for r in history.rows if not np.isnan(r[2])]
    best_val = min(r[2] for r in val_rows)
    save_checkpoint(out / "checkpoint", best, net_cfg, cfg, best_val)
    fileio.write_csv(out / "history.csv", ["epoch", "train_loss", "val_loss"],
                     history.as_csv_rows())
    write_manifest(out / "train_manifest.txt", cfg, "train",
                   {"best_val_loss": fileio.format_float(best_val)})
    return out / "checkpoint"


def cmd_eval(cfg: ExperimentConfig, ckpt_dir, t_list: list[int]) -> Path:
    """Evaluate a checkpoint on the test split for each iteration budget."""
    weights, net_cfg, mode = load_checkpoint(ckpt_dir)
    items = build_split(cfg, "test")
    out = Path(cfg.outdir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    mean_rows = []
    for T in t_list:
        per_item = evaluate(items, weights, net_cfg, mode, int(T))
        for i, (p, n, s) in enumerate(per_item):
            rows.append((float(T), float(i), p, n, s))
        arr = np.asarray(per_item)
        mean_rows.append((float(T), float(np.mean(arr[:, 0])),
                          float(np.mean(arr[:, 1])), float(np.mean(arr[:, 2]))))
    fileio.write_csv(out / "metrics.csv", ["t_test", "item", "psnr", "nrmse", "ssim"], rows)
    fileio.write_csv(out / "metrics_mean.csv", ["t_test", "psnr", "nrmse", "ssim"],
                     mean_rows)
    write_manifest(out / "manifest.txt", cfg, "eval",
                   {"checkpoint": str(ckpt_dir), "t_list": ",".join(map(str, t_list))})
    return out


def _plain_manifest(path, command: str, pairs: dict) -> None:
    lines = ["[manifest]", f"command = {command}"]
    lines += [f"{k} = {v}" for k, v in pairs.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_certify(rate: bool, lipschitz: bool, outdir, seed: int = 0) -> Path:
    """Run the executable solver certificates on built-in desk instances."""
    from .certificates import lipschitz_probe, rate_certificate
    from .tensors import constant_map

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    if rate:
        shape = (1, 4, 4)
        A = identity_op(shape)
        z = rng.standard_normal(shape)
        cert = rate_certificate(
            A, z, constant_map(0.3, shape), z.copy(),
            T_list=[2**k for k in range(11)],
        )
        rows = [(float(T), m, b) for T, m, b in cert.entries]
        fileio.write_csv(out / "rate_certificate.csv", ["T", "measured", "bound"], rows)
        lines.append(f"rate bound holds: {cert.holds()}")
    if lipschitz:
        shape = (1, 8, 1)
        A = identity_op(shape)
        z = rng.standard_normal(shape)
        worst = 0.0
        for _ in range(100):
            lam1 = np.abs(rng.standard_normal((2,) + shape)) * 0.4 + 0.02
            lam2 = np.abs(rng.standard_normal((2,) + shape)) * 0.4 + 0.02
            lhs, rhs = lipschitz_probe(A, z, lam1, lam2)
            if rhs > 0:
                worst = max(worst, lhs / rhs)
        lines.append(f"lipschitz probes: 100 pairs, worst lhs/rhs = {worst!r}")
    (out / "certify.txt").write_text("\n".join(lines) + "\n")
    _plain_manifest(out / "manifest.txt", "certify",
                    {"seed": seed, "rate": rate, "lipschitz": lipschitz})
    return out


def cmd_fit_t1(series_path, times, outdir, t1_lo: float = 0.05, t1_hi: float = 6.0) -> Path:
    images = fileio.read_tensor(series_path)
    series = InversionSeries(times=np.asarray(times, dtype=float), images=images)
    result = fit_t1(series, t1_bounds=(t1_lo, t1_hi))
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_tensor(out / "t1.tnsr", result.t1)
    fileio.write_tensor(out / "m0.tnsr", result.m0)
    fileio.write_tensor(out / "degenerate.tnsr", result.degenerate.astype(float))
    _plain_manifest(out / "manifest.txt", "fit-t1", {
        "series": series_path,
        "times": ",".join(repr(float(t)) for t in times),
        "t1_lo": repr(t1_lo), "t1_hi": repr(t1_hi),
    })
    return out


def cmd_preview(tensor_path, out_prefix) -> list[Path]:
    arr = fileio.read_tensor(tensor_path)
    if arr.ndim == 4:  # field stacks preview per component
        arr = arr.reshape((-1,) + arr.shape[2:])
    paths = fileio.write_pgm_frames(out_prefix, arr)
    _plain_manifest(f"{out_prefix}_manifest.txt", "preview",
                    {"tensor": tensor_path, "frames": len(paths)})
    return paths
