"""Command-line front end: simulate, fuse, eval, sweep."""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, coerce, dump_config, load_config
from .datapipe import InputError, spatial_sampler, spectral_sampler, synth_scene
from .degradation import DegradationModel, bicubic_upsample, make_partition_srf, simulate_pair
from .diffusion import make_exponential_schedule
from .formats import CubeFormatError, export_png, read_cube, write_checkpoint, write_cube, write_trace
from .metrics import CSV_HEADER, error_map, evaluate
from .networks import SpatialNet, SpectralNet, TrainingDivergenceError, train_network
from .sampler import FusionResult, SamplerDivergenceError, run_fusion

log = logging.getLogger("argsdiff")

EXIT_OK, EXIT_ARTIFACT, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2, 3, 4

SCENE_KEYS = ("height", "width", "bands", "msi_bands", "rank", "seed", "scale", "snr_db")
TRAIN_KEYS = SCENE_KEYS + (
    "num_steps", "subspace_dim", "spectral_steps", "spatial_steps", "lr", "spectral_batch", "spatial_batch",
    "patch", "clip_norm", "spatial_base",
)


def seed_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds for each random stage of a run."""
    names = ("noise", "spectral_init", "spatial_init", "spectral_train", "spatial_train", "sample")
    return dict(zip(names, (int(s) for s in np.random.SeedSequence(seed).generate_state(len(names)))))


# ---------------------------------------------------------------- pipeline


@dataclass
class Scene:
    ref: np.ndarray
    lr: np.ndarray
    msi: np.ndarray
    model: DegradationModel


def simulate_scene(cfg: RunConfig) -> Scene:
    ref = synth_scene(cfg.height, cfg.width, cfg.bands, cfg.rank, cfg.seed)
    model = DegradationModel(make_partition_srf(cfg.bands, cfg.msi_bands), cfg.scale, cfg.snr_db)
    lr, msi = simulate_pair(ref, model, np.random.default_rng(seed_streams(cfg.seed)["noise"]))
    return Scene(ref, lr, msi, model)


@dataclass
class TrainedNets:
    spatial: SpatialNet
    spectral: SpectralNet
    spatial_losses: np.ndarray
    spectral_losses: np.ndarray
    seconds: float


def train_nets(cfg: RunConfig, lr: np.ndarray, msi: np.ndarray) -> TrainedNets:
    """Train both noise predictors from the observed pair alone."""
    seeds = seed_streams(cfg.seed)
    schedule = make_exponential_schedule(cfg.num_steps)
    spectral = SpectralNet(lr.shape[2], seed=seeds["spectral_init"])
    spatial = SpatialNet(cfg.subspace_dim, base=cfg.spatial_base, seed=seeds["spatial_init"])
    spe = train_network(
        spectral, spectral_sampler(lr, cfg.subspace_dim, cfg.spectral_batch), schedule, cfg.spectral_steps,
        cfg.lr, seeds["spectral_train"], t_axis_rows=cfg.subspace_dim, clip_norm=cfg.clip_norm,
    )
    log.info("spectral net: %d steps, %.1fs", cfg.spectral_steps, spe.seconds)
    spa = train_network(
        spatial, spatial_sampler(msi, cfg.subspace_dim, (cfg.patch, cfg.patch), cfg.spatial_batch), schedule,
        cfg.spatial_steps, cfg.lr, seeds["spatial_train"], clip_norm=cfg.clip_norm,
    )
    log.info("spatial net: %d steps, %.1fs", cfg.spatial_steps, spa.seconds)
    return TrainedNets(spatial, spectral, spa.losses, spe.losses, spe.seconds + spa.seconds)


def sample(cfg: RunConfig, lr, msi, model, nets: TrainedNets, sample_seed: int | None = None) -> FusionResult:
    seed = seed_streams(cfg.seed)["sample"] if sample_seed is None else sample_seed
    return run_fusion(
        lr, msi, nets.spatial, nets.spectral, model, cfg.sampler(),
        make_exponential_schedule(cfg.num_steps), np.random.default_rng(seed),
    )


def check_pair(lr: np.ndarray, msi: np.ndarray, srf: np.ndarray, cfg: RunConfig) -> None:
    if lr.ndim != 3 or msi.ndim != 3:
        raise InputError("cubes must be (rows, cols, bands)")
    if msi.shape[0] != cfg.scale * lr.shape[0] or msi.shape[1] != cfg.scale * lr.shape[1]:
        raise InputError(f"MSI {msi.shape[:2]} is not {cfg.scale}x the LR-HSI {lr.shape[:2]}")
    if srf.shape != (msi.shape[2], lr.shape[2]):
        raise InputError(f"SRF shape {srf.shape} does not map {lr.shape[2]} bands to {msi.shape[2]}")
    if msi.shape[0] % 16 or msi.shape[1] % 16:
        raise InputError("MSI dims must be divisible by 16")
    if cfg.patch > min(msi.shape[:2]):
        raise InputError(f"patch {cfg.patch} does not fit the {msi.shape[:2]} MSI")


def pseudo_color_bands(C: int) -> tuple[int, int, int] | None:
    return (C - 1, C // 2, 0) if C >= 3 else None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(rows: list[dict], header, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(k, "")) for k in header])


def _all_finite(rows: list[dict]) -> bool:
    return all(
        math.isfinite(v) for row in rows for v in row.values() if isinstance(v, (float, np.floating))
    )


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> dict[str, Path]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = simulate_scene(cfg)
    paths = {name: out / f"{name}.hsic" for name in ("ref", "lr", "msi", "srf")}
    write_cube(scene.ref, paths["ref"])
    write_cube(scene.lr, paths["lr"])
    write_cube(scene.msi, paths["msi"])
    write_cube(scene.model.srf[None], paths["srf"])
    paths["manifest"] = out / "manifest.txt"
    lines = [f"scene_seed = {cfg.seed}"]
    lines += [f"{k}_seed = {v}" for k, v in seed_streams(cfg.seed).items()]
    lines += [f"{k} = {getattr(cfg, k)}" for k in SCENE_KEYS if k != "seed"]
    lines += [f"{name} = {p.name} {'x'.join(map(str, read_cube(p).shape))}" for name, p in paths.items() if p.suffix == ".hsic"]
    paths["manifest"].write_text("\n".join(lines) + "\n")
    return paths


@dataclass
class FuseOutcome:
    paths: dict[str, Path]
    rows: list[dict]
    result: FusionResult


def cmd_fuse(cfg: RunConfig, lr_path, msi_path, ref_path=None, srf_path=None) -> FuseOutcome:
    """Train both networks, run the guided sampler, write the cube, images, metrics and traces."""
    lr = read_cube(lr_path)
    msi = read_cube(msi_path)
    if srf_path is not None:
        srf = read_cube(srf_path)[0]
    else:
        srf = make_partition_srf(lr.shape[2], msi.shape[2])
    check_pair(lr, msi, srf, cfg)
    ref = read_cube(ref_path) if ref_path is not None else None
    if ref is not None and ref.shape != (*msi.shape[:2], lr.shape[2]):
        raise InputError(f"reference shape {ref.shape} does not match the fused shape")
    model = DegradationModel(srf, cfg.scale, cfg.snr_db)

    start = time.perf_counter()
    nets = train_nets(cfg, lr, msi)
    result = sample(cfg, lr, msi, model, nets)
    seconds = time.perf_counter() - start
    log.info("fusion done in %.1fs (train + sample)", seconds)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "fused": out / "fused.hsic",
        "png": out / "fused.png",
        "metrics": out / "metrics.csv",
        "spectral_loss": out / "spectral_loss.txt",
        "spatial_loss": out / "spatial_loss.txt",
        "guidance_loss": out / "guidance_loss.txt",
        "residual_loss": out / "residual_loss.txt",
        "spectral_ckpt": out / "spectral.ckpt",
        "spatial_ckpt": out / "spatial.ckpt",
        "config": out / "config.txt",
    }
    write_cube(result.fused, paths["fused"])
    export_png(result.fused, paths["png"], pseudo_color_bands(result.fused.shape[2]))
    write_trace(nets.spectral_losses, paths["spectral_loss"])
    write_trace(nets.spatial_losses, paths["spatial_loss"])
    write_trace(result.guidance_trace, paths["guidance_loss"])
    write_trace(result.residual_trace, paths["residual_loss"])
    write_checkpoint(nets.spectral.state_dict(), paths["spectral_ckpt"])
    write_checkpoint(nets.spatial.state_dict(), paths["spatial_ckpt"])
    paths["config"].write_text(dump_config(cfg))

    if ref is not None:
        rows = [
            evaluate(ref, result.fused, cfg.scale).row("argsdiff", seconds),
            evaluate(ref, np.clip(bicubic_upsample(lr, cfg.scale), 0, 1), cfg.scale).row("bicubic", 0.0),
        ]
        paths["error_map"] = out / "error_map.png"
        export_png(error_map(ref, result.fused) / 255.0, paths["error_map"])
    else:
        rows = [{"method": "argsdiff", "seconds": seconds}]
    write_csv(rows, CSV_HEADER, paths["metrics"])
    return FuseOutcome(paths, rows, result)


def cmd_eval(cfg: RunConfig, ref_path, est_path) -> tuple[dict, dict[str, Path]]:
    ref, est = read_cube(ref_path), read_cube(est_path)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    row = evaluate(ref, est, cfg.scale).row(Path(est_path).stem, 0.0)
    paths = {"metrics": out / "eval.csv", "error_map": out / "eval_error_map.png"}
    write_csv([row], CSV_HEADER, paths["metrics"])
    export_png(error_map(ref, est) / 255.0, paths["error_map"])
    return row, paths


def parse_grid(entries: list[str]) -> dict[str, list]:
    grid = {}
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(f"grid entry {entry!r} is not key=v1,v2,...")
        key, values = (s.strip() for s in entry.split("=", 1))
        grid[key] = [coerce(key, v) for v in values.split(",") if v.strip()]
        if not grid[key]:
            raise ConfigError(f"grid entry {key} has no values")
    return grid


SWEEP_METRICS = ("psnr", "sam", "ergas", "ssim", "seconds")


@dataclass
class RunCache:
    """Scenes and trained nets keyed by the config fields they depend on."""

    scenes: dict = field(default_factory=dict)
    nets: dict = field(default_factory=dict)

    def scene(self, cfg: RunConfig) -> Scene:
        key = tuple(getattr(cfg, k) for k in SCENE_KEYS)
        if key not in self.scenes:
            self.scenes[key] = simulate_scene(cfg)
        return self.scenes[key]

    def trained(self, cfg: RunConfig) -> TrainedNets:
        key = tuple(getattr(cfg, k) for k in TRAIN_KEYS)
        if key not in self.nets:
            scene = self.scene(cfg)
            self.nets[key] = train_nets(cfg, scene.lr, scene.msi)
        return self.nets[key]


def cmd_sweep(cfg: RunConfig, grid: dict[str, list], cache: RunCache | None = None) -> tuple[list[dict], dict[str, Path]]:
    """Full factorial over ``grid``; scenes and trained nets are shared between cells that agree on them."""
    keys = list(grid)
    cache = RunCache() if cache is None else cache
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, combo))
        row = dict(cell)
        try:
            c = replace(cfg, **cell).validate()
            scene = cache.scene(c)
            nets = cache.trained(c)
            result = sample(c, scene.lr, scene.msi, scene.model, nets)
            row.update(evaluate(scene.ref, result.fused, c.scale).row("argsdiff", nets.seconds + result.seconds))
            row["status"] = "ok"
        except (ConfigError, InputError, TrainingDivergenceError, SamplerDivergenceError, ValueError) as err:
            row.update({m: math.nan for m in SWEEP_METRICS})
            row.update(status="failed", error=f"{type(err).__name__}: {err}")
        log.info("cell %s -> %s psnr=%s", cell, row["status"], row.get("psnr"))
        rows.append(row)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"sweep": out / "sweep.csv"}
    write_csv(rows, [*keys, *SWEEP_METRICS, "status", "error"], paths["sweep"])
    if len(keys) == 2:
        rk, ck = ("guide_step_coeff", "guide_step_basis") if set(keys) == {"guide_step_coeff", "guide_step_basis"} else keys
        table = {(row[rk], row[ck]): row["psnr"] for row in rows}
        pivot = [{rk: a, **{f"{ck}={b}": table[(a, b)] for b in grid[ck]}} for a in grid[rk]]
        paths["pivot"] = out / "sweep_pivot.csv"
        write_csv(pivot, [rk, *(f"{ck}={b}" for b in grid[ck])], paths["pivot"])
    return rows, paths


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-argm", action="store_true", help="disable residual refinement")
    common.add_argument("--guidance", choices=("full", "fixed-eps"))
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="argsdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic reference and its observations")
    fuse = sub.add_parser("fuse", parents=[common], help="train both networks and fuse an observed pair")
    fuse.add_argument("--lr", required=True, type=Path, help="LR-HSI cube")
    fuse.add_argument("--msi", required=True, type=Path, help="HR-MSI cube")
    fuse.add_argument("--ref", type=Path, help="reference cube for metrics and the error map")
    fuse.add_argument("--srf", type=Path, help="SRF cube of shape 1 x c x C (default: band partition)")
    ev = sub.add_parser("eval", parents=[common], help="score an estimate against a reference")
    ev.add_argument("--ref", required=True, type=Path)
    ev.add_argument("--est", required=True, type=Path)
    sw = sub.add_parser("sweep", parents=[common], help="full factorial over config values")
    sw.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2", help="one axis of the grid")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_argm:
        overrides["argm_enabled"] = False
    if args.guidance is not None:
        overrides["guidance_mode"] = args.guidance
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def _report(paths: dict[str, Path], rows: list[dict]) -> int:
    missing = [str(p) for p in paths.values() if not Path(p).is_file()]
    if missing:
        print(f"error: artifacts not written: {', '.join(missing)}", file=sys.stderr)
        return EXIT_ARTIFACT
    if not _all_finite(rows):
        print("error: non-finite values in the written results", file=sys.stderr)
        return EXIT_ARTIFACT
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "simulate":
            paths = cmd_simulate(cfg)
            cubes = [read_cube(p) for k, p in paths.items() if k != "manifest"]
            status = _report(paths, []) or (EXIT_OK if all(np.all(np.isfinite(c)) for c in cubes) else EXIT_ARTIFACT)
        elif args.command == "fuse":
            outcome = cmd_fuse(cfg, args.lr, args.msi, args.ref, args.srf)
            status = _report(outcome.paths, outcome.rows)
            for row in outcome.rows:
                print(",".join(_fmt(row.get(k, "")) for k in CSV_HEADER))
        elif args.command == "eval":
            row, paths = cmd_eval(cfg, args.ref, args.est)
            status = _report(paths, [row])
            print(",".join(_fmt(row[k]) for k in CSV_HEADER))
        else:
            rows, paths = cmd_sweep(cfg, parse_grid(args.grid))
            status = _report(paths, rows)
            failed = sum(row["status"] != "ok" for row in rows)
            print(f"{len(rows)} cells, {failed} failed; table at {paths['sweep']}")
        return status
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, SamplerDivergenceError) as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, CubeFormatError, FileNotFoundError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
