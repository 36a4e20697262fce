"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or numeric error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .codec import QuantSpec, encode, read_container, report_ratio, write_container, decode
from .core import GaussianSet, PsfSpec, VolumeGrid, read_checkpoint, write_checkpoint
from .errors import SliceSplatError
from .io import PhantomSpec, default_phantom_spec, load_json, load_volume, make_phantom, save_json, save_volume
from .metrics import psnr, ssim
from .optim import FitConfig, fit, render_volume_slice
from .render import SliceImage
from .voxelize import VoxelizerConfig, voxelize

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _triple(kind):
    def parse(text: str):
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        return tuple(kind(p) for p in parts)
    return parse


def _sigma_z(text: str):
    if text == "auto":
        return "auto"
    v = float(text)
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError("sigma-z must be positive and finite, or 'auto'")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slicesplat", description="Focus-aware Gaussian fitting of slice stacks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("phantom", help="write a synthetic blob volume and its generating set")
    s.add_argument("--spec", type=Path, help="phantom spec JSON (default: five blobs in 64^3)")
    s.add_argument("--size", type=int, default=64, help="grid size of the default phantom")
    s.add_argument("--noise", type=float, default=None, help="additive noise sigma")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("fit", help="fit a Gaussian set to a volume's slices")
    s.add_argument("--volume", type=Path, required=True)
    s.add_argument("--config", type=Path, help="JSON or key = value file with FitConfig fields")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--sigma-z", type=_sigma_z, default="auto")
    s.add_argument("--iterations", type=int)
    s.add_argument("--init-count", type=int)
    s.add_argument("--log", type=Path, help="progress NDJSON path (default: <out>.log.ndjson)")

    s = sub.add_parser("render", help="render one slice of a checkpoint")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--slice", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--volume", type=Path, help="take slice geometry from this volume")
    s.add_argument("--dims", type=_triple(int), help="X,Y,Z grid (default: from the checkpoint bbox)")
    s.add_argument("--spacing", type=_triple(float), default=(1.0, 1.0, 1.0))
    s.add_argument("--sigma-z", type=_sigma_z, default=None, help="default: the fit's value, else the z spacing")
    s.add_argument("--raw", action="store_true", help="write float32 + JSON sidecar instead of PGM")

    s = sub.add_parser("voxelize", help="evaluate a checkpoint on a voxel grid")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--dims", type=_triple(int), required=True)
    s.add_argument("--spacing", type=_triple(float), default=(1.0, 1.0, 1.0))
    s.add_argument("--origin", type=_triple(float), default=(0.0, 0.0, 0.0))
    s.add_argument("--support", type=float, default=3.0)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("compress", help="encode a checkpoint into a compact container")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--pos-bits", type=int, default=14)
    s.add_argument("--attr-bits", type=int, default=12)
    s.add_argument("--level", type=int, default=9, choices=range(10), metavar="0-9")

    s = sub.add_parser("decompress", help="decode a container back into a checkpoint")
    s.add_argument("--in", dest="src", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("eval", help="2D/3D quality, sizes and ratios")
    s.add_argument("--pred", type=Path, required=True, help="predicted volume")
    s.add_argument("--gt", type=Path, required=True, help="ground-truth volume")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--ckpt", type=Path, help="checkpoint; 2D metrics then use rendered slices")
    s.add_argument("--container", type=Path)
    s.add_argument("--sigma-z", type=_sigma_z, default=None)
    return p


def _echo(args: argparse.Namespace, extra: dict | None = None) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    if extra:
        cfg.update(extra)
    print(json.dumps({"config": cfg}, sort_keys=True, default=str), flush=True)
    return cfg


def _sidecar(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.name}.{tag}.json")


def read_config_file(path: Path) -> dict[str, Any]:
    """JSON object, or ``key = value`` lines with JSON-style values."""
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return data
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value.strip("'\"")
    return out


def _fit_info(ckpt: Path) -> dict:
    side = _sidecar(ckpt, "fit")
    return load_json(side) if side.exists() else {}


def _resolve_sigma_z(flag, info: dict, spacing_z: float) -> float:
    if isinstance(flag, float):
        return flag
    if flag is None and "sigma_z" in info:
        return float(info["sigma_z"])
    return float(spacing_z)


def _dims_from_bbox(gs: GaussianSet, spacing) -> tuple[int, int, int]:
    ext = (gs.bbox[1] - gs.bbox[0]) / np.asarray(spacing)
    if not np.all(np.isfinite(ext)) or np.any(ext < 1):
        raise UsageError("cannot infer slice geometry from this checkpoint; pass --dims or --volume")
    return tuple(int(round(e)) for e in ext)


def cmd_phantom(args) -> int:
    if args.spec is not None:
        spec = PhantomSpec.from_dict(load_json(args.spec))
    else:
        spec = default_phantom_spec(args.size)
    if args.noise is not None:
        spec = replace(spec, noise_sigma=args.noise)
    if args.seed is not None:
        spec = replace(spec, rng_seed=args.seed)
    _echo(args, {"phantom": spec.to_dict()})
    volume, gs = make_phantom(spec)
    save_volume(volume, args.out)
    write_checkpoint(gs, Path(args.out) / "oracle.gpile")
    save_json(spec.to_dict(), Path(args.out) / "phantom_spec.json")
    clean = replace(spec, noise_sigma=0.0)
    if spec.noise_sigma > 0:
        save_volume(make_phantom(clean)[0], Path(args.out) / "clean" / "volume.raw")
    return EXIT_OK


def cmd_fit(args) -> int:
    volume = load_volume(args.volume)
    cfg = FitConfig()
    if args.config is not None:
        cfg = FitConfig.from_mapping(read_config_file(args.config), cfg)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
        if args.config is None or "densify_end" not in read_config_file(args.config):
            base = FitConfig.for_iterations(args.iterations)
            overrides.update(densify_start=base.densify_start, densify_end=base.densify_end)
    if args.init_count is not None:
        overrides["init_count"] = args.init_count
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    cfg = replace(cfg, **overrides)
    sigma_z = volume.delta_z if args.sigma_z == "auto" else args.sigma_z
    psf = PsfSpec(volume.spacing[0], volume.spacing[1], sigma_z)
    resolved = _echo(args, {"fit_config": cfg.to_dict(), "sigma_z_resolved": sigma_z})
    log_path = args.log or args.out.with_name(args.out.name + ".log.ndjson")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with open(log_path, "w") as log:
        def sink(record):
            log.write(json.dumps(record) + "\n")
            log.flush()
        gs = fit(volume, psf, cfg, progress=sink)
    seconds = time.perf_counter() - start
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(gs, args.out)
    save_json({"sigma_z": sigma_z, "count": len(gs), "config": resolved,
               "volume": {"dims": list(volume.dims), "spacing": list(volume.spacing)}},
              _sidecar(args.out, "fit"))
    save_json({"fit_seconds": seconds}, _sidecar(args.out, "timing"))
    print(json.dumps({"count": len(gs), "fit_seconds": round(seconds, 3)}), flush=True)
    return EXIT_OK


def cmd_render(args) -> int:
    gs = read_checkpoint(args.ckpt)
    info = _fit_info(args.ckpt)
    if args.volume is not None:
        vol = load_volume(args.volume)
        dims, spacing, origin = vol.dims, vol.spacing, vol.origin
    else:
        dims = args.dims or _dims_from_bbox(gs, args.spacing)
        spacing, origin = args.spacing, (0.0, 0.0, 0.0)
    # zero-stride stand-in: slice geometry without allocating samples
    grid = VolumeGrid(np.broadcast_to(np.float32(0), tuple(reversed(dims))), spacing, origin)
    sigma_z = _resolve_sigma_z(args.sigma_z, info, grid.spacing[2])
    _echo(args, {"sigma_z_resolved": sigma_z, "dims": list(dims)})
    if not 0 <= args.slice < dims[2]:
        raise UsageError(f"--slice {args.slice} outside [0, {dims[2]})")
    psf = PsfSpec(grid.spacing[0], grid.spacing[1], sigma_z)
    pixels = render_volume_slice(gs, grid, psf, args.slice)
    img = SliceImage(pixels, (grid.spacing[0], grid.spacing[1]))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.raw:
        img.save_raw(args.out)
    else:
        img.save_pgm(args.out)
    return EXIT_OK


def cmd_voxelize(args) -> int:
    gs = read_checkpoint(args.ckpt)
    cfg = VoxelizerConfig(args.dims, args.spacing, args.origin, support_sigmas=args.support)
    _echo(args)
    save_volume(voxelize(gs, cfg), args.out)
    return EXIT_OK


def cmd_compress(args) -> int:
    gs = read_checkpoint(args.ckpt)
    a = args.attr_bits
    spec = QuantSpec(args.pos_bits, a, a, a)
    _echo(args, {"quant_spec": spec.__dict__})
    args.out.parent.mkdir(parents=True, exist_ok=True)
    n = write_container(encode(gs, spec, args.level), args.out)
    print(json.dumps({"container_bytes": n, "count": len(gs)}), flush=True)
    return EXIT_OK


def cmd_decompress(args) -> int:
    _echo(args)
    gs = decode(read_container(args.src))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(gs, args.out)
    return EXIT_OK


def _json_number(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def cmd_eval(args) -> int:
    pred = load_volume(args.pred)
    gt = load_volume(args.gt)
    if pred.dims != gt.dims:
        raise SliceSplatError(f"volume dims differ: {pred.dims} vs {gt.dims}")
    _echo(args)
    p = np.clip(np.asarray(pred.data, np.float64), 0.0, 1.0)
    g = np.asarray(gt.data, np.float64)
    gs = read_checkpoint(args.ckpt) if args.ckpt else None
    info = _fit_info(args.ckpt) if args.ckpt else {}
    if gs is not None:
        sigma_z = _resolve_sigma_z(args.sigma_z, info, gt.delta_z)
        psf = PsfSpec(gt.spacing[0], gt.spacing[1], sigma_z)
        slices = [np.clip(render_volume_slice(gs, gt, psf, k), 0.0, 1.0) for k in range(gt.dims[2])]
    else:
        slices = list(p)
    small = min(g.shape[1:]) < 11
    metrics = {
        "psnr2d_mean": float(np.mean([psnr(s, g[k]) for k, s in enumerate(slices)])),
        "ssim2d_mean": None if small else float(np.mean([ssim(s, g[k]) for k, s in enumerate(slices)])),
        "psnr3d": psnr(p, g),
        "ssim3d": None if min(g.shape) < 11 else ssim(p, g),
        "gaussian_count": len(gs) if gs is not None else None,
        "checkpoint_bytes": args.ckpt.stat().st_size if args.ckpt else None,
        "container_bytes": args.container.stat().st_size if args.container else None,
        "ratio_vs_checkpoint": None,
        "ratio_vs_voxels": None,
        "fit_seconds": None,
    }
    if args.container and gs is not None:
        r = report_ratio(gs, metrics["container_bytes"], gt)
        metrics["ratio_vs_checkpoint"] = r["vs_checkpoint"]
        metrics["ratio_vs_voxels"] = r["vs_voxels"]
    elif args.container:
        metrics["ratio_vs_voxels"] = 4.0 * int(np.prod(gt.dims)) / metrics["container_bytes"]
    if args.ckpt and _sidecar(args.ckpt, "timing").exists():
        metrics["fit_seconds"] = load_json(_sidecar(args.ckpt, "timing"))["fit_seconds"]
    metrics = {k: _json_number(v) if isinstance(v, float) else v for k, v in metrics.items()}
    save_json(metrics, args.out)
    print(json.dumps(metrics, sort_keys=True), flush=True)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "render": cmd_render,
    "voxelize": cmd_voxelize,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            import numba

            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (SliceSplatError, OSError, ValueError, ArithmeticError) as e:
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
