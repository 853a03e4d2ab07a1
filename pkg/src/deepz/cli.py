"""Command-line interface.

Subcommands cover the whole pipeline: synthesize datasets from the optics
model, build DPMs, train, refocus single images or whole virtual stacks,
evaluate image quality, measure bead FWHMs and track neuron activity.
Every run is reproducible from its config and seed; configs are echoed
into output directories, and numeric results are also written as CSV.

Exit codes: 0 ok, 1 usage/config error, 2 I/O error, 3 numeric failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dpm as dpm_mod
from . import evalsuite, infer, neurotrack, optics
from .datapipe import Dataset, build_dataset, normalize_input_image
from .errors import DegenerateInputError, DeepzError, DimensionError, FitError, NonFiniteError, TrainingDivergedError
from .stack import ImageStack, load_dzst, read_tiff, save_dzst, write_tiff
from .trainer import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "seed": 0,
    "grid_height": 256,
    "grid_width": 256,
    "pixel_size_um": 0.325,
    "n_emitters": 40,
    "z_min_um": -1.5,
    "z_max_um": 1.5,
    "brightness_min": 0.7,
    "brightness_max": 1.3,
    "radius_um": 0.05,
    "min_separation_um": 2.0,
    "edge_margin_um": 3.0,
    "psf_sigma0_um": 0.4,
    "psf_rayleigh_um": 1.5,
    "psf_asymmetry": 0.25,
    "psf_ring": 0.15,
    "noise": False,
    "photon_scale": 1000.0,
    "read_sigma": 0.0,
    "background": 0.0,
    "stack_z_min_um": -7.5,
    "stack_z_max_um": 7.5,
    "step_um": 0.5,
    "tile": 64,
    "overlap_frac": 0.05,
    "targets_per_input": 5,
    "range_planes": 10,
}

TRAIN_DEFAULTS = {
    "seed": 0,
    "alpha": 0.02,
    "lr_g": 1e-4,
    "lr_d": 3e-5,
    "batch": 4,
    "g_updates": 6,
    "d_updates": 3,
    "val_every": 50,
    "iterations": 1000,
    "channel_scale": 0.25,
    "augment": True,
    "val_frac": 0.15,
}


def _load_config(path, defaults: dict) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})")
    if not isinstance(raw, dict):
        raise UsageError(f"config {path}: expected a JSON object of flat keys")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"config {path}: unknown keys {unknown}; known keys are {sorted(defaults)}")
    merged = dict(defaults)
    merged.update(raw)
    return merged


def _echo_config(config: dict, out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# image I/O helpers
# ---------------------------------------------------------------------------


def _read_image(path) -> np.ndarray:
    """A single 2-D image from TIFF (first page) or DZST (first plane)."""
    planes = _read_planes(path)
    return planes[0]


def _read_planes(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        return read_tiff(path)
    if path.suffix.lower() == ".dzst":
        stack, _ = load_dzst(path)
        return stack.planes
    raise UsageError(f"{path}: unsupported image format (use .tif/.tiff or .dzst)")


def _read_stack(path) -> ImageStack:
    path = Path(path)
    if path.suffix.lower() == ".dzst":
        stack, _ = load_dzst(path)
        return stack
    return ImageStack(read_tiff(path))


def _write_image(path, image):
    path = Path(path)
    if path.suffix.lower() == ".dzst":
        save_dzst(path, ImageStack(np.asarray(image, dtype=np.float32)[None]))
    else:
        write_tiff(path, np.asarray(image, dtype=np.float32))


def _parse_range(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range {text!r} must be min:max:step")
    try:
        z_min, z_max, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"range {text!r} must be numeric min:max:step")
    if step <= 0 or z_min > z_max:
        raise UsageError(f"range {text!r} needs step > 0 and min <= max")
    return z_min, z_max, step


def _parse_dpm_spec(spec, height, width, pixel_size_um) -> dpm_mod.Dpm:
    kind, _, rest = spec.partition(":")
    args = [a for a in rest.split(",") if a != ""]
    axis = "x"

    def axis_of(tokens):
        if tokens and tokens[-1] in ("x", "y"):
            return tokens[-1], tokens[:-1]
        return "x", tokens

    try:
        if kind == "uniform":
            return dpm_mod.uniform(height, width, float(args[0]))
        if kind == "tilt":
            axis, args = axis_of(args)
            return dpm_mod.surface(height, width, {"kind": "tilt", "angle_deg": float(args[0]), "axis": axis},
                                   pixel_size_um)
        if kind in ("cyl", "cylinder"):
            axis, args = axis_of(args)
            diameter = float(args[0].removesuffix("mm"))
            offset = float(args[1]) if len(args) > 1 else 0.0
            return dpm_mod.surface(
                height, width,
                {"kind": "cylinder", "diameter_mm": diameter, "offset_um": offset, "axis": axis},
                pixel_size_um)
        if kind in ("sin", "sinusoid"):
            axis, args = axis_of(args)
            return dpm_mod.surface(
                height, width,
                {"kind": "sinusoid", "period_px": float(args[0]), "z_lo_um": float(args[1]),
                 "z_hi_um": float(args[2]), "axis": axis},
                pixel_size_um)
        if kind == "file":
            loaded = dpm_mod.Dpm.load(rest) if rest.endswith(".dzst") else dpm_mod.Dpm(_read_image(rest))
            if loaded.shape != (height, width):
                raise UsageError(f"DPM file shape {loaded.shape} != requested {height}x{width}")
            return loaded
    except (IndexError, ValueError) as exc:
        raise UsageError(f"bad DPM spec {spec!r}: {exc}")
    raise UsageError(f"unknown DPM spec kind {kind!r} (use uniform/tilt/cyl/sin/file)")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    config = _load_config(args.config, SYNTH_DEFAULTS) if args.config else dict(SYNTH_DEFAULTS)
    out_dir = Path(args.out)
    _echo_config(config, out_dir, "synth_config.json")

    grid = optics.GridSpec(config["grid_height"], config["grid_width"], config["pixel_size_um"])
    sample = optics.random_sample(
        config["n_emitters"],
        extent_um=(grid.height * grid.pixel_size_um, grid.width * grid.pixel_size_um),
        z_range_um=(config["z_min_um"], config["z_max_um"]),
        brightness_range=(config["brightness_min"], config["brightness_max"]),
        radius_um=config["radius_um"],
        seed=config["seed"],
        margin_um=config["edge_margin_um"],
        min_separation_um=config["min_separation_um"],
    )
    psf = optics.PsfModel(config["psf_sigma0_um"], config["psf_rayleigh_um"],
                          config["psf_asymmetry"], config["psf_ring"])
    noise = None
    if config["noise"]:
        noise = optics.NoiseModel(config["photon_scale"], config["read_sigma"], config["background"])
    stack = optics.render_stack(sample, psf, (config["stack_z_min_um"], config["stack_z_max_um"]),
                                config["step_um"], grid, noise=noise)
    save_dzst(out_dir / "stack.dzst", stack)

    with open(out_dir / "emitters.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_um", "y_um", "z_um", "brightness", "radius_um"])
        for row in sample.emitters:
            writer.writerow([f"{v:.6f}" for v in row])

    dataset = build_dataset(stack, tile=config["tile"], overlap_frac=config["overlap_frac"],
                            targets_per_input=config["targets_per_input"],
                            range_planes=config["range_planes"], seed=config["seed"])
    dataset.save(out_dir)
    print(f"synth: {len(dataset)} pairs from {stack.nz} planes -> {out_dir}")
    return 0


def cmd_dpm(args):
    height, width = _parse_dims(args.dims)
    d = _parse_dpm_spec(args.spec, height, width, args.px)
    d.save(args.out)
    norm = d.normalized
    print(f"dpm: {args.spec} -> {args.out} (normalized range [{norm.min():.3f}, {norm.max():.3f}])")
    for warning in dpm_mod.validate(d):
        print(f"dpm: warning: {warning}")
    return 0


def _parse_dims(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"dims {text!r} must look like 256x256")


def cmd_train(args):
    config = _load_config(args.config, TRAIN_DEFAULTS) if args.config else dict(TRAIN_DEFAULTS)
    dataset = Dataset.load(args.dataset)
    out_dir = Path(args.out)
    _echo_config(config, out_dir, "train_config_requested.json")
    report, best = train(dataset, out_dir, TrainConfig(**config))
    print(f"train: best val MAE {report.best_val_mae:.5f} at iteration {report.best_iteration}; "
          f"checkpoint {best}")
    return 0


def _load_normalized_input(path, raw: bool):
    image = _read_image(path)
    if raw:
        return image.astype(np.float32), None
    normalized, record = normalize_input_image(image)
    return normalized, record


def cmd_refocus(args):
    model = infer.RefocusModel.load(args.ckpt)
    image, record = _load_normalized_input(args.input, args.raw)
    d = _parse_dpm_spec(args.dpm if ":" in args.dpm else f"file:{args.dpm}",
                        image.shape[0], image.shape[1], args.px)
    if args.tile:
        result = infer.tile_refocus(model, image, d, tile=args.tile, halo=args.halo)
    else:
        result = infer.refocus(model, image, d)
    _write_image(args.out, result.image)
    sidecar = {
        "warnings": result.warnings,
        "normalization": None if record is None else {"background": record.background, "scale": record.scale},
        "dpm_spec": args.dpm,
    }
    Path(str(args.out) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    for warning in result.warnings:
        print(f"refocus: warning: {warning}")
    print(f"refocus: wrote {args.out}")
    return 0


def cmd_stack(args):
    model = infer.RefocusModel.load(args.ckpt)
    image, _ = _load_normalized_input(args.input, args.raw)
    z_min, z_max, step = _parse_range(args.range)
    stack = infer.virtual_stack(model, image, z_min, z_max, step, pixel_size_um=args.px)
    if Path(args.out).suffix.lower() in (".tif", ".tiff"):
        write_tiff(args.out, stack.planes)
    else:
        save_dzst(args.out, stack)
    print(f"stack: {stack.nz} planes [{z_min}:{z_max}:{step}] -> {args.out}")
    return 0


def cmd_eval(args):
    a = _read_image(args.a)
    b = _read_image(args.b)
    report = evalsuite.metrics(a, b)
    payload = report.as_dict()
    Path(args.json).write_text(json.dumps(payload, indent=2) + "\n")
    with open(Path(args.json).with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(payload))
        writer.writerow([f"{v:.9g}" for v in payload.values()])
    print("eval: " + " ".join(f"{k}={v:.6g}" for k, v in payload.items()))
    return 0


def cmd_fwhm(args):
    planes = _read_planes(args.input)
    if planes.shape[0] == 1:
        fits = evalsuite.fit_image_beads(planes[0], pixel_size_um=args.px, include_flagged=args.include_flagged)
    else:
        stack = ImageStack(planes, pixel_size_um=args.px, step_um=args.dz)
        mip = planes.max(axis=0)
        fits = []
        for y, x, flags in evalsuite.detect_beads(mip):
            if flags and not args.include_flagged:
                continue
            plane_idx = int(planes[:, int(round(y)), int(round(x))].argmax())
            try:
                fit = evalsuite.fit_lateral(planes[plane_idx], (y, x), pixel_size_um=args.px)
                fit = evalsuite.fit_axial(stack, fit)
            except (DimensionError, FitError):
                continue
            fit.flags.extend(flags)
            fits.append(fit)
    evalsuite.write_bead_csv(args.csv, fits)
    lateral = [f.fwhm_lateral_um for f in fits]
    median = float(np.median(lateral)) if lateral else float("nan")
    print(f"fwhm: {len(fits)} beads, median lateral {median:.3f} um -> {args.csv}")
    return 0


def cmd_track(args):
    marker = [_read_stack(p) for p in _stack_files(args.marker)]
    activity = [_read_stack(p) for p in _stack_files(args.activity)]
    if not marker or not activity:
        raise UsageError("marker/activity directories contain no .dzst or .tif stacks")
    neurons = neurotrack.segment(marker)
    if not neurons:
        print("track: warning: no neurons found", file=sys.stderr)
        Path(args.csv).write_text("id,x_um,y_um,z_um,cluster\n")
        return 0
    traces = neurotrack.extract_traces(neurons, activity)
    sim = neurotrack.similarity(traces, sigma=args.sigma, top_m=args.top)
    labels, report = neurotrack.spectral_cluster(sim, seed=args.seed)
    neurotrack.assign_clusters(traces, sim, labels)
    neurotrack.write_trace_csv(args.csv, traces)
    base = Path(args.csv)
    save_dzst(base.with_suffix(".similarity.dzst"), ImageStack(sim.values[None].astype(np.float32)))
    with open(base.with_suffix(".eigen.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "eigenvalue", "gap_to_next"])
        for i, val in enumerate(report.eigenvalues):
            gap = report.gaps[i] if i < len(report.gaps) else ""
            writer.writerow([i, f"{val:.9g}", f"{gap:.9g}" if gap != "" else ""])
    print(f"track: {len(neurons)} neurons, {sim.n} clustered into k={report.chosen_k} -> {args.csv}")
    return 0


def _stack_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".dzst", ".tif", ".tiff"))


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="deepz", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a bead stack and training dataset")
    p.add_argument("--config", help="flat JSON config (unknown keys are errors)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dpm", help="build a digital propagation matrix")
    p.add_argument("--spec", required=True,
                   help="uniform:dz | tilt:angle[,axis] | cyl:diam_mm[,offset][,axis] | sin:period,zlo,zhi[,axis] | file:path")
    p.add_argument("--dims", required=True, help="HxW, e.g. 256x256")
    p.add_argument("--px", type=float, default=0.325)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dpm)

    p = sub.add_parser("train", help="train a refocusing model on a synth dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="flat JSON train config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refocus", help="refocus one image onto a DPM surface")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--dpm", required=True, help="DPM spec or file path")
    p.add_argument("--out", required=True)
    p.add_argument("--px", type=float, default=0.325)
    p.add_argument("--raw", action="store_true", help="skip input normalization")
    p.add_argument("--tile", type=int, default=0, help="tile size for large fields (0 = single pass)")
    p.add_argument("--halo", type=int, default=32)
    p.set_defaults(func=cmd_refocus)

    p = sub.add_parser("stack", help="build a virtual focal stack from one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--range", required=True, help="z_min:z_max:step in um, e.g. -10:10:0.5")
    p.add_argument("--out", required=True)
    p.add_argument("--px", type=float, default=0.325)
    p.add_argument("--raw", action="store_true")
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("eval", help="image-quality metrics between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--json", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fwhm", help="bead FWHM measurements")
    p.add_argument("--in", dest="input", required=True, help="image (lateral) or stack (lateral+axial)")
    p.add_argument("--px", type=float, default=0.325)
    p.add_argument("--dz", type=float, default=0.5)
    p.add_argument("--csv", required=True)
    p.add_argument("--include-flagged", action="store_true")
    p.set_defaults(func=cmd_fwhm)

    p = sub.add_parser("track", help="neuron segmentation, traces and clustering")
    p.add_argument("--marker", required=True, help="directory of marker-channel stacks over time")
    p.add_argument("--activity", required=True, help="directory of activity-channel stacks over time")
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--top", type=int, default=None, help="keep the N most active neurons")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_track)

    return parser


def _merge_dash_values(argv):
    """Let `--range -10:10:0.5` parse even though the value starts with '-'."""
    out = []
    i = 0
    while i < len(argv):
        token = argv[i]
        if token in ("--range", "--spec", "--dpm") and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{token}={argv[i + 1]}")
            i += 2
            continue
        out.append(token)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    argv = _merge_dash_values(list(argv))
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"deepz: usage: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"deepz: io: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, TrainingDivergedError, FitError) as exc:
        print(f"deepz: numeric: {exc}", file=sys.stderr)
        return 3
    except (DimensionError, DegenerateInputError, ValueError) as exc:
        print(f"deepz: usage: {exc}", file=sys.stderr)
        return 1
    except DeepzError as exc:
        print(f"deepz: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
