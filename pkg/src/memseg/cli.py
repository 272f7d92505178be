"""Command-line pipeline orchestration and benchmarking.

Subcommands compose the stages through VOL3 files, so a full `pipeline`
run and a manual chain of stage commands produce bit-identical artifacts.
Exit codes: 0 ok, 1 usage, 2 data error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from . import metrics as metrics_mod
from . import preprocess as pre_mod
from . import report as report_mod
from . import seeding as seed_mod
from . import synth as synth_mod
from . import watershed as ws_mod
from .volume import (DataError, LabelVolume, ScalarVolume, import_raw,
                     read_volume, write_volume)


class UsageError(Exception):
    pass


DEFAULTS = {
    "ball_radius": 5.0,
    "target_spacing": "",
    "reference_histogram": "",
    "smooth_sigma": 0.5,
    "h_value": 1.0,
    "tol": 1,
    "threads": 1,
    "crf.w1": 200.0,
    "crf.w2": 4.0,
    "crf.sigma_alpha": 2.0,
    "crf.sigma_beta": 0.1,
    "crf.sigma_gamma": 0.5,
    "crf.iterations": 5,
    "crf.epsilon": 1e-6,
    "crf.radius": "",
}

# argparse dest for each config key
_KEY_DEST = {k: k.replace(".", "_").replace("-", "_") for k in DEFAULTS}


def parse_config(path) -> dict:
    """Flat `key = value` file with # comments; keys must be known."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{ln}: unknown key {key!r}")
        ref = DEFAULTS[key]
        try:
            if isinstance(ref, float):
                out[key] = float(value)
            elif isinstance(ref, int):
                out[key] = int(value)
            else:
                out[key] = value
        except ValueError as e:
            raise UsageError(f"{path}:{ln}: bad value for {key}: {value!r}") from e
    return out


def resolve_settings(args) -> dict:
    """Config precedence: CLI flag > config file > built-in default."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(parse_config(args.config))
    for key, dest in _KEY_DEST.items():
        val = getattr(args, dest, None)
        if val is not None:
            settings[key] = val
    return settings


def _parse_triple(text, what):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise UsageError(f"{what} must be three comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _crf_params(settings) -> crf_mod.CrfParams:
    radius = settings["crf.radius"]
    return crf_mod.CrfParams(
        w1=settings["crf.w1"],
        w2=settings["crf.w2"],
        sigma_alpha=settings["crf.sigma_alpha"],
        sigma_beta=settings["crf.sigma_beta"],
        sigma_gamma=settings["crf.sigma_gamma"],
        iterations=settings["crf.iterations"],
        epsilon=settings["crf.epsilon"],
        cand_radius=float(radius) if str(radius).strip() else None,
    )


def _preprocess_params(settings) -> pre_mod.PreprocessParams:
    target = settings["target_spacing"]
    ref = settings["reference_histogram"]
    return pre_mod.PreprocessParams(
        ball_radius=settings["ball_radius"],
        target_spacing=_parse_triple(target, "target_spacing") if str(target).strip() else None,
        reference_cdf=pre_mod.read_reference_cdf(ref) if str(ref).strip() else None,
    )


def _set_threads(settings):
    import numba

    n = max(1, int(settings["threads"]))
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _read_input(args) -> ScalarVolume:
    if getattr(args, "raw_dims", None):
        if not getattr(args, "spacing", None):
            raise UsageError("raw import requires --spacing")
        dims = tuple(int(v) for v in _parse_triple(args.raw_dims, "--raw-dims"))
        return import_raw(args.input, dims, args.raw_dtype, _parse_triple(args.spacing, "--spacing"))
    v = read_volume(args.input)
    if not isinstance(v, ScalarVolume):
        raise DataError(f"{args.input}: expected a scalar volume")
    return v


def _read_probmap(path) -> ScalarVolume:
    v = read_volume(path)
    if not isinstance(v, ScalarVolume):
        raise DataError(f"{path}: probability map must be a scalar volume")
    vf = v.as_float()
    if not vf.is_probability_map():
        raise DataError(f"{path}: probability map values must lie in [0, 1]")
    return vf


def _read_labels(path) -> LabelVolume:
    v = read_volume(path)
    if not isinstance(v, LabelVolume):
        raise DataError(f"{path}: expected a label volume")
    return v


class _Stage:
    """Times a stage; failures propagate annotated with the stage name."""

    def __init__(self, name, times):
        self.name = name
        self.times = times

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.times[self.name] = time.perf_counter() - self.t0
        if exc is not None:
            print(f"stage '{self.name}' failed: {exc}", file=sys.stderr)
        return False


# ---------------------------------------------------------------------------
# stage drivers (shared by pipeline / bench / stage subcommands)
# ---------------------------------------------------------------------------

def _run_stages(vol, settings, probmap_file=None, use_fallback=False, skip_crf=False,
                times=None):
    """preprocess -> probmap -> seeds -> watershed -> [crf]; returns artifacts."""
    times = {} if times is None else times
    out = {}
    with _Stage("preprocess", times):
        out["preprocessed"] = pre_mod.preprocess_volume(vol, _preprocess_params(settings))
    with _Stage("probmap", times):
        if probmap_file:
            out["probmap"] = _read_probmap(probmap_file)
            if out["probmap"].dims != out["preprocessed"].dims:
                raise DataError("supplied probability map dims do not match the input")
            print(f"probability map: {probmap_file}")
        elif use_fallback:
            out["probmap"] = pre_mod.fallback_probmap(out["preprocessed"],
                                                      settings["smooth_sigma"])
            print("probability map: classical fallback (no neural network)")
        else:
            raise UsageError("exactly one probability-map source required: "
                             "--probmap FILE or --fallback")
    with _Stage("seed", times):
        seeds = seed_mod.generate_seeds(out["probmap"], settings["h_value"])
        if seeds.num_seeds == 0:
            raise DataError("seeding produced zero seeds; lower --h-value")
        out["seeds"] = seeds
        print(f"seeds: {seeds.num_seeds} (otsu threshold {seeds.threshold:.4f}, "
              f"H = {seeds.h_value} um)")
    with _Stage("watershed", times):
        out["watershed"] = ws_mod.seeded_watershed(out["probmap"], seeds)
    if skip_crf:
        out["final"] = out["watershed"]
    else:
        with _Stage("crf", times):
            out["final"] = crf_mod.mean_field_refine(out["probmap"], out["watershed"],
                                                     _crf_params(settings))
    return out, times


def cmd_pipeline(args, settings):
    vol = _read_input(args)
    prefix = args.output
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    arts, times = _run_stages(vol, settings, probmap_file=args.probmap,
                              use_fallback=args.fallback, skip_crf=args.skip_crf)
    write_volume(arts["preprocessed"], f"{prefix}.preprocessed.vol3")
    write_volume(arts["probmap"], f"{prefix}.probmap.vol3")
    write_volume(arts["seeds"].to_label_volume(vol.dims, vol.spacing), f"{prefix}.seeds.vol3")
    write_volume(arts["watershed"], f"{prefix}.watershed.vol3")
    write_volume(arts["final"], f"{prefix}.final.vol3")
    lines = {f"time.{k}": f"{v:.4f}" for k, v in times.items()}
    lines["cells"] = int(arts["final"].label_set().size)
    per_slice = sum(times.values()) / vol.dims[0]
    lines["seconds_per_slice"] = f"{per_slice:.4f}"
    if args.truth:
        truth = _read_labels(args.truth)
        rep = metrics_mod.boundary_prf(arts["final"], truth, settings["tol"])
        rep.stage_times = times
        with open(f"{prefix}.report.txt", "w") as f:
            f.write(rep.to_keyvalues())
            f.write(f"seconds_per_slice = {per_slice:.4f}\n")
        report_mod.render_metrics_figure(rep, f"{prefix}.metrics.png")
        print(rep.to_keyvalues(), end="")
    else:
        report_mod.write_keyvalues(lines, f"{prefix}.report.txt")
    report_mod.render_timings_figure(times, f"{prefix}.timings.png", per_slice=per_slice)
    for k, v in times.items():
        print(f"time.{k} = {v:.3f} s")
    print(f"seconds_per_slice = {per_slice:.4f}")
    return 0


def cmd_preprocess(args, settings):
    vol = _read_input(args)
    out = pre_mod.preprocess_volume(vol, _preprocess_params(settings))
    write_volume(out, args.output)
    if args.emit_histogram:
        pre_mod.write_reference_cdf(pre_mod.volume_cdf(out), args.emit_histogram)
    return 0


def cmd_probmap(args, settings):
    vol = _read_input(args)
    out = pre_mod.fallback_probmap(vol, settings["smooth_sigma"])
    print("probability map: classical fallback (no neural network)")
    write_volume(out, args.output)
    return 0


def cmd_seed(args, settings):
    q = _read_probmap(args.input)
    seeds = seed_mod.generate_seeds(q, settings["h_value"])
    print(f"seeds: {seeds.num_seeds} (otsu threshold {seeds.threshold:.4f}, "
          f"H = {seeds.h_value} um)")
    write_volume(seeds.to_label_volume(q.dims, q.spacing), args.output)
    return 0


def cmd_watershed(args, settings):
    q = _read_probmap(args.input)
    seeds = seed_mod.SeedSet.from_label_volume(_read_labels(args.seeds))
    write_volume(ws_mod.seeded_watershed(q, seeds), args.output)
    return 0


def cmd_refine(args, settings):
    q = _read_probmap(args.input)
    labels = _read_labels(args.labels)
    out = crf_mod.mean_field_refine(q, labels, _crf_params(settings))
    write_volume(out, args.output)
    return 0


def cmd_eval(args, settings):
    pred = _read_labels(args.pred)
    truth = _read_labels(args.truth)
    rep = metrics_mod.boundary_prf(pred, truth, settings["tol"])
    print(rep.to_keyvalues(), end="")
    if args.output:
        with open(f"{args.output}.report.txt", "w") as f:
            f.write(rep.to_keyvalues())
        report_mod.render_metrics_figure(rep, f"{args.output}.metrics.png")
    return 0


def cmd_bench(args, settings):
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    vol = _read_input(args)
    reps = []
    finals = []
    for rep in range(args.repetitions):
        arts, times = _run_stages(vol, settings, probmap_file=args.probmap,
                                  use_fallback=args.fallback, skip_crf=args.skip_crf)
        reps.append(times)
        finals.append(arts["final"].data.tobytes())
    deterministic = all(b == finals[0] for b in finals)
    stages = list(reps[0].keys())
    medians = {s: float(np.median([t[s] for t in reps])) for s in stages}
    z = vol.dims[0]
    total_median = float(np.median([sum(t.values()) for t in reps]))
    per_slice = total_median / z
    lines = {f"median_time.{s}": f"{medians[s]:.4f}" for s in stages}
    lines.update({
        "repetitions": args.repetitions,
        "slices": z,
        "median_total_seconds": f"{total_median:.4f}",
        "median_seconds_per_slice": f"{per_slice:.4f}",
        "deterministic_across_repetitions": str(deterministic).lower(),
    })
    for k, v in lines.items():
        print(f"{k} = {v}")
    if args.output:
        report_mod.write_keyvalues(lines, f"{args.output}.bench.txt")
        report_mod.render_bench_figure(stages, reps, medians, f"{args.output}.bench.png")
    if not deterministic:
        raise DataError("pipeline outputs differed across repetitions")
    return 0


def _label_color(label: int) -> tuple[int, int, int]:
    """Deterministic bright color from the label id (splitmix64 mix)."""
    x = (int(label) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 31
    r = 64 + (x & 0xFF) * 191 // 255
    g = 64 + ((x >> 8) & 0xFF) * 191 // 255
    b = 64 + ((x >> 16) & 0xFF) * 191 // 255
    return (r, g, b)


def export_slices(labels: LabelVolume, raw: ScalarVolume, outdir) -> list:
    """One P6 PPM per z-slice: raw grayscale with colored label boundaries."""
    if labels.dims != raw.dims:
        raise DataError("export_slices: label/raw dims mismatch")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    boundary = synth_mod.boundary_mask(labels.data)
    gray = np.clip(raw.as_float().data.astype(np.float64) * 255.0, 0, 255).astype(np.uint8)
    colors = {int(l): _label_color(int(l)) for l in labels.label_set()}
    colors[0] = (255, 0, 0)
    paths = []
    Z, Y, X = labels.dims
    for z in range(Z):
        img = np.repeat(gray[z][:, :, None], 3, axis=2)
        bz = boundary[z]
        lz = labels.data[z]
        for lab in np.unique(lz[bz]):
            m = bz & (lz == lab)
            img[m] = colors[int(lab)]
        path = outdir / f"slice_{z:04d}.ppm"
        with open(path, "wb") as f:
            f.write(f"P6\n{X} {Y}\n255\n".encode())
            f.write(img.tobytes())
        paths.append(path)
    return paths


def cmd_export_slices(args, settings):
    labels = _read_labels(args.labels)
    raw = read_volume(args.raw)
    if not isinstance(raw, ScalarVolume):
        raise DataError(f"{args.raw}: expected a scalar volume")
    paths = export_slices(labels, raw, args.outdir)
    print(f"wrote {len(paths)} slice images to {args.outdir}")
    return 0


def cmd_synth(args, settings):
    dims = tuple(int(v) for v in _parse_triple(args.dims, "--dims"))
    spacing = _parse_triple(args.spacing, "--spacing")
    raw, truth = synth_mod.make_foam(dims, spacing, args.cells, args.membrane_width,
                                     args.seed, protrusions=args.protrusions)
    degraded = args.noise > 0 or args.attenuation > 0 or args.gaps > 0
    if degraded:
        raw = synth_mod.degrade(raw, args.noise, args.attenuation, args.gaps, args.seed)
    prefix = args.output
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_volume(raw, f"{prefix}.raw.vol3")
    write_volume(truth, f"{prefix}.truth.vol3")
    with open(f"{prefix}.manifest.txt", "w") as f:
        f.write(synth_mod.manifest_text({
            "dims": "%d,%d,%d" % dims,
            "spacing": "%g,%g,%g" % spacing,
            "n_cells": args.cells,
            "membrane_width": args.membrane_width,
            "rng_seed": args.seed,
            "protrusions": args.protrusions,
            "noise_sigma": args.noise,
            "attenuation_per_z": args.attenuation,
            "gap_fraction": args.gaps,
        }))
    print(f"foam: {args.cells} cells in {dims} voxels -> {prefix}.raw.vol3")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_settings_flags(p, crf=False):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--h-value", dest="h_value", type=float, default=None,
                   help="H-maxima suppression depth in um")
    p.add_argument("--tol", type=int, default=None, help="boundary match tolerance, voxels")
    p.add_argument("--ball-radius", dest="ball_radius", type=float, default=None)
    p.add_argument("--smooth-sigma", dest="smooth_sigma", type=float, default=None)
    p.add_argument("--target-spacing", dest="target_spacing", default=None)
    p.add_argument("--reference-histogram", dest="reference_histogram", default=None)
    if crf:
        p.add_argument("--crf.w1", dest="crf_w1", type=float, default=None)
        p.add_argument("--crf.w2", dest="crf_w2", type=float, default=None)
        p.add_argument("--crf.sigma-alpha", dest="crf_sigma_alpha", type=float, default=None)
        p.add_argument("--crf.sigma-beta", dest="crf_sigma_beta", type=float, default=None)
        p.add_argument("--crf.sigma-gamma", dest="crf_sigma_gamma", type=float, default=None)
        p.add_argument("--crf.iterations", dest="crf_iterations", type=int, default=None)
        p.add_argument("--crf.epsilon", dest="crf_epsilon", type=float, default=None)
        p.add_argument("--crf.radius", dest="crf_radius", type=float, default=None)


def _add_raw_import_flags(p):
    p.add_argument("--raw-dims", dest="raw_dims", default=None,
                   help="import a headerless raw file with these z,y,x dims")
    p.add_argument("--raw-dtype", dest="raw_dtype", default="u8", choices=["u8", "u16"])
    p.add_argument("--spacing", default=None, help="voxel spacing sz,sy,sx in um")


def build_parser() -> _Parser:
    parser = _Parser(prog="memseg",
                     description="3D membrane-based cell segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run all stages on one stack")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="artifact path prefix")
    p.add_argument("--probmap", default=None, help="precomputed probability map (VOL3)")
    p.add_argument("--fallback", action="store_true", help="use the classical probability map")
    p.add_argument("--skip-crf", dest="skip_crf", action="store_true")
    p.add_argument("--truth", default=None, help="ground-truth labels for evaluation")
    _add_raw_import_flags(p)
    _add_settings_flags(p, crf=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("preprocess", help="background subtraction / resample / histogram match")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--emit-histogram", dest="emit_histogram", default=None,
                   help="write the result CDF as a reference sidecar")
    _add_raw_import_flags(p)
    _add_settings_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("probmap", help="classical fallback probability map")
    p.add_argument("input")
    p.add_argument("output")
    _add_raw_import_flags(p)
    _add_settings_flags(p)
    p.set_defaults(func=cmd_probmap)

    p = sub.add_parser("seed", help="Otsu -> distance transform -> H-maxima seeds")
    p.add_argument("input", help="probability map (VOL3)")
    p.add_argument("output", help="seed label volume (VOL3)")
    _add_settings_flags(p)
    p.set_defaults(func=cmd_seed)

    p = sub.add_parser("watershed", help="seeded priority-flood watershed")
    p.add_argument("input", help="probability map (VOL3)")
    p.add_argument("seeds", help="seed label volume (VOL3)")
    p.add_argument("output")
    _add_settings_flags(p)
    p.set_defaults(func=cmd_watershed)

    p = sub.add_parser("refine", help="dense-CRF mean-field refinement")
    p.add_argument("input", help="probability map (VOL3)")
    p.add_argument("labels", help="watershed labels (VOL3)")
    p.add_argument("output")
    _add_settings_flags(p, crf=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="boundary precision/recall/F against truth")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("-o", "--output", default=None, help="report path prefix")
    _add_settings_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="repeat the pipeline and report median timings")
    p.add_argument("input")
    p.add_argument("-o", "--output", default=None, help="report path prefix")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--probmap", default=None)
    p.add_argument("--fallback", action="store_true")
    p.add_argument("--skip-crf", dest="skip_crf", action="store_true")
    _add_raw_import_flags(p)
    _add_settings_flags(p, crf=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-slices", help="per-slice PPM overlays of label boundaries")
    p.add_argument("labels")
    p.add_argument("raw")
    p.add_argument("outdir")
    _add_settings_flags(p)
    p.set_defaults(func=cmd_export_slices)

    p = sub.add_parser("synth", help="generate a synthetic foam stack with ground truth")
    p.add_argument("-o", "--output", required=True, help="output path prefix")
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--spacing", default="0.5,0.5,0.5")
    p.add_argument("--cells", type=int, default=20)
    p.add_argument("--membrane-width", dest="membrane_width", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protrusions", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--attenuation", type=float, default=0.0)
    p.add_argument("--gaps", type=float, default=0.0)
    _add_settings_flags(p)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        settings = resolve_settings(args)
        _set_threads(settings)
        return args.func(args, settings)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - internal failures
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
