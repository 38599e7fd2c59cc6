"""Command-line interface.

Every subcommand writes its outputs atomically and leaves a
``<output>.run.json`` record (or ``run.json`` inside an output
directory) holding the full configuration, tool version and SHA-256
digests of inputs and outputs. ``lesionlab replay`` re-executes such a
record.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .dataprep import CaseRecord, check_patch_size, sample_patch_pair, size_balanced_split
from .ensemble import (
    DEFAULT_LAMBDAS,
    DEFAULT_PP_THRESHOLDS,
    SWEEP_COLUMNS,
    VANILLA_PP_THRESHOLDS,
    EnsembleConfig,
    PostprocessConfig,
    SweepCase,
    ensemble,
    postprocess,
    sweep,
)
from .labeling import (
    DEFAULT_DISTANCE_BANDS,
    DEFAULT_SIZE_BANDS,
    binarize,
    category_to_binary,
    dbl_encode,
    foreground_probability,
    msl_encode,
)
from .metrics import Matching, category_stats, evaluate_set
from .nifti import NiftiError, read_volume, write_volume
from .reports import (
    EVAL_COLUMNS,
    FOLD_COLUMNS,
    evaluation_rows,
    read_csv,
    resolve,
    sha256,
    write_csv,
    write_run_record,
)
from .synth import SynthPackingError, SynthSpec, synth_case_specs, synth_generate
from .volume import CONNECTIVITIES, VoxelGrid, as_binary

WORKERS_ENV = "LESIONLAB_WORKERS"
NIFTI_SUFFIXES = (".nii.gz", ".nii")


class UsageError(Exception):
    """A precondition of the requested run does not hold."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _workers(args):
    return max(1, args.workers)


@contextmanager
def _executor(args):
    n = _workers(args)
    if n == 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            yield pool


def _read(path, inputs):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    inputs.append(path)
    return read_volume(path)


def _foreground(grid, renormalize=False):
    if grid.n_channels:
        return foreground_probability(grid.data, renormalize=renormalize)
    data = grid.data.astype(np.float64)
    if data.size and (data.min() < 0 or data.max() > 1):
        raise UsageError("probability map has values outside [0, 1]")
    return data


def _mask(grid, what):
    if grid.n_channels:
        raise UsageError(f"{what} must be a 3D mask, got {grid.n_channels} channels")
    try:
        return as_binary(grid.data, what)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _same_shape(a, b, pa, pb):
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {pa} {a.shape} vs {pb} {b.shape}")


def _out_grid(data, like):
    return VoxelGrid(data, spacing=like.spacing, affine=like.affine)


def _case_id(path):
    name = Path(path).name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _volume_files(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.name.endswith(NIFTI_SUFFIXES))
        if not files:
            raise UsageError(f"no NIfTI files in {path}")
        return files
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    return [path]


def _write(grid_or_array, path, like, outputs, dtype=None):
    data = grid_or_array
    write_volume(_out_grid(data, like), path, like=like, dtype=dtype)
    outputs.append(Path(path))


# ---------------------------------------------------------------- commands

def cmd_relabel(args, inputs, outputs):
    grid = _read(args.input, inputs)
    mask = _mask(grid, args.input)
    if args.strategy == "msl":
        bands = DEFAULT_SIZE_BANDS if args.bands is None else [int(b) for b in args.bands]
        cats = msl_encode(mask, bands, args.connectivity)
    else:
        bands = DEFAULT_DISTANCE_BANDS if args.bands is None else args.bands
        cats = dbl_encode(mask, bands, spacing=grid.spacing, use_spacing=args.use_spacing)
    _write(cats, args.output, grid, outputs, dtype=np.uint8)
    return args.output


def cmd_binarize(args, inputs, outputs):
    grid = _read(args.input, inputs)
    if grid.n_channels is None and grid.data.dtype.kind in "iu":
        mask = category_to_binary(grid.data)
    else:
        fg = _foreground(grid, args.renormalize)
        mask = binarize(fg, args.threshold)
        if args.fg_output:
            _write(fg.astype(np.float32), args.fg_output, grid, outputs)
    _write(mask.astype(np.uint8), args.output, grid, outputs)
    return args.output


def cmd_ensemble(args, inputs, outputs):
    gm = _read(args.msl, inputs)
    gd = _read(args.dbl, inputs)
    p_msl = _foreground(gm, args.renormalize)
    p_dbl = _foreground(gd, args.renormalize)
    _same_shape(p_msl, p_dbl, args.msl, args.dbl)
    cfg = EnsembleConfig(args.mixing_rate, args.cutoff, args.threshold, args.connectivity)
    fused, mask = ensemble(p_msl, p_dbl, cfg)
    if args.fused:
        _write(fused.astype(np.float32), args.fused, gd, outputs)
    _write(mask.astype(np.uint8), args.output, gd, outputs)
    return args.output


def cmd_postprocess(args, inputs, outputs):
    gmask = _read(args.mask, inputs)
    gprob = _read(args.prob, inputs)
    mask = _mask(gmask, args.mask)
    fg = _foreground(gprob, args.renormalize)
    _same_shape(mask, fg, args.mask, args.prob)
    threshold = args.threshold
    if args.preset:
        threshold = VANILLA_PP_THRESHOLDS[tuple(args.preset.split("/"))]
    cfg = PostprocessConfig(threshold, args.cutoff, args.connectivity)
    _write(postprocess(mask, fg, cfg).astype(np.uint8), args.output, gmask, outputs)
    return args.output


def _pair_files(pred, gt):
    preds, gts = _volume_files(pred), _volume_files(gt)
    if len(preds) == 1 and len(gts) == 1 and Path(pred).is_file():
        return [(_case_id(gts[0]), preds[0], gts[0])]
    by_id = {_case_id(p): p for p in preds}
    missing = [_case_id(g) for g in gts if _case_id(g) not in by_id]
    if missing:
        raise UsageError(f"no prediction for case(s): {', '.join(missing)}")
    return [(_case_id(g), by_id[_case_id(g)], g) for g in gts]


def cmd_evaluate(args, inputs, outputs):
    triples = []
    for case_id, pp, gp in _pair_files(args.pred, args.gt):
        pred = _mask(_read(pp, inputs), str(pp))
        gt = _mask(_read(gp, inputs), str(gp))
        _same_shape(pred, gt, pp, gp)
        triples.append((case_id, pred, gt))
    with _executor(args) as pool:
        report = evaluate_set(triples, args.connectivity, args.matching,
                              mini_only=args.mini_subset, executor=pool)
    write_csv(args.output, EVAL_COLUMNS, evaluation_rows(report))
    outputs.append(Path(args.output))
    return args.output


def cmd_stats(args, inputs, outputs):
    files = [f for p in args.masks for f in _volume_files(p)]
    grids = [_read(f, inputs) for f in files]
    masks = [_mask(g, str(f)) for g, f in zip(grids, files)]
    if args.strategy == "msl":
        bands = DEFAULT_SIZE_BANDS if args.bands is None else [int(b) for b in args.bands]
    else:
        bands = DEFAULT_DISTANCE_BANDS if args.bands is None else args.bands
    spacing = grids[0].spacing if args.use_spacing else None
    stats = category_stats(masks, args.strategy, bands, args.connectivity,
                           spacing=spacing, use_spacing=args.use_spacing)
    edges = (None, *stats.bands, None)
    rows = []
    for i, row in enumerate(stats.rows()):
        rows.append({
            "strategy": stats.strategy, "connectivity": stats.conn, "n_scans": stats.n_scans,
            "lower": edges[i], "upper": edges[i + 1], **row,
        })
    columns = ("strategy", "connectivity", "category", "lower", "upper", "lesions",
               "voxels", "mean_voxels_per_scan", "n_scans")
    write_csv(args.output, columns, rows)
    outputs.append(Path(args.output))
    return args.output


def cmd_split(args, inputs, outputs):
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise UsageError(f"input not found: {manifest}")
    inputs.append(manifest)
    rows = read_csv(manifest, required=("case_id", "image_path", "mask_path"))
    cases = []
    for row in rows:
        if row.get("total_lesion_volume"):
            volume = int(row["total_lesion_volume"])
        else:
            grid = _read(resolve(manifest, row["mask_path"]), inputs)
            volume = int(np.count_nonzero(_mask(grid, row["mask_path"])))
        cases.append(CaseRecord(row["case_id"], volume, row["image_path"], row["mask_path"]))
    folds = size_balanced_split(cases, args.k, args.seed)
    write_csv(args.output, FOLD_COLUMNS,
              ({"case_id": c.case_id, "fold": folds[c.case_id]} for c in cases))
    outputs.append(Path(args.output))
    return args.output


def cmd_sample(args, inputs, outputs):
    gi = _read(args.image, inputs)
    gm = _read(args.mask, inputs)
    mask = _mask(gm, args.mask)
    _same_shape(gi.data, mask, args.image, args.mask)
    size = check_patch_size(args.patch_size)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    rows = []
    for i in range(args.count):
        pair = sample_patch_pair(gi.data, mask, size, rng)
        for kind, patch in (("random", pair.random), ("lesion", pair.lesion)):
            stem = f"pair{i:03d}_{kind}"
            _write(patch.image, out / f"{stem}_image.nii.gz", gi, outputs)
            _write(patch.mask.astype(np.uint8), out / f"{stem}_mask.nii.gz", gm, outputs)
            center = patch.center_voxel or (None, None, None)
            rows.append({
                "pair": i, "kind": kind,
                "corner_x": patch.corner[0], "corner_y": patch.corner[1], "corner_z": patch.corner[2],
                "center_x": center[0], "center_y": center[1], "center_z": center[2],
            })
    write_csv(out / "patches.csv", tuple(rows[0]), rows)
    outputs.append(out / "patches.csv")
    return out


def cmd_sweep(args, inputs, outputs):
    manifest = Path(args.cases)
    if not manifest.is_file():
        raise UsageError(f"input not found: {manifest}")
    inputs.append(manifest)
    cases = []
    for row in read_csv(manifest, required=("case_id", "msl", "dbl", "gt")):
        gm = _read(resolve(manifest, row["msl"]), inputs)
        gd = _read(resolve(manifest, row["dbl"]), inputs)
        gg = _read(resolve(manifest, row["gt"]), inputs)
        p_msl, p_dbl = _foreground(gm, args.renormalize), _foreground(gd, args.renormalize)
        gt = _mask(gg, row["gt"])
        _same_shape(p_msl, p_dbl, row["msl"], row["dbl"])
        _same_shape(p_msl, gt, row["msl"], row["gt"])
        cases.append(SweepCase(row["case_id"], p_msl, p_dbl, gt))
    if not cases:
        raise UsageError(f"{manifest}: no cases")
    with _executor(args) as pool:
        result = sweep(cases, args.lambdas, args.thresholds, args.cutoff, args.threshold,
                       args.connectivity, args.matching, executor=pool)
    write_csv(args.output, SWEEP_COLUMNS, result.rows)
    outputs.append(Path(args.output))
    print(f"best lambda={result.best[0]!r} p_t={result.best[1]!r}")
    return args.output


def cmd_synth(args, inputs, outputs):
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.cases == 1:
        specs = [SynthSpec(shape=tuple(args.shape), lesion_counts=tuple(args.counts),
                           spurious=args.spurious, noise=args.noise,
                           corruption=args.corruption, seed=args.seed)]
    else:
        specs = synth_case_specs(args.cases, tuple(args.shape), args.seed, args.spurious,
                                 args.noise, args.corruption)
    rows = []
    for i, spec in enumerate(specs):
        case_id = f"case{i:03d}"
        gt, msl_probs, dbl_probs = synth_generate(spec)
        rng = np.random.default_rng(spec.seed)
        # crude T1-like contrast: dark lesions on brighter tissue
        image = (0.8 - 0.5 * gt + rng.normal(0.0, 0.05, gt.shape)).astype(np.float32)
        d = out / case_id
        d.mkdir(exist_ok=True)
        ref = VoxelGrid(gt)
        files = {"gt": d / "gt.nii.gz", "msl": d / "msl_prob.nii.gz",
                 "dbl": d / "dbl_prob.nii.gz", "image": d / "image.nii.gz"}
        _write(gt, files["gt"], ref, outputs, dtype=np.uint8)
        _write(msl_probs.astype(np.float32), files["msl"], ref, outputs)
        _write(dbl_probs.astype(np.float32), files["dbl"], ref, outputs)
        _write(image, files["image"], ref, outputs)
        rows.append({"case_id": case_id, **{k: str(v.relative_to(out)) for k, v in files.items()},
                     "image_path": str(files["image"].relative_to(out)),
                     "mask_path": str(files["gt"].relative_to(out))})
    write_csv(out / "cases.csv", ("case_id", "msl", "dbl", "gt"), rows)
    write_csv(out / "manifest.csv", ("case_id", "image_path", "mask_path"), rows)
    outputs.extend([out / "cases.csv", out / "manifest.csv"])
    return out


def cmd_replay(args, inputs, outputs):
    record = json.loads(Path(args.record).read_text())
    if record.get("tool") != "lesionlab" or "argv" not in record:
        raise UsageError(f"{args.record}: not a lesionlab run record")
    cwd = os.getcwd()
    os.chdir(record["cwd"])
    try:
        code = main(record["argv"])
        if code != 0:
            return code
        if args.verify:
            changed = [p for p, digest in record["outputs"].items() if sha256(p) != digest]
            if changed:
                raise UsageError(f"replay differs for: {', '.join(changed)}")
    finally:
        os.chdir(cwd)
    return None


# ---------------------------------------------------------------- parser

def _common(p, connectivity=True, workers=False):
    if connectivity:
        p.add_argument("--connectivity", type=int, choices=CONNECTIVITIES, default=26,
                       help="neighbourhood for lesion components (default: %(default)s)")
    if workers:
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get(WORKERS_ENV, "1")),
                       help=f"worker threads (default: ${WORKERS_ENV} or 1)")


def build_parser():
    parser = _Parser(prog="lesionlab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"lesionlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("relabel", help="multi-size or distance-based relabeling of a mask")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--strategy", choices=("msl", "dbl"), required=True)
    p.add_argument("--bands", type=float, nargs="*",
                   help="band thresholds (msl default 100 1000 10000, dbl default 2)")
    p.add_argument("--use-spacing", action="store_true",
                   help="measure distances in mm using the file's voxel spacing")
    _common(p)
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("binarize", help="class probabilities or category labels to a binary mask")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--fg-output", help="also write the foreground probability map")
    p.add_argument("--renormalize", action="store_true")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("ensemble", help="size-gated fusion of MSL and DBL predictions")
    p.add_argument("--msl", required=True, help="MSL class probabilities or foreground map")
    p.add_argument("--dbl", required=True, help="DBL class probabilities or foreground map")
    p.add_argument("-o", "--output", required=True, help="binary mask output")
    p.add_argument("--fused", help="also write the fused foreground probability")
    p.add_argument("--lambda", dest="mixing_rate", type=float, default=0.8)
    p.add_argument("--cutoff", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--renormalize", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("postprocess", help="drop small low-confidence lesions")
    p.add_argument("--mask", required=True)
    p.add_argument("--prob", required=True, help="foreground probability or class probabilities")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--preset", choices=sorted("/".join(k) for k in VANILLA_PP_THRESHOLDS),
                   help="use the tuned threshold for a single-strategy model")
    p.add_argument("--cutoff", type=int, default=1000)
    p.add_argument("--renormalize", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="Dice and lesion-wise detection scores")
    p.add_argument("--pred", required=True, help="prediction file or directory")
    p.add_argument("--gt", required=True, help="reference file or directory")
    p.add_argument("-o", "--output", required=True, help="CSV report")
    p.add_argument("--mini-subset", action="store_true",
                   help="only cases whose reference lesions are all under 1000 voxels")
    p.add_argument("--matching", choices=[m.value for m in Matching],
                   default=Matching.ANY_OVERLAP.value)
    _common(p, workers=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="lesion / voxel counts per category")
    p.add_argument("--masks", nargs="+", required=True, help="mask files or directories")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--strategy", choices=("msl", "dbl"), default="msl")
    p.add_argument("--bands", type=float, nargs="*")
    p.add_argument("--use-spacing", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="size-balanced k-fold assignment")
    p.add_argument("--manifest", required=True, help="CSV with case_id,image_path,mask_path")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("sample", help="random and lesion-centred training patches")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--patch-size", type=int, nargs=3, default=[128, 128, 128])
    p.add_argument("--count", type=int, default=1, help="number of patch pairs")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep", help="grid over mixing rate and postprocessing threshold")
    p.add_argument("--cases", required=True, help="CSV with case_id,msl,dbl,gt")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lambdas", type=float, nargs="+", default=list(DEFAULT_LAMBDAS))
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_PP_THRESHOLDS))
    p.add_argument("--cutoff", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--matching", choices=[m.value for m in Matching],
                   default=Matching.ANY_OVERLAP.value)
    p.add_argument("--renormalize", action="store_true")
    _common(p, workers=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="synthetic masks and probability volumes")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--cases", type=int, default=1)
    p.add_argument("--shape", type=int, nargs=3, default=[48, 48, 48])
    p.add_argument("--counts", type=int, nargs=4, default=[2, 1, 0, 0],
                   metavar=("TINY", "SMALL", "MEDIUM", "LARGE"),
                   help="lesions per size band (single case only)")
    p.add_argument("--spurious", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--corruption", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", help="re-run a recorded invocation")
    p.add_argument("record", help="a .run.json file")
    p.add_argument("--verify", action="store_true", help="fail unless outputs are byte-identical")
    p.set_defaults(func=cmd_replay)
    return parser


def _config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print(f"lesionlab {args.command}: error: --workers must be positive", file=sys.stderr)
        return 2
    inputs, outputs = [], []
    try:
        primary = args.func(args, inputs, outputs)
    except (UsageError, ValueError, NiftiError, SynthPackingError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"lesionlab {args.command}: error: {msg}", file=sys.stderr)
        return 1
    if isinstance(primary, int):
        return primary
    if args.command != "replay":
        write_run_record(primary, {
            "tool": "lesionlab",
            "version": __version__,
            "command": args.command,
            "argv": argv,
            "cwd": os.getcwd(),
            "config": _config(args),
            "inputs": {str(p): sha256(p) for p in dict.fromkeys(inputs)},
            "outputs": {str(p): sha256(p) for p in outputs},
        })
    return 0


if __name__ == "__main__":
    sys.exit(main())
