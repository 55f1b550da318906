"""Command-line surface: one subcommand per pipeline stage plus the study.

Grammar: parcelbench <command> [--config FILE] [--seed N] [--out PATH]
[inputs...].  Flags override config-file keys.  Exit codes: 0 success,
1 usage error, 2 data/validation error, 3 numerical failure.  Diagnostics
go to stderr; machine-readable results go to files (the `metrics` one-liner
prints to stdout).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, __version__
from .cluster import KMeansConfig, segment_dti
from .fod import (
    ShBasis,
    fit_field,
    isotropic_geometry,
    load_field,
    load_gradient_table,
    save_field,
    save_gradient_table,
    upsample_field,
)
from .fusion import AtlasPrior, FusionConfig, fuse
from .icp import (
    IcaConvergenceError,
    PreprocConfig,
    TimeSeriesStack,
    dual_regression,
    group_ica,
    hard_parcellate,
    preprocess,
    stack_to_volume,
    unfold,
    volume_to_stack,
)
from .metrics import centroid_scatter, centroids, dice, probability_atlas, regroup, vsi
from .phantom import PhantomSpec, make_subject
from .pipeline import run_study, study_config_from_dict
from .render import render_labels, render_weighted
from .volume import Mask, NiftiError, read_nifti, write_nifti

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise _UsageError(message)


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _read_mask(path) -> Mask:
    return Mask(grid=read_nifti(path))


def _nuisance_matrix(path) -> np.ndarray:
    """CSV with T rows and R columns; a non-numeric first row is a header."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"nuisance file {path} is empty")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    return np.array([[float(c) for c in r] for r in rows], dtype=np.float64)


def build_parser() -> _Parser:
    p = _Parser(prog="parcelbench", description=__doc__)
    p.add_argument("--version", action="version",
                   version=f"parcelbench {__version__} (format {FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("phantom", help="generate a synthetic subject")
    q.add_argument("--config", default=None, help="JSON with PhantomSpec fields")
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--out", required=True, help="output directory")

    q = sub.add_parser("fuse", help="multi-atlas label fusion")
    q.add_argument("target", help="target intensity NIfTI")
    q.add_argument("mask", help="mask NIfTI")
    q.add_argument("--config", required=True,
                   help='JSON: {"priors": [[img, labels], ...], "patch_radius": 1, ...}')
    q.add_argument("--out", required=True, help="output segmentation NIfTI")

    q = sub.add_parser("fod-fit", help="fit the SH coefficient field")
    q.add_argument("dwi", help="4D DWI NIfTI")
    q.add_argument("grads", help="gradient table (gx gy gz b per line)")
    q.add_argument("mask", help="mask NIfTI")
    q.add_argument("--out", required=True, help="output 4D coefficient NIfTI")
    q.add_argument("--mask-out", default=None, help="output mask NIfTI (default <out>_mask.nii)")
    q.add_argument("--order", type=int, default=6)
    q.add_argument("--lambda-lb", type=float, default=0.006)
    q.add_argument("--no-frt", action="store_true", help="skip the Funk-Radon scaling")
    q.add_argument("--upsample-mm", type=float, default=0.0,
                   help="resample coefficients to this isotropic spacing (0 = off)")

    q = sub.add_parser("dti-seg", help="cluster an SH field into parcels")
    q.add_argument("coeffs", help="4D coefficient NIfTI")
    q.add_argument("mask", help="field mask NIfTI")
    q.add_argument("--out", required=True)
    q.add_argument("--k", type=int, default=7)
    q.add_argument("--restarts", type=int, default=5000)
    q.add_argument("--alpha", type=float, default=100.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--centroids-out", default=None, help="dump final centroids to this CSV")

    q = sub.add_parser("icp-preproc", help="drop/smooth/regress a BOLD series")
    q.add_argument("bold", help="4D BOLD NIfTI")
    q.add_argument("mask", help="mask NIfTI")
    q.add_argument("--nuisance", default=None, help="CSV of nuisance regressors (T x R)")
    q.add_argument("--out", required=True)
    q.add_argument("--fwhm", type=float, default=3.5)
    q.add_argument("--highpass", type=float, default=0.01)
    q.add_argument("--drop", type=int, default=4)
    q.add_argument("--tr", type=float, default=0.7)

    q = sub.add_parser("icp-unfold", help="instantaneous-connectivity unfolding")
    q.add_argument("series", help="4D NIfTI of cleaned series")
    q.add_argument("mask")
    q.add_argument("--out", required=True)
    q.add_argument("--tr", type=float, default=0.7)

    q = sub.add_parser("icp-ica", help="group ICA over unfolded subjects")
    q.add_argument("mask")
    q.add_argument("subjects", nargs="+", help="4D unfolded NIfTIs, one per subject")
    q.add_argument("--components", type=int, default=30)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--strict", action="store_true", help="non-convergence is an error")
    q.add_argument("--out", required=True, help="output 4D map NIfTI (nt = components)")

    q = sub.add_parser("icp-dualreg", help="dual regression of group maps into a subject")
    q.add_argument("maps", help="4D group map NIfTI")
    q.add_argument("mask")
    q.add_argument("subject", help="4D unfolded subject NIfTI")
    q.add_argument("--out", required=True, help="output prefix (.maps.nii and .tc.csv)")
    q.add_argument("--tr", type=float, default=0.7)

    q = sub.add_parser("icp-parcel", help="argmax parcellation of subject maps")
    q.add_argument("maps", help="4D subject map NIfTI")
    q.add_argument("mask")
    q.add_argument("--out", required=True)

    q = sub.add_parser("regroup", help="map one parcellation set onto another's labels")
    q.add_argument("--source", nargs="+", required=True)
    q.add_argument("--reference", nargs="+", required=True)
    q.add_argument("--out", required=True, help="output directory")

    q = sub.add_parser("metrics", help="Dice/VSI between two segmentations")
    q.add_argument("a")
    q.add_argument("b")
    q.add_argument("--label", type=int, default=None, help="one label id (default: all)")

    q = sub.add_parser("probmap", help="probability atlas across segmentations")
    q.add_argument("segs", nargs="+")
    q.add_argument("--out", required=True, help="output directory")

    q = sub.add_parser("centroids", help="label centroids (and scatter across inputs)")
    q.add_argument("segs", nargs="+")
    q.add_argument("--out", required=True, help="output CSV")

    q = sub.add_parser("study", help="full phantom-cohort comparison study")
    q.add_argument("--config", required=True)
    q.add_argument("--seed", type=int, default=None, help="override master seed")
    q.add_argument("--out", default=None, help="override output directory")

    q = sub.add_parser("render", help="tri-planar PNG of a segmentation")
    q.add_argument("labels", nargs="+", help="label NIfTI (several = weighted blend)")
    q.add_argument("--out", required=True)
    q.add_argument("--scale", type=int, default=4)
    return p


def _cmd_phantom(args):
    doc = _load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = PhantomSpec(**doc)
    subject = make_subject(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(subject.truth, out / "truth.nii")
    write_nifti(subject.mask, out / "mask.nii")
    write_nifti(subject.structural, out / "structural.nii")
    write_nifti(subject.dwi, out / "dwi.nii")
    save_gradient_table(subject.gradients, out / "dwi.grad")
    write_nifti(stack_to_volume(subject.bold), out / "bold.nii")
    print(f"phantom written to {out}", file=sys.stderr)


def _cmd_fuse(args):
    doc = _load_config(args.config)
    if "priors" not in doc or not doc["priors"]:
        raise ValueError("fuse config must list priors as [[image, labels], ...]")
    priors = [
        AtlasPrior(intensity=read_nifti(img), labels=read_nifti(lab, as_labels=True))
        for img, lab in doc["priors"]
    ]
    cfg = FusionConfig(
        patch_radius=int(doc.get("patch_radius", 1)),
        weight_exponent=float(doc.get("weight_exponent", 2.0)),
        epsilon=float(doc.get("epsilon", 1e-6)),
    )
    seg = fuse(read_nifti(args.target), priors, _read_mask(args.mask), cfg)
    write_nifti(seg, args.out)


def _cmd_fod_fit(args):
    basis = ShBasis(order=args.order)
    field = fit_field(
        read_nifti(args.dwi), load_gradient_table(args.grads), _read_mask(args.mask),
        basis, args.lambda_lb, use_frt=not args.no_frt,
    )
    if args.upsample_mm > 0:
        field = upsample_field(field, isotropic_geometry(field, args.upsample_mm))
    mask_out = args.mask_out or str(Path(args.out).with_suffix("")) + "_mask.nii"
    save_field(field, args.out, mask_out)
    if len(field.skipped):
        print(f"skipped {len(field.skipped)} voxels with nonpositive S0", file=sys.stderr)


def _cmd_dti_seg(args):
    field = load_field(args.coeffs, args.mask)
    cfg = KMeansConfig(k=args.k, n_restarts=args.restarts, seed=args.seed)
    write_nifti(segment_dti(field, cfg, args.alpha, centroids_out=args.centroids_out), args.out)


def _cmd_icp_preproc(args):
    stack = volume_to_stack(read_nifti(args.bold), _read_mask(args.mask), args.tr)
    nuisance = _nuisance_matrix(args.nuisance) if args.nuisance else None
    cfg = PreprocConfig(fwhm_mm=args.fwhm, highpass_hz=args.highpass, n_drop_initial=args.drop)
    write_nifti(stack_to_volume(preprocess(stack, nuisance, cfg)), args.out)


def _cmd_icp_unfold(args):
    stack = volume_to_stack(read_nifti(args.series), _read_mask(args.mask), args.tr)
    unfolded = unfold(stack)
    if unfolded.zero_variance is not None and len(unfolded.zero_variance):
        print(f"{len(unfolded.zero_variance)} zero-variance voxels zeroed", file=sys.stderr)
    write_nifti(stack_to_volume(unfolded), args.out)


def _cmd_icp_ica(args):
    mask = _read_mask(args.mask)
    stacks = [volume_to_stack(read_nifti(p), mask) for p in args.subjects]
    result = group_ica(stacks, args.components, seed=args.seed, strict=args.strict)
    if not result.converged:
        print("warning: ICA did not converge; maps are the best iterate", file=sys.stderr)
    maps_stack = TimeSeriesStack(mask=mask, series=result.maps.T, tr_seconds=1.0)
    write_nifti(stack_to_volume(maps_stack), args.out)


def _cmd_icp_dualreg(args):
    mask = _read_mask(args.mask)
    maps_vol = read_nifti(args.maps)
    maps = volume_to_stack(maps_vol, mask, 1.0).series.T  # (K, voxels)
    subject = volume_to_stack(read_nifti(args.subject), mask, args.tr)
    tc, smaps = dual_regression(subject, maps)
    out = Path(args.out)
    np.savetxt(str(out) + ".tc.csv", tc, delimiter=",", fmt="%.8g")
    write_nifti(stack_to_volume(TimeSeriesStack(mask=mask, series=smaps.T, tr_seconds=1.0)),
                str(out) + ".maps.nii")


def _cmd_icp_parcel(args):
    mask = _read_mask(args.mask)
    maps = volume_to_stack(read_nifti(args.maps), mask, 1.0).series.T
    write_nifti(hard_parcellate(maps, mask), args.out)


def _cmd_regroup(args):
    source = [read_nifti(p, as_labels=True) for p in args.source]
    reference = [read_nifti(p, as_labels=True) for p in args.reference]
    mapping, regrouped = regroup(source, reference)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mapping.json", "w") as fh:
        json.dump({str(k): v for k, v in mapping.items()}, fh, indent=2, sort_keys=True)
    for path, seg in zip(args.source, regrouped):
        write_nifti(seg, out / f"regrouped_{Path(path).name}")


def _fmt_score(x):
    return "missing" if x is None else f"{x:.6f}"


def _cmd_metrics(args):
    a = read_nifti(args.a, as_labels=True)
    b = read_nifti(args.b, as_labels=True)
    if args.label is not None:
        print(f"dice={_fmt_score(dice(a, b, args.label))},vsi={_fmt_score(vsi(a, b, args.label))}")
        return
    for l in sorted(set(a.labels) | set(b.labels)):
        print(f"label={l},dice={_fmt_score(dice(a, b, l))},vsi={_fmt_score(vsi(a, b, l))}")


def _cmd_probmap(args):
    segs = [read_nifti(p, as_labels=True) for p in args.segs]
    atlas = probability_atlas(segs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(atlas.maxprob, out / "maxprob.nii")
    for l in sorted(atlas.counts):
        write_nifti(atlas.frequency(l), out / f"freq_{l:02d}.nii")


def _cmd_centroids(args):
    segs = [read_nifti(p, as_labels=True) for p in args.segs]
    with open(args.out, "w") as fh:
        if len(segs) == 1:
            fh.write("label,x,y,z\n")
            for l, c in sorted(centroids(segs[0]).items()):
                fh.write(f"{l},{c[0]:.6f},{c[1]:.6f},{c[2]:.6f}\n")
        else:
            fh.write("label,mean_x,mean_y,mean_z,rms_mm\n")
            for l, (mean, rms) in sorted(centroid_scatter(segs).items()):
                fh.write(f"{l},{mean[0]:.6f},{mean[1]:.6f},{mean[2]:.6f},{rms:.6f}\n")


def _cmd_study(args):
    doc = _load_config(args.config)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = args.out
    result = run_study(study_config_from_dict(doc))
    for key, diag in result.failures.items():
        print(f"subject {key} failed: {diag}", file=sys.stderr)
    print(f"study written to {result.output_dir} (manifest {result.manifest_hash})", file=sys.stderr)


def _cmd_render(args):
    if len(args.labels) == 1:
        render_labels(read_nifti(args.labels[0], as_labels=True), args.out, scale=args.scale)
    else:
        segs = [read_nifti(p, as_labels=True) for p in args.labels]
        render_weighted(probability_atlas(segs), args.out, scale=args.scale)


_HANDLERS = {
    "phantom": _cmd_phantom,
    "fuse": _cmd_fuse,
    "fod-fit": _cmd_fod_fit,
    "dti-seg": _cmd_dti_seg,
    "icp-preproc": _cmd_icp_preproc,
    "icp-unfold": _cmd_icp_unfold,
    "icp-ica": _cmd_icp_ica,
    "icp-dualreg": _cmd_icp_dualreg,
    "icp-parcel": _cmd_icp_parcel,
    "regroup": _cmd_regroup,
    "metrics": _cmd_metrics,
    "probmap": _cmd_probmap,
    "centroids": _cmd_centroids,
    "study": _cmd_study,
    "render": _cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        _HANDLERS[args.command](args)
    except (IcaConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NiftiError, ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
