"""Cross-method study orchestration on a synthetic cohort.

For each subject: fusion of jittered priors, SH-field clustering of the
diffusion signal, and the unfold/ICA/dual-regression functional path; the
functional (and diffusion) cluster labels are regrouped onto the fusion
maximum-probability atlas so per-nucleus tables can be computed across
methods.  Every run writes a provenance manifest whose hash is reproducible
for a fixed master seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import KMeansConfig, segment_dti
from .fod import ShBasis, fit_field, isotropic_geometry, upsample_field, save_gradient_table
from .fusion import FusionConfig, fuse
from .icp import PreprocConfig, dual_regression, group_ica, hard_parcellate, preprocess, unfold
from .metrics import emit_table, centroid_scatter, probability_atlas, regroup, score_pair
from .phantom import PhantomSpec, make_bold, make_dwi, make_priors, make_truth
from .volume import THALAMIC_NUCLEI, write_nifti

METHODS = ("fusion", "dti", "fmri")


@dataclass(frozen=True)
class FusionRunConfig:
    n_priors: int = 20
    jitter_mm: float = 1.0
    patch_radius: int = 1
    weight_exponent: float = 2.0
    epsilon: float = 1e-6

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.patch_radius, self.weight_exponent, self.epsilon)


@dataclass(frozen=True)
class DtiRunConfig:
    k: int = 7
    n_restarts: int = 5000
    max_iter: int = 300
    tol: float = 1e-6
    alpha: float = 100.0
    lambda_lb: float = 0.006
    sh_order: int = 6
    use_frt: bool = True
    upsample_mm: float = 1.0  # 0 disables upsampling


@dataclass(frozen=True)
class FmriRunConfig:
    n_components: int = 30
    fwhm_mm: float = 3.5
    highpass_hz: float = 0.01
    n_drop_initial: int = 4

    def preproc_config(self) -> PreprocConfig:
        return PreprocConfig(self.fwhm_mm, self.highpass_hz, self.n_drop_initial)


@dataclass(frozen=True)
class StudyConfig:
    n_subjects: int = 18
    master_seed: int = 0
    output_dir: str = "study_out"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    fusion: FusionRunConfig = field(default_factory=FusionRunConfig)
    dti: DtiRunConfig = field(default_factory=DtiRunConfig)
    fmri: FmriRunConfig = field(default_factory=FmriRunConfig)
    save_inputs: bool = False

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")


def study_config_from_json(path) -> StudyConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return study_config_from_dict(doc)


def study_config_from_dict(doc: dict) -> StudyConfig:
    kwargs = {}
    for key in ("n_subjects", "master_seed", "output_dir", "save_inputs"):
        if key in doc:
            kwargs[key] = doc[key]
    for key, cls in (("phantom", PhantomSpec), ("fusion", FusionRunConfig),
                     ("dti", DtiRunConfig), ("fmri", FmriRunConfig)):
        if key in doc:
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(doc[key]) - names
            if unknown:
                raise ValueError(f"unknown keys in '{key}' config: {sorted(unknown)}")
            kwargs[key] = cls(**doc[key])
    return StudyConfig(**kwargs)


def study_config_to_dict(cfg: StudyConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    for key in ("grid_dims", "spacing"):
        doc["phantom"][key] = list(doc["phantom"][key])
    return doc


@dataclass
class StudyResult:
    output_dir: Path
    manifest: dict
    manifest_hash: str
    segmentations: dict  # method -> {subject index -> LabelVolume}
    atlases: dict  # method -> ProbabilityAtlas
    tables: dict  # name -> MetricsTable
    failures: dict  # subject index -> diagnostic string


def _subject_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1)[0])


def _canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def run_study(cfg: StudyConfig) -> StudyResult:
    """Run the full three-method comparison on a phantom cohort.

    Per-subject stage failures are recorded as diagnostics and the study
    continues; group statistics then simply see fewer subjects.
    """
    out = Path(cfg.output_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "atlases").mkdir(parents=True, exist_ok=True)

    subjects = {}
    failures = {}
    segs = {m: {} for m in METHODS}
    unfolded = {}

    for i in range(cfg.n_subjects):
        spec = dataclasses.replace(cfg.phantom, seed=_subject_seed(cfg.master_seed, i))
        sdir = out / f"subject_{i:03d}"
        try:
            subject = make_truth(spec)
            subjects[i] = subject
            (sdir / "fusion").mkdir(parents=True, exist_ok=True)
            (sdir / "dti").mkdir(parents=True, exist_ok=True)
            (sdir / "fmri").mkdir(parents=True, exist_ok=True)
            truth = dataclasses.replace(
                subject.truth, labels={k: THALAMIC_NUCLEI.get(k, f"region_{k}") for k in subject.truth.labels}
            )
            subject.truth = truth
            write_nifti(truth, sdir / "truth.nii")
            write_nifti(subject.mask, sdir / "mask.nii")
            if cfg.save_inputs:
                write_nifti(subject.structural, sdir / "structural.nii")

            # structural path
            priors = make_priors(subject, spec, cfg.fusion.n_priors, cfg.fusion.jitter_mm)
            seg_fusion = fuse(subject.structural, priors, subject.mask, cfg.fusion.fusion_config())
            seg_fusion = dataclasses.replace(
                seg_fusion, labels={k: THALAMIC_NUCLEI.get(k, f"region_{k}") for k in seg_fusion.labels}
            )
            segs["fusion"][i] = seg_fusion
            write_nifti(seg_fusion, sdir / "fusion" / "seg.nii")

            # diffusion path
            dwi, grads = make_dwi(subject, spec)
            if cfg.save_inputs:
                write_nifti(dwi, sdir / "dwi.nii")
                save_gradient_table(grads, sdir / "dwi.grad")
            basis = ShBasis(order=cfg.dti.sh_order)
            fld = fit_field(dwi, grads, subject.mask, basis, cfg.dti.lambda_lb, cfg.dti.use_frt)
            if cfg.dti.upsample_mm > 0 and any(
                abs(s - cfg.dti.upsample_mm) > 1e-9 for s in subject.mask.grid.spacing
            ):
                fld = upsample_field(fld, isotropic_geometry(fld, cfg.dti.upsample_mm))
            kmeans_cfg = KMeansConfig(
                k=cfg.dti.k, n_restarts=cfg.dti.n_restarts, max_iter=cfg.dti.max_iter,
                tol=cfg.dti.tol, seed=_subject_seed(cfg.master_seed, 10_000 + i),
            )
            seg_dti = segment_dti(fld, kmeans_cfg, cfg.dti.alpha)
            segs["dti"][i] = seg_dti
            write_nifti(seg_dti, sdir / "dti" / "seg.nii")

            # functional path, per-subject part
            bold = make_bold(subject, spec)
            clean = preprocess(bold, None, cfg.fmri.preproc_config())
            unfolded[i] = unfold(clean)
        except Exception as exc:  # degrade gracefully, keep the study going
            failures[i] = f"{type(exc).__name__}: {exc}"
            for m in METHODS:
                segs[m].pop(i, None)
            unfolded.pop(i, None)

    atlases = {}
    tables = {}
    if segs["fusion"]:
        atlases["fusion"] = probability_atlas(list(segs["fusion"].values()))

    # functional path, group part
    ica_converged = None
    if unfolded and segs["fusion"]:
        ids = sorted(unfolded)
        try:
            seed = _subject_seed(cfg.master_seed, 20_000)
            gica = group_ica([unfolded[i] for i in ids], cfg.fmri.n_components, seed=seed)
            ica_converged = gica.converged
            raw_fmri = {}
            for i in ids:
                _, maps = dual_regression(unfolded[i], gica)
                raw_fmri[i] = hard_parcellate(maps, unfolded[i].mask)
            _, regrouped = regroup(
                [raw_fmri[i] for i in ids], list(segs["fusion"].values())
            )
            for i, seg in zip(ids, regrouped):
                segs["fmri"][i] = seg
                write_nifti(seg, out / f"subject_{i:03d}" / "fmri" / "seg.nii")
                write_nifti(raw_fmri[i], out / f"subject_{i:03d}" / "fmri" / "seg_components.nii")
        except Exception as exc:
            failures["fmri_group"] = f"{type(exc).__name__}: {exc}"

    # diffusion labels onto the fusion dictionary for per-nucleus comparison
    if segs["dti"] and segs["fusion"]:
        ids = sorted(segs["dti"])
        _, regrouped = regroup([segs["dti"][i] for i in ids], list(segs["fusion"].values()))
        for i, seg in zip(ids, regrouped):
            segs["dti"][i] = seg
            write_nifti(seg, out / f"subject_{i:03d}" / "dti" / "seg_regrouped.nii")

    for method in ("dti", "fmri"):
        if segs[method]:
            atlases[method] = probability_atlas(list(segs[method].values()))
    for method, atlas in atlases.items():
        write_nifti(atlas.maxprob, out / "atlases" / f"{method}_maxprob.nii")
        for l in sorted(atlas.counts):
            write_nifti(atlas.frequency(l), out / "atlases" / f"{method}_freq_{l:02d}.nii")

    label_ids = list(range(1, cfg.phantom.n_regions + 1))
    label_names = {k: THALAMIC_NUCLEI.get(k, f"region_{k}") for k in label_ids}
    ref_volumes = None
    if segs["fusion"]:
        ref_volumes = {
            l: float(np.mean([(s.data == l).sum() for s in segs["fusion"].values()]))
            for l in label_ids
        }

    pairs = [("dti", "fusion"), ("fmri", "fusion"), ("dti", "fmri")]
    pairs += [("truth", m) for m in METHODS]
    for a_name, b_name in pairs:
        rows = []
        for i in sorted(subjects):
            seg_a = subjects[i].truth if a_name == "truth" else segs[a_name].get(i)
            seg_b = subjects[i].truth if b_name == "truth" else segs[b_name].get(i)
            if seg_a is None or seg_b is None:
                continue
            rows.append(("L", score_pair(seg_a, seg_b, labels=label_ids)))
        if rows:
            name = f"{a_name}_vs_{b_name}"
            tables[name] = emit_table(
                rows, label_names=label_names, reference_volumes=ref_volumes,
                path=out / "tables" / f"{name}.csv",
            )

    scatter = {}
    for method, seg_map in segs.items():
        if len(seg_map) >= 2:
            scatter[method] = centroid_scatter(list(seg_map.values()))
            with open(out / "tables" / f"{method}_centroid_scatter.csv", "w") as fh:
                fh.write("label,mean_x,mean_y,mean_z,rms_mm\n")
                for l, (mean, rms) in sorted(scatter[method].items()):
                    fh.write(f"{l},{mean[0]:.6f},{mean[1]:.6f},{mean[2]:.6f},{rms:.6f}\n")

    manifest_config = study_config_to_dict(cfg)
    manifest_config.pop("output_dir")  # location is not content-bearing
    manifest = {
        "toolkit_version": __version__,
        "config": manifest_config,
        "subject_seeds": {str(i): _subject_seed(cfg.master_seed, i) for i in range(cfg.n_subjects)},
        "failures": {str(k): v for k, v in failures.items()},
        "ica_converged": ica_converged,
        "outputs": {},
    }
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            manifest["outputs"][str(p.relative_to(out))] = _sha256(p)
    blob = _canonical_json(manifest)
    (out / "manifest.json").write_bytes(blob)
    manifest_hash = hashlib.sha256(blob).hexdigest()

    return StudyResult(
        output_dir=out,
        manifest=manifest,
        manifest_hash=manifest_hash,
        segmentations=segs,
        atlases=atlases,
        tables=tables,
        failures=failures,
    )
