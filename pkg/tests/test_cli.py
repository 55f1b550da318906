import hashlib
import json

import numpy as np
import pytest

from parcelbench.cli import main
from parcelbench.phantom import PhantomSpec, make_subject, make_truth, make_priors
from parcelbench.volume import read_nifti, write_nifti

from conftest import make_label_volume


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    code = main([
        "phantom", "--out", str(out), "--seed", "3",
        "--config", str(_phantom_config(out)),
    ])
    assert code == 0
    return out


def _phantom_config(out):
    cfg = out / "spec.json"
    cfg.write_text(json.dumps({
        "grid_dims": [16, 16, 16], "n_regions": 3, "n_timepoints": 100,
        "n_directions": 32, "noise_sigma": 0.05,
    }))
    return cfg


def test_phantom_outputs(phantom_dir):
    for name in ("truth.nii", "mask.nii", "structural.nii", "dwi.nii", "dwi.grad", "bold.nii"):
        assert (phantom_dir / name).exists()


def test_fod_fit_deterministic(phantom_dir, tmp_path):
    args = [
        "fod-fit", str(phantom_dir / "dwi.nii"), str(phantom_dir / "dwi.grad"),
        str(phantom_dir / "mask.nii"), "--out", str(tmp_path / "sh.nii"),
    ]
    inputs_before = [sha(phantom_dir / n) for n in ("dwi.nii", "dwi.grad", "mask.nii")]
    assert main(args) == 0
    first = sha(tmp_path / "sh.nii")
    assert main(args) == 0
    assert sha(tmp_path / "sh.nii") == first
    assert (tmp_path / "sh_mask.nii").exists()
    # inputs untouched
    assert [sha(phantom_dir / n) for n in ("dwi.nii", "dwi.grad", "mask.nii")] == inputs_before


def test_dti_seg_runs(phantom_dir, tmp_path):
    assert main([
        "fod-fit", str(phantom_dir / "dwi.nii"), str(phantom_dir / "dwi.grad"),
        str(phantom_dir / "mask.nii"), "--out", str(tmp_path / "sh.nii"),
    ]) == 0
    assert main([
        "dti-seg", str(tmp_path / "sh.nii"), str(tmp_path / "sh_mask.nii"),
        "--out", str(tmp_path / "seg.nii"), "--k", "3", "--restarts", "3", "--seed", "1",
    ]) == 0
    seg = read_nifti(tmp_path / "seg.nii", as_labels=True)
    assert seg.ids_present() == [1, 2, 3]


def test_icp_chain(phantom_dir, tmp_path):
    mask = str(phantom_dir / "mask.nii")
    assert main([
        "icp-preproc", str(phantom_dir / "bold.nii"), mask,
        "--out", str(tmp_path / "clean.nii"), "--fwhm", "0", "--drop", "4",
    ]) == 0
    assert main([
        "icp-unfold", str(tmp_path / "clean.nii"), mask, "--out", str(tmp_path / "unf.nii"),
    ]) == 0
    assert main([
        "icp-ica", mask, str(tmp_path / "unf.nii"),
        "--components", "3", "--seed", "2", "--out", str(tmp_path / "maps.nii"),
    ]) == 0
    assert main([
        "icp-dualreg", str(tmp_path / "maps.nii"), mask, str(tmp_path / "unf.nii"),
        "--out", str(tmp_path / "dr"),
    ]) == 0
    assert (tmp_path / "dr.tc.csv").exists()
    assert main([
        "icp-parcel", str(tmp_path / "dr.maps.nii"), mask, "--out", str(tmp_path / "parcel.nii"),
    ]) == 0
    seg = read_nifti(tmp_path / "parcel.nii", as_labels=True)
    assert set(seg.ids_present()) <= {1, 2, 3}


def test_fuse_command(tmp_path):
    spec = PhantomSpec(grid_dims=(14, 14, 14), n_regions=3, seed=2, noise_sigma=0.02)
    s = make_truth(spec)
    priors = make_priors(s, spec, 2, 0.5)
    write_nifti(s.structural, tmp_path / "target.nii")
    write_nifti(s.mask, tmp_path / "mask.nii")
    listed = []
    for i, p in enumerate(priors):
        write_nifti(p.intensity, tmp_path / f"p{i}.nii")
        write_nifti(p.labels, tmp_path / f"l{i}.nii")
        listed.append([str(tmp_path / f"p{i}.nii"), str(tmp_path / f"l{i}.nii")])
    cfg = tmp_path / "fuse.json"
    cfg.write_text(json.dumps({"priors": listed, "patch_radius": 1}))
    assert main([
        "fuse", str(tmp_path / "target.nii"), str(tmp_path / "mask.nii"),
        "--config", str(cfg), "--out", str(tmp_path / "seg.nii"),
    ]) == 0
    seg = read_nifti(tmp_path / "seg.nii", as_labels=True)
    assert set(seg.ids_present()) <= {1, 2, 3}


def test_metrics_prints_line(tmp_path, capsys):
    data = np.zeros((6, 6, 6), dtype=int)
    data[:3] = 6
    seg = make_label_volume(data)
    write_nifti(seg, tmp_path / "a.nii")
    write_nifti(seg, tmp_path / "b.nii")
    assert main(["metrics", str(tmp_path / "a.nii"), str(tmp_path / "b.nii"), "--label", "6"]) == 0
    out = capsys.readouterr().out.strip()
    assert out == "dice=1.000000,vsi=1.000000"
    assert main(["metrics", str(tmp_path / "a.nii"), str(tmp_path / "b.nii")]) == 0
    out = capsys.readouterr().out.strip()
    assert out == "label=6,dice=1.000000,vsi=1.000000"


def test_regroup_command(tmp_path):
    fine = np.zeros((6, 6, 6), dtype=int)
    fine[:2] = 1
    fine[2:4] = 2
    coarse = np.zeros((6, 6, 6), dtype=int)
    coarse[:4] = 9
    write_nifti(make_label_volume(fine), tmp_path / "fine.nii")
    write_nifti(make_label_volume(coarse), tmp_path / "coarse.nii")
    assert main([
        "regroup", "--source", str(tmp_path / "fine.nii"),
        "--reference", str(tmp_path / "coarse.nii"), "--out", str(tmp_path / "rg"),
    ]) == 0
    mapping = json.loads((tmp_path / "rg" / "mapping.json").read_text())
    assert mapping == {"1": 9, "2": 9}
    assert (tmp_path / "rg" / "regrouped_fine.nii").exists()


def test_probmap_and_centroids_and_render(tmp_path):
    data = np.zeros((6, 6, 6), dtype=int)
    data[1:4, 1:4, 1:4] = 1
    seg = make_label_volume(data)
    write_nifti(seg, tmp_path / "s1.nii")
    write_nifti(seg, tmp_path / "s2.nii")
    assert main(["probmap", str(tmp_path / "s1.nii"), str(tmp_path / "s2.nii"),
                 "--out", str(tmp_path / "atlas")]) == 0
    assert (tmp_path / "atlas" / "maxprob.nii").exists()
    assert (tmp_path / "atlas" / "freq_01.nii").exists()
    assert main(["centroids", str(tmp_path / "s1.nii"), "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().startswith("label,x,y,z")
    assert main(["centroids", str(tmp_path / "s1.nii"), str(tmp_path / "s2.nii"),
                 "--out", str(tmp_path / "sc.csv")]) == 0
    assert "rms_mm" in (tmp_path / "sc.csv").read_text()
    assert main(["render", str(tmp_path / "s1.nii"), "--out", str(tmp_path / "s1.png")]) == 0
    assert (tmp_path / "s1.png").stat().st_size > 0
    assert main(["render", str(tmp_path / "s1.nii"), str(tmp_path / "s2.nii"),
                 "--out", str(tmp_path / "w.png")]) == 0


def test_study_command(tmp_path):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({
        "n_subjects": 1,
        "master_seed": 5,
        "output_dir": str(tmp_path / "study_out"),
        "phantom": {"grid_dims": [16, 16, 16], "n_regions": 3, "n_timepoints": 100,
                    "n_directions": 32, "noise_sigma": 0.05},
        "fusion": {"n_priors": 2, "jitter_mm": 0.5},
        "dti": {"k": 3, "n_restarts": 2, "upsample_mm": 0},
        "fmri": {"n_components": 3, "fwhm_mm": 0},
    }))
    assert main(["study", "--config", str(cfg)]) == 0
    assert (tmp_path / "study_out" / "manifest.json").exists()


def test_usage_error_exit_code():
    assert main(["no-such-command"]) == 1


def test_missing_file_exit_code(tmp_path):
    assert main(["metrics", str(tmp_path / "nope.nii"), str(tmp_path / "nope2.nii")]) == 2


def test_bad_nifti_exit_code(tmp_path):
    (tmp_path / "junk.nii").write_bytes(b"\x00" * 500)
    assert main(["metrics", str(tmp_path / "junk.nii"), str(tmp_path / "junk.nii")]) == 2


def test_ica_strict_nonconvergence_exit_code(tmp_path, monkeypatch):
    spec = PhantomSpec(grid_dims=(12, 12, 12), n_regions=2, seed=1, n_timepoints=100, noise_sigma=0.1)
    s = make_subject(spec, with_dwi=False)
    from parcelbench.icp import stack_to_volume

    write_nifti(stack_to_volume(s.bold), tmp_path / "b.nii")
    write_nifti(s.mask, tmp_path / "m.nii")
    import parcelbench.cli as cli_mod
    import parcelbench.icp as icp_mod

    def stubborn_group_ica(*args, **kwargs):
        kwargs["max_iter"] = 1
        return icp_mod.group_ica(*args, **kwargs)

    monkeypatch.setattr(cli_mod, "group_ica", stubborn_group_ica)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = main(["icp-ica", str(tmp_path / "m.nii"), str(tmp_path / "b.nii"),
                     "--components", "2", "--strict", "--out", str(tmp_path / "maps.nii")])
    assert code == 3


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "parcelbench" in out and "format" in out
