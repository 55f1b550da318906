"""Segmentation comparison machinery.

Dice and volumetric-similarity scores per label, group probability atlases
(label frequencies plus the maximum-probability map), centroid statistics,
overlap-based regrouping of one parcellation onto another's label set, and
optimal (Hungarian) label matching for scoring segmentations whose ids are
arbitrary.  CSV emission mirrors a per-nucleus mean +/- sd table with an
empty field where a score is undefined.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .volume import LabelVolume, check_same_grid, voxel_to_world, Volume


def dice(a: LabelVolume, b: LabelVolume, label: int):
    """2|A^B| / (|A|+|B|) for one label; None when both sides are empty."""
    check_same_grid(a, b)
    in_a = a.data == label
    in_b = b.data == label
    na, nb = int(in_a.sum()), int(in_b.sum())
    if na + nb == 0:
        return None
    return 2 * int((in_a & in_b).sum()) / (na + nb)


def vsi(a: LabelVolume, b: LabelVolume, label: int):
    """Volumetric similarity 1 - ||A|-|B|| / (|A|+|B|); None when both empty.

    Computed as 2*min(|A|,|B|) / (|A|+|B|), the same quantity with a single
    division, so the result is the correctly rounded value of the exact
    rational.
    """
    check_same_grid(a, b)
    na = int((a.data == label).sum())
    nb = int((b.data == label).sum())
    if na + nb == 0:
        return None
    return 2 * min(na, nb) / (na + nb)


@dataclass(frozen=True)
class PairScore:
    nucleus: int
    dice: float | None
    vsi: float | None

    def __post_init__(self):
        for v in (self.dice, self.vsi):
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"scores must lie in [0, 1], got {v}")


def score_pair(a: LabelVolume, b: LabelVolume, labels=None):
    """PairScore per label id (defaults to the union of both dictionaries)."""
    if labels is None:
        labels = sorted(set(a.labels) | set(b.labels))
    return [PairScore(nucleus=l, dice=dice(a, b, l), vsi=vsi(a, b, l)) for l in labels]


# ---------------------------------------------------------------------------
# Probability atlases
# ---------------------------------------------------------------------------


@dataclass
class ProbabilityAtlas:
    """Per-label occurrence counts across subjects plus the max-prob map.

    Counts stay integral so frequency identities hold exactly;
    ``frequency(label)`` returns the count/n volume used for output.
    """

    counts: dict  # label id -> np.ndarray of subject counts
    n_subjects: int
    maxprob: LabelVolume

    def frequency(self, label: int) -> Volume:
        grid = self.maxprob.grid
        freq = self.counts[label].astype(np.float32) / np.float32(self.n_subjects)
        return Volume(freq, grid.spacing, grid.affine)

    @property
    def labels(self) -> dict:
        return self.maxprob.labels


def probability_atlas(segs) -> ProbabilityAtlas:
    """Group atlas from segmentations sharing one grid and dictionary.

    p_label(v) = (#subjects with that label at v) / n; the max-prob map takes
    the most frequent nonzero label (ties toward the lower id) and background
    where no subject labels the voxel.
    """
    segs = list(segs)
    if not segs:
        raise ValueError("at least one segmentation is required")
    check_same_grid(*segs)
    labels: dict = {}
    for s in segs:
        for k, v in s.labels.items():
            if labels.setdefault(k, v) != v:
                raise ValueError(f"label dictionaries disagree on id {k}: {labels[k]!r} vs {v!r}")

    shape = segs[0].grid.dims[:3]
    counts = {l: np.zeros(shape, dtype=np.int32) for l in sorted(labels)}
    for s in segs:
        for l in counts:
            counts[l] += s.data == l

    best_count = np.zeros(shape, dtype=np.int32)
    best_label = np.zeros(shape, dtype=np.int16)
    for l in sorted(counts):  # ascending: strict > keeps the lower id on ties
        c = counts[l]
        better = c > best_count
        best_count[better] = c[better]
        best_label[better] = l
    if best_label.max(initial=0) <= 255:
        best_label = best_label.astype(np.uint8)

    grid = segs[0].grid
    maxprob = LabelVolume(grid=Volume(best_label, grid.spacing, grid.affine), labels=labels)
    return ProbabilityAtlas(counts=counts, n_subjects=len(segs), maxprob=maxprob)


# ---------------------------------------------------------------------------
# Centroids
# ---------------------------------------------------------------------------


def centroids(seg: LabelVolume) -> dict:
    """Unweighted mean of voxel-center world coordinates per present label."""
    out = {}
    for l in seg.ids_present():
        idx = np.argwhere(seg.data == l)
        world = voxel_to_world(seg.grid.affine, idx)
        out[l] = tuple(world.mean(axis=0))
    return out


def centroid_scatter(segs) -> dict:
    """Mean centroid and RMS scatter radius (mm) per label across subjects.

    Labels present in fewer than two segmentations are omitted with a
    warning.  Returns {label: (mean_xyz, rms_mm)}.
    """
    segs = list(segs)
    if len(segs) < 2:
        raise ValueError("need at least 2 segmentations")
    per_label: dict = {}
    for s in segs:
        for l, c in centroids(s).items():
            per_label.setdefault(l, []).append(c)
    out = {}
    for l in sorted(per_label):
        pts = np.asarray(per_label[l])
        if len(pts) < 2:
            warnings.warn(f"label {l} present in only one subject; omitted from scatter")
            continue
        mean = pts.mean(axis=0)
        rms = float(np.sqrt(((pts - mean) ** 2).sum(axis=1).mean()))
        out[l] = (tuple(mean), rms)
    return out


# ---------------------------------------------------------------------------
# Regrouping and label matching
# ---------------------------------------------------------------------------


def regroup(source_segs, reference_segs):
    """Map each source label onto the reference label it overlaps most.

    Max-probability maps are built for both sets; source label j goes to the
    reference label with the largest voxel overlap on those maps (ties to
    the lower reference id, no overlap at all to background 0).  The mapping
    is then applied voxelwise to every individual source segmentation.
    Returns (mapping dict, regrouped segmentations).
    """
    source_segs = list(source_segs)
    reference_segs = list(reference_segs)
    check_same_grid(*(source_segs + reference_segs))
    src_max = probability_atlas(source_segs).maxprob
    ref_max = probability_atlas(reference_segs).maxprob

    ref_labels = ref_max.ids_present()
    mapping = {}
    for j in sorted(src_max.labels):
        in_j = src_max.data == j
        best_l, best_overlap = 0, 0
        for l in ref_labels:  # ascending: ties keep the lower reference id
            overlap = int((in_j & (ref_max.data == l)).sum())
            if overlap > best_overlap:
                best_overlap, best_l = overlap, l
        mapping[j] = best_l

    lut_size = max(src_max.labels, default=0) + 1
    lut = np.zeros(lut_size, dtype=np.int16)
    for j, l in mapping.items():
        lut[j] = l

    out_labels = dict(ref_max.labels)
    regrouped = []
    for s in source_segs:
        data = lut[s.data]
        if data.max(initial=0) <= 255:
            data = data.astype(np.uint8)
        grid = Volume(data, s.grid.spacing, s.grid.affine)
        regrouped.append(LabelVolume(grid=grid, labels=out_labels))
    return mapping, regrouped


def match_labels(a: LabelVolume, b: LabelVolume):
    """Optimal one-to-one label pairing maximizing total Dice.

    Returns (mapping a_id -> b_id, unmatched_a, unmatched_b); labels absent
    from the data take no part.
    """
    check_same_grid(a, b)
    ids_a = a.ids_present()
    ids_b = b.ids_present()
    if not ids_a or not ids_b:
        return {}, ids_a, ids_b
    score = np.zeros((len(ids_a), len(ids_b)))
    for i, la in enumerate(ids_a):
        for j, lb in enumerate(ids_b):
            in_a = a.data == la
            in_b = b.data == lb
            score[i, j] = 2 * int((in_a & in_b).sum()) / (int(in_a.sum()) + int(in_b.sum()))
    rows, cols = linear_sum_assignment(-score)
    mapping = {ids_a[i]: ids_b[j] for i, j in zip(rows, cols)}
    unmatched_a = [l for l in ids_a if l not in mapping]
    unmatched_b = [l for l in ids_b if l not in set(mapping.values())]
    return mapping, unmatched_a, unmatched_b


def matched_mean_dice(reference: LabelVolume, candidate: LabelVolume) -> float:
    """Mean Dice over reference labels after optimal matching (unmatched -> 0)."""
    mapping, _, _ = match_labels(reference, candidate)
    ids = reference.ids_present()
    if not ids:
        raise ValueError("reference has no labels")
    total = 0.0
    for l in ids:
        if l in mapping:
            in_a = reference.data == l
            in_b = candidate.data == mapping[l]
            total += 2 * int((in_a & in_b).sum()) / (int(in_a.sum()) + int(in_b.sum()))
    return total / len(ids)


# ---------------------------------------------------------------------------
# Group tables
# ---------------------------------------------------------------------------

CSV_HEADER = [
    "nucleus",
    "dice_L_mean", "dice_L_sd", "dice_R_mean", "dice_R_sd",
    "vsi_L_mean", "vsi_L_sd", "vsi_R_mean", "vsi_R_sd",
    "n",
]


@dataclass
class MetricsRow:
    nucleus_id: int
    nucleus: str
    cells: dict  # (metric, side) -> (mean or None, sd or None, count)
    n: int


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                fields = [r.nucleus]
                for metric in ("dice", "vsi"):
                    for side in ("L", "R"):
                        mean, sd, _ = r.cells[(metric, side)]
                        fields.append("" if mean is None else f"{mean:.6f}")
                        fields.append("" if sd is None else f"{sd:.6f}")
                fields.append(str(r.n))
                w.writerow(fields)


def emit_table(scores, label_names=None, reference_volumes=None, path=None) -> MetricsTable:
    """Fold per-subject scores into a mean +/- sd table.

    ``scores`` is a sequence of (side, [PairScore, ...]) with side "L" or
    "R", one entry per scored subject-hemisphere.  Missing scores are
    excluded from means and render as empty CSV fields; the sd uses the
    sample (n-1) convention and is empty for fewer than two values.  Rows
    are ordered by descending mean reference volume when
    ``reference_volumes`` (id -> mean voxel count) is given, else by id.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("at least one scored subject is required")
    for side, _ in scores:
        if side not in ("L", "R"):
            raise ValueError(f"side must be 'L' or 'R', got {side!r}")
    label_names = label_names or {}

    nuclei = sorted({ps.nucleus for _, pss in scores for ps in pss})
    if reference_volumes:
        nuclei.sort(key=lambda l: (-reference_volumes.get(l, 0.0), l))

    rows = []
    for nucleus in nuclei:
        cells = {}
        contributing = 0
        for _, pss in scores:
            if any(ps.nucleus == nucleus and (ps.dice is not None or ps.vsi is not None) for ps in pss):
                contributing += 1
        for metric in ("dice", "vsi"):
            for side in ("L", "R"):
                vals = [
                    getattr(ps, metric)
                    for s, pss in scores
                    if s == side
                    for ps in pss
                    if ps.nucleus == nucleus and getattr(ps, metric) is not None
                ]
                if not vals:
                    cells[(metric, side)] = (None, None, 0)
                elif len(vals) == 1:
                    cells[(metric, side)] = (float(vals[0]), None, 1)
                else:
                    arr = np.asarray(vals)
                    cells[(metric, side)] = (float(arr.mean()), float(arr.std(ddof=1)), len(vals))
        rows.append(
            MetricsRow(
                nucleus_id=nucleus,
                nucleus=label_names.get(nucleus, f"region_{nucleus}"),
                cells=cells,
                n=contributing,
            )
        )
    table = MetricsTable(rows=rows)
    if path is not None:
        table.write_csv(path)
    return table
