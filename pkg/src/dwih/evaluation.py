"""Lesion- and case-level detection evaluation.

Heatmaps are thresholded into connected-component candidates, candidates
are matched to annotated lesions (overlap or centroid within 5 mm), and the
matches feed a FROC curve. Case-level scores are heatmap maxima, summarized
by the Mann-Whitney AUC with a percentile bootstrap interval. Image quality
of generated volumes is reported as PSNR / MSE / SSIM.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from dwih._parallel import map_chunks
from dwih.errors import DegenerateDataError, GeometryError, InputError
from dwih.volume import Volume3D

MAX_DIST_MM = 5.0
DEFAULT_RESAMPLES = 2000
CI_PERCENTILES = (2.5, 97.5)
PSNR_CAP = 100.0
ZONE_FRACTION = (4, 5)  # 80 %, kept as a ratio for exact integer comparison
VALID_PIRADS = (3, 4, 5)


# ---------------------------------------------------------------------------
# candidates and annotations


@dataclass(frozen=True, eq=False)
class Candidate:
    """A connected component of a thresholded heatmap.

    ``voxels`` holds ``[z, y, x]`` index rows; ``centroid_mm`` is the
    unweighted mean voxel centre in ``(x, y, z)`` millimetres.
    """

    voxels: np.ndarray
    peak_score: float
    centroid_mm: tuple[float, float, float]
    grid_shape: tuple[int, int, int]
    spacing: tuple[float, float, float]

    @property
    def size(self) -> int:
        return len(self.voxels)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise InputError(f"connectivity must be 6 or 26, got {connectivity}")


def _components(mask: np.ndarray, connectivity: int) -> list[np.ndarray]:
    """Voxel index arrays of each component, ordered by first voxel in scan order."""
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    starts = np.searchsorted(sorted_labels, np.arange(1, n + 1))
    ends = np.searchsorted(sorted_labels, np.arange(1, n + 1), side="right")
    comps = [order[s:e] for s, e in zip(starts, ends)]
    comps.sort(key=lambda idx: idx[0])
    return [np.column_stack(np.unravel_index(idx, mask.shape)) for idx in comps]


def extract_candidates(heatmap: Volume3D, threshold: float, connectivity: int = 26) -> list[Candidate]:
    """Connected components of ``heatmap >= threshold``."""
    threshold = float(threshold)
    if not 0.0 < threshold <= 1.0:
        raise InputError(f"threshold must lie in (0, 1], got {threshold}")
    data = np.asarray(heatmap.data, dtype=np.float64)
    out = []
    for vox in _components(data >= threshold, connectivity):
        scores = data[tuple(vox.T)]
        centroid = heatmap.voxel_centers_mm(vox).mean(axis=0)
        out.append(
            Candidate(
                voxels=vox,
                peak_score=float(scores.max()),
                centroid_mm=tuple(float(c) for c in centroid),
                grid_shape=data.shape,
                spacing=heatmap.spacing,
            )
        )
    return out


@dataclass(frozen=True, eq=False)
class LesionAnnotation:
    """Integer label mask (one label per lesion) plus PI-RADS per label."""

    mask: Volume3D
    pirads: dict

    def __post_init__(self):
        if not self.mask.is_mask:
            raise InputError("lesion annotation must be an integer mask")
        pirads = {int(k): int(v) for k, v in self.pirads.items()}
        present = set(np.unique(self.mask.data).tolist()) - {0}
        missing = present - set(pirads)
        if missing:
            raise InputError(f"lesion labels {sorted(missing)} have no PI-RADS score")
        bad = {k: v for k, v in pirads.items() if v not in VALID_PIRADS}
        if bad:
            raise InputError(f"PI-RADS scores must be in {VALID_PIRADS}, got {bad}")
        object.__setattr__(self, "pirads", {k: pirads[k] for k in sorted(present)})
        # one pass over the mask; matching reuses these for every threshold
        idx = np.argwhere(np.asarray(self.mask.data) != 0)
        labs = np.asarray(self.mask.data)[tuple(idx.T)]
        voxels = {lab: idx[labs == lab] for lab in self.pirads}
        centroids = {lab: self.mask.voxel_centers_mm(v).mean(axis=0) for lab, v in voxels.items()}
        object.__setattr__(self, "_voxels", voxels)
        object.__setattr__(self, "_centroids", centroids)

    @property
    def labels(self) -> list[int]:
        return sorted(self.pirads)

    def lesion_voxels(self, label: int) -> np.ndarray:
        return self._voxels[label]

    def centroids_mm(self) -> dict[int, np.ndarray]:
        return dict(self._centroids)

    def is_positive(self, pirads_min: int = 3) -> bool:
        return any(score >= pirads_min for score in self.pirads.values())


class MatchResult(NamedTuple):
    tp: list  # (Candidate, lesion label)
    fp: list  # Candidate
    fn: list  # lesion label


def match_lesions(
    cands: Sequence[Candidate],
    annot: LesionAnnotation,
    spacing=None,
    max_dist_mm: float = MAX_DIST_MM,
) -> MatchResult:
    """Greedy candidate-to-lesion assignment in descending peak score.

    A candidate may claim an unmatched lesion it overlaps, or one whose
    centroid lies strictly closer than ``max_dist_mm``. Overlap wins over
    distance; ties go to the larger overlap, then the nearer centroid, then
    the lower label. Each lesion is claimed at most once.
    """
    mask = np.asarray(annot.mask.data)
    if spacing is not None and not np.allclose(spacing, annot.mask.spacing, rtol=1e-6, atol=0):
        raise GeometryError(f"spacing {tuple(spacing)} differs from annotation spacing {annot.mask.spacing}")
    for c in cands:
        if tuple(c.grid_shape) != mask.shape or not np.allclose(c.spacing, annot.mask.spacing, rtol=1e-6, atol=0):
            raise GeometryError("candidate grid does not match the annotation grid")

    centroids = annot.centroids_mm()
    unmatched = set(annot.labels)
    order = sorted(range(len(cands)), key=lambda i: -cands[i].peak_score)
    tp, fp = [], []
    for i in order:
        cand = cands[i]
        hit = mask[tuple(cand.voxels.T)]
        overlap = {int(lab): int(n) for lab, n in zip(*np.unique(hit[hit != 0], return_counts=True))}
        centre = np.asarray(cand.centroid_mm)
        best = None
        for lab in sorted(unmatched):
            dist = float(np.linalg.norm(centre - centroids[lab]))
            ov = overlap.get(lab, 0)
            if ov == 0 and not dist < max_dist_mm:
                continue
            key = (ov == 0, -ov, dist, lab)
            if best is None or key < best[0]:
                best = (key, lab)
        if best is None:
            fp.append(cand)
        else:
            unmatched.discard(best[1])
            tp.append((cand, best[1]))
    fp_ids = {id(c) for c in fp}
    return MatchResult(tp, [c for c in cands if id(c) in fp_ids], sorted(unmatched))


# ---------------------------------------------------------------------------
# case level: score, AUC, bootstrap


def case_score(heatmap: Volume3D) -> float:
    return float(np.max(heatmap.data))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise InputError("AUC needs both positive and negative cases")
    return s, y


def _auc_unchecked(s: np.ndarray, y: np.ndarray) -> float:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s)  # average ranks for ties
    # twice the Mann-Whitney U is an integer, so this is exact
    u2 = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    return _auc_unchecked(*_check_binary(scores, labels))


class BootstrapResult(NamedTuple):
    auc: float
    ci_lo: float
    ci_hi: float


def bootstrap_distribution(
    scores,
    labels,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    max_retries: int = 100,
    workers: int | None = None,
) -> np.ndarray:
    """AUCs of ``n_resamples`` case resamples drawn with replacement.

    Resample ``i`` draws from its own child of ``SeedSequence(seed)``, so
    the result does not depend on how resamples are spread over threads.
    Draws that miss a class are redrawn from the same stream.
    """
    s, y = _check_binary(scores, labels)
    if n_resamples < 1:
        raise InputError("n_resamples must be positive")
    children = np.random.SeedSequence(seed).spawn(n_resamples)
    n = s.size

    def run(lo, hi):
        out = np.empty(hi - lo)
        for k in range(lo, hi):
            rng = np.random.default_rng(children[k])
            for _ in range(max_retries):
                idx = rng.integers(0, n, n)
                yy = y[idx]
                if yy.any() and not yy.all():
                    out[k - lo] = _auc_unchecked(s[idx], yy)
                    break
            else:
                raise DegenerateDataError(f"resample {k} missed a class {max_retries} times in a row")
        return out

    return np.concatenate(map_chunks(run, n_resamples, workers, min_chunk=250))


def bootstrap_auc(
    scores,
    labels,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    max_retries: int = 100,
    workers: int | None = None,
) -> BootstrapResult:
    """Point AUC with the 2.5/97.5 percentile bootstrap interval."""
    point = auc(scores, labels)
    dist = bootstrap_distribution(scores, labels, n_resamples, seed, max_retries, workers)
    lo, hi = np.percentile(dist, CI_PERCENTILES)
    return BootstrapResult(point, float(lo), float(hi))


# ---------------------------------------------------------------------------
# FROC


@dataclass(frozen=True, eq=False)
class CaseDetections:
    candidates: list
    annotation: LesionAnnotation

    @property
    def n_lesions(self) -> int:
        return len(self.annotation.labels)


class FrocPoint(NamedTuple):
    threshold: float
    fp_per_patient: float
    tpr: float


@dataclass(frozen=True)
class FrocCurve:
    """Points sorted by false positives per patient, tpr nondecreasing."""

    points: tuple

    def _envelope(self):
        """Best TPR at each distinct FPp, anchored at (0, 0) if needed."""
        fpp = np.array([p.fp_per_patient for p in self.points])
        tpr = np.array([p.tpr for p in self.points])
        ux = np.unique(fpp)
        uy = np.array([tpr[fpp == x].max() for x in ux])
        if ux[0] > 0:
            ux = np.concatenate([[0.0], ux])
            uy = np.concatenate([[0.0], uy])
        return ux, uy

    def tpr_at_fpp(self, fpp_target: float) -> float:
        """Linear interpolation; held flat beyond the last point."""
        return float(np.interp(fpp_target, *self._envelope()))

    def fpp_at_tpr(self, tpr_target: float) -> float:
        """Smallest interpolated FPp reaching ``tpr_target``; inf if never reached."""
        fpp, tpr = self._envelope()
        if tpr_target <= tpr[0]:
            return float(fpp[0])
        reach = np.nonzero(tpr >= tpr_target)[0]
        if reach.size == 0:
            return math.inf
        i = int(reach[0])
        f0, f1, t0, t1 = fpp[i - 1], fpp[i], tpr[i - 1], tpr[i]
        return float(f0 + (tpr_target - t0) / (t1 - t0) * (f1 - f0))

    def operating_points(self) -> dict:
        return {
            "TPR@FPp=0.75": self.tpr_at_fpp(0.75),
            "TPR@FPp=1": self.tpr_at_fpp(1.0),
            "FPp@TPR=0.65": self.fpp_at_tpr(0.65),
            "FPp@TPR=0.70": self.fpp_at_tpr(0.70),
        }


def froc(per_case: Sequence[CaseDetections], thresholds=None) -> FrocCurve:
    """Sweep score thresholds, re-running the matching at each one.

    Default thresholds are every candidate peak score plus 0 and 1.
    """
    if not per_case:
        raise InputError("FROC needs at least one case")
    total_lesions = sum(c.n_lesions for c in per_case)
    if total_lesions == 0:
        raise DegenerateDataError("FROC is undefined without any lesions")
    if thresholds is None:
        peaks = {c.peak_score for case in per_case for c in case.candidates}
        thresholds = sorted(peaks | {0.0, 1.0})
    pts = []
    for t in thresholds:
        tp = fp = 0
        for case in per_case:
            kept = [c for c in case.candidates if c.peak_score >= t]
            res = match_lesions(kept, case.annotation)
            tp += len(res.tp)
            fp += len(res.fp)
        pts.append(FrocPoint(float(t), fp / len(per_case), tp / total_lesions))
    pts.sort(key=lambda p: (p.fp_per_patient, p.tpr, -p.threshold))
    # enforce tpr monotone in fpp; greedy re-matching already guarantees it
    best = 0.0
    mono = []
    for p in pts:
        best = max(best, p.tpr)
        mono.append(p._replace(tpr=best))
    return FrocCurve(tuple(mono))


# ---------------------------------------------------------------------------
# image quality


class ImageQuality(NamedTuple):
    psnr: float
    mse: float
    ssim: float

    def format(self) -> str:
        """``PSNR / MSE(x1e-3) / SSIM`` with 2, 2 and 3 decimals."""
        return f"{self.psnr:.2f} / {self.mse * 1e3:.2f} / {self.ssim:.3f}"


SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11-tap window


def _ssim_slice(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(v):
        return ndimage.gaussian_filter(v, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if min(smap.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def image_quality(a: Volume3D, b: Volume3D, data_range: float = 1.0) -> ImageQuality:
    """MSE, PSNR (capped at 100 dB) and slice-wise Gaussian SSIM."""
    if a.data.shape != b.data.shape:
        raise GeometryError(f"volumes differ in shape: {a.dims} vs {b.dims}")
    if not data_range > 0:
        raise InputError("data_range must be positive")
    x = np.asarray(a.data, dtype=np.float64)
    y = np.asarray(b.data, dtype=np.float64)
    mse = float(np.mean((x - y) ** 2))
    psnr = PSNR_CAP if mse < 1e-12 else min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))
    ssim = float(np.mean([_ssim_slice(x[k], y[k], data_range) for k in range(x.shape[0])]))
    return ImageQuality(psnr, mse, ssim)


# ---------------------------------------------------------------------------
# zones


class Zone(str, enum.Enum):
    PZ = "PZ"
    TZ = "TZ"
    BOTH = "Both"


def zone_classify(annot: LesionAnnotation, pz: Volume3D, tz: Volume3D) -> Zone:
    """Assign a case to the zone holding at least 80 % of its lesion voxels."""
    for name, z in (("PZ", pz), ("TZ", tz)):
        if z.data.shape != annot.mask.data.shape:
            raise GeometryError(f"{name} mask grid differs from the lesion mask")
    in_pz = np.asarray(pz.data) != 0
    in_tz = np.asarray(tz.data) != 0
    if (in_pz & in_tz).any():
        raise InputError("zone masks overlap")
    lesion = np.asarray(annot.mask.data) != 0
    total = int(lesion.sum())
    if total == 0:
        raise InputError("case has no lesion voxels to classify")
    num, den = ZONE_FRACTION
    if den * int((lesion & in_pz).sum()) >= num * total:
        return Zone.PZ
    if den * int((lesion & in_tz).sum()) >= num * total:
        return Zone.TZ
    return Zone.BOTH


# ---------------------------------------------------------------------------
# cohort report


@dataclass
class EvalReport:
    auc: float
    ci: tuple
    froc: FrocCurve | None
    quality: ImageQuality | None = None
    cases: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    bootstrap: np.ndarray | None = None

    def to_dict(self) -> dict:
        def finite(v):
            return None if v is None or not math.isfinite(v) else float(v)

        out = {
            "auc": self.auc,
            "ci": [self.ci[0], self.ci[1]],
            "froc": None,
            "operating_points": None,
            "quality": None,
            "cases": self.cases,
            "config": self.config,
        }
        if self.froc is not None:
            out["froc"] = [p._asdict() for p in self.froc.points]
            out["operating_points"] = {k: finite(v) for k, v in self.froc.operating_points().items()}
        if self.quality is not None:
            out["quality"] = {**self.quality._asdict(), "formatted": self.quality.format()}
        return out


def evaluate_cohort(
    cases: Sequence[tuple],
    threshold: float,
    pirads_min: int = 3,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 17,
    connectivity: int = 26,
    max_dist_mm: float = MAX_DIST_MM,
    workers: int | None = None,
) -> EvalReport:
    """Run the full protocol on ``(name, heatmap, annotation)`` triples."""
    if not cases:
        raise InputError("no cases to evaluate")
    if pirads_min not in VALID_PIRADS:
        raise InputError(f"pirads_min must be one of {VALID_PIRADS}")
    detections, scores, labels, rows = [], [], [], []
    for name, heatmap, annot in cases:
        if heatmap.data.shape != annot.mask.data.shape:
            raise GeometryError(f"case {name}: heatmap and annotation grids differ")
        cands = extract_candidates(heatmap, threshold, connectivity)
        res = match_lesions(cands, annot, max_dist_mm=max_dist_mm)
        tp_ids = {id(c) for c, _ in res.tp}
        score = case_score(heatmap)
        label = int(annot.is_positive(pirads_min))
        detections.append(CaseDetections(cands, annot))
        scores.append(score)
        labels.append(label)
        rows.append(
            {
                "name": name,
                "score": score,
                "label": label,
                "n_lesions": len(annot.labels),
                "fn": res.fn,
                "candidates": [
                    {
                        "peak": c.peak_score,
                        "tp": id(c) in tp_ids,
                        "n_voxels": c.size,
                        "centroid_mm": list(c.centroid_mm),
                    }
                    for c in cands
                ],
            }
        )
    boot_dist = bootstrap_distribution(scores, labels, n_resamples, seed, workers=workers)
    lo, hi = np.percentile(boot_dist, CI_PERCENTILES)
    curve = froc(detections) if sum(d.n_lesions for d in detections) else None
    return EvalReport(
        auc=auc(scores, labels),
        ci=(float(lo), float(hi)),
        froc=curve,
        cases=rows,
        config={
            "threshold": float(threshold),
            "pirads_min": int(pirads_min),
            "n_resamples": int(n_resamples),
            "seed": int(seed),
            "connectivity": int(connectivity),
            "max_dist_mm": float(max_dist_mm),
        },
        bootstrap=boot_dist,
    )
