"""Cohort-level analyses: volume errors, latent diagnostics, rate norms.

Region volumes of predictions are measured by nearest-intensity
segmentation of the decoded volume; ground truth for rendered scans comes
from the generator's crisp oracle segmentation.  Volume errors are
reported as a percentage of the subject's first-scan total brain volume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import phantom
from .autoencoder import AEModel, decode, encode
from .progression import (
    GaussianBelief,
    ObservationNoise,
    compute_beta,
    extrapolate,
    posterior_update,
)
from .ssim import ssim3d


@dataclass(frozen=True)
class RegionVolumes:
    counts: dict[int, int]  # region id -> voxel count
    tbv: int  # non-background voxels

    def __post_init__(self):
        if any(c < 0 for c in self.counts.values()) or self.tbv < 0:
            raise ValueError("negative voxel count")


@dataclass
class MetricsRow:
    subject_id: str
    source: str
    n_conditioning_scans: int
    target_age: float
    mae: dict[str, float]  # region name -> % of first-scan TBV
    ssim: float
    dice: float

    def __post_init__(self):
        if any(v < 0 for v in self.mae.values()):
            raise ValueError("negative MAE")
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError("dice outside [0, 1]")


def region_volumes(seg: np.ndarray, spec: phantom.PhantomSpec) -> RegionVolumes:
    """Voxel counts per region id; tbv counts all non-background voxels."""
    seg = np.asarray(seg)
    ids = set(spec.region_ids())
    present = set(int(v) for v in np.unique(seg))
    unknown = present - ids - {0}
    if unknown:
        raise ValueError(f"unknown segmentation labels {sorted(unknown)}")
    counts = {rid: int(np.count_nonzero(seg == rid)) for rid in spec.region_ids()}
    return RegionVolumes(counts=counts, tbv=int(np.count_nonzero(seg)))


def mae_tbv(
    predicted: RegionVolumes, actual: RegionVolumes, tbv_first_scan: float
) -> dict[int, float]:
    """100 * |v_pred - v_actual| / tbv_first_scan, per region."""
    if tbv_first_scan <= 0:
        raise ValueError("first-scan TBV must be positive")
    if set(predicted.counts) != set(actual.counts):
        raise ValueError("region sets differ")
    return {
        rid: 100.0 * abs(predicted.counts[rid] - actual.counts[rid]) / tbv_first_scan
        for rid in predicted.counts
    }


def generalized_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Region-weighted Dice with reference weighting w_r = 1/|A_r|^2.

    Background is not a region; labels absent from both maps are excluded.
    A region absent only from the reference gets weight 1 (count clamp).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    labels = (set(int(v) for v in np.unique(a)) | set(int(v) for v in np.unique(b))) - {0}
    if not labels:
        return 1.0
    num = 0.0
    den = 0.0
    for lab in sorted(labels):
        in_a = a == lab
        in_b = b == lab
        n_a = int(in_a.sum())
        n_b = int(in_b.sum())
        w = 1.0 / max(n_a, 1) ** 2
        num += w * 2.0 * int(np.logical_and(in_a, in_b).sum())
        den += w * (n_a + n_b)
    return num / den


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    out = rows.copy()
    for i, row in enumerate(out):
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


@dataclass
class PCAResult:
    projections: np.ndarray  # (n_points, k)
    explained_variance_ratio: np.ndarray  # (k,), of total variance
    components: np.ndarray  # (k, dim)


def pca_project(points, n_components: int = 2) -> PCAResult:
    """Mean-centered PCA; ratios are fractions of the total variance."""
    pts = np.stack([np.asarray(p, dtype=np.float64).ravel() for p in points])
    n = pts.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    centered = pts - pts.mean(axis=0)
    total = float(np.sum(centered * centered)) / n
    if total == 0.0:
        raise ValueError("degenerate input: fewer than two distinct points")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(n_components, vt.shape[0])
    comps = _fix_signs(vt[:k])
    ratios = (s[:k] ** 2 / n) / total
    return PCAResult(
        projections=centered @ comps.T,
        explained_variance_ratio=ratios,
        components=comps,
    )


def latent_collinearity(subject_latents) -> float:
    """Explained-variance share of the first PC of a subject's trajectory."""
    if len(subject_latents) < 3:
        raise ValueError("need at least three scans")
    return float(pca_project(subject_latents, 1).explained_variance_ratio[0])


@dataclass
class InterpolationReport:
    alphas: np.ndarray
    counts: dict[str, np.ndarray]  # region name -> counts per alpha
    r2: dict[str, float]
    max_chord_dev: dict[str, float]  # voxels


def interpolation_linearity(
    model: AEModel,
    z1: np.ndarray,
    z2: np.ndarray,
    spec: phantom.PhantomSpec,
    n_alphas: int = 11,
) -> InterpolationReport:
    """Region volumes along the latent segment alpha*z1 + (1-alpha)*z2.

    Fits counts against alpha by least squares (R^2 = 1 for a constant
    series) and reports the worst deviation from the endpoint chord.
    """
    alphas = np.linspace(0.0, 1.0, n_alphas)
    names = [r.name for r in spec.regions]
    counts = {name: np.empty(n_alphas) for name in names}
    for i, alpha in enumerate(alphas):
        z = alpha * np.asarray(z1, dtype=np.float64) + (1.0 - alpha) * np.asarray(z2, dtype=np.float64)
        seg = phantom.segment_by_intensity(decode(model, z), spec)
        vols = region_volumes(seg, spec)
        for region in spec.regions:
            counts[region.name][i] = vols.counts[region.region_id]

    r2: dict[str, float] = {}
    chord_dev: dict[str, float] = {}
    for name in names:
        y = counts[name]
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot == 0.0:
            r2[name] = 1.0
        else:
            coef = np.polyfit(alphas, y, 1)
            resid = y - np.polyval(coef, alphas)
            r2[name] = 1.0 - float(np.sum(resid**2)) / ss_tot
        chord = alphas * y[-1] + (1.0 - alphas) * y[0]
        chord_dev[name] = float(np.max(np.abs(y - chord)))
    return InterpolationReport(alphas=alphas, counts=counts, r2=r2, max_chord_dev=chord_dev)


@dataclass
class BetaNormCell:
    mean: float
    count: int
    se: float


@dataclass
class BetaNormTable:
    cells: dict[tuple[str, str], BetaNormCell]  # (diagnosis, bin label)
    overall: dict[str, BetaNormCell]  # diagnosis -> cell

    def bin_labels(self) -> list[str]:
        return sorted({label for _, label in self.cells}, key=lambda s: float(s[1:].split(",")[0]))


def _age_bin(age: float, width: float = 5.0, start: float = 60.0) -> str:
    idx = int(np.floor((age - start) / width))
    lo = start + idx * width
    return f"[{lo:g},{lo + width:g})"


def _cell(values: list[float]) -> BetaNormCell:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return BetaNormCell(mean=float(arr.mean()), count=len(arr), se=se)


def beta_norm_analysis(
    subject_betas: list[tuple[np.ndarray, str, float]],
    bin_width: float = 5.0,
    bin_start: float = 60.0,
) -> BetaNormTable:
    """Mean L1 norm of beta by diagnosis and 5-year first-scan-age bin."""
    by_cell: dict[tuple[str, str], list[float]] = {}
    by_diag: dict[str, list[float]] = {}
    for beta, diagnosis, first_age in subject_betas:
        norm = float(np.sum(np.abs(np.asarray(beta, dtype=np.float64))))
        label = _age_bin(first_age, bin_width, bin_start)
        by_cell.setdefault((diagnosis, label), []).append(norm)
        by_diag.setdefault(diagnosis, []).append(norm)
    return BetaNormTable(
        cells={key: _cell(vals) for key, vals in by_cell.items()},
        overall={diag: _cell(vals) for diag, vals in by_diag.items()},
    )


def _nearest_scan(subject: phantom.SubjectRecord, target_age: float,
                  candidates: list[int]) -> int:
    ages = subject.ages()
    return min(candidates, key=lambda i: abs(ages[i] - target_age))


def multiscan_curve(
    model: AEModel,
    cohort: phantom.Cohort,
    global_prior: GaussianBelief,
    obs_noise: ObservationNoise,
    *,
    anchor_year: float = 4.0,
    lag_years: tuple[float, ...] = (1.0, 2.0, 3.0),
    min_span_years: float = 6.0,
    include_regression: bool = True,
) -> tuple[list[MetricsRow], dict]:
    """Accuracy as intermediate scans are added to the belief.

    Protocol per eligible subject (scan span >= min_span_years): the scan
    nearest first + anchor_year anchors every extrapolation; the belief at
    n = 0 is the global prior, and at n >= 1 the posterior conditioned on
    the scans nearest first + 1, 2, ... years, with the likelihood anchored
    at the first scan.  Targets are all scans after the anchor.  The
    optional regression source fits all scans up to the anchor directly.
    """
    spec = cohort.spec
    rows: list[MetricsRow] = []
    n_eligible = 0
    for subject in cohort.subjects:
        ages = subject.ages()
        n_scans = len(ages)
        if n_scans < 2 or ages[-1] - ages[0] < min_span_years:
            continue
        first_age = ages[0]
        anchor_idx = _nearest_scan(subject, first_age + anchor_year, list(range(1, n_scans)))
        between = [i for i in range(1, anchor_idx)]
        targets = [i for i in range(anchor_idx + 1, n_scans)]
        if len(between) < len(lag_years) or not targets:
            continue
        n_eligible += 1

        lag_idx: list[int] = []
        for lag in lag_years:
            pool = [i for i in between if i not in lag_idx]
            lag_idx.append(_nearest_scan(subject, first_age + lag, pool))

        latent = {
            i: encode(model, subject.scans[i].volume).mean
            for i in {0, anchor_idx, *lag_idx}
        }
        z_anchor = latent[anchor_idx]
        a_anchor = ages[anchor_idx]
        first_seg = phantom.segment_oracle(spec, subject.rate_multipliers, first_age)
        tbv_first = region_volumes(first_seg, spec).tbv

        betas: list[tuple[str, int, np.ndarray]] = [
            ("global_prior", 0, global_prior.mean.copy())
        ]
        for n in range(1, len(lag_years) + 1):
            obs = [(latent[i], ages[i]) for i in lag_idx[:n]]
            belief = posterior_update(global_prior, (latent[0], first_age), obs, obs_noise)
            betas.append(("posterior", n, belief.mean))
        if include_regression:
            cond = [0, *lag_idx, anchor_idx]
            beta = compute_beta([latent[i] for i in cond], [ages[i] for i in cond])
            betas.append(("regression", len(cond), beta))

        for target in targets:
            actual_vol = subject.scans[target].volume
            target_age = ages[target]
            seg_actual = phantom.segment_oracle(spec, subject.rate_multipliers, target_age)
            vols_actual = region_volumes(seg_actual, spec)
            for source, n, beta in betas:
                pred_vol = decode(model, extrapolate(z_anchor, a_anchor, beta, target_age))
                seg_pred = phantom.segment_by_intensity(pred_vol, spec)
                vols_pred = region_volumes(seg_pred, spec)
                mae_ids = mae_tbv(vols_pred, vols_actual, tbv_first)
                rows.append(
                    MetricsRow(
                        subject_id=subject.subject_id,
                        source=source,
                        n_conditioning_scans=n,
                        target_age=float(target_age),
                        mae={
                            spec.region_by_id(rid).name: val
                            for rid, val in mae_ids.items()
                        },
                        ssim=float(ssim3d(actual_vol, pred_vol)),
                        dice=float(generalized_dice(seg_actual, seg_pred)),
                    )
                )
    if n_eligible == 0:
        raise ValueError("no eligible subjects (need scans spanning the protocol years)")
    return rows, summarize_rows(rows)


def summarize_rows(rows: list[MetricsRow]) -> dict:
    """Mean and standard error of the overall MAE, grouped by source and n."""
    groups: dict[tuple[str, int], list[MetricsRow]] = {}
    for row in rows:
        groups.setdefault((row.source, row.n_conditioning_scans), []).append(row)
    summary = {}
    for (source, n), members in sorted(groups.items()):
        overall = np.array([np.mean(list(r.mae.values())) for r in members])
        per_region: dict[str, float] = {}
        for name in members[0].mae:
            per_region[name] = float(np.mean([r.mae[name] for r in members]))
        se = float(overall.std(ddof=1) / np.sqrt(len(overall))) if len(overall) > 1 else 0.0
        summary[f"{source}/n={n}"] = {
            "mean_mae": float(overall.mean()),
            "se_mae": se,
            "per_region_mae": per_region,
            "mean_ssim": float(np.mean([r.ssim for r in members])),
            "mean_dice": float(np.mean([r.dice for r in members])),
            "rows": len(members),
        }
    return summary


def write_metrics_csv(rows: list[MetricsRow], path, region_names: list[str]) -> None:
    """RFC 4180 CSV, one row per (subject, source, n, target age)."""
    header = (
        ["subject_id", "source", "n_conditioning_scans", "target_age"]
        + [f"mae_{name}" for name in region_names]
        + ["ssim", "dice"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, dialect="excel")  # CRLF line endings
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [
                    row.subject_id,
                    row.source,
                    row.n_conditioning_scans,
                    format(row.target_age, ".10g"),
                ]
                + [format(row.mae[name], ".10g") for name in region_names]
                + [format(row.ssim, ".10g"), format(row.dice, ".10g")]
            )
