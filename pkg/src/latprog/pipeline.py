"""Stage orchestration over a single output directory.

Every stage writes its artifacts plus a JSON run record under runs/ with
the resolved config hash, the seed, input file hashes, and wall time.
A lock file serializes pipelines per output directory.  Metric CSVs are
deterministic functions of (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation, phantom
from .autoencoder import decode, encode, load_model, save_model, train_autoencoder
from .config import SEED_OFFSETS, RunConfig
from .diffusion import NoiseSchedule, load_denoiser, save_denoiser, train_diffusion_prior
from .errors import MissingDependencyError
from .evaluation import MetricsRow, write_metrics_csv
from .gaussian_prior import load_gaussian_prior, save_gaussian_prior, train_gaussian_prior
from .manifest import canonical_json, load_cohort, save_cohort
from .progression import (
    GaussianBelief,
    LatentSequence,
    ObservationNoise,
    TrainingTriplet,
    compute_beta,
    estimate_obs_noise,
    extrapolate,
    resolve_beta,
)
from .tensorfile import read_tensor, read_tensors, write_tensors

STAGES = (
    "generate-cohort",
    "train-ae",
    "encode",
    "fit-betas",
    "fit-global-prior",
    "fit-gaussian-prior",
    "fit-diffusion-prior",
    "predict",
    "evaluate",
    "analyze-beta",
)


class OutputLock:
    """One pipeline process at a time per output directory."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if it is stale"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(out: Path, rel: str, stage: str) -> Path:
    path = out / rel
    if not path.exists():
        raise MissingDependencyError(stage)
    return path


def _write_record(out: Path, stage: str, cfg: RunConfig, inputs: dict[str, Path],
                  outputs: list[str], wall_time: float) -> None:
    runs = out / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    record = {
        "stage": stage,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "wall_time_s": round(wall_time, 3),
        "inputs": {rel: _sha256(p) for rel, p in sorted(inputs.items())},
        "outputs": sorted(outputs),
    }
    (runs / f"{stage}.json").write_text(canonical_json(record))


# ---------------------------------------------------------------- stages


def stage_generate_cohort(cfg: RunConfig, out: Path) -> list[str]:
    cp = cfg.cohort
    spec = phantom.default_spec(grid_size=cp.grid_size, noise_sigma=cp.noise_sigma)
    cohort = phantom.generate_cohort(
        spec,
        cp.n_subjects,
        scans_per_subject=cp.scans_per_subject,
        age_spacing=cp.age_spacing,
        baseline_age_range=cp.baseline_age_range,
        diagnosis_mix=cp.diagnosis_mix,
        split_fractions=cp.split_fractions,
        seed=cfg.seed + SEED_OFFSETS["cohort"],
    )
    cohort_id = f"cohort-{cp.n_subjects}x{cp.grid_size}-seed{cfg.seed}"
    save_cohort(cohort, out / "cohort", cohort_id)
    return ["cohort/manifest.json"]


def stage_train_ae(cfg: RunConfig, out: Path) -> list[str]:
    _require(out, "cohort/manifest.json", "generate-cohort")
    cohort = load_cohort(out / "cohort")
    model = train_autoencoder(cohort.split("train").volumes(), cfg.autoencoder)
    (out / "ae").mkdir(parents=True, exist_ok=True)
    save_model(model, out / "ae" / "model.mrxt", out / "ae" / "model.json")
    return ["ae/model.mrxt", "ae/model.json"]


def _load_latents(out: Path, stage_needed: str = "encode"):
    _require(out, "latents/latents.mrxt", stage_needed)
    tensors = read_tensors(out / "latents" / "latents.mrxt")
    meta = json.loads((out / "latents" / "latents.json").read_text())
    return tensors, meta


def _sequences_from_latents(tensors, meta, split=None) -> list[LatentSequence]:
    sequences = []
    for sid in sorted(meta["subjects"]):
        info = meta["subjects"][sid]
        if split is not None and info["split"] != split:
            continue
        ages = np.array(info["ages"], dtype=np.float64)
        lat = np.stack(
            [tensors[f"{sid}/{i}"].astype(np.float64) for i in range(len(ages))]
        )
        sequences.append(LatentSequence(subject_id=sid, ages=ages, latents=lat))
    return sequences


def stage_encode(cfg: RunConfig, out: Path) -> list[str]:
    _require(out, "ae/model.mrxt", "train-ae")
    _require(out, "cohort/manifest.json", "generate-cohort")
    model = load_model(out / "ae" / "model.mrxt", out / "ae" / "model.json")
    cohort = load_cohort(out / "cohort")
    named: dict[str, np.ndarray] = {}
    subjects_meta = {}
    for subject in cohort.subjects:
        for idx, scan in enumerate(subject.scans):
            named[f"{subject.subject_id}/{idx}"] = encode(model, scan.volume).mean
        subjects_meta[subject.subject_id] = {
            "split": subject.split,
            "diagnosis": subject.diagnosis,
            "ages": list(subject.ages()),
        }
    (out / "latents").mkdir(parents=True, exist_ok=True)
    write_tensors(out / "latents" / "latents.mrxt", named)
    meta = {"latent_shape": list(model.latent_shape), "subjects": subjects_meta}
    (out / "latents" / "latents.json").write_text(canonical_json(meta))
    return ["latents/latents.mrxt", "latents/latents.json"]


def stage_fit_betas(cfg: RunConfig, out: Path) -> list[str]:
    tensors, meta = _load_latents(out)
    betas: dict[str, np.ndarray] = {}
    info_out = {}
    for seq in _sequences_from_latents(tensors, meta):
        if len(seq.ages) < 2:
            continue
        betas[seq.subject_id] = compute_beta(list(seq.latents), seq.ages)
        sub = meta["subjects"][seq.subject_id]
        info_out[seq.subject_id] = {
            "split": sub["split"],
            "diagnosis": sub["diagnosis"],
            "first_age": float(seq.ages.min()),
            "n_scans": int(len(seq.ages)),
        }
    if not betas:
        raise ValueError("no subject has two or more scans")
    (out / "betas").mkdir(parents=True, exist_ok=True)
    write_tensors(out / "betas" / "betas.mrxt", betas)
    (out / "betas" / "betas.json").write_text(canonical_json(info_out))
    return ["betas/betas.mrxt", "betas/betas.json"]


def _load_triplets(out: Path, split: str = "train"):
    """Triplets and sequences assembled from the stored artifacts."""
    _require(out, "betas/betas.mrxt", "fit-betas")
    tensors, meta = _load_latents(out)
    beta_tensors = read_tensors(out / "betas" / "betas.mrxt")
    sequences = [
        s for s in _sequences_from_latents(tensors, meta, split=split)
        if s.subject_id in beta_tensors
    ]
    triplets = []
    for seq in sequences:
        beta = beta_tensors[seq.subject_id].astype(np.float64)
        for age, latent in zip(seq.ages, seq.latents):
            triplets.append(
                TrainingTriplet(
                    subject_id=seq.subject_id, latent=latent, age=float(age), beta=beta
                )
            )
    return triplets, sequences


def stage_fit_global_prior(cfg: RunConfig, out: Path) -> list[str]:
    triplets, sequences = _load_triplets(out)
    if len(triplets) < 2:
        raise ValueError("need at least two training triplets")
    betas = np.stack([t.beta for t in triplets])
    prior = GaussianBelief(mean=betas.mean(axis=0), variance=betas.var(axis=0))
    noise = estimate_obs_noise(triplets, sequences)
    (out / "priors").mkdir(parents=True, exist_ok=True)
    write_tensors(
        out / "priors" / "global.mrxt", {"mean": prior.mean, "variance": prior.variance}
    )
    (out / "priors" / "global.json").write_text(
        canonical_json(
            {
                "n_triplets": len(triplets),
                "n_subjects": len(sequences),
                "split": "train",
            }
        )
    )
    write_tensors(out / "priors" / "obs_noise.mrxt", {"variance": noise.variance})
    (out / "priors" / "obs_noise.json").write_text(
        canonical_json({"n_subjects": len(sequences), "split": "train"})
    )
    return [
        "priors/global.mrxt",
        "priors/global.json",
        "priors/obs_noise.mrxt",
        "priors/obs_noise.json",
    ]


def stage_fit_gaussian_prior(cfg: RunConfig, out: Path) -> list[str]:
    triplets, _ = _load_triplets(out)
    net = train_gaussian_prior(triplets, cfg.gaussian_prior)
    (out / "priors").mkdir(parents=True, exist_ok=True)
    save_gaussian_prior(
        net, out / "priors" / "gaussian_net.mrxt", out / "priors" / "gaussian_net.json"
    )
    return ["priors/gaussian_net.mrxt", "priors/gaussian_net.json"]


def stage_fit_diffusion_prior(cfg: RunConfig, out: Path) -> list[str]:
    triplets, _ = _load_triplets(out)
    schedule = NoiseSchedule.linear(
        cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end
    )
    denoiser = train_diffusion_prior(triplets, schedule, cfg.diffusion)
    (out / "priors").mkdir(parents=True, exist_ok=True)
    save_denoiser(
        denoiser, out / "priors" / "diffusion.mrxt", out / "priors" / "diffusion.json"
    )
    return ["priors/diffusion.mrxt", "priors/diffusion.json"]


def _load_beliefs(out: Path, sources: tuple[str, ...], cfg: RunConfig) -> dict:
    """Belief-source keyword arguments for resolve_beta, per configured sources."""
    kwargs: dict = {}
    if "global_prior" in sources or "posterior" in sources:
        _require(out, "priors/global.mrxt", "fit-global-prior")
        tensors = read_tensors(out / "priors" / "global.mrxt")
        kwargs["global_prior"] = GaussianBelief(
            mean=tensors["mean"].astype(np.float64),
            variance=tensors["variance"].astype(np.float64),
        )
        noise = read_tensors(out / "priors" / "obs_noise.mrxt")
        kwargs["obs_noise"] = ObservationNoise(
            variance=noise["variance"].astype(np.float64)
        )
    if "gaussian_net" in sources:
        _require(out, "priors/gaussian_net.mrxt", "fit-gaussian-prior")
        kwargs["gaussian_net"] = load_gaussian_prior(
            out / "priors" / "gaussian_net.mrxt", out / "priors" / "gaussian_net.json"
        )
    if "diffusion" in sources:
        _require(out, "priors/diffusion.mrxt", "fit-diffusion-prior")
        kwargs["denoiser"] = load_denoiser(
            out / "priors" / "diffusion.mrxt", out / "priors" / "diffusion.json"
        )
        kwargs["schedule"] = NoiseSchedule.linear(
            cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end
        )
        kwargs["k_samples"] = cfg.diffusion.k_samples
    return kwargs


def _test_prediction_cases(tensors, meta):
    """(subject_id, conditioning (latent, age) list, target age) per test subject."""
    cases = []
    for seq in _sequences_from_latents(tensors, meta, split="test"):
        if len(seq.ages) < 2:
            continue
        scans = [(seq.latents[i], float(seq.ages[i])) for i in range(len(seq.ages))]
        cases.append((seq.subject_id, scans[:-1], scans[-1][1]))
    return cases


def stage_predict(cfg: RunConfig, out: Path) -> list[str]:
    _require(out, "ae/model.mrxt", "train-ae")
    model = load_model(out / "ae" / "model.mrxt", out / "ae" / "model.json")
    tensors, meta = _load_latents(out)
    sources = cfg.evaluation.predict_sources
    beliefs = _load_beliefs(out, sources, cfg)
    sampling_seed = cfg.seed + SEED_OFFSETS["sampling"]
    outputs = []
    index = {}
    for case_idx, (sid, cond, target_age) in enumerate(_test_prediction_cases(tensors, meta)):
        entry = {"target_age": target_age, "conditioning_ages": [a for _, a in cond],
                 "sources": {}}
        for source in sources:
            if source == "regression" and len(cond) < 2:
                continue
            kw = dict(beliefs)
            if source == "diffusion":
                kw["seed"] = sampling_seed + case_idx
            beta = resolve_beta(cond, source, **kw)
            z_star = extrapolate(cond[-1][0], cond[-1][1], beta, target_age)
            rel = f"predictions/{source}/{sid}.mrxt"
            (out / "predictions" / source).mkdir(parents=True, exist_ok=True)
            from .tensorfile import write_tensor

            write_tensor(out / rel, decode(model, z_star))
            entry["sources"][source] = rel
            outputs.append(rel)
        index[sid] = entry
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "predictions" / "predictions.json").write_text(canonical_json(index))
    outputs.append("predictions/predictions.json")
    return outputs


def stage_evaluate(cfg: RunConfig, out: Path) -> list[str]:
    _require(out, "ae/model.mrxt", "train-ae")
    _require(out, "cohort/manifest.json", "generate-cohort")
    model = load_model(out / "ae" / "model.mrxt", out / "ae" / "model.json")
    cohort = load_cohort(out / "cohort")
    spec = cohort.spec
    tensors, meta = _load_latents(out)
    sources = cfg.evaluation.predict_sources
    beliefs = _load_beliefs(out, sources, cfg)
    sampling_seed = cfg.seed + SEED_OFFSETS["sampling"]
    subjects = {s.subject_id: s for s in cohort.subjects}
    region_names = [r.name for r in spec.regions]
    (out / "metrics").mkdir(parents=True, exist_ok=True)

    rows: list[MetricsRow] = []
    from .ssim import ssim3d

    for case_idx, (sid, cond, target_age) in enumerate(_test_prediction_cases(tensors, meta)):
        subject = subjects[sid]
        target_idx = int(np.argmin(np.abs(np.array(subject.ages()) - target_age)))
        actual_vol = subject.scans[target_idx].volume
        seg_actual = phantom.segment_oracle(spec, subject.rate_multipliers, target_age)
        vols_actual = evaluation.region_volumes(seg_actual, spec)
        first_seg = phantom.segment_oracle(
            spec, subject.rate_multipliers, subject.ages()[0]
        )
        tbv_first = evaluation.region_volumes(first_seg, spec).tbv
        for source in sources:
            if source == "regression" and len(cond) < 2:
                continue
            kw = dict(beliefs)
            if source == "diffusion":
                kw["seed"] = sampling_seed + case_idx
            beta = resolve_beta(cond, source, **kw)
            z_star = extrapolate(cond[-1][0], cond[-1][1], beta, target_age)
            pred_vol = decode(model, z_star)
            seg_pred = phantom.segment_by_intensity(pred_vol, spec)
            vols_pred = evaluation.region_volumes(seg_pred, spec)
            mae_ids = evaluation.mae_tbv(vols_pred, vols_actual, tbv_first)
            rows.append(
                MetricsRow(
                    subject_id=sid,
                    source=source,
                    n_conditioning_scans=len(cond),
                    target_age=target_age,
                    mae={spec.region_by_id(r).name: v for r, v in mae_ids.items()},
                    ssim=float(ssim3d(actual_vol, pred_vol)),
                    dice=float(evaluation.generalized_dice(seg_actual, seg_pred)),
                )
            )
    write_metrics_csv(rows, out / "metrics" / "rows.csv", region_names)
    summary: dict = {"holdout": evaluation.summarize_rows(rows)}
    outputs = ["metrics/rows.csv", "metrics/summary.json"]

    if "global_prior" in beliefs:
        test_cohort = cohort.split("test")
        try:
            ms_rows, ms_summary = evaluation.multiscan_curve(
                model,
                test_cohort,
                beliefs["global_prior"],
                beliefs["obs_noise"],
                anchor_year=cfg.evaluation.anchor_year,
                lag_years=cfg.evaluation.lag_years,
                min_span_years=cfg.evaluation.min_span_years,
                include_regression=cfg.evaluation.include_regression,
            )
            write_metrics_csv(ms_rows, out / "metrics" / "multiscan.csv", region_names)
            summary["multiscan"] = ms_summary
            outputs.append("metrics/multiscan.csv")
        except ValueError:
            summary["multiscan"] = "skipped: no eligible subjects"

    interp_case = next(iter(_test_prediction_cases(tensors, meta)), None)
    if interp_case is not None:
        sid, cond, target_age = interp_case
        seq_lat = [tensors[f"{sid}/{i}"].astype(np.float64)
                   for i in range(len(meta["subjects"][sid]["ages"]))]
        report = evaluation.interpolation_linearity(
            model, seq_lat[-1], seq_lat[0], spec, cfg.evaluation.n_alphas
        )
        import csv as _csv

        with open(out / "metrics" / "interpolation.csv", "w", newline="") as fh:
            writer = _csv.writer(fh, dialect="excel")
            writer.writerow(["alpha", "region", "count"])
            for name in region_names:
                for alpha, count in zip(report.alphas, report.counts[name]):
                    writer.writerow(
                        [format(alpha, ".10g"), name, format(count, ".10g")]
                    )
        summary["interpolation"] = {
            "subject_id": sid,
            "r2": report.r2,
            "max_chord_dev": report.max_chord_dev,
        }
        outputs.append("metrics/interpolation.csv")

    collinearity = {}
    for seq in _sequences_from_latents(tensors, meta, split="test"):
        if len(seq.ages) >= 3:
            collinearity[seq.subject_id] = evaluation.latent_collinearity(
                list(seq.latents)
            )
    if collinearity:
        import csv as _csv

        with open(out / "metrics" / "collinearity.csv", "w", newline="") as fh:
            writer = _csv.writer(fh, dialect="excel")
            writer.writerow(["subject_id", "first_pc_ratio"])
            for sid in sorted(collinearity):
                writer.writerow([sid, format(collinearity[sid], ".10g")])
        summary["collinearity"] = {
            "mean": float(np.mean(list(collinearity.values()))),
            "min": float(np.min(list(collinearity.values()))),
            "subjects": len(collinearity),
        }
        outputs.append("metrics/collinearity.csv")

    (out / "metrics" / "summary.json").write_text(canonical_json(summary))
    return outputs


def stage_analyze_beta(cfg: RunConfig, out: Path) -> list[str]:
    _require(out, "betas/betas.mrxt", "fit-betas")
    beta_tensors = read_tensors(out / "betas" / "betas.mrxt")
    info = json.loads((out / "betas" / "betas.json").read_text())
    entries = [
        (
            beta_tensors[sid].astype(np.float64),
            info[sid]["diagnosis"],
            info[sid]["first_age"],
        )
        for sid in sorted(beta_tensors)
    ]
    table = evaluation.beta_norm_analysis(
        entries, bin_width=cfg.evaluation.bin_width, bin_start=cfg.evaluation.bin_start
    )
    (out / "analysis").mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out / "analysis" / "beta_norms.csv", "w", newline="") as fh:
        writer = _csv.writer(fh, dialect="excel")
        writer.writerow(["diagnosis", "age_bin", "mean_l1", "count", "se"])
        for diag in sorted(table.overall):
            cell = table.overall[diag]
            writer.writerow(
                [diag, "all", format(cell.mean, ".10g"), cell.count, format(cell.se, ".10g")]
            )
        for (diag, label) in sorted(table.cells):
            cell = table.cells[(diag, label)]
            writer.writerow(
                [diag, label, format(cell.mean, ".10g"), cell.count, format(cell.se, ".10g")]
            )
    return ["analysis/beta_norms.csv"]


_STAGE_FUNCS = {
    "generate-cohort": stage_generate_cohort,
    "train-ae": stage_train_ae,
    "encode": stage_encode,
    "fit-betas": stage_fit_betas,
    "fit-global-prior": stage_fit_global_prior,
    "fit-gaussian-prior": stage_fit_gaussian_prior,
    "fit-diffusion-prior": stage_fit_diffusion_prior,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
    "analyze-beta": stage_analyze_beta,
}

_STAGE_INPUTS = {
    "generate-cohort": [],
    "train-ae": ["cohort/manifest.json"],
    "encode": ["cohort/manifest.json", "ae/model.mrxt"],
    "fit-betas": ["latents/latents.mrxt"],
    "fit-global-prior": ["latents/latents.mrxt", "betas/betas.mrxt"],
    "fit-gaussian-prior": ["latents/latents.mrxt", "betas/betas.mrxt"],
    "fit-diffusion-prior": ["latents/latents.mrxt", "betas/betas.mrxt"],
    "predict": ["ae/model.mrxt", "latents/latents.mrxt"],
    "evaluate": ["ae/model.mrxt", "cohort/manifest.json", "latents/latents.mrxt"],
    "analyze-beta": ["betas/betas.mrxt", "betas/betas.json"],
}


def run_stage(stage: str, cfg: RunConfig, out_dir) -> list[str]:
    """Run one pipeline stage under the output-directory lock."""
    if stage not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; one of {', '.join(STAGES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        inputs = {
            rel: out / rel for rel in _STAGE_INPUTS[stage] if (out / rel).exists()
        }
        start = time.monotonic()
        outputs = _STAGE_FUNCS[stage](cfg, out)
        _write_record(out, stage, cfg, inputs, outputs, time.monotonic() - start)
    return outputs
