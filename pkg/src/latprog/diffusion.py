"""Denoising-diffusion prior over beta with ancestral sampling.

A shallow conditional denoiser is trained to predict the noise injected
into standardized beta targets; sampling runs the standard reverse chain
and averages K independent draws.  The chain operates in a standardized
target space (shift/scale estimated from the training triplets) so the
unit-Gaussian start matches the target scale; raw callables bypass the
standardization, which lets closed-form denoisers drive the exact chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .gaussian_prior import normalize_age
from .progression import TrainingTriplet

_SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variances; index 0 is the identity step by convention."""

    betas: np.ndarray  # (T+1,), betas[0] = 0
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, timesteps: int = 500, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        if timesteps < 1:
            raise ValueError("invalid schedule: need at least one step")
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, timesteps)])
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        sched = cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)
        sched.validate()
        return sched

    @property
    def timesteps(self) -> int:
        return len(self.betas) - 1

    def validate(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2 or b[0] != 0.0:
            raise ValueError("invalid schedule: betas must be 1D with betas[0] = 0")
        steps = b[1:]
        if np.any(steps <= 0.0) or np.any(steps >= 1.0):
            raise ValueError("invalid schedule: step betas must lie in (0, 1)")
        if np.any(np.diff(steps) < 0):
            raise ValueError("invalid schedule: betas must be non-decreasing")
        if not np.allclose(self.alphas, 1.0 - b):
            raise ValueError("invalid schedule: alphas inconsistent with betas")
        if not np.allclose(self.alpha_bars, np.cumprod(self.alphas)):
            raise ValueError("invalid schedule: alpha_bars inconsistent")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("invalid schedule: alpha_bars must strictly decrease")


def forward_noise(schedule: NoiseSchedule, beta, t: int, eps) -> np.ndarray:
    """Noised target at step t: sqrt(abar_t) * beta + sqrt(1 - abar_t) * eps."""
    abar = schedule.alpha_bars[t]
    return np.sqrt(abar) * np.asarray(beta, dtype=np.float64) + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=np.float64)


def timestep_embedding(t, timesteps: int, width: int = 16) -> np.ndarray:
    """Sinusoidal features of t/T at geometrically spaced frequencies."""
    if width % 2 != 0:
        raise ValueError("embedding width must be even")
    x = np.asarray(t, dtype=np.float64) / timesteps
    k = np.arange(width // 2)
    angles = x[..., None] * np.pi * (2.0**k)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass(frozen=True)
class DiffusionConfig:
    hidden_width: int = 128
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 32
    ema_decay: float = 0.99
    k_samples: int = 5
    embed_width: int = 16
    rmsprop_decay: float = 0.99
    seed: int = 0


@dataclass
class DiffusionDenoiser:
    config: DiffusionConfig
    latent_shape: tuple[int, ...]
    beta_shape: tuple[int, ...]
    params: dict[str, np.ndarray]
    ema_params: dict[str, np.ndarray]
    target_shift: np.ndarray  # elementwise mean of training betas
    target_scale: np.ndarray  # elementwise std, floored
    timesteps: int
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    loss_curve: list[float] = field(default_factory=list)


def _init_denoiser(
    config: DiffusionConfig,
    latent_shape: tuple[int, ...],
    beta_shape: tuple[int, ...],
    shift: np.ndarray,
    scale: np.ndarray,
    timesteps: int,
) -> DiffusionDenoiser:
    n_beta = int(np.prod(beta_shape))
    d_in = n_beta + int(np.prod(latent_shape)) + 1 + config.embed_width
    h = config.hidden_width
    rng = np.random.default_rng(config.seed)
    # Zero output head: the untrained denoiser predicts zero noise.
    params = {
        "w_hidden": rng.standard_normal((h, d_in)) / np.sqrt(d_in),
        "b_hidden": np.zeros(h),
        "w_out": np.zeros((n_beta, h)),
        "b_out": np.zeros(n_beta),
    }
    return DiffusionDenoiser(
        config=config,
        latent_shape=tuple(latent_shape),
        beta_shape=tuple(beta_shape),
        params=params,
        ema_params={k: v.copy() for k, v in params.items()},
        target_shift=shift.astype(np.float64).ravel(),
        target_scale=scale.astype(np.float64).ravel(),
        timesteps=timesteps,
        opt_state={k: np.zeros_like(v) for k, v in params.items()},
    )


def _denoiser_features(
    denoiser: DiffusionDenoiser, x_std: np.ndarray, latents: np.ndarray,
    ages: np.ndarray, t: np.ndarray
) -> np.ndarray:
    b = x_std.shape[0]
    emb = timestep_embedding(t, denoiser.timesteps, denoiser.config.embed_width)
    return np.concatenate(
        [
            x_std.reshape(b, -1),
            latents.reshape(b, -1),
            normalize_age(ages).reshape(b, 1),
            emb.reshape(b, -1),
        ],
        axis=1,
    )


def _net_forward(params: dict[str, np.ndarray], x: np.ndarray):
    h = np.tanh(x @ params["w_hidden"].T + params["b_hidden"])
    return h @ params["w_out"].T + params["b_out"], h


def predict_noise(
    denoiser: DiffusionDenoiser, x_std, latent, age, t, use_ema: bool = False
) -> np.ndarray:
    """epsilon_theta for a batch of standardized noised targets."""
    x_std = np.asarray(x_std, dtype=np.float64)
    squeeze = x_std.ndim == 1
    if squeeze:
        x_std = x_std[None]
        latent = np.asarray(latent, dtype=np.float64)[None]
        age = np.array([age])
        t = np.array([t])
    feats = _denoiser_features(
        denoiser, x_std, np.asarray(latent, dtype=np.float64),
        np.asarray(age, dtype=np.float64), np.asarray(t),
    )
    params = denoiser.ema_params if use_ema else denoiser.params
    out, _ = _net_forward(params, feats)
    return out[0] if squeeze else out


def loss_and_grads(
    denoiser: DiffusionDenoiser,
    x_std: np.ndarray,
    latents: np.ndarray,
    ages: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """MSE between injected and predicted noise, with parameter gradients.

    All stochastic quantities (noised inputs, timesteps, noise targets) are
    passed in explicitly so the loss is a deterministic function of the
    parameters; finite-difference checks rely on that.
    """
    b = x_std.shape[0]
    feats = _denoiser_features(denoiser, x_std, latents, ages, t)
    eps_flat = np.asarray(eps, dtype=np.float64).reshape(b, -1)
    pred, h = _net_forward(denoiser.params, feats)
    if not np.isfinite(pred).all():
        raise RuntimeError("training diverged: non-finite denoiser output")
    resid = pred - eps_flat
    loss = float(np.mean(resid * resid))
    d_out = 2.0 * resid / resid.size
    grads = {
        "w_out": d_out.T @ h,
        "b_out": d_out.sum(axis=0),
    }
    d_h = (d_out @ denoiser.params["w_out"]) * (1.0 - h * h)
    grads["w_hidden"] = d_h.T @ feats
    grads["b_hidden"] = d_h.sum(axis=0)
    return loss, grads


def _apply_step(denoiser: DiffusionDenoiser, grads: dict[str, np.ndarray]) -> None:
    cfg = denoiser.config
    for k, g in grads.items():
        denoiser.opt_state[k] = cfg.rmsprop_decay * denoiser.opt_state[k] + (1.0 - cfg.rmsprop_decay) * g * g
        denoiser.params[k] -= cfg.learning_rate * g / (np.sqrt(denoiser.opt_state[k]) + 1e-8)


def ema_update(denoiser: DiffusionDenoiser) -> None:
    d = denoiser.config.ema_decay
    for k, v in denoiser.params.items():
        denoiser.ema_params[k] = d * denoiser.ema_params[k] + (1.0 - d) * v


def standardize_target(denoiser: DiffusionDenoiser, beta) -> np.ndarray:
    flat = np.asarray(beta, dtype=np.float64).reshape(-1)
    return (flat - denoiser.target_shift) / denoiser.target_scale


def destandardize_target(denoiser: DiffusionDenoiser, x_std) -> np.ndarray:
    flat = np.asarray(x_std, dtype=np.float64).reshape(-1)
    return (flat * denoiser.target_scale + denoiser.target_shift).reshape(denoiser.beta_shape)


def diffusion_train_step(
    denoiser, schedule: NoiseSchedule, target_beta, condition, seed: int
) -> float:
    """One noise-prediction step on a single target.

    Draw order from ``default_rng(seed)``: one uniform timestep in [1, T],
    then one standard-normal grid.  For a trainable denoiser this applies
    one optimizer step and one EMA update; a plain callable (x, z, a, t)
    only has its loss evaluated.
    """
    schedule.validate()
    z_cond, age = condition
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, schedule.timesteps + 1))
    if isinstance(denoiser, DiffusionDenoiser):
        if schedule.timesteps != denoiser.timesteps:
            raise ValueError("schedule length does not match the denoiser")
        target = standardize_target(denoiser, target_beta)
        eps = rng.standard_normal(target.shape)
        noised = forward_noise(schedule, target, t, eps)
        loss, grads = loss_and_grads(
            denoiser,
            noised[None],
            np.asarray(z_cond, dtype=np.float64)[None],
            np.array([age], dtype=np.float64),
            np.array([t]),
            eps[None],
        )
        if not np.isfinite(loss):
            raise RuntimeError("training diverged: non-finite loss")
        _apply_step(denoiser, grads)
        ema_update(denoiser)
        return loss
    target = np.asarray(target_beta, dtype=np.float64)
    eps = rng.standard_normal(target.shape)
    noised = forward_noise(schedule, target, t, eps)
    pred = np.asarray(denoiser(noised, z_cond, age, t), dtype=np.float64)
    return float(np.mean((eps - pred) ** 2))


def train_diffusion_prior(
    triplets: list[TrainingTriplet], schedule: NoiseSchedule, config: DiffusionConfig
) -> DiffusionDenoiser:
    """Fit the conditional denoiser on (latent, age, beta) triplets."""
    schedule.validate()
    if not triplets:
        raise ValueError("no training triplets")
    latents = np.stack([np.asarray(t.latent, dtype=np.float64) for t in triplets])
    ages = np.array([t.age for t in triplets], dtype=np.float64)
    betas = np.stack([np.asarray(t.beta, dtype=np.float64) for t in triplets])
    beta_flat = betas.reshape(len(triplets), -1)
    shift = beta_flat.mean(axis=0)
    scale = np.maximum(beta_flat.std(axis=0), _SCALE_FLOOR)

    denoiser = _init_denoiser(
        config, latents.shape[1:], betas.shape[1:], shift, scale, schedule.timesteps
    )
    targets = (beta_flat - shift) / scale
    rng = np.random.default_rng(config.seed)
    n = len(triplets)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            t = rng.integers(1, schedule.timesteps + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), targets.shape[1]))
            abar = schedule.alpha_bars[t][:, None]
            noised = np.sqrt(abar) * targets[idx] + np.sqrt(1.0 - abar) * eps
            loss, grads = loss_and_grads(denoiser, noised, latents[idx], ages[idx], t, eps)
            if not np.isfinite(loss):
                raise RuntimeError("training diverged: non-finite loss")
            _apply_step(denoiser, grads)
            ema_update(denoiser)
            epoch_loss += loss
            n_batches += 1
        denoiser.loss_curve.append(epoch_loss / n_batches)
    return denoiser


def ancestral_sample(
    denoiser,
    schedule: NoiseSchedule,
    condition,
    seed: int,
    shape: tuple[int, ...] | None = None,
    sample_noise: bool = True,
) -> np.ndarray:
    """Run the reverse chain from pure noise; deterministic given seed.

    Draw order from ``default_rng(seed)``: the start state, then one noise
    grid per step from T down to 2 (the final step adds no noise).  With
    ``sample_noise=False`` only the start state is drawn.  A trainable
    denoiser runs in its standardized target space using EMA weights and
    the output is destandardized; a plain callable (x, z, a, t) runs the
    chain as-is.
    """
    schedule.validate()
    z_cond, age = condition
    trained = isinstance(denoiser, DiffusionDenoiser)
    if trained:
        if schedule.timesteps != denoiser.timesteps:
            raise ValueError("schedule length does not match the denoiser")
        chain_shape: tuple[int, ...] = (int(np.prod(denoiser.beta_shape)),)
    elif shape is not None:
        chain_shape = tuple(shape)
    else:
        chain_shape = np.asarray(z_cond).shape

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(chain_shape)
    alphas, abars = schedule.alphas, schedule.alpha_bars
    for t in range(schedule.timesteps, 0, -1):
        if trained:
            eps_hat = predict_noise(denoiser, x, z_cond, age, t, use_ema=True)
        else:
            eps_hat = np.asarray(denoiser(x, z_cond, age, t), dtype=np.float64)
        a_t, ab_t = alphas[t], abars[t]
        x = x / np.sqrt(a_t) - (1.0 - a_t) / np.sqrt(a_t * (1.0 - ab_t)) * eps_hat
        if t > 1 and sample_noise:
            var = (1.0 - abars[t - 1]) / (1.0 - ab_t) * (1.0 - a_t)
            x = x + np.sqrt(var) * rng.standard_normal(chain_shape)
    if trained:
        return destandardize_target(denoiser, x)
    return x


def sample_beta_averaged(
    denoiser, schedule: NoiseSchedule, condition, k: int = 5, seed: int = 0
) -> np.ndarray:
    """Elementwise mean of k ancestral samples with seeds seed .. seed+k-1."""
    if k < 1:
        raise ValueError("k must be at least 1")
    samples = [
        ancestral_sample(denoiser, schedule, condition, seed=seed + i) for i in range(k)
    ]
    return np.mean(samples, axis=0)


def save_denoiser(denoiser: DiffusionDenoiser, tensor_path, meta_path) -> None:
    import json
    from pathlib import Path

    from .tensorfile import write_tensors

    named = {f"param/{k}": v for k, v in denoiser.params.items()}
    named.update({f"ema/{k}": v for k, v in denoiser.ema_params.items()})
    named["target_shift"] = denoiser.target_shift
    named["target_scale"] = denoiser.target_scale
    write_tensors(tensor_path, named)
    meta = {
        "config": asdict(denoiser.config),
        "latent_shape": list(denoiser.latent_shape),
        "beta_shape": list(denoiser.beta_shape),
        "timesteps": denoiser.timesteps,
        "loss_curve": denoiser.loss_curve,
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_denoiser(tensor_path, meta_path) -> DiffusionDenoiser:
    import json
    from pathlib import Path

    from .tensorfile import read_tensors

    meta = json.loads(Path(meta_path).read_text())
    named = {k: v.astype(np.float64) for k, v in read_tensors(tensor_path).items()}
    params = {k[len("param/"):]: v for k, v in named.items() if k.startswith("param/")}
    ema = {k[len("ema/"):]: v for k, v in named.items() if k.startswith("ema/")}
    return DiffusionDenoiser(
        config=DiffusionConfig(**meta["config"]),
        latent_shape=tuple(meta["latent_shape"]),
        beta_shape=tuple(meta["beta_shape"]),
        params=params,
        ema_params=ema,
        target_shift=named["target_shift"],
        target_scale=named["target_scale"],
        timesteps=int(meta["timesteps"]),
        opt_state={k: np.zeros_like(v) for k, v in params.items()},
        loss_curve=list(meta["loss_curve"]),
    )
