"""KL-regularized autoencoder over 3D volumes, trained with numpy only.

The architecture is deliberately small: an affine encoder/decoder pair by
default (optionally one tanh hidden layer per side), mapping a cubic volume
to a latent grid of 4 channels at 1/8 spatial resolution.  An affine map is
enough to expose linear-in-age structure in the latent space, and its
gradients are derived by hand and checked against finite differences.

Loss: mean absolute error + ssim_weight * (1 - SSIM) + gamma_kl * KL to a
unit Gaussian.  During training the decoder sees a reparameterized sample
from the encoded distribution; at inference only the mean is decoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .ssim import ssim3d, ssim3d_with_grad

LATENT_CHANNELS = 4
DOWNSAMPLE = 8
_LOGVAR_INIT = -6.0


@dataclass(frozen=True)
class AEConfig:
    architecture: str = "affine"  # "affine" | "mlp"
    hidden_width: int = 64  # mlp only
    gamma_kl: float = 1e-5
    ssim_weight: float = 1.0
    ssim_window: int = 7
    dynamic_range: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 12
    batch_size: int = 16
    init: str = "pca"  # "pca" | "random" | "zeros"
    sample_latent: bool = True
    rmsprop_decay: float = 0.99
    seed: int = 0


@dataclass
class EncodedDistribution:
    mean: np.ndarray
    log_variance: np.ndarray


@dataclass
class AELossTerms:
    total: float
    l1: float
    ssim: float  # the (1 - SSIM) term, unweighted
    kl: float  # KL divergence, unweighted


@dataclass
class AEModel:
    config: AEConfig
    input_shape: tuple[int, int, int]
    latent_shape: tuple[int, int, int, int]
    params: dict[str, np.ndarray]
    loss_curve: list[float] = field(default_factory=list)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def n_latent(self) -> int:
        return int(np.prod(self.latent_shape))


def latent_shape_for(input_shape: tuple[int, int, int]) -> tuple[int, int, int, int]:
    for s in input_shape:
        if s % DOWNSAMPLE != 0:
            raise ValueError(
                f"volume dims must be divisible by {DOWNSAMPLE}, got {input_shape}"
            )
    return (LATENT_CHANNELS,) + tuple(s // DOWNSAMPLE for s in input_shape)


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    out = rows.copy()
    for i, row in enumerate(out):
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


def init_model(
    config: AEConfig,
    input_shape: tuple[int, int, int],
    train_volumes: np.ndarray | None = None,
) -> AEModel:
    """Build an untrained model.

    ``init="pca"`` seeds the affine maps with principal components of the
    training volumes (decoder = transpose), which starts training from a
    strong least-squares reconstruction; it requires ``train_volumes`` and
    the affine architecture.
    """
    lat_shape = latent_shape_for(input_shape)
    d = int(np.prod(input_shape))
    n_lat = int(np.prod(lat_shape))
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}

    if config.architecture == "affine":
        if config.init == "zeros":
            w_mean = np.zeros((n_lat, d))
            b_mean = np.zeros(n_lat)
            dec_w = np.zeros((d, n_lat))
            dec_b = np.zeros(d)
            b_logvar = np.zeros(n_lat)
        elif config.init == "random":
            w_mean = rng.standard_normal((n_lat, d)) / np.sqrt(d)
            b_mean = np.zeros(n_lat)
            dec_w = rng.standard_normal((d, n_lat)) / np.sqrt(n_lat)
            dec_b = np.zeros(d)
            b_logvar = np.full(n_lat, _LOGVAR_INIT)
        elif config.init == "pca":
            if train_volumes is None:
                raise ValueError("init='pca' needs training volumes")
            x = np.asarray(train_volumes, dtype=np.float64).reshape(len(train_volumes), d)
            mean = x.mean(axis=0)
            _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
            k = min(vt.shape[0], n_lat)
            comps = np.zeros((n_lat, d))
            comps[:k] = _fix_signs(vt[:k])
            w_mean = comps
            b_mean = -comps @ mean
            dec_w = comps.T
            dec_b = mean
            b_logvar = np.full(n_lat, _LOGVAR_INIT)
        else:
            raise ValueError(f"unknown init {config.init!r}")
        params["enc_w_mean"] = w_mean
        params["enc_b_mean"] = b_mean
        params["enc_w_logvar"] = np.zeros((n_lat, d))
        params["enc_b_logvar"] = b_logvar
        params["dec_w"] = dec_w
        params["dec_b"] = dec_b
    elif config.architecture == "mlp":
        if config.init == "pca":
            raise ValueError("init='pca' is only defined for the affine architecture")
        h = config.hidden_width
        scale = 0.0 if config.init == "zeros" else 1.0
        params["enc_w_hidden"] = scale * rng.standard_normal((h, d)) / np.sqrt(d)
        params["enc_b_hidden"] = np.zeros(h)
        params["enc_w_mean"] = scale * rng.standard_normal((n_lat, h)) / np.sqrt(h)
        params["enc_b_mean"] = np.zeros(n_lat)
        params["enc_w_logvar"] = scale * rng.standard_normal((n_lat, h)) / np.sqrt(h)
        params["enc_b_logvar"] = np.zeros(n_lat) if config.init == "zeros" else np.full(n_lat, _LOGVAR_INIT)
        params["dec_w_hidden"] = scale * rng.standard_normal((h, n_lat)) / np.sqrt(n_lat)
        params["dec_b_hidden"] = np.zeros(h)
        params["dec_w_out"] = scale * rng.standard_normal((d, h)) / np.sqrt(h)
        params["dec_b_out"] = np.zeros(d)
    else:
        raise ValueError(f"unknown architecture {config.architecture!r}")
    return AEModel(config=config, input_shape=tuple(input_shape),
                   latent_shape=lat_shape, params=params)


def _encode_batch(model: AEModel, x_flat: np.ndarray):
    p, cfg = model.params, model.config
    if cfg.architecture == "affine":
        z_mu = x_flat @ p["enc_w_mean"].T + p["enc_b_mean"]
        z_lv = x_flat @ p["enc_w_logvar"].T + p["enc_b_logvar"]
        cache = {}
    else:
        pre = x_flat @ p["enc_w_hidden"].T + p["enc_b_hidden"]
        h = np.tanh(pre)
        z_mu = h @ p["enc_w_mean"].T + p["enc_b_mean"]
        z_lv = h @ p["enc_w_logvar"].T + p["enc_b_logvar"]
        cache = {"enc_h": h}
    return z_mu, z_lv, cache


def _decode_batch(model: AEModel, z: np.ndarray):
    p, cfg = model.params, model.config
    if cfg.architecture == "affine":
        return z @ p["dec_w"].T + p["dec_b"], {}
    pre = z @ p["dec_w_hidden"].T + p["dec_b_hidden"]
    h = np.tanh(pre)
    return h @ p["dec_w_out"].T + p["dec_b_out"], {"dec_h": h}


def encode(model: AEModel, volume: np.ndarray) -> EncodedDistribution:
    """Encode one volume to its latent Gaussian (mean, log variance)."""
    if tuple(volume.shape) != model.input_shape:
        raise ValueError(f"volume shape {volume.shape} != model {model.input_shape}")
    x = np.asarray(volume, dtype=np.float64).reshape(1, -1)
    z_mu, z_lv, _ = _encode_batch(model, x)
    return EncodedDistribution(
        mean=z_mu[0].reshape(model.latent_shape),
        log_variance=z_lv[0].reshape(model.latent_shape),
    )


def encode_mean(model: AEModel, volume: np.ndarray) -> np.ndarray:
    return encode(model, volume).mean


def decode(model: AEModel, latent: np.ndarray) -> np.ndarray:
    """Decode a latent grid to a volume."""
    if tuple(latent.shape) != model.latent_shape:
        raise ValueError(f"latent shape {latent.shape} != model {model.latent_shape}")
    z = np.asarray(latent, dtype=np.float64).reshape(1, -1)
    x_hat, _ = _decode_batch(model, z)
    return x_hat[0].reshape(model.input_shape)


def kl_divergence(mean: np.ndarray, log_variance: np.ndarray) -> float:
    """KL(N(mean, exp(log_variance)) || N(0, I)), summed over elements."""
    mu = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(log_variance, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(lv) - lv - 1.0))


def ae_loss(
    volume: np.ndarray,
    reconstruction: np.ndarray,
    dist: EncodedDistribution,
    config: AEConfig,
) -> AELossTerms:
    """Training loss terms for one volume/reconstruction pair."""
    x = np.asarray(volume, dtype=np.float64)
    x_hat = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if not (np.isfinite(x).all() and np.isfinite(x_hat).all()
            and np.isfinite(dist.mean).all() and np.isfinite(dist.log_variance).all()):
        raise ValueError("non-finite values in loss inputs")
    l1 = float(np.mean(np.abs(x - x_hat)))
    ssim_term = 1.0 - ssim3d(x, x_hat, config.ssim_window, config.dynamic_range)
    kl = kl_divergence(dist.mean, dist.log_variance)
    total = l1 + config.ssim_weight * ssim_term + config.gamma_kl * kl
    return AELossTerms(total=total, l1=l1, ssim=ssim_term, kl=kl)


def loss_and_grads(
    model: AEModel, x_batch: np.ndarray, eps: np.ndarray | None
) -> tuple[AELossTerms, dict[str, np.ndarray]]:
    """Batch loss and parameter gradients.

    ``eps`` is the reparameterization noise, shape (batch, n_latent); pass
    None to decode the mean (also what inference does).  Supplying eps
    explicitly keeps the loss deterministic for gradient checking.
    """
    cfg = model.config
    p = model.params
    b = x_batch.shape[0]
    d = model.n_voxels
    x_flat = np.asarray(x_batch, dtype=np.float64).reshape(b, d)

    z_mu, z_lv, enc_cache = _encode_batch(model, x_flat)
    if eps is not None:
        sigma = np.exp(0.5 * z_lv)
        z = z_mu + sigma * eps
    else:
        z = z_mu
    x_hat, dec_cache = _decode_batch(model, z)

    if not np.isfinite(x_hat).all():
        raise RuntimeError("training diverged: non-finite reconstruction")

    diff = x_hat - x_flat
    l1 = float(np.mean(np.abs(diff)))
    kl_per = 0.5 * np.sum(z_mu**2 + np.exp(z_lv) - z_lv - 1.0, axis=1)
    kl = float(np.mean(kl_per))

    shape3 = model.input_shape
    ssim_sum = 0.0
    d_xhat = np.sign(diff) / (b * d)
    for i in range(b):
        value, grad = ssim3d_with_grad(
            x_flat[i].reshape(shape3), x_hat[i].reshape(shape3),
            cfg.ssim_window, cfg.dynamic_range,
        )
        ssim_sum += 1.0 - value
        d_xhat[i] -= cfg.ssim_weight * grad.ravel() / b
    ssim_term = ssim_sum / b
    total = l1 + cfg.ssim_weight * ssim_term + cfg.gamma_kl * kl

    grads: dict[str, np.ndarray] = {}
    # Decoder backward.
    if cfg.architecture == "affine":
        grads["dec_w"] = d_xhat.T @ z
        grads["dec_b"] = d_xhat.sum(axis=0)
        d_z = d_xhat @ p["dec_w"]
    else:
        h = dec_cache["dec_h"]
        grads["dec_w_out"] = d_xhat.T @ h
        grads["dec_b_out"] = d_xhat.sum(axis=0)
        d_h = (d_xhat @ p["dec_w_out"]) * (1.0 - h * h)
        grads["dec_w_hidden"] = d_h.T @ z
        grads["dec_b_hidden"] = d_h.sum(axis=0)
        d_z = d_h @ p["dec_w_hidden"]

    # Through the reparameterization and KL.
    d_zmu = d_z + cfg.gamma_kl * z_mu / b
    if eps is not None:
        d_zlv = d_z * (0.5 * sigma * eps) + cfg.gamma_kl * 0.5 * (np.exp(z_lv) - 1.0) / b
    else:
        d_zlv = cfg.gamma_kl * 0.5 * (np.exp(z_lv) - 1.0) / b

    # Encoder backward.
    if cfg.architecture == "affine":
        grads["enc_w_mean"] = d_zmu.T @ x_flat
        grads["enc_b_mean"] = d_zmu.sum(axis=0)
        grads["enc_w_logvar"] = d_zlv.T @ x_flat
        grads["enc_b_logvar"] = d_zlv.sum(axis=0)
    else:
        h = enc_cache["enc_h"]
        grads["enc_w_mean"] = d_zmu.T @ h
        grads["enc_b_mean"] = d_zmu.sum(axis=0)
        grads["enc_w_logvar"] = d_zlv.T @ h
        grads["enc_b_logvar"] = d_zlv.sum(axis=0)
        d_h = (d_zmu @ p["enc_w_mean"] + d_zlv @ p["enc_w_logvar"]) * (1.0 - h * h)
        grads["enc_w_hidden"] = d_h.T @ x_flat
        grads["enc_b_hidden"] = d_h.sum(axis=0)

    terms = AELossTerms(total=total, l1=l1, ssim=ssim_term, kl=kl)
    return terms, grads


def train_autoencoder(train_volumes, config: AEConfig) -> AEModel:
    """Train on a stack of volumes (or a Cohort's train split).

    Momentum-free adaptive steps (RMSProp); deterministic given config.seed.
    Raises on divergence.  The returned model records per-epoch mean loss.
    """
    from .phantom import Cohort  # local import to avoid a cycle

    if isinstance(train_volumes, Cohort):
        vols = train_volumes.split("train").volumes()
    else:
        vols = list(train_volumes)
    if not vols:
        raise ValueError("no training volumes")
    x = np.stack([np.asarray(v, dtype=np.float64) for v in vols])
    n = x.shape[0]
    input_shape = x.shape[1:]

    model = init_model(config, input_shape, train_volumes=x)
    n_lat = model.n_latent
    rng = np.random.default_rng(config.seed)
    v_state = {k: np.zeros_like(p) for k, p in model.params.items()}
    decay = config.rmsprop_decay

    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_total = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = x[idx]
            eps = (
                rng.standard_normal((len(idx), n_lat))
                if config.sample_latent
                else None
            )
            terms, grads = loss_and_grads(model, batch, eps)
            if not np.isfinite(terms.total):
                raise RuntimeError("training diverged: non-finite loss")
            for k, g in grads.items():
                v_state[k] = decay * v_state[k] + (1.0 - decay) * g * g
                model.params[k] -= config.learning_rate * g / (np.sqrt(v_state[k]) + 1e-8)
            epoch_total += terms.total
            n_batches += 1
        model.loss_curve.append(epoch_total / n_batches)
    return model


def reconstruct(model: AEModel, volume: np.ndarray) -> np.ndarray:
    """Decode the encoded mean (the inference path)."""
    return decode(model, encode(model, volume).mean)


def save_model(model: AEModel, tensor_path, meta_path) -> None:
    import json
    from pathlib import Path

    from .tensorfile import write_tensors

    write_tensors(tensor_path, model.params)
    meta = {
        "config": asdict(model.config),
        "input_shape": list(model.input_shape),
        "latent_shape": list(model.latent_shape),
        "loss_curve": model.loss_curve,
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(tensor_path, meta_path) -> AEModel:
    import json
    from pathlib import Path

    from .tensorfile import read_tensors

    meta = json.loads(Path(meta_path).read_text())
    params = {k: v.astype(np.float64) for k, v in read_tensors(tensor_path).items()}
    return AEModel(
        config=AEConfig(**meta["config"]),
        input_shape=tuple(meta["input_shape"]),
        latent_shape=tuple(meta["latent_shape"]),
        params=params,
        loss_curve=list(meta["loss_curve"]),
    )
