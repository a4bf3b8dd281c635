"""Variational autoencoder used by guests as a frozen feature extractor."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .nn import (
    Activation,
    AdamState,
    DenseLayer,
    MlpModel,
    ShapeError,
    TrainConfig,
    adam_step,
    build_mlp,
    check_finite,
    dense_forward,
    derive_rng,
    minibatches,
    mlp_backward,
    mse_loss,
    parameter_fingerprint,
)

log = logging.getLogger(__name__)

VAE_MAGIC = b"STFLVAE\x00"
VAE_FORMAT_VERSION = 1

_SEED_INIT = 0x5EED1
_SEED_NOISE = 0x5EED2


@dataclass(frozen=True)
class VaeSizing:
    """Hidden width is five times the input width; latent width is half of it (floored)."""

    input_dim: int

    def __post_init__(self) -> None:
        if self.input_dim < 2:
            raise ValueError("a VAE needs at least 2 input features to have a latent dimension")

    @property
    def hidden(self) -> int:
        return 5 * self.input_dim

    @property
    def latent(self) -> int:
        return self.input_dim // 2


@dataclass
class EpochStats:
    epoch: int
    total: float
    kl: float
    recon: float


@dataclass
class VaeModel:
    encoder: MlpModel
    decoder: MlpModel
    n_z: int
    training_log: List[EpochStats] = field(default_factory=list, compare=False)

    def __post_init__(self) -> None:
        if self.encoder.output_dim != 2 * self.n_z:
            raise ShapeError(f"encoder emits {self.encoder.output_dim} values, expected {2 * self.n_z}")
        if self.decoder.input_dim != self.n_z:
            raise ShapeError(f"decoder takes {self.decoder.input_dim} inputs, expected {self.n_z}")
        if self.decoder.output_dim != self.encoder.input_dim:
            raise ShapeError("decoder output width must equal encoder input width")

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @classmethod
    def initialize(cls, sizing: VaeSizing, rng: np.random.Generator) -> "VaeModel":
        d, h, k = sizing.input_dim, sizing.hidden, sizing.latent
        enc = build_mlp([d, h, 2 * k], [Activation.TANH, Activation.IDENTITY], rng)
        dec = build_mlp([k, h, d], [Activation.TANH, Activation.IDENTITY], rng)
        return cls(enc, dec, k)

    def parameters(self) -> List[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def set_parameters(self, params: List[np.ndarray]) -> None:
        n = 2 * len(self.encoder.layers)
        self.encoder.set_parameters(params[:n])
        self.decoder.set_parameters(params[n:])

    def fingerprint(self) -> str:
        return parameter_fingerprint(self.parameters())

    def copy(self) -> "VaeModel":
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.n_z, list(self.training_log))


def encode(model: VaeModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    out, _ = dense_forward(model.encoder, x)
    return out[:, :model.n_z], out[:, model.n_z:]


def reparameterize(mu: np.ndarray, logvar: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeError(f"mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape} differ")
    return mu + np.exp(0.5 * logvar) * noise


def kl_to_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over every entry."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0))


@dataclass
class VaeLoss:
    total: float
    kl: float
    recon: float
    gradients: List[np.ndarray]


def vae_loss(model: VaeModel, x: np.ndarray, noise: np.ndarray) -> VaeLoss:
    """Negative ELBO per row: KL term plus squared reconstruction error.

    Both terms are summed over their dimensions and averaged over the batch.
    Gradients follow :meth:`VaeModel.parameters` order.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    enc_out, enc_cache = dense_forward(model.encoder, x)
    k = model.n_z
    mu, logvar = enc_out[:, :k], enc_out[:, k:]
    if noise.shape != mu.shape:
        raise ShapeError(f"noise shape {noise.shape} != latent shape {mu.shape}")
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    x_hat, dec_cache = dense_forward(model.decoder, z)

    kl = kl_to_standard_normal(mu, logvar) / n
    recon, g_xhat = mse_loss(x_hat, x)

    dec_grads, g_z = mlp_backward(model.decoder, dec_cache, g_xhat)
    g_mu = g_z + mu / n
    g_logvar = g_z * 0.5 * std * noise + 0.5 * (np.exp(logvar) - 1.0) / n
    enc_grads, _ = mlp_backward(model.encoder, enc_cache, np.hstack([g_mu, g_logvar]))
    return VaeLoss(kl + recon, kl, recon, enc_grads + dec_grads)


def initial_vae(sizing: VaeSizing, seed: int) -> VaeModel:
    """The untrained model ``train_vae`` starts from for ``seed``."""
    return VaeModel.initialize(sizing, derive_rng(seed, _SEED_INIT))


def train_vae(data: np.ndarray, sizing: VaeSizing, config: TrainConfig) -> VaeModel:
    """Fit a VAE with Adam; per-epoch averages land in ``model.training_log``."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("train_vae needs a non-empty 2-D array")
    if data.shape[1] != sizing.input_dim:
        raise ShapeError(f"data has {data.shape[1]} columns, sizing says {sizing.input_dim}")
    model = initial_vae(sizing, config.rng_seed)
    state = AdamState.zeros_like(model.parameters())
    n = data.shape[0]
    for epoch in range(config.epochs):
        noise_rng = derive_rng(config.rng_seed, _SEED_NOISE, epoch)
        sums = np.zeros(3)
        for idx in minibatches(n, config.batch_size, config.rng_seed, epoch):
            noise = noise_rng.standard_normal((len(idx), model.n_z))
            res = vae_loss(model, data[idx], noise)
            if not np.isfinite(res.total):
                raise FloatingPointError(
                    f"VAE loss became non-finite at epoch {epoch + 1} "
                    f"(kl={res.kl}, recon={res.recon})"
                )
            new, _ = adam_step(model.parameters(), res.gradients, state, config.learning_rate)
            model.set_parameters(new)
            sums += len(idx) * np.array([res.total, res.kl, res.recon])
        total, kl, recon = sums / n
        model.training_log.append(EpochStats(epoch + 1, total, kl, recon))
        log.debug("vae epoch %d: total=%.5f kl=%.5f recon=%.5f", epoch + 1, total, kl, recon)
    for p in model.parameters():
        check_finite("VAE parameter", p)
    return model


@dataclass
class GaussianityReport:
    mean: np.ndarray
    variance: np.ndarray
    statistic: float


def latent_gaussianity(model: VaeModel, data: np.ndarray, seed: int = 0) -> GaussianityReport:
    """How close sampled latents are to N(0, I).

    Latents ``mu + sigma * noise`` are drawn for every row; a diagonal Gaussian
    is fitted per dimension and its KL divergence to the standard normal is
    the aggregate statistic.
    """
    mu, logvar = encode(model, data)
    noise = np.random.default_rng(seed).standard_normal(mu.shape)
    z = reparameterize(mu, logvar, noise)
    return gaussianity_of_samples(z)


def gaussianity_of_samples(z: np.ndarray) -> GaussianityReport:
    m = z.mean(axis=0)
    v = z.var(axis=0)
    stat = 0.5 * float(np.sum(m * m + v - np.log(v) - 1.0))
    return GaussianityReport(m, v, stat)


# -- persistence -----------------------------------------------------------

def _write_mlp_header(buf: io.BytesIO, mlp: MlpModel) -> None:
    buf.write(struct.pack("<I", len(mlp.layers)))
    for layer in mlp.layers:
        buf.write(struct.pack("<IIB", layer.n_out, layer.n_in, int(layer.activation)))


def _read_mlp_header(buf: io.BytesIO) -> List[Tuple[int, int, Activation]]:
    (count,) = struct.unpack("<I", buf.read(4))
    dims = []
    for _ in range(count):
        n_out, n_in, act = struct.unpack("<IIB", buf.read(9))
        dims.append((n_out, n_in, Activation(act)))
    return dims


def save_vae(model: VaeModel, path: Union[str, Path]) -> str:
    """Write ``model`` to ``path``; returns the parameter fingerprint."""
    buf = io.BytesIO()
    buf.write(VAE_MAGIC)
    buf.write(struct.pack("<HI", VAE_FORMAT_VERSION, model.n_z))
    _write_mlp_header(buf, model.encoder)
    _write_mlp_header(buf, model.decoder)
    flat = np.concatenate([p.ravel() for p in model.parameters()]).astype("<f8")
    buf.write(struct.pack("<Q", flat.size))
    buf.write(flat.tobytes())
    fp = model.fingerprint()
    buf.write(bytes.fromhex(fp))
    Path(path).write_bytes(buf.getvalue())
    return fp


def load_vae(path: Union[str, Path]) -> VaeModel:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(len(VAE_MAGIC)) != VAE_MAGIC:
        raise ValueError(f"{path}: not a VAE model file")
    version, n_z = struct.unpack("<HI", buf.read(6))
    if version != VAE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    enc_dims = _read_mlp_header(buf)
    dec_dims = _read_mlp_header(buf)
    (count,) = struct.unpack("<Q", buf.read(8))
    flat = np.frombuffer(buf.read(8 * count), dtype="<f8").astype(np.float64)
    stored_fp = buf.read(32).hex()

    pos = 0

    def take(dims: List[Tuple[int, int, Activation]]) -> MlpModel:
        nonlocal pos
        layers = []
        for n_out, n_in, act in dims:
            w = flat[pos:pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            b = flat[pos:pos + n_out]
            pos += n_out
            layers.append(DenseLayer(w.copy(), b.copy(), act))
        return MlpModel(layers)

    model = VaeModel(take(enc_dims), take(dec_dims), n_z)
    if pos != count:
        raise ValueError(f"{path}: parameter count mismatch")
    if model.fingerprint() != stored_fp:
        raise ValueError(f"{path}: fingerprint check failed, file is corrupt")
    return model
