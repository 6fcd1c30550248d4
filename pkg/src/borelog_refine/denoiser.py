"""Interval-wise patch denoising autoencoder.

Overlapping 32x32 patches (stride 8) are denoised by a small convolutional
autoencoder trained with additive Gaussian noise, then merged back with a
floored 2-D Hann window. Noise is train-time only; the inference path is
deterministic. The latent vectors are retained for the clustering baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import substrate as sb
from .grid import coverage_origins
from .intervals import IntervalBundle, denormalize_image

PATCH_SIZE = 32
PATCH_STRIDE = 8
LATENT_DIM = 64
NOISE_SIGMA = 0.05
HANN_FLOOR = 0.05
AE_EPOCHS = {"broad": 60, "heavy": 120}
AE_BATCH = 128
AE_LR = 1e-3


@dataclass
class PatchGrid:
    origins: np.ndarray       # (N, 2) row/col patch anchors
    patches: np.ndarray       # (N, size, size)
    size: int = PATCH_SIZE
    stride: int = PATCH_STRIDE

    @property
    def count(self) -> int:
        return self.origins.shape[0]


@dataclass
class DenoiseOutput:
    x01_hat: np.ndarray       # (H, W) in (0, 1)
    db_hat: np.ndarray        # (H, W) amplitude domain
    latents: np.ndarray       # (N, LATENT_DIM)
    e_db2: np.ndarray         # (H, W) squared reconstruction error
    e_log: np.ndarray         # log(1 + e_db2)
    final_loss: float


def extract_patches(x01: np.ndarray, size: int = PATCH_SIZE,
                    stride: int = PATCH_STRIDE) -> PatchGrid:
    """Row-major overlapping patches; edge patches anchored to the boundary."""
    h, w = x01.shape
    if h < size or w < size:
        raise ValueError(f"interval {h}x{w} smaller than one {size}x{size} patch")
    rows = coverage_origins(h, size, stride)
    cols = coverage_origins(w, size, stride)
    origins = np.array([(r, c) for r in rows for c in cols], dtype=np.int64)
    patches = np.stack([x01[r:r + size, c:c + size] for r, c in origins])
    return PatchGrid(origins=origins, patches=patches, size=size, stride=stride)


def hann_window(size: int = PATCH_SIZE, floor: float = HANN_FLOOR) -> np.ndarray:
    """2-D Hann lifted by the floor so boundary weights never vanish."""
    w1 = np.hanning(size)
    return np.maximum(np.outer(w1, w1), floor)


def hann_merge(reconstructions: np.ndarray, origins: np.ndarray,
               out_shape: tuple, size: int = PATCH_SIZE,
               floor: float = HANN_FLOOR) -> np.ndarray:
    """Weight-normalized overlap average of patch reconstructions."""
    win = hann_window(size, floor)
    num = np.zeros(out_shape, dtype=np.float64)
    den = np.zeros(out_shape, dtype=np.float64)
    for patch, (r, c) in zip(reconstructions, origins):
        num[r:r + size, c:c + size] += patch * win
        den[r:r + size, c:c + size] += win
    return num / den


class AEModel:
    """Conv encoder 1->16->32->64 (stride 2), dense latent 64, mirrored decoder."""

    def __init__(self, seed: int = 0, store: sb.ParameterStore | None = None):
        self.seed = seed
        p = store if store is not None else sb.ParameterStore(seed)
        if store is None:
            p.add("ae/enc1/w", (16, 1, 3, 3), fan_in=9)
            p.add("ae/enc1/b", (16,), init="zeros")
            p.add("ae/enc2/w", (32, 16, 3, 3), fan_in=16 * 9)
            p.add("ae/enc2/b", (32,), init="zeros")
            p.add("ae/enc3/w", (64, 32, 3, 3), fan_in=32 * 9)
            p.add("ae/enc3/b", (64,), init="zeros")
            p.add("ae/lat/w", (1024, LATENT_DIM), fan_in=1024)
            p.add("ae/lat/b", (LATENT_DIM,), init="zeros")
            p.add("ae/dec0/w", (LATENT_DIM, 1024), fan_in=LATENT_DIM)
            p.add("ae/dec0/b", (1024,), init="zeros")
            p.add("ae/dec1/w", (64, 32, 3, 3), fan_in=64 * 9)
            p.add("ae/dec1/b", (32,), init="zeros")
            p.add("ae/dec2/w", (32, 16, 3, 3), fan_in=32 * 9)
            p.add("ae/dec2/b", (16,), init="zeros")
            p.add("ae/dec3/w", (16, 1, 3, 3), fan_in=16 * 9)
            p.add("ae/dec3/b", (1,), init="zeros")
        self.params = p

    def encode(self, patches: np.ndarray) -> sb.Tensor:
        p = self.params
        x = sb.Tensor(patches[:, None, :, :])
        h = sb.relu(sb.conv2d(x, p["ae/enc1/w"], p["ae/enc1/b"], stride=2, name="ae/enc1"))
        h = sb.relu(sb.conv2d(h, p["ae/enc2/w"], p["ae/enc2/b"], stride=2, name="ae/enc2"))
        h = sb.relu(sb.conv2d(h, p["ae/enc3/w"], p["ae/enc3/b"], stride=2, name="ae/enc3"))
        flat = sb.reshape(h, (h.shape[0], 1024))
        return sb.dense(flat, p["ae/lat/w"], p["ae/lat/b"], name="ae/lat")

    def decode(self, latent: sb.Tensor) -> sb.Tensor:
        p = self.params
        h = sb.relu(sb.dense(latent, p["ae/dec0/w"], p["ae/dec0/b"], name="ae/dec0"))
        h = sb.reshape(h, (h.shape[0], 64, 4, 4))
        h = sb.relu(sb.conv_transpose2d(h, p["ae/dec1/w"], p["ae/dec1/b"],
                                        stride=2, name="ae/dec1"))
        h = sb.relu(sb.conv_transpose2d(h, p["ae/dec2/w"], p["ae/dec2/b"],
                                        stride=2, name="ae/dec2"))
        h = sb.conv_transpose2d(h, p["ae/dec3/w"], p["ae/dec3/b"],
                                stride=2, name="ae/dec3")
        return sb.sigmoid(h)

    def reconstruct(self, patches: np.ndarray) -> np.ndarray:
        """Noise-free forward pass in evaluation batches."""
        outs = []
        for lo in range(0, patches.shape[0], 256):
            chunk = patches[lo:lo + 256]
            outs.append(self.decode(self.encode(chunk)).data[:, 0])
        return np.concatenate(outs, axis=0)

    def latents(self, patches: np.ndarray) -> np.ndarray:
        outs = []
        for lo in range(0, patches.shape[0], 256):
            outs.append(self.encode(patches[lo:lo + 256]).data)
        return np.concatenate(outs, axis=0)


def train_ae(patches: np.ndarray, kind: str, seed: int,
             epochs: int | None = None, noise_sigma: float = NOISE_SIGMA,
             lr: float = AE_LR, batch_size: int = AE_BATCH) -> tuple[AEModel, float]:
    """Denoising-AE training: MSE between the clean patch and the
    reconstruction of its noise-corrupted version. Returns (model, final loss).
    """
    if patches.shape[0] < 1:
        raise ValueError("need at least one patch")
    if epochs is None:
        epochs = AE_EPOCHS[kind]
    model = AEModel(seed=seed)
    state = sb.OptimizerState(model.params, lr=lr)
    rng = np.random.Generator(np.random.PCG64(sb.stream_seed(seed, "ae-train")))
    n = patches.shape[0]
    final = np.inf
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            clean = patches[idx]
            noisy = clean + noise_sigma * rng.standard_normal(clean.shape)
            model.params.zero_grad()
            recon = model.decode(model.encode(noisy))
            diff = recon - sb.Tensor(clean[:, None, :, :])
            per_patch = sb.tsum(sb.square(diff), axis=(1, 2, 3))
            loss = sb.tmean(per_patch)
            if not np.isfinite(loss.data):
                raise sb.SubstrateError(
                    f"non-finite AE loss at epoch {epoch} (kind={kind})")
            loss.backward()
            sb.adam_step(model.params, model.params.gradients(), state)
            epoch_loss += float(loss.data) * idx.size
        final = epoch_loss / n
    return model, final


def denoise_interval(bundle: IntervalBundle, model: AEModel,
                     final_loss: float = float("nan")) -> DenoiseOutput:
    """Denoised fields, latents, and reconstruction-error maps for an interval."""
    x01 = bundle.x01()
    grid = extract_patches(x01)
    recons = model.reconstruct(grid.patches)
    x01_hat = hann_merge(recons, grid.origins, x01.shape, grid.size)
    db_hat, _ = denormalize_image(x01_hat, bundle.mu, bundle.sigma)
    e_db2 = (bundle.image_db - db_hat) ** 2
    e_log = np.log1p(e_db2)
    latents = model.latents(grid.patches)
    return DenoiseOutput(x01_hat=x01_hat, db_hat=db_hat, latents=latents,
                         e_db2=e_db2, e_log=e_log, final_loss=final_loss)
