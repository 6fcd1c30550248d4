"""Reference segmenters: raw/denoised Otsu, latent K-means, conv refiners.

The image-only and concat refiners share one shallow convolutional trunk
(3x3 convs + ReLU, 1x1 classifier) trained on full intervals against the
pseudo-labels with plain cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import substrate as sb
from .denoiser import DenoiseOutput, PatchGrid, hann_window
from .intervals import IntervalBundle, replicate_logs
from .pseudo import K_CLASSES, PseudoSupervision, ThresholdSet, multi_otsu, quantize

REFINER_EPOCHS = {"broad": 80, "heavy": 140}
REFINER_LR = 1e-3
KMEANS_RESTARTS = 10
KMEANS_SEED = 42
KMEANS_MAX_ITER = 300


def raw_otsu_baseline(bundle: IntervalBundle) -> tuple[np.ndarray, ThresholdSet]:
    """Global Multi-Otsu quantization of the raw amplitude image."""
    ts = multi_otsu(bundle.image_db, source="raw")
    return quantize(bundle.image_db, ts), ts


def ae_otsu_baseline(denoised_db: np.ndarray) -> tuple[np.ndarray, ThresholdSet]:
    """Global Multi-Otsu quantization of the denoised amplitude field."""
    ts = multi_otsu(denoised_db, source="denoised")
    return quantize(denoised_db, ts), ts


# ---------------------------------------------------------------------------
# K-means on latent descriptors


def kmeans(x: np.ndarray, k: int = K_CLASSES, n_init: int = KMEANS_RESTARTS,
           seed: int = KMEANS_SEED, max_iter: int = KMEANS_MAX_ITER):
    """Lloyd iterations with seeded distinct-point init per restart.

    An empty cluster grabs the point farthest from its assigned centroid
    (skipped when every point already sits on its centroid). Returns
    (labels, centroids, inertia, history) of the minimum-inertia restart,
    ties broken by restart index; history holds each restart's per-iteration
    objective (non-increasing absent empty-cluster repairs).
    """
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    best = None
    histories = []
    for restart in range(n_init):
        rng = np.random.Generator(np.random.PCG64(
            sb.stream_seed(seed, f"kmeans-restart-{restart}")))
        centroids = x[rng.choice(n, size=k, replace=False)].copy()
        labels = np.full(n, -1, dtype=np.int64)
        history = []
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            closest = d2[np.arange(n), new_labels]
            for cluster in range(k):
                if not np.any(new_labels == cluster):
                    far = int(np.argmax(closest))
                    if closest[far] <= 0.0:
                        continue  # all points coincide with centroids
                    centroids[cluster] = x[far]
                    new_labels[far] = cluster
                    closest[far] = 0.0
            history.append(float(closest.sum()))
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for cluster in range(k):
                members = labels == cluster
                if members.any():
                    centroids[cluster] = x[members].mean(axis=0)
        histories.append(history)
        inertia = history[-1]
        if best is None or inertia < best[0]:
            best = (inertia, labels.copy(), centroids.copy())
    return best[1], best[2], best[0], histories


def latent_descriptors(latents: np.ndarray, grid: PatchGrid,
                       image_db: np.ndarray) -> np.ndarray:
    """AE latent (64) + mean raw-amplitude patch value (1), standardized."""
    means = np.array([image_db[r:r + grid.size, c:c + grid.size].mean()
                      for r, c in grid.origins])
    desc = np.concatenate([latents, means[:, None]], axis=1)
    mu = desc.mean(axis=0)
    sd = desc.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (desc - mu) / sd


def project_patch_labels(labels: np.ndarray, grid: PatchGrid,
                         out_shape: tuple) -> np.ndarray:
    """Patch labels to pixels by per-class Hann-weight accumulation + argmax."""
    win = hann_window(grid.size)
    acc = np.zeros(out_shape + (K_CLASSES,), dtype=np.float64)
    for label, (r, c) in zip(labels, grid.origins):
        acc[r:r + grid.size, c:c + grid.size, label] += win
    return np.argmax(acc, axis=2).astype(np.int32)


def ae_kmeans_baseline(denoise_out: DenoiseOutput, grid: PatchGrid,
                       bundle: IntervalBundle,
                       seed: int = KMEANS_SEED) -> np.ndarray:
    """Cluster standardized latent descriptors, project clusters to pixels."""
    desc = latent_descriptors(denoise_out.latents, grid, bundle.image_db)
    labels, _, _, _ = kmeans(desc, seed=seed)
    return project_patch_labels(labels, grid, bundle.image_db.shape)


# ---------------------------------------------------------------------------
# shallow convolutional refiner


@dataclass
class RefinerSpec:
    d_in: int                      # 1 (image-only) or 1 + C (concat)
    widths: tuple = (32, 64, 64)
    epochs: dict | None = None
    lr: float = REFINER_LR


class RefinerModel:
    """d_in -> 32 -> 64 -> 64 (3x3 + ReLU) -> 1x1 classifier to K logits."""

    def __init__(self, spec: RefinerSpec, seed: int = 0,
                 store: sb.ParameterStore | None = None):
        self.spec = spec
        self.seed = seed
        p = store if store is not None else sb.ParameterStore(seed)
        if store is None:
            cin = spec.d_in
            for i, width in enumerate(spec.widths, start=1):
                p.add(f"ref/conv{i}/w", (width, cin, 3, 3), fan_in=cin * 9)
                p.add(f"ref/conv{i}/b", (width,), init="zeros")
                cin = width
            p.add("ref/cls/w", (K_CLASSES, cin, 1, 1), fan_in=cin)
            p.add("ref/cls/b", (K_CLASSES,), init="zeros")
        self.params = p

    def logits(self, x: np.ndarray) -> sb.Tensor:
        """x: (d_in, H, W) -> logits tensor (K, H, W)."""
        p = self.params
        h = sb.Tensor(x[None])
        for i in range(1, len(self.spec.widths) + 1):
            h = sb.relu(sb.conv2d(h, p[f"ref/conv{i}/w"], p[f"ref/conv{i}/b"],
                                  name=f"ref/conv{i}"))
        h = sb.conv2d(h, p["ref/cls/w"], p["ref/cls/b"], name="ref/cls")
        return sb.reshape(h, h.shape[1:])

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel argmax of the softmax (ties to the lower class)."""
        return np.argmax(self.logits(x).data, axis=0).astype(np.int32)


def refiner_input(x01_hat: np.ndarray, bundle: IntervalBundle,
                  multimodal: bool) -> np.ndarray:
    """U_img = denoised image alone; U_mm adds azimuth-replicated logs."""
    image = x01_hat[None]
    if not multimodal:
        return image
    reps = replicate_logs(bundle.logs_aligned, bundle.width)
    return np.concatenate([image, reps], axis=0)


def train_refiner(inputs: np.ndarray, supervision: PseudoSupervision,
                  kind: str, seed: int, epochs: int | None = None,
                  lr: float = REFINER_LR):
    """Full-interval cross-entropy training. Returns (model, prediction, loss)."""
    spec = RefinerSpec(d_in=inputs.shape[0])
    if epochs is None:
        epochs = REFINER_EPOCHS[kind]
    model = RefinerModel(spec, seed=seed)
    state = sb.OptimizerState(model.params, lr=lr)
    labels = supervision.y_pseudo
    final = np.inf
    for epoch in range(epochs):
        model.params.zero_grad()
        logits = model.logits(inputs)
        loss = sb.softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss.data):
            raise sb.SubstrateError(f"non-finite refiner loss at epoch {epoch}")
        loss.backward()
        sb.adam_step(model.params, model.params.gradients(), state)
        final = float(loss.data)
    return model, model.predict(inputs), final
