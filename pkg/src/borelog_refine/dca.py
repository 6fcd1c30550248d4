"""Depth-aware cross-attention refiners: DCA, G-DCA, CG-DCA, and ablations.

Image rows provide azimuthal query tokens; keys and values come from encoded
log features inside a boundary-clipped depth window of radius r around each
row. The attended context enters through a residual LayerNorm block; fusion
with the image features is modulated by a learned sigmoid gate and, in the
confidence-gated variant, by the pseudo-label confidence map broadcast along
the feature dimension. Ablation variants switch these mechanisms off one at
a time without touching parameter names, so shared seeds give bit-identical
initializations across the family.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import substrate as sb
from .intervals import IntervalBundle
from .pseudo import K_CLASSES, PseudoSupervision

DCA_EPOCHS = {"broad": 180, "heavy": 1000}
DCA_LR = 1e-3

# exact variant strings used by the CLI, configs, and reports
VARIANTS = ("dca", "gdca", "cgdca", "cgdca_no_confloss", "cgdca_no_conffusion",
            "cgdca_no_conf_both", "cgdca_r0", "cgdca_no_gate")

# the six targeted-ablation variants, fixed order
ABLATION_VARIANTS = ("cgdca", "cgdca_no_confloss", "cgdca_no_conffusion",
                     "cgdca_no_conf_both", "cgdca_r0", "cgdca_no_gate")


@dataclass
class DCAConfig:
    variant: str = "cgdca"
    log_channels: int = 7
    feat_dim: int = 64            # D; encoder/classifier widths scale from it
    heads: int = 4
    radius: int = 2
    groups: int = 8
    lr: float = DCA_LR
    epochs: dict = field(default_factory=lambda: dict(DCA_EPOCHS))
    # mechanism flags (derived from the variant name via for_variant)
    gated: bool = True            # residual fusion with F_img (False: plain DCA)
    gate_learned: bool = True     # learned sigmoid gate vs all-ones
    conf_fusion: bool = True      # multiply gate by broadcast confidence
    conf_loss: bool = True        # confidence-weighted cross-entropy

    def __post_init__(self):
        if self.feat_dim % self.heads != 0:
            raise ValueError("feat_dim must be divisible by heads")
        if self.feat_dim % self.groups != 0:
            raise ValueError("feat_dim must be divisible by groups")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.feat_dim // self.heads

    @staticmethod
    def for_variant(variant: str, **overrides) -> "DCAConfig":
        flags = {
            "dca": dict(gated=False, gate_learned=False, conf_fusion=False,
                        conf_loss=False),
            "gdca": dict(gated=True, gate_learned=True, conf_fusion=False,
                         conf_loss=False),
            "cgdca": dict(gated=True, gate_learned=True, conf_fusion=True,
                          conf_loss=True),
            "cgdca_no_confloss": dict(gated=True, gate_learned=True,
                                      conf_fusion=True, conf_loss=False),
            "cgdca_no_conffusion": dict(gated=True, gate_learned=True,
                                        conf_fusion=False, conf_loss=True),
            "cgdca_no_conf_both": dict(gated=True, gate_learned=True,
                                       conf_fusion=False, conf_loss=False),
            "cgdca_r0": dict(gated=True, gate_learned=True, conf_fusion=True,
                             conf_loss=True, radius=0),
            "cgdca_no_gate": dict(gated=True, gate_learned=False,
                                  conf_fusion=True, conf_loss=True),
        }
        if variant not in flags:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        kwargs = dict(flags[variant])
        kwargs.update(overrides)
        return DCAConfig(variant=variant, **kwargs)


class DCAModel:
    """One refiner variant: encoders, windowed attention, fusion, classifier."""

    def __init__(self, config: DCAConfig, seed: int = 0,
                 store: sb.ParameterStore | None = None):
        self.config = config
        self.seed = seed
        d = config.feat_dim
        c = config.log_channels
        p = store if store is not None else sb.ParameterStore(seed)
        if store is None:
            widths = (d // 2, d, d)
            cin = 1
            for i, width in enumerate(widths, start=1):
                p.add(f"img/enc{i}/w", (width, cin, 3, 3), fan_in=cin * 9)
                p.add(f"img/enc{i}/b", (width,), init="zeros")
                cin = width
            cin = c
            for i, width in enumerate((d // 2, d), start=1):
                p.add(f"log/enc{i}/w", (width, cin, 3), fan_in=cin * 3)
                p.add(f"log/enc{i}/b", (width,), init="zeros")
                cin = width
            for proj in ("wq", "wk", "wv", "wo"):
                p.add(f"att/{proj}", (d, d), fan_in=d)
            p.add("att/ln/gamma", (d,), init="ones")
            p.add("att/ln/beta", (d,), init="zeros")
            if config.gate_learned:
                p.add("gate/c1/w", (d, 2 * d, 1, 1), fan_in=2 * d)
                p.add("gate/c1/b", (d,), init="zeros")
                p.add("gate/c2/w", (d, d, 1, 1), fan_in=d)
                p.add("gate/c2/b", (d,), init="zeros")
            p.add("fuse/gn/gamma", (d,), init="ones")
            p.add("fuse/gn/beta", (d,), init="zeros")
            p.add("cls/conv1/w", (d, d, 3, 3), fan_in=d * 9)
            p.add("cls/conv1/b", (d,), init="zeros")
            p.add("cls/conv2/w", (d // 2, d, 3, 3), fan_in=d * 9)
            p.add("cls/conv2/b", (d // 2,), init="zeros")
            p.add("cls/out/w", (K_CLASSES, d // 2, 1, 1), fan_in=d // 2)
            p.add("cls/out/b", (K_CLASSES,), init="zeros")
        self.params = p

    # ------------------------------------------------------------------
    # forward stages

    def encode_modalities(self, x01_hat: np.ndarray, logs_aligned: np.ndarray):
        """(H,W) image + (H,C) logs -> F_img tensor (1,D,H,W), F_log (H,D)."""
        p = self.params
        if logs_aligned.shape[1] != self.config.log_channels:
            raise sb.SubstrateError(
                f"log channels {logs_aligned.shape[1]} != configured "
                f"{self.config.log_channels}")
        h = sb.Tensor(x01_hat[None, None])
        for i in range(1, 4):
            h = sb.relu(sb.conv2d(h, p[f"img/enc{i}/w"], p[f"img/enc{i}/b"],
                                  name=f"img/enc{i}"))
        f_img = h  # (1, D, H, W)
        g = sb.Tensor(logs_aligned.T[None])  # (1, C, H)
        for i in range(1, 3):
            g = sb.relu(sb.conv1d(g, p[f"log/enc{i}/w"], p[f"log/enc{i}/b"],
                                  name=f"log/enc{i}"))
        f_log = sb.transpose(sb.reshape(g, g.shape[1:]), (1, 0))  # (H, D)
        return f_img, f_log

    def depth_window_attention(self, f_img: sb.Tensor, f_log: sb.Tensor):
        """Row-wise multi-head attention into the clipped depth window.

        Returns (tokens (H,W,D) after residual LayerNorm, attention weights
        ndarray (H, heads, W, window)).
        """
        cfg = self.config
        p = self.params
        d, heads, dh, r = cfg.feat_dim, cfg.heads, cfg.head_dim, cfg.radius
        _, _, height, width = f_img.shape

        tokens = sb.transpose(sb.reshape(f_img, f_img.shape[1:]), (1, 2, 0))
        flat = sb.reshape(tokens, (height * width, d))
        q_full = sb.reshape(sb.matmul(flat, p["att/wq"]), (height, width, d))
        k_all = sb.matmul(f_log, p["att/wk"])             # (H, D)
        v_all = sb.matmul(f_log, p["att/wv"])             # (H, D)

        offsets = np.arange(-r, r + 1)
        rows = np.arange(height)[:, None] + offsets[None, :]
        mask = (rows >= 0) & (rows < height)              # (H, R)
        idx = np.clip(rows, 0, height - 1).reshape(-1)
        window = offsets.size

        def to_heads(t, length):
            t = sb.reshape(t, (height, length, heads, dh))
            return sb.transpose(t, (0, 2, 1, 3))          # (H, heads, len, dh)

        qh = to_heads(q_full, width)
        kh = to_heads(sb.take(k_all, idx, axis=0), window)
        vh = to_heads(sb.take(v_all, idx, axis=0), window)

        logits = sb.matmul(qh, sb.transpose(kh, (0, 1, 3, 2)))
        logits = sb.mul(logits, 1.0 / np.sqrt(dh))        # (H, heads, W, R)
        alpha = sb.softmax(logits, axis=-1, mask=mask[:, None, None, :])
        ctx = sb.matmul(alpha, vh)                        # (H, heads, W, dh)
        ctx = sb.reshape(sb.transpose(ctx, (0, 2, 1, 3)), (height * width, d))
        attended = sb.reshape(sb.matmul(ctx, p["att/wo"]), (height, width, d))

        fused = sb.layer_norm(sb.add(q_full, attended), p["att/ln/gamma"],
                              p["att/ln/beta"], name="att/ln")
        return fused, alpha.data

    def fuse(self, f_img: sb.Tensor, f_dca_tokens: sb.Tensor,
             confidence: np.ndarray | None):
        """Variant-dependent fusion; returns (Z (1,D,H,W), gate (1,D,H,W) or None)."""
        cfg = self.config
        p = self.params
        height, width, d = f_dca_tokens.shape
        f_dca = sb.reshape(sb.transpose(f_dca_tokens, (2, 0, 1)),
                           (1, d, height, width))
        if not cfg.gated:
            z = sb.group_norm(f_dca, p["fuse/gn/gamma"], p["fuse/gn/beta"],
                              groups=cfg.groups, name="fuse/gn")
            return z, None

        if cfg.gate_learned:
            cat = sb.concat([f_img, f_dca], axis=1)
            hidden = sb.relu(sb.conv2d(cat, p["gate/c1/w"], p["gate/c1/b"],
                                       name="gate/c1"))
            gate = sb.sigmoid(sb.conv2d(hidden, p["gate/c2/w"], p["gate/c2/b"],
                                        name="gate/c2"))
        else:
            gate = None  # all-ones gate drops out of the product

        if cfg.conf_fusion:
            if confidence is None:
                raise sb.SubstrateError(
                    "confidence fusion requested but no confidence map given")
            cbar = confidence[None, None, :, :]
            modulator = sb.mul(gate, cbar) if gate is not None else sb.constant(
                np.broadcast_to(cbar, (1, d, height, width)).copy())
        else:
            modulator = gate  # may be None: plain residual

        corr = sb.mul(modulator, f_dca) if modulator is not None else f_dca
        z = sb.group_norm(sb.add(f_img, corr), p["fuse/gn/gamma"],
                          p["fuse/gn/beta"], groups=cfg.groups, name="fuse/gn")
        return z, gate

    def classify(self, z: sb.Tensor) -> sb.Tensor:
        """Classifier head -> logits (K, H, W)."""
        p = self.params
        h = sb.relu(sb.conv2d(z, p["cls/conv1/w"], p["cls/conv1/b"],
                              name="cls/conv1"))
        h = sb.relu(sb.conv2d(h, p["cls/conv2/w"], p["cls/conv2/b"],
                              name="cls/conv2"))
        h = sb.conv2d(h, p["cls/out/w"], p["cls/out/b"], name="cls/out")
        return sb.reshape(h, h.shape[1:])

    def forward(self, x01_hat: np.ndarray, logs_aligned: np.ndarray,
                confidence: np.ndarray | None):
        """Full pass. Returns (logits (K,H,W), gate tensor or None, alpha)."""
        f_img, f_log = self.encode_modalities(x01_hat, logs_aligned)
        f_dca_tokens, alpha = self.depth_window_attention(f_img, f_log)
        z, gate = self.fuse(f_img, f_dca_tokens,
                            confidence if self.config.conf_fusion else None)
        return self.classify(z), gate, alpha

    def predict(self, x01_hat: np.ndarray, logs_aligned: np.ndarray,
                confidence: np.ndarray | None) -> np.ndarray:
        logits, _, _ = self.forward(x01_hat, logs_aligned, confidence)
        return np.argmax(logits.data, axis=0).astype(np.int32)


def probabilities(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the class axis of (K, H, W) logits."""
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def dca_loss(logits: sb.Tensor, supervision: PseudoSupervision,
             config: DCAConfig) -> sb.Tensor:
    """Plain or confidence-weighted pixelwise cross-entropy per variant."""
    weights = supervision.conf_weights if config.conf_loss else None
    return sb.softmax_cross_entropy(logits, supervision.y_pseudo, weights)


def train_dca(bundle: IntervalBundle, x01_hat: np.ndarray,
              supervision: PseudoSupervision, config: DCAConfig, seed: int,
              epochs: int | None = None):
    """Full-interval training of one variant. Returns (model, pred, loss)."""
    if epochs is None:
        epochs = config.epochs[bundle.kind]
    model = DCAModel(config, seed=seed)
    conf = supervision.confidence
    final = np.inf
    state = sb.OptimizerState(model.params, lr=config.lr)
    for epoch in range(epochs):
        model.params.zero_grad()
        logits, _, _ = model.forward(x01_hat, bundle.logs_aligned, conf)
        loss = dca_loss(logits, supervision, config)
        if not np.isfinite(loss.data):
            raise sb.SubstrateError(
                f"non-finite {config.variant} loss at epoch {epoch}")
        loss.backward()
        sb.adam_step(model.params, model.params.gradients(), state)
        final = float(loss.data)
    pred = model.predict(x01_hat, bundle.logs_aligned, conf)
    return model, pred, final


def gate_maps(model: DCAModel, x01_hat: np.ndarray, logs_aligned: np.ndarray,
              confidence: np.ndarray | None) -> dict:
    """Feature-mean gate magnitude fields in [0, 1].

    Returns {"gate": (H,W)} plus {"effective": gate * C} for the
    confidence-fused variants. Variants without a learned gate error out.
    """
    if not (model.config.gated and model.config.gate_learned):
        raise ValueError(f"gate not present in variant {model.config.variant!r}")
    _, gate, _ = model.forward(x01_hat, logs_aligned, confidence)
    gate_field = gate.data[0].mean(axis=0)
    out = {"gate": gate_field}
    if model.config.conf_fusion:
        out["effective"] = gate_field * confidence
    return out


def run_ablation_matrix(prepared: list, seed: int, epochs: int | None = None,
                        log_channels: int = 7) -> dict:
    """Train the six targeted variants on each prepared interval.

    prepared: list of (bundle, x01_hat, supervision); identical seed and
    schedule across variants. Returns {variant: {interval_key: prediction}}.
    """
    if not prepared:
        raise ValueError("ablation requires at least one prepared interval")
    results: dict[str, dict[str, np.ndarray]] = {v: {} for v in ABLATION_VARIANTS}
    for bundle, x01_hat, supervision in prepared:
        for variant in ABLATION_VARIANTS:
            config = DCAConfig.for_variant(variant, log_channels=log_channels)
            _, pred, _ = train_dca(bundle, x01_hat, supervision, config, seed,
                                   epochs=epochs)
            results[variant][bundle.key] = pred
    return results
