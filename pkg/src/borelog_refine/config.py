"""Run configuration: plain-text key=value files, validation, hashing.

Format: one ``key = value`` per line, '#' starts a comment, blank lines
ignored. Unknown keys are rejected so typos fail loudly. The config hash
is a sha256 over the canonical sorted key=value serialization and is
embedded into every emitted artifact.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

from .dca import VARIANTS
from .intervals import CHANNEL_ORDER, SliceConfig

BASELINE_METHODS = ("raw_otsu", "ae_otsu", "ae_kmeans", "image_only", "concat")
ALL_METHODS = BASELINE_METHODS + VARIANTS

DEFAULT_METHODS = ("raw_otsu", "ae_otsu", "ae_kmeans", "image_only", "concat",
                   "dca", "gdca", "cgdca")

_KNOWN_KEYS = {
    "data_root", "wells", "out_dir", "seed", "methods", "channels",
    "slice_height", "broad_step", "min_valid_height", "heavy",
    "epochs_override", "ablation_intervals",
    "synth_regime", "synth_height", "synth_width", "synth_channels",
    "synth_contrast", "synth_noise", "synth_corr", "synth_well",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: str = ""
    wells: tuple = ()
    out_dir: str = "runs/out"
    seed: int = 42
    methods: tuple = DEFAULT_METHODS
    channels: tuple = CHANNEL_ORDER
    slice_height: int = 600
    broad_step: int = 12000
    min_valid_height: int = 300
    heavy: tuple = ()                 # (well, start, end) triples
    epochs_override: tuple | None = None  # (broad, heavy) replacement
    ablation_intervals: tuple = ()    # (well, start, end) triples
    # synthetic-well generation keys
    synth_regime: str = "banded"
    synth_height: int = 600
    synth_width: int = 144
    synth_channels: int = 7
    synth_contrast: float = 6.0
    synth_noise: float = 3.0
    synth_corr: float = 0.8
    synth_well: str = "synthwell"
    raw_items: dict = dc_field(default_factory=dict)

    def slice_config(self) -> SliceConfig:
        return SliceConfig(slice_height=self.slice_height,
                           broad_step=self.broad_step,
                           min_valid_height=self.min_valid_height,
                           seed=self.seed, heavy_intervals=self.heavy,
                           channels=self.channels)

    def epochs_for(self, kind: str, default_schedule: dict) -> int:
        if self.epochs_override is not None:
            return self.epochs_override[0 if kind == "broad" else 1]
        return default_schedule[kind]

    def canonical_text(self) -> str:
        lines = [f"{k} = {self.raw_items[k]}" for k in sorted(self.raw_items)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def validate(self) -> None:
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ConfigError(
                    f"unknown method {m!r}; registered: {ALL_METHODS}")
        for c in self.channels:
            if c not in CHANNEL_ORDER:
                raise ConfigError(f"unknown channel {c!r}")
        if self.epochs_override is not None:
            b, h = self.epochs_override
            if b < 1 or h < 1:
                raise ConfigError("epochs_override values must be >= 1")


def _parse_triples(text: str) -> tuple:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(
                f"expected well:start:end, got {part!r}")
        out.append((bits[0], int(bits[1]), int(bits[2])))
    return tuple(out)


def parse_epochs_override(text: str) -> tuple:
    """'30' applies to both kinds; '30/60' is broad/heavy."""
    bits = text.split("/")
    if len(bits) == 1:
        return (int(bits[0]), int(bits[0]))
    if len(bits) == 2:
        return (int(bits[0]), int(bits[1]))
    raise ConfigError(f"bad epochs override {text!r}; use N or BROAD/HEAVY")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    items: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        items[key] = value
    if overrides:
        items.update({k: str(v) for k, v in overrides.items() if v is not None})
    return config_from_items(items)


def config_from_items(items: dict) -> RunConfig:
    cfg = RunConfig(raw_items=dict(items))
    for key, value in items.items():
        if key == "data_root":
            cfg = replace(cfg, data_root=value)
        elif key == "wells":
            cfg = replace(cfg, wells=tuple(
                w.strip() for w in value.split(",") if w.strip()))
        elif key == "out_dir":
            cfg = replace(cfg, out_dir=value)
        elif key == "seed":
            cfg = replace(cfg, seed=int(value))
        elif key == "methods":
            cfg = replace(cfg, methods=tuple(
                m.strip() for m in value.split(",") if m.strip()))
        elif key == "channels":
            cfg = replace(cfg, channels=tuple(
                c.strip() for c in value.split(",") if c.strip()))
        elif key == "slice_height":
            cfg = replace(cfg, slice_height=int(value))
        elif key == "broad_step":
            cfg = replace(cfg, broad_step=int(value))
        elif key == "min_valid_height":
            cfg = replace(cfg, min_valid_height=int(value))
        elif key == "heavy":
            cfg = replace(cfg, heavy=_parse_triples(value))
        elif key == "epochs_override":
            cfg = replace(cfg, epochs_override=parse_epochs_override(value))
        elif key == "ablation_intervals":
            cfg = replace(cfg, ablation_intervals=_parse_triples(value))
        elif key == "synth_regime":
            cfg = replace(cfg, synth_regime=value)
        elif key == "synth_height":
            cfg = replace(cfg, synth_height=int(value))
        elif key == "synth_width":
            cfg = replace(cfg, synth_width=int(value))
        elif key == "synth_channels":
            cfg = replace(cfg, synth_channels=int(value))
        elif key == "synth_contrast":
            cfg = replace(cfg, synth_contrast=float(value))
        elif key == "synth_noise":
            cfg = replace(cfg, synth_noise=float(value))
        elif key == "synth_corr":
            cfg = replace(cfg, synth_corr=float(value))
        elif key == "synth_well":
            cfg = replace(cfg, synth_well=value)
    cfg = replace(cfg, raw_items=dict(items))
    if not cfg.data_root:
        env_root = os.environ.get("BORELOG_DATA_ROOT", "")
        cfg = replace(cfg, data_root=env_root)
    cfg.validate()
    return cfg
