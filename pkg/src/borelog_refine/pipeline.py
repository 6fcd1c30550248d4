"""Stage orchestration: artifacts on disk, resumability, stage contracts.

Every stage writes deterministic bytes (fixed float formatting, sorted JSON
keys) and embeds the config hash + seed, so re-running a stage with
unchanged inputs reproduces byte-identical outputs. A stage whose outputs
already exist under the same config hash is skipped unless forced.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import dca
from . import denoiser as dn
from . import evaluation as ev
from . import intervals as iv
from . import pseudo as ps
from .config import RunConfig
from .substrate import ParameterStore, stream_seed

log = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"


class StageError(RuntimeError):
    """Missing upstream artifacts; the message names the prior command."""


def _require(path: Path, prior_command: str) -> Path:
    if not path.exists():
        raise StageError(
            f"missing artifact {path}; run 'borelog-refine {prior_command}' first")
    return path


class Workspace:
    """Path layout and stamped-artifact helpers for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.hash = cfg.config_hash()

    # -- path helpers ---------------------------------------------------
    def interval_dir(self, key: str) -> Path:
        return self.root / "intervals" / key

    def denoise_dir(self, key: str) -> Path:
        return self.root / "denoise" / key

    def pseudo_dir(self, key: str) -> Path:
        return self.root / "pseudo" / key

    def train_dir(self, key: str) -> Path:
        return self.root / "train" / key

    def ablation_dir(self, key: str) -> Path:
        return self.root / "ablation" / key

    def eval_dir(self) -> Path:
        return self.root / "eval"

    def report_dir(self) -> Path:
        return self.root / "report"

    # -- stamped IO -----------------------------------------------------
    def stamp(self) -> str:
        return f"config_hash={self.hash} seed={self.cfg.seed}"

    def save_grid_csv(self, path: Path, grid: np.ndarray, fmt: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, grid, fmt=fmt, delimiter=",", header=self.stamp())

    def load_grid_csv(self, path: Path, dtype=np.float64) -> np.ndarray:
        return np.loadtxt(path, delimiter=",", comments="#").astype(dtype)

    def save_json(self, path: Path, payload: dict) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = dict(payload)
        payload["config_hash"] = self.hash
        payload["seed"] = self.cfg.seed
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")

    def load_json(self, path: Path) -> dict:
        return json.loads(path.read_text())

    def save_array(self, path: Path, arr: np.ndarray) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, arr)

    def fresh(self, meta_path: Path) -> bool:
        """True when the artifact exists and was produced under this config."""
        if not meta_path.exists():
            return False
        try:
            return self.load_json(meta_path).get("config_hash") == self.hash
        except (json.JSONDecodeError, OSError):
            return False

    def write_stage_manifest(self, stage: str, artifacts: list) -> None:
        lines = [f"# {self.stamp()}", "artifact,config_hash,seed"]
        for a in sorted(str(x) for x in artifacts):
            lines.append(f"{a},{self.hash},{self.cfg.seed}")
        path = self.root / f"manifest_{stage}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# bundles on disk


def save_bundle(ws: Workspace, bundle: iv.IntervalBundle) -> None:
    d = ws.interval_dir(bundle.key)
    ws.save_array(d / "image_db.npy", bundle.image_db)
    ws.save_array(d / "logs_aligned.npy", bundle.logs_aligned)
    ws.save_array(d / "depth_grid.npy", bundle.depth_grid)
    ws.save_json(d / "meta.json", {
        "well_id": bundle.well_id, "start_row": bundle.row_range[0],
        "end_row": bundle.row_range[1], "kind": bundle.kind,
        "mu": bundle.mu, "sigma": bundle.sigma,
        "channels": list(bundle.channels), "n_filled": bundle.n_filled,
    })


def load_bundle(ws: Workspace, key: str) -> iv.IntervalBundle:
    d = _require(ws.interval_dir(key) / "meta.json", "extract").parent
    meta = ws.load_json(d / "meta.json")
    return iv.IntervalBundle(
        well_id=meta["well_id"],
        row_range=(meta["start_row"], meta["end_row"]), kind=meta["kind"],
        image_db=np.load(d / "image_db.npy"),
        logs_aligned=np.load(d / "logs_aligned.npy"),
        depth_grid=np.load(d / "depth_grid.npy"),
        mu=meta["mu"], sigma=meta["sigma"], channels=tuple(meta["channels"]),
        n_filled=meta["n_filled"])


def interval_keys(ws: Workspace) -> list[str]:
    manifest = _require(ws.root / "intervals_manifest.csv", "extract")
    keys = []
    for line in manifest.read_text().splitlines():
        if line.startswith("#") or line.startswith("well_id"):
            continue
        well, start, end, kind = line.split(",")
        keys.append(f"{well}_{start}_{end}")
    return keys


def load_supervision(ws: Workspace, key: str) -> ps.PseudoSupervision:
    d = _require(ws.pseudo_dir(key) / "meta.json", "pseudolabel").parent
    meta = ws.load_json(d / "meta.json")
    ts = ps.ThresholdSet(tuple(meta["thresholds_den"]), source="denoised",
                         degenerate=meta["den_degenerate"])
    return ps.PseudoSupervision(
        y_pseudo=ws.load_grid_csv(d / "pseudo.csv", dtype=np.int32),
        y_ae_otsu=ws.load_grid_csv(d / "ae_otsu.csv", dtype=np.int32),
        vote_counts=np.load(d / "votes.npy"),
        confidence=ws.load_grid_csv(d / "confidence.csv"),
        conf_weights=ws.load_grid_csv(d / "wconf.csv"),
        thresholds_den=ts)


# ---------------------------------------------------------------------------
# stages


def cmd_synth(cfg: RunConfig) -> Path:
    from .synth import SyntheticSpec, write_well
    spec = SyntheticSpec(
        regime=cfg.synth_regime, height=cfg.synth_height, width=cfg.synth_width,
        n_channels=cfg.synth_channels, class_contrast=cfg.synth_contrast,
        noise_level=cfg.synth_noise, log_corr=cfg.synth_corr, seed=cfg.seed,
        well_id=cfg.synth_well)
    well_dir = write_well(spec, cfg.data_root)
    log.info("synthetic well written to %s", well_dir)
    return well_dir


def cmd_extract(cfg: RunConfig, force: bool = False) -> list[str]:
    ws = Workspace(cfg)
    manifest_path = ws.root / "intervals_manifest.csv"
    if not force and ws.fresh(ws.root / "extract_meta.json"):
        log.info("extract: up to date, skipping")
        return interval_keys(ws)
    slice_cfg = cfg.slice_config()
    keys, rows, artifacts = [], [], []
    for well in cfg.wells:
        ds = iv.load_well(Path(cfg.data_root) / well, well_id=well)
        for bundle in iv.extract_intervals(ds, slice_cfg):
            save_bundle(ws, bundle)
            keys.append(bundle.key)
            rows.append(f"{bundle.well_id},{bundle.row_range[0]},"
                        f"{bundle.row_range[1]},{bundle.kind}")
            artifacts.append(ws.interval_dir(bundle.key))
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(
        "\n".join([f"# {ws.stamp()}", "well_id,start_row,end_row,kind"] + rows)
        + "\n")
    ws.save_json(ws.root / "extract_meta.json", {"n_intervals": len(keys)})
    ws.write_stage_manifest("extract", artifacts + [manifest_path])
    log.info("extract: %d intervals", len(keys))
    return keys


def cmd_denoise(cfg: RunConfig, force: bool = False) -> None:
    ws = Workspace(cfg)
    artifacts = []
    for key in interval_keys(ws):
        d = ws.denoise_dir(key)
        artifacts.append(d)
        if not force and ws.fresh(d / "meta.json"):
            continue
        bundle = load_bundle(ws, key)
        grid = dn.extract_patches(bundle.x01())
        epochs = cfg.epochs_for(bundle.kind, dn.AE_EPOCHS)
        seed = stream_seed(cfg.seed, f"ae/{key}")
        model, final_loss = dn.train_ae(grid.patches, bundle.kind, seed,
                                        epochs=epochs)
        out = dn.denoise_interval(bundle, model, final_loss)
        d.mkdir(parents=True, exist_ok=True)
        model.params.save(d / "ae.ckpt",
                          meta={"arch": "patch-ae", "epochs": epochs,
                                "final_loss": final_loss})
        ws.save_array(d / "x01_hat.npy", out.x01_hat)
        ws.save_array(d / "db_hat.npy", out.db_hat)
        ws.save_array(d / "e_db2.npy", out.e_db2)
        ws.save_array(d / "e_log.npy", out.e_log)
        ws.save_array(d / "latents.npy", out.latents)
        ws.save_json(d / "meta.json", {"epochs": epochs,
                                       "final_loss": final_loss})
        log.info("denoise %s: loss %.5f (%d epochs)", key, final_loss, epochs)
    ws.write_stage_manifest("denoise", artifacts)


def cmd_pseudolabel(cfg: RunConfig, force: bool = False) -> None:
    ws = Workspace(cfg)
    artifacts = []
    for key in interval_keys(ws):
        d = ws.pseudo_dir(key)
        artifacts.append(d)
        if not force and ws.fresh(d / "meta.json"):
            continue
        bundle = load_bundle(ws, key)
        db_hat_path = _require(ws.denoise_dir(key) / "db_hat.npy", "denoise")
        db_hat = np.load(db_hat_path)
        sup = ps.build_pseudo_supervision(db_hat)
        ts_raw = ps.multi_otsu(bundle.image_db, source="raw")
        ws.save_grid_csv(d / "pseudo.csv", sup.y_pseudo, "%d")
        ws.save_grid_csv(d / "ae_otsu.csv", sup.y_ae_otsu, "%d")
        ws.save_grid_csv(d / "confidence.csv", sup.confidence, FLOAT_FMT)
        ws.save_grid_csv(d / "wconf.csv", sup.conf_weights, FLOAT_FMT)
        ws.save_array(d / "votes.npy", sup.vote_counts)
        ws.save_json(d / "thresholds.json", {
            "denoised": list(sup.thresholds_den.thresholds),
            "denoised_degenerate": sup.thresholds_den.degenerate,
            "raw": list(ts_raw.thresholds),
            "raw_degenerate": ts_raw.degenerate,
            "conf_floor": sup.conf_floor, "conf_gamma": sup.conf_gamma})
        ws.save_json(d / "meta.json", {
            "thresholds_den": list(sup.thresholds_den.thresholds),
            "den_degenerate": sup.thresholds_den.degenerate})
        log.info("pseudolabel %s", key)
    ws.write_stage_manifest("pseudolabel", artifacts)


def _train_one_method(ws: Workspace, method: str, key: str,
                      bundle: iv.IntervalBundle, sup: ps.PseudoSupervision,
                      x01_hat: np.ndarray, seed: int) -> np.ndarray:
    cfg = ws.cfg
    d = ws.train_dir(key)
    if method == "raw_otsu":
        seg, _ = bl.raw_otsu_baseline(bundle)
        return seg
    if method == "ae_otsu":
        seg, _ = bl.ae_otsu_baseline(np.load(ws.denoise_dir(key) / "db_hat.npy"))
        return seg
    if method == "ae_kmeans":
        latents = np.load(_require(ws.denoise_dir(key) / "latents.npy",
                                   "denoise"))
        grid = dn.extract_patches(bundle.x01())
        desc = bl.latent_descriptors(latents, grid, bundle.image_db)
        labels, _, _, _ = bl.kmeans(desc, seed=cfg.seed)
        seg = bl.project_patch_labels(labels, grid, bundle.image_db.shape)
        return ev.canonical_reorder(seg, bundle.image_db)
    if method in ("image_only", "concat"):
        inputs = bl.refiner_input(x01_hat, bundle, multimodal=method == "concat")
        epochs = cfg.epochs_for(bundle.kind, bl.REFINER_EPOCHS)
        model, pred, final_loss = bl.train_refiner(inputs, sup, bundle.kind,
                                                   seed, epochs=epochs)
        model.params.save(d / f"{method}.ckpt",
                          meta={"arch": "refiner", "method": method,
                                "d_in": inputs.shape[0], "epochs": epochs,
                                "final_loss": final_loss})
        return ev.canonical_reorder(pred, bundle.image_db)
    if method in dca.VARIANTS:
        config = dca.DCAConfig.for_variant(method,
                                           log_channels=len(bundle.channels))
        epochs = cfg.epochs_for(bundle.kind, config.epochs)
        model, pred, final_loss = dca.train_dca(bundle, x01_hat, sup, config,
                                                seed, epochs=epochs)
        model.params.save(d / f"{method}.ckpt",
                          meta={"arch": "dca", "variant": method,
                                "epochs": epochs, "final_loss": final_loss})
        return ev.canonical_reorder(pred, bundle.image_db)
    raise StageError(f"unknown method {method!r}")


def cmd_train(cfg: RunConfig, force: bool = False) -> None:
    ws = Workspace(cfg)
    artifacts = []
    for key in interval_keys(ws):
        d = ws.train_dir(key)
        artifacts.append(d)
        if not force and ws.fresh(d / "meta.json"):
            continue
        bundle = load_bundle(ws, key)
        sup = load_supervision(ws, key)
        x01_hat = np.load(_require(ws.denoise_dir(key) / "x01_hat.npy",
                                   "denoise"))
        seed = stream_seed(cfg.seed, f"train/{key}")
        d.mkdir(parents=True, exist_ok=True)
        for method in cfg.methods:
            seg = _train_one_method(ws, method, key, bundle, sup, x01_hat, seed)
            ws.save_grid_csv(d / f"seg_{method}.csv", seg, "%d")
            log.info("train %s / %s done", key, method)
        ws.save_json(d / "meta.json", {"methods": list(cfg.methods)})
    ws.write_stage_manifest("train", artifacts)


def _references(ws: Workspace, key: str, bundle: iv.IntervalBundle,
                sup: ps.PseudoSupervision) -> dict:
    raw_seg, _ = bl.raw_otsu_baseline(bundle)
    return {"pseudo": sup.y_pseudo, "ae_otsu": sup.y_ae_otsu,
            "raw_otsu": raw_seg}


def cmd_evaluate(cfg: RunConfig, force: bool = False) -> list[ev.IntervalRecord]:
    ws = Workspace(cfg)
    eval_dir = ws.eval_dir()
    records: list[ev.IntervalRecord] = []
    artifacts = [eval_dir]
    for key in interval_keys(ws):
        bundle = load_bundle(ws, key)
        sup = load_supervision(ws, key)
        train_meta = _require(ws.train_dir(key) / "meta.json", "train")
        refs = _references(ws, key, bundle, sup)
        concat_path = ws.train_dir(key) / "seg_concat.csv"
        concat_seg = (ws.load_grid_csv(concat_path, dtype=np.int32)
                      if concat_path.exists() else None)
        for method in cfg.methods:
            seg_path = _require(ws.train_dir(key) / f"seg_{method}.csv", "train")
            seg = ws.load_grid_csv(seg_path, dtype=np.int32)
            rec = ev.evaluate_interval(method, seg, refs, sup.confidence,
                                       bundle.well_id, key, bundle.kind,
                                       concat_seg=concat_seg)
            records.append(rec)
            ws.save_grid_csv(eval_dir / f"confusion_{key}_{method}.csv",
                             rec.confusion, "%d")
    _write_eval_tables(ws, records)
    ws.write_stage_manifest("evaluate", artifacts)
    return records


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _write_eval_tables(ws: Workspace, records: list[ev.IntervalRecord]) -> None:
    eval_dir = ws.eval_dir()
    eval_dir.mkdir(parents=True, exist_ok=True)
    wide = [f"# {ws.stamp()}",
            "well_id,interval,kind,method,acc_vs_pseudo,acc_vs_ae_otsu,"
            "acc_vs_raw_otsu,diag_mass,off_diag_mass,boundary_len,"
            "n_components,changed_frac,low_conf_change_frac,"
            "frac_c0,frac_c1,frac_c2,frac_c3"]
    long_rows = [f"# {ws.stamp()}", "well_id,interval,method,metric,value"]
    for r in records:
        wide.append(",".join([
            r.well_id, r.interval_key, r.kind, r.method,
            _fmt(r.acc_vs_pseudo), _fmt(r.acc_vs_ae_otsu),
            _fmt(r.acc_vs_raw_otsu), _fmt(r.diag_mass), _fmt(r.off_diag_mass),
            str(r.boundary_len), str(r.n_components), _fmt(r.changed_frac),
            _fmt(r.low_conf_change_frac)] + [_fmt(f) for f in r.class_fracs]))
        metrics = {
            "acc_vs_pseudo": r.acc_vs_pseudo, "acc_vs_ae_otsu": r.acc_vs_ae_otsu,
            "acc_vs_raw_otsu": r.acc_vs_raw_otsu, "diag_mass": r.diag_mass,
            "off_diag_mass": r.off_diag_mass, "boundary_len": r.boundary_len,
            "n_components": r.n_components, "changed_frac": r.changed_frac,
            "low_conf_change_frac": r.low_conf_change_frac,
        }
        for name, value in metrics.items():
            long_rows.append(
                f"{r.well_id},{r.interval_key},{r.method},{name},{_fmt(value)}")
    (eval_dir / "records.csv").write_text("\n".join(wide) + "\n")
    (eval_dir / "metrics.csv").write_text("\n".join(long_rows) + "\n")

    summaries = ev.aggregate_wells(records)
    methods = [s.method for s in summaries]
    wins = {}
    for a in methods:
        for b in methods:
            if a < b:
                wa, wb, ties = ev.pairwise_wins(records, a, b)
                wins[f"{a}|{b}"] = [wa, wb, ties]
    ws.save_json(eval_dir / "summary.json", {
        "cross_well": {s.method: {
            "mean": s.mean, "std": s.std, "min": s.min, "max": s.max,
            "range": s.range, "well_means": s.well_means} for s in summaries},
        "pairwise_wins": wins})


def cmd_ablate(cfg: RunConfig, force: bool = False) -> None:
    ws = Workspace(cfg)
    if not cfg.ablation_intervals:
        raise StageError("no ablation_intervals configured")
    keys = interval_keys(ws)
    targets = []
    for well, start, end in cfg.ablation_intervals:
        key = f"{well}_{start}_{end}"
        if key not in keys:
            raise StageError(
                f"ablation interval {key} not extracted; check config")
        targets.append(key)
    rows = [f"# {ws.stamp()}",
            "interval,kind,variant,acc_vs_pseudo,final_loss"]
    artifacts = []
    for key in targets:
        bundle = load_bundle(ws, key)
        sup = load_supervision(ws, key)
        x01_hat = np.load(_require(ws.denoise_dir(key) / "x01_hat.npy",
                                   "denoise"))
        seed = stream_seed(cfg.seed, f"ablate/{key}")
        d = ws.ablation_dir(key)
        artifacts.append(d)
        for variant in dca.ABLATION_VARIANTS:
            config = dca.DCAConfig.for_variant(
                variant, log_channels=len(bundle.channels))
            epochs = cfg.epochs_for(bundle.kind, config.epochs)
            _, pred, final_loss = dca.train_dca(bundle, x01_hat, sup, config,
                                                seed, epochs=epochs)
            ws.save_grid_csv(d / f"seg_{variant}.csv",
                             ev.canonical_reorder(pred, bundle.image_db), "%d")
            acc, _, _ = ev.perm_agreement(sup.y_pseudo, pred)
            rows.append(f"{key},{bundle.kind},{variant},{acc:.6f},"
                        f"{final_loss:.6f}")
            log.info("ablate %s / %s: %.4f", key, variant, acc)
    results = ws.root / "ablation" / "results.csv"
    results.parent.mkdir(parents=True, exist_ok=True)
    results.write_text("\n".join(rows) + "\n")
    ws.write_stage_manifest("ablate", artifacts + [results])
