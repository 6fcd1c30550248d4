"""Summary tables and raster plots from evaluation artifacts.

cross_well.csv mirrors the benchmark ranking table (method by mean/std/
min/max/range over wells); ablation.csv mirrors the targeted-ablation
summary (variant by overall/broad/heavy means, delta vs the full model,
pairwise full-model wins). Plots are deliberately minimal per-class
rasters with a colorbar.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import BoundaryNorm, ListedColormap

from . import dca
from . import evaluation as ev
from .config import RunConfig
from .pipeline import (StageError, Workspace, _require, interval_keys,
                       load_bundle, load_supervision)

log = logging.getLogger(__name__)

_CLASS_COLORS = ListedColormap(["#26456e", "#4a8fb8", "#e8b04c", "#b8432f"])
_CLASS_NORM = BoundaryNorm([-0.5, 0.5, 1.5, 2.5, 3.5], 4)


def _check_stamp(path: Path, ws: Workspace, force: bool) -> None:
    first = path.read_text().splitlines()[0]
    if f"config_hash={ws.hash}" not in first and not force:
        raise StageError(
            f"{path} was produced under a different config "
            f"({first.strip()}); re-run upstream stages or pass --force")


def _read_records(ws: Workspace, force: bool) -> list[dict]:
    path = _require(ws.eval_dir() / "records.csv", "evaluate")
    _check_stamp(path, ws, force)
    lines = [l for l in path.read_text().splitlines() if l and not
             l.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def write_cross_well_table(ws: Workspace, rows: list[dict]) -> Path:
    records = [
        ev.IntervalRecord(
            well_id=r["well_id"], interval_key=r["interval"], kind=r["kind"],
            method=r["method"], acc_vs_pseudo=float(r["acc_vs_pseudo"]),
            acc_vs_ae_otsu=float(r["acc_vs_ae_otsu"]),
            acc_vs_raw_otsu=float(r["acc_vs_raw_otsu"]),
            diag_mass=float(r["diag_mass"]),
            off_diag_mass=float(r["off_diag_mass"]),
            boundary_len=int(r["boundary_len"]),
            n_components=int(r["n_components"]), class_fracs=())
        for r in rows]
    summaries = {s.method: s for s in ev.aggregate_wells(records)}
    method_order = [m for m in ws.cfg.methods if m in summaries]
    out = [f"# {ws.stamp()}",
           "method,mean_over_wells,std_over_wells,min_well,max_well,range"]
    for m in method_order:
        s = summaries[m]
        out.append(f"{m},{s.mean:.6f},{s.std:.6f},{s.min:.6f},{s.max:.6f},"
                   f"{s.range:.6f}")
    path = ws.report_dir() / "cross_well.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path


def write_ablation_table(ws: Workspace, force: bool) -> Path | None:
    src = ws.root / "ablation" / "results.csv"
    if not src.exists():
        return None
    _check_stamp(src, ws, force)
    lines = [l for l in src.read_text().splitlines() if l and not
             l.startswith("#")]
    rows = [dict(zip(lines[0].split(","), l.split(","))) for l in lines[1:]]
    by_variant: dict[str, dict[str, float]] = {}
    kinds: dict[str, dict[str, str]] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], {})[r["interval"]] = float(
            r["acc_vs_pseudo"])
        kinds.setdefault(r["interval"], {})["kind"] = r["kind"]
    full = by_variant.get("cgdca", {})
    out = [f"# {ws.stamp()}",
           "variant,overall_mean,std,broad_mean,heavy_mean,delta_vs_full,"
           "full_wins,full_win_rate"]
    for variant in dca.ABLATION_VARIANTS:
        scores = by_variant.get(variant)
        if not scores:
            continue
        vals = np.array(list(scores.values()))
        broad = [v for k, v in scores.items() if kinds[k]["kind"] == "broad"]
        heavy = [v for k, v in scores.items() if kinds[k]["kind"] == "heavy"]
        delta = vals.mean() - np.mean(list(full.values())) if full else np.nan
        if variant == "cgdca" or not full:
            wins_txt, rate_txt = "", ""
        else:
            common = sorted(set(scores) & set(full))
            wins = sum(1 for k in common if full[k] > scores[k])
            wins_txt = f"{wins}/{len(common)}"
            rate_txt = f"{wins / len(common):.2f}" if common else ""
        out.append(",".join([
            variant, f"{vals.mean():.6f}", f"{vals.std():.6f}",
            f"{np.mean(broad):.6f}" if broad else "nan",
            f"{np.mean(heavy):.6f}" if heavy else "nan",
            f"{delta:.6f}", wins_txt, rate_txt]))
    path = ws.report_dir() / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path


def _save_raster(path: Path, grid: np.ndarray, title: str,
                 categorical: bool) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 6.0), dpi=110)
    if categorical:
        im = ax.imshow(grid, cmap=_CLASS_COLORS, norm=_CLASS_NORM,
                       aspect="auto", interpolation="nearest")
        fig.colorbar(im, ax=ax, ticks=[0, 1, 2, 3], shrink=0.8)
    else:
        im = ax.imshow(grid, cmap="viridis", aspect="auto",
                       interpolation="nearest")
        fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("azimuth")
    ax.set_ylabel("depth row")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_interval(ws: Workspace, key: str) -> list[Path]:
    plots_dir = ws.report_dir() / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    bundle = load_bundle(ws, key)
    sup = load_supervision(ws, key)
    _save_raster(plots_dir / f"{key}_pseudo.png", sup.y_pseudo,
                 f"{key} pseudo-labels", categorical=True)
    _save_raster(plots_dir / f"{key}_confidence.png", sup.confidence,
                 f"{key} confidence", categorical=False)
    produced += [plots_dir / f"{key}_pseudo.png",
                 plots_dir / f"{key}_confidence.png"]
    for method in ws.cfg.methods:
        seg_path = ws.train_dir(key) / f"seg_{method}.csv"
        if not seg_path.exists():
            continue
        seg = ws.load_grid_csv(seg_path, dtype=np.int32)
        out = plots_dir / f"{key}_seg_{method}.png"
        _save_raster(out, seg, f"{key} {method}", categorical=True)
        produced.append(out)
    for variant in ("gdca", "cgdca"):
        ckpt = ws.train_dir(key) / f"{variant}.ckpt"
        if not ckpt.exists() or variant not in ws.cfg.methods:
            continue
        config = dca.DCAConfig.for_variant(variant,
                                           log_channels=len(bundle.channels))
        model = dca.DCAModel(config, seed=0)
        model.params.load(ckpt)
        x01_hat = np.load(ws.denoise_dir(key) / "x01_hat.npy")
        maps = dca.gate_maps(model, x01_hat, bundle.logs_aligned,
                             sup.confidence)
        out = plots_dir / f"{key}_gate_{variant}.png"
        _save_raster(out, maps["gate"], f"{key} {variant} gate",
                     categorical=False)
        produced.append(out)
        if "effective" in maps:
            out = plots_dir / f"{key}_gate_effective_{variant}.png"
            _save_raster(out, maps["effective"],
                         f"{key} {variant} effective fusion",
                         categorical=False)
            produced.append(out)
    return produced


def cmd_report(cfg: RunConfig, force: bool = False) -> None:
    ws = Workspace(cfg)
    rows = _read_records(ws, force)
    if not rows:
        raise StageError("evaluation records are empty")
    artifacts = [write_cross_well_table(ws, rows)]
    ablation_path = write_ablation_table(ws, force)
    if ablation_path is not None:
        artifacts.append(ablation_path)
    for key in interval_keys(ws):
        artifacts += _plot_interval(ws, key)
    ws.write_stage_manifest("report", artifacts)
    log.info("report: %d artifacts under %s", len(artifacts), ws.report_dir())
