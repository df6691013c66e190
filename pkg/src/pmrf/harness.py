"""Sweep orchestration: runs inference + evaluation over the cross product of
modes, overlaps, step counts and seeds, writes one stable CSV row per cell,
and summarizes the perception-distortion movement between the plain
posterior-mean rows and the refined rows."""

from __future__ import annotations

import csv
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pmrf import __version__
from pmrf.checkpoint import checkpoint_digest, load_checkpoint
from pmrf.data import Volume, pad_to_min
from pmrf.infer import SamplerConfig, TilerConfig, fuse, hann_window3d, pm_tile_predictions, refine_tiles, tile_volume
from pmrf.metrics import MetricReport, SliceEncoder, encode_volumes, evaluate_run

CSV_COLUMNS = ["mode", "overlap", "K", "mse", "psnr_db", "ssim", "fid_axial", "kid_axial", "seed", "wall_s"]


class HarnessError(RuntimeError):
    pass


@dataclass
class SweepSpec:
    overlaps: tuple = (4, 16, 32)
    steps: tuple = (1, 2, 5, 10, 15, 20, 25, 50, 75, 100, 200)
    modes: tuple = ("pm", "pmrf")
    seeds: tuple = (0,)
    sigma_s: float = 0.1
    patch_side: int = 64

    def __post_init__(self):
        if not self.overlaps or not self.steps or not self.modes or not self.seeds:
            raise HarnessError("sweep lists must be non-empty")
        if any(k < 1 for k in self.steps):
            raise HarnessError("all step counts must be >= 1")
        bad = [m for m in self.modes if m not in ("pm", "pmrf", "rf")]
        if bad:
            raise HarnessError(f"unknown sweep modes: {bad}")


@dataclass
class RunRecord:
    mode: str
    overlap: int
    K: int | None
    seed: int
    report: MetricReport
    wall_s: float
    checkpoint_hashes: dict = field(default_factory=dict)

    @property
    def key(self):
        return (self.mode, self.overlap, self.K, self.seed)


def _fmt(v) -> str:
    return f"{v:.10g}"


def write_csv(records, path, deterministic=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            rep = r.report
            w.writerow(
                [
                    r.mode,
                    r.overlap,
                    "" if r.K is None else r.K,
                    _fmt(rep.mse),
                    _fmt(rep.psnr_db),
                    _fmt(rep.ssim),
                    _fmt(rep.fid_axial),
                    _fmt(rep.kid_axial),
                    r.seed,
                    "0" if deterministic else f"{r.wall_s:.3f}",
                ]
            )
    return path


def read_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise HarnessError(f"unexpected CSV schema: {reader.fieldnames}")
        for row in reader:
            rows.append(
                {
                    "mode": row["mode"],
                    "overlap": int(row["overlap"]),
                    "K": None if row["K"] == "" else int(row["K"]),
                    "mse": float(row["mse"]),
                    "psnr_db": float(row["psnr_db"]),
                    "ssim": float(row["ssim"]),
                    "fid_axial": float(row["fid_axial"]),
                    "kid_axial": float(row["kid_axial"]),
                    "seed": int(row["seed"]),
                    "wall_s": float(row["wall_s"]),
                }
            )
    return rows


def git_revision():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5, check=False
        )
        return out.stdout.strip() or None
    except OSError:
        return None


def write_provenance(run_dir, payload):
    doc = {"package_version": __version__, "git_revision": git_revision(), **payload}
    path = Path(run_dir) / "provenance.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def _load_models(checkpoints, modes, log):
    models = {}
    hashes = {}
    for name in ("stage1", "flow", "rf"):
        path = checkpoints.get(name)
        if path and Path(path).exists():
            models[name], _ = load_checkpoint(path)
            hashes[name] = checkpoint_digest(path)
        else:
            models[name] = None
    missing = []
    if any(m in modes for m in ("pm", "pmrf")) and models["stage1"] is None:
        missing.append("stage1")
    if "pmrf" in modes and models["flow"] is None:
        missing.append("flow")
    if "rf" in modes and models["rf"] is None:
        missing.append("rf")
    for name in missing:
        if log:
            log(f"warning: checkpoint '{name}' missing; dependent rows will be skipped")
    return models, hashes, set(missing)


def run_sweep(
    spec: SweepSpec,
    checkpoints: dict,
    manifest,
    out_csv=None,
    encoder: SliceEncoder | None = None,
    deterministic: bool = False,
    batch_tiles: int = 4,
    log=None,
):
    """Execute the full sweep; returns the RunRecord list (CSV optionally
    written). Posterior-mean tile predictions are computed once per
    (volume, overlap) and shared across all step counts."""
    encoder = encoder or SliceEncoder()
    models, hashes, missing = _load_models(checkpoints, spec.modes, log)

    test_recs = manifest.split("test")
    if not test_recs:
        raise HarnessError("manifest has no test volumes")
    test_pairs = [manifest.load_pair(r) for r in test_recs]
    gts = [p.y for p in test_pairs]
    train_recs = manifest.split("train")
    reference = encode_volumes(
        [manifest.load_pair(r).y for r in train_recs], encoder, ids=[r["id"] for r in train_recs]
    )

    records = []
    for seed in spec.seeds:
        for overlap in spec.overlaps:
            tiler = TilerConfig(patch_side=spec.patch_side, overlap=overlap)
            window = hann_window3d(spec.patch_side)
            padded = [pad_to_min(p.x, spec.patch_side) for p in test_pairs]
            grids = [tile_volume(pv.voxels.shape, tiler) for pv in padded]

            pm_anchor_cache = None
            if models["stage1"] is not None and any(m in spec.modes for m in ("pm", "pmrf")):
                pm_anchor_cache = [
                    pm_tile_predictions(pv.voxels, models["stage1"], grid, spec.patch_side, batch_tiles)
                    for pv, grid in zip(padded, grids)
                ]

            def _finish(anchors_per_vol):
                vols = []
                for pv, grid, anchors in zip(padded, grids, anchors_per_vol):
                    fused = fuse(anchors, grid, window, pv.voxels.shape)
                    from pmrf.data import crop_back

                    vols.append(crop_back(Volume(fused, "ce", meta=dict(pv.meta))))
                return vols

            for mode in spec.modes:
                if mode == "pm":
                    if "stage1" in missing:
                        continue
                    t0 = time.perf_counter()
                    preds = _finish(pm_anchor_cache)
                    rep = evaluate_run(
                        preds, gts, reference, encoder,
                        config={"model": "pm", "overlap": overlap, "K": None, "sigma_s": spec.sigma_s, "seed": seed},
                    )
                    records.append(RunRecord("pm", overlap, None, seed, rep, time.perf_counter() - t0, hashes))
                    if log:
                        log(f"pm overlap={overlap} seed={seed}: mse={rep.mse:.5f} fid={rep.fid_axial:.3f}")
                    continue
                flow_key = "flow" if mode == "pmrf" else "rf"
                if flow_key in missing or (mode == "pmrf" and "stage1" in missing):
                    continue
                flow = models[flow_key]
                for K in spec.steps:
                    t0 = time.perf_counter()
                    sampler = SamplerConfig(steps=K, sigma_s=spec.sigma_s, seed=seed)
                    anchors_per_vol = []
                    for vi, (pv, grid) in enumerate(zip(padded, grids)):
                        if mode == "pmrf":
                            base = pm_anchor_cache[vi]
                        else:
                            side = spec.patch_side
                            base = [
                                pv.voxels[o[0] : o[0] + side, o[1] : o[1] + side, o[2] : o[2] + side].astype(
                                    np.float32
                                )
                                for o in grid
                            ]
                        anchors_per_vol.append(
                            refine_tiles(base, grid, flow, sampler, pv.voxels.shape, batch_tiles)
                        )
                    preds = _finish(anchors_per_vol)
                    rep = evaluate_run(
                        preds, gts, reference, encoder,
                        config={"model": mode, "overlap": overlap, "K": K, "sigma_s": spec.sigma_s, "seed": seed},
                    )
                    records.append(RunRecord(mode, overlap, K, seed, rep, time.perf_counter() - t0, hashes))
                    if log:
                        log(f"{mode} overlap={overlap} K={K} seed={seed}: mse={rep.mse:.5f} fid={rep.fid_axial:.3f}")

    if out_csv:
        write_csv(records, out_csv, deterministic=deterministic)
    return records


def _rows_from(records_or_rows):
    rows = []
    for r in records_or_rows:
        if isinstance(r, RunRecord):
            rows.append(
                {
                    "mode": r.mode,
                    "overlap": r.overlap,
                    "K": r.K,
                    "mse": r.report.mse,
                    "fid_axial": r.report.fid_axial,
                }
            )
        else:
            rows.append(r)
    return rows


def tradeoff_summary(records_or_rows):
    """Per overlap: the best-FID refined row, its relative FID reduction and
    MSE increase against the posterior-mean row, and whether the FID-vs-K
    curve bends back up after its minimum."""
    rows = _rows_from(records_or_rows)
    overlaps = sorted({r["overlap"] for r in rows})
    summary = {}
    for ov in overlaps:
        pm_rows = [r for r in rows if r["overlap"] == ov and r["mode"] == "pm"]
        ref_rows = [r for r in rows if r["overlap"] == ov and r["mode"] == "pmrf"]
        if not pm_rows:
            raise HarnessError(f"no posterior-mean reference row at overlap {ov}")
        if not ref_rows:
            continue
        pm = pm_rows[0]
        best = min(ref_rows, key=lambda r: r["fid_axial"])
        later = [r for r in ref_rows if r["K"] > best["K"]]
        summary[ov] = {
            "pm_fid": pm["fid_axial"],
            "pm_mse": pm["mse"],
            "best_k": best["K"],
            "pmrf_fid": best["fid_axial"],
            "pmrf_mse": best["mse"],
            "fid_reduction": 1.0 - best["fid_axial"] / pm["fid_axial"],
            "mse_increase": best["mse"] / pm["mse"] - 1.0,
            "u_turn": any(r["fid_axial"] > best["fid_axial"] for r in later),
        }
    if not summary:
        raise HarnessError("no refined rows to summarize")
    return summary
