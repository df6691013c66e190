"""Command-line entry points.

Every subcommand accepts ``--config FILE`` (plain JSON whose keys match the
flag names with dashes replaced by underscores); explicit flags override file
values, which override the built-in defaults. Outputs land in timestamped,
append-only run directories with a provenance sidecar.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from pmrf import data as D
from pmrf import harness as H
from pmrf.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from pmrf.infer import SamplerConfig, TilerConfig, infer_volume
from pmrf.metrics import SliceEncoder, encode_volumes, evaluate_run
from pmrf.nets import UNetConfig
from pmrf.train import TrainConfig, train

DEFAULT_STEPS = [1, 2, 5, 10, 15, 20, 25, 50, 75, 100, 200]
DEFAULT_OVERLAPS = [4, 16, 32]


def make_run_dir(base, name):
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{name}-{stamp}"
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = base / f"{name}-{stamp}-{suffix}"
    candidate.mkdir()
    return candidate


def _merge(ns, defaults):
    merged = dict(defaults)
    if getattr(ns, "config", None):
        file_cfg = json.loads(Path(ns.config).read_text())
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise SystemExit(f"error: unknown keys in config file: {sorted(unknown)}")
        merged.update(file_cfg)
    for k, v in vars(ns).items():
        if k in ("config", "func") or v is None:
            continue
        merged[k] = v
    return argparse.Namespace(**merged)


def _add_config_flag(p):
    p.add_argument("--config", help="JSON config file; explicit flags override its values")


def _net_config(a, time_conditioned):
    return UNetConfig(
        base_width=a.width,
        depth=a.depth,
        blocks_per_level=a.blocks,
        time_conditioned=time_conditioned,
        time_embed_dim=a.time_embed_dim,
    )


# -- subcommand implementations ---------------------------------------------------


def cmd_gen_data(ns):
    defaults = dict(
        out="data", n_train=200, n_val=40, n_test=20, size=96, n_lesions=4,
        rim_prob=0.5, rim_gain=1.0, core_gain=1.2, texture_amp=0.3, seed=0,
    )
    a = _merge(ns, defaults)
    spec = D.PhantomSpec(
        size=(a.size,) * 3, n_lesions=a.n_lesions, rim_enhance_prob=a.rim_prob,
        rim_gain=a.rim_gain, core_gain=a.core_gain, texture_amp=a.texture_amp, seed=a.seed,
    )
    manifest = D.make_dataset(a.out, spec, counts=(a.n_train, a.n_val, a.n_test), dataset_seed=a.seed)
    H.write_provenance(a.out, {"command": "gen-data", "config": vars(a)})
    print(f"wrote {manifest}")
    return 0


def _cmd_train(ns, stage):
    defaults = dict(
        manifest="data/manifest.json", out="runs", run_dir=None, epochs=200,
        batch_size=16 if stage == "pm" else 8, lr0=5e-4, patience=20, sigma_s=0.1,
        seed=0, patch_side=64, patches_per_volume=8, width=16, depth=3, blocks=2,
        time_embed_dim=64, stage1=None, quiet=False,
    )
    a = _merge(ns, defaults)
    run_dir = Path(a.run_dir) if a.run_dir else make_run_dir(a.out, f"train-{stage}")
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = D.load_manifest(a.manifest)
    cfg = TrainConfig(
        epochs=a.epochs, batch_size=a.batch_size, lr0=a.lr0, patience=a.patience,
        sigma_s=a.sigma_s, seed=a.seed, stage=stage, patch_side=a.patch_side,
        patches_per_volume=a.patches_per_volume,
    )
    net_cfg = _net_config(a, time_conditioned=(stage != "pm"))
    stage1 = None
    if stage == "pmrf_stage2":
        if not a.stage1:
            raise SystemExit("error: --stage1 checkpoint is required for train-stage2")
        stage1, _ = load_checkpoint(a.stage1)
    log = None if a.quiet else print
    params, history = train(manifest, cfg, net_cfg, stage1=stage1, history_path=run_dir / "history.csv", log=log)
    ckpt = run_dir / "best.ckpt"
    save_checkpoint(ckpt, params, train_config=vars(a), epoch=history.best_epoch)
    H.write_provenance(
        run_dir,
        {
            "command": f"train-{stage}",
            "config": vars(a),
            "best_epoch": history.best_epoch,
            "best_val_loss": min(history.val_losses) if history.rows else None,
            "checkpoint": str(ckpt),
            "checkpoint_sha": checkpoint_digest(ckpt),
            "stage1_checkpoint": a.stage1,
        },
    )
    print(f"best epoch {history.best_epoch}; checkpoint at {ckpt}")
    return 0


def cmd_infer(ns):
    defaults = dict(
        input=None, out=None, mode="pmrf", stage1=None, flow=None, overlap=32,
        steps=100, sigma_s=0.1, seed=0, patch_side=64, shared_noise=False, denorm=False,
        y_mean=None, y_std=None,
    )
    a = _merge(ns, defaults)
    if not a.input or not a.out:
        raise SystemExit("error: --input and --out are required")
    vol = D.load_volume(a.input)
    stage1 = load_checkpoint(a.stage1)[0] if a.stage1 else None
    flow = load_checkpoint(a.flow)[0] if a.flow else None
    tiler = TilerConfig(patch_side=a.patch_side, overlap=a.overlap)
    sampler = SamplerConfig(steps=a.steps, sigma_s=a.sigma_s, seed=a.seed, shared_noise=a.shared_noise)
    denorm_stats = (a.y_mean, a.y_std) if a.denorm and a.y_mean is not None else None
    out = infer_volume(vol, stage1, flow, sampler, tiler, a.mode, denorm_stats=denorm_stats)
    D.save_volume(a.out, out)
    sidecar = Path(a.out).with_suffix(".json")
    sidecar.write_text(
        json.dumps(
            {
                "command": "infer",
                "mode": a.mode,
                "input": str(a.input),
                "stage1": a.stage1,
                "stage1_sha": checkpoint_digest(a.stage1) if a.stage1 else None,
                "flow": a.flow,
                "flow_sha": checkpoint_digest(a.flow) if a.flow else None,
                "overlap": a.overlap,
                "steps": a.steps,
                "sigma_s": a.sigma_s,
                "seed": a.seed,
                "shared_noise": a.shared_noise,
            },
            indent=2,
        )
    )
    print(f"wrote {a.out}")
    return 0


def cmd_evaluate(ns):
    defaults = dict(
        manifest="data/manifest.json", pred_dir=None, out_csv="metrics.csv", model="pm",
        overlap=32, steps=None, sigma_s=0.1, seed=0, encoder_seed=0,
    )
    a = _merge(ns, defaults)
    if not a.pred_dir:
        raise SystemExit("error: --pred-dir is required")
    manifest = D.load_manifest(a.manifest)
    encoder = SliceEncoder(seed=a.encoder_seed)
    test_recs = manifest.split("test")
    preds, gts = [], []
    for rec in test_recs:
        ppath = Path(a.pred_dir) / f"{rec['id']}_pred.vol"
        if not ppath.exists():
            raise SystemExit(f"error: missing prediction {ppath}")
        preds.append(D.load_volume(ppath))
        gts.append(manifest.load_pair(rec).y)
    train_recs = manifest.split("train")
    reference = encode_volumes([manifest.load_pair(r).y for r in train_recs], encoder)
    rep = evaluate_run(
        preds, gts, reference, encoder,
        config={"model": a.model, "overlap": a.overlap, "K": a.steps, "sigma_s": a.sigma_s, "seed": a.seed},
    )
    out = Path(a.out_csv)
    new = not out.exists()
    with open(out, "a", newline="") as fh:
        import csv as _csv

        w = _csv.writer(fh)
        if new:
            w.writerow(H.CSV_COLUMNS)
        w.writerow(
            [a.model, a.overlap, "" if a.steps is None else a.steps, f"{rep.mse:.10g}", f"{rep.psnr_db:.10g}",
             f"{rep.ssim:.10g}", f"{rep.fid_axial:.10g}", f"{rep.kid_axial:.10g}", a.seed, "0"]
        )
    print(f"mse={rep.mse:.6g} psnr={rep.psnr_db:.4g} ssim={rep.ssim:.4g} fid={rep.fid_axial:.6g} kid={rep.kid_axial:.6g}")
    return 0


def cmd_sweep(ns):
    defaults = dict(
        manifest="data/manifest.json", stage1=None, stage2=None, rf=None, out="runs",
        run_dir=None, modes=["pm", "pmrf"], overlaps=DEFAULT_OVERLAPS, steps=DEFAULT_STEPS,
        seeds=[0], sigma_s=0.1, patch_side=64, deterministic=False, encoder_seed=0, quiet=False,
    )
    a = _merge(ns, defaults)
    run_dir = Path(a.run_dir) if a.run_dir else make_run_dir(a.out, "sweep")
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = D.load_manifest(a.manifest)
    spec = H.SweepSpec(
        overlaps=tuple(a.overlaps), steps=tuple(a.steps), modes=tuple(a.modes),
        seeds=tuple(a.seeds), sigma_s=a.sigma_s, patch_side=a.patch_side,
    )
    checkpoints = {"stage1": a.stage1, "flow": a.stage2, "rf": a.rf}
    out_csv = run_dir / "sweep.csv"
    log = None if a.quiet else print
    H.run_sweep(
        spec, checkpoints, manifest, out_csv=out_csv,
        encoder=SliceEncoder(seed=a.encoder_seed), deterministic=a.deterministic, log=log,
    )
    H.write_provenance(
        run_dir,
        {
            "command": "sweep",
            "config": vars(a),
            "checkpoint_hashes": {
                k: checkpoint_digest(v) for k, v in checkpoints.items() if v and Path(v).exists()
            },
            "csv": str(out_csv),
        },
    )
    print(f"wrote {out_csv}")
    return 0


def cmd_summarize(ns):
    defaults = dict(csv=None)
    a = _merge(ns, defaults)
    if not a.csv:
        raise SystemExit("error: --csv is required")
    rows = H.read_csv(a.csv)
    summary = H.tradeoff_summary(rows)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pmrf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset plus manifest")
    _add_config_flag(g)
    g.add_argument("--out")
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-val", dest="n_val", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--size", type=int, help="cubic volume side (default 96)")
    g.add_argument("--n-lesions", dest="n_lesions", type=int)
    g.add_argument("--rim-prob", dest="rim_prob", type=float)
    g.add_argument("--rim-gain", dest="rim_gain", type=float)
    g.add_argument("--core-gain", dest="core_gain", type=float)
    g.add_argument("--texture-amp", dest="texture_amp", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    def add_train(name, stage, help_text):
        t = sub.add_parser(name, help=help_text)
        _add_config_flag(t)
        t.add_argument("--manifest")
        t.add_argument("--out")
        t.add_argument("--run-dir", dest="run_dir")
        t.add_argument("--epochs", type=int, help="default 200")
        t.add_argument("--batch-size", dest="batch_size", type=int)
        t.add_argument("--lr0", type=float, help="initial learning rate (default 5e-4)")
        t.add_argument("--patience", type=int, help="early-stopping patience (default 20)")
        t.add_argument("--sigma-s", dest="sigma_s", type=float, help="diversity noise scale (default 0.1)")
        t.add_argument("--seed", type=int)
        t.add_argument("--patch-side", dest="patch_side", type=int, help="training patch side (default 64)")
        t.add_argument("--patches-per-volume", dest="patches_per_volume", type=int, help="default 8")
        t.add_argument("--width", type=int, help="base channel width (default 16)")
        t.add_argument("--depth", type=int, help="down/up levels (default 3)")
        t.add_argument("--blocks", type=int, help="residual blocks per level (default 2)")
        t.add_argument("--time-embed-dim", dest="time_embed_dim", type=int)
        t.add_argument("--quiet", action="store_const", const=True)
        if stage == "pmrf_stage2":
            t.add_argument("--stage1", help="stage-1 checkpoint (required)")
        t.set_defaults(func=lambda ns, s=stage: _cmd_train(ns, s))

    add_train("train-stage1", "pm", "train the posterior-mean predictor")
    add_train("train-stage2", "pmrf_stage2", "train the flow refiner on top of a stage-1 checkpoint")
    add_train("train-rf", "rf_baseline", "train the input-conditioned flow baseline")

    i = sub.add_parser("infer", help="tiled full-volume inference")
    _add_config_flag(i)
    i.add_argument("--input", help="input volume file")
    i.add_argument("--out", help="output volume file")
    i.add_argument("--mode", choices=["pm", "pmrf", "rf"])
    i.add_argument("--stage1")
    i.add_argument("--flow")
    i.add_argument("--overlap", type=int, help="tile overlap in voxels (default 32)")
    i.add_argument("--steps", type=int, help="Euler steps K (default 100)")
    i.add_argument("--sigma-s", dest="sigma_s", type=float)
    i.add_argument("--seed", type=int)
    i.add_argument("--patch-side", dest="patch_side", type=int)
    i.add_argument("--shared-noise", dest="shared_noise", action="store_const", const=True,
                   help="slice one volume-shaped noise field instead of per-tile noise")
    i.add_argument("--denorm", action="store_const", const=True)
    i.add_argument("--y-mean", dest="y_mean", type=float)
    i.add_argument("--y-std", dest="y_std", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="score predictions against a manifest's test split")
    _add_config_flag(e)
    e.add_argument("--manifest")
    e.add_argument("--pred-dir", dest="pred_dir")
    e.add_argument("--out-csv", dest="out_csv")
    e.add_argument("--model")
    e.add_argument("--overlap", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--sigma-s", dest="sigma_s", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run the full perception-distortion sweep")
    _add_config_flag(s)
    s.add_argument("--manifest")
    s.add_argument("--stage1")
    s.add_argument("--stage2")
    s.add_argument("--rf")
    s.add_argument("--out")
    s.add_argument("--run-dir", dest="run_dir")
    s.add_argument("--modes", nargs="+", choices=["pm", "pmrf", "rf"], help="default: pm pmrf")
    s.add_argument("--overlaps", nargs="+", type=int, help="default: 4 16 32")
    s.add_argument("--steps", nargs="+", type=int, help="default: 1 2 5 10 15 20 25 50 75 100 200")
    s.add_argument("--seeds", nargs="+", type=int, help="default: 0")
    s.add_argument("--sigma-s", dest="sigma_s", type=float, help="default 0.1")
    s.add_argument("--patch-side", dest="patch_side", type=int, help="default 64")
    s.add_argument("--deterministic", action="store_const", const=True,
                   help="suppress wall-clock column so reruns are byte-identical")
    s.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    s.add_argument("--quiet", action="store_const", const=True)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("summarize", help="perception-distortion summary of a sweep CSV")
    _add_config_flag(m)
    m.add_argument("--csv")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except (SystemExit, KeyboardInterrupt):
        raise
    except Exception as exc:  # surface config/validation errors with nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
