"""Training loops: Stage-1 MSE regression, Stage-2 flow matching, and the
RF baseline. The two flow stages share every line of the training path except
the conditioning hook that produces the transport start point."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from pmrf import autodiff as ad
from pmrf import optim
from pmrf.autodiff import Tensor
from pmrf.nets import ModelParams, UNetConfig, flow_field_forward, init_params, posterior_mean_forward

STAGES = ("pm", "pmrf_stage2", "rf_baseline")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr0: float = 5e-4
    patience: int = 20
    sigma_s: float = 0.1
    seed: int = 0
    stage: str = "pm"
    patch_side: int = 64
    patches_per_volume: int = 8
    val_patches_per_volume: int = 4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    preview_steps: int = 100  # sampler default attached to the run, not part of the loss

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.patience < 1:
            raise TrainError("patience must be >= 1")
        if self.sigma_s < 0:
            raise TrainError("sigma_s must be >= 0")
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage '{self.stage}', expected one of {STAGES}")


@dataclass
class FlowSample:
    """One flow-matching tuple; z_0 and y are kept so the linear-path
    invariant z_t == (1-t) z_0 + t y stays checkable."""

    z_t: np.ndarray
    t: float
    target: np.ndarray
    z_0: np.ndarray
    y: np.ndarray

    def reconstruction_error(self) -> float:
        rebuilt = (1.0 - self.t) * self.z_0 + self.t * self.y
        return float(np.max(np.abs(rebuilt - self.z_t)))


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr, seconds)
    best_epoch: int = -1

    def append(self, epoch, train_loss, val_loss, lr, seconds):
        self.rows.append((epoch, float(train_loss), float(val_loss), float(lr), float(seconds)))

    @property
    def val_losses(self):
        return [r[2] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for row in self.rows:
                w.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}", f"{row[3]:.10g}", f"{row[4]:.3f}"])
        return path


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# -- losses ---------------------------------------------------------------------


def stage1_loss(x_batch, y_batch, params: ModelParams) -> Tensor:
    """Mean over batch and voxels of squared prediction error."""
    if not isinstance(x_batch, Tensor):
        x_batch = Tensor(x_batch)
    y = y_batch.data if isinstance(y_batch, Tensor) else np.asarray(y_batch, dtype=x_batch.dtype)
    if x_batch.shape != y.shape:
        raise TrainError(f"misaligned batch: {x_batch.shape} vs {y.shape}")
    pred = posterior_mean_forward(x_batch, params)
    diff = ad.sub(pred, Tensor(y))
    return ad.tmean(ad.mul(diff, diff))


def make_flow_sample(y_pm, y, sigma_s: float, rng) -> FlowSample:
    """Draw one flow-matching tuple from the linear path between the noised
    anchor and the target."""
    y_pm = np.asarray(y_pm, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    if y_pm.shape != y.shape:
        raise TrainError(f"anchor/target shape mismatch: {y_pm.shape} vs {y.shape}")
    eps = rng.standard_normal(y_pm.shape).astype(np.float32)
    z0 = y_pm + np.float32(sigma_s) * eps
    t = float(rng.uniform())
    zt = (1.0 - t) * z0 + t * y
    return FlowSample(z_t=zt.astype(np.float32), t=t, target=(y - z0), z_0=z0, y=y)


def stage2_loss(samples, params: ModelParams) -> Tensor:
    """Flow-matching loss: regress the field network onto y - z_0."""
    if not samples:
        raise TrainError("empty flow batch")
    ts = np.array([s.t for s in samples], dtype=np.float64)
    if np.any(ts < 0) or np.any(ts > 1):
        raise TrainError(f"flow time outside [0,1]: {ts}")
    zt = Tensor(np.stack([s.z_t for s in samples])[:, None])
    target = np.stack([s.target for s in samples])[:, None]
    pred = flow_field_forward(zt, ts, params)
    diff = ad.sub(pred, Tensor(target))
    return ad.tmean(ad.mul(diff, diff))


def rf_baseline_condition(x, sigma_s: float, rng) -> np.ndarray:
    """RF baseline transport start: the raw input plus the diversity noise."""
    x = np.asarray(x, dtype=np.float32)
    return x + np.float32(sigma_s) * rng.standard_normal(x.shape).astype(np.float32)


# -- training loop ----------------------------------------------------------------


def _load_split(manifest, split):
    recs = manifest.split(split)
    if not recs:
        raise TrainError(f"manifest has no '{split}' volumes")
    return recs


def _sample_epoch_patches(manifest, recs, cfg, rng, n_per_volume):
    patches = []
    for rec in recs:
        pair = manifest.load_pair(rec)
        if any(s < cfg.patch_side for s in pair.x.shape):
            raise TrainError(f"volume {rec['id']} smaller than patch side {cfg.patch_side}; pad first")
        for _ in range(n_per_volume):
            oz, oy, ox = (int(rng.integers(0, s - cfg.patch_side + 1)) for s in pair.x.shape)
            sl = (slice(oz, oz + cfg.patch_side), slice(oy, oy + cfg.patch_side), slice(ox, ox + cfg.patch_side))
            patches.append((pair.x.voxels[sl].copy(), pair.y.voxels[sl].copy()))
    return patches


def _flow_batch(anchor, y, cfg, rng):
    """Vectorized flow tuples for one minibatch (same math as make_flow_sample)."""
    eps = rng.standard_normal(anchor.shape).astype(np.float32)
    z0 = anchor + np.float32(cfg.sigma_s) * eps
    t = rng.uniform(size=anchor.shape[0]).astype(np.float32)
    tb = t[:, None, None, None, None]
    zt = (1.0 - tb) * z0 + tb * y
    return zt, t, y - z0


def _flow_minibatch_loss(params, anchor, y, cfg, rng):
    zt, t, target = _flow_batch(anchor, y, cfg, rng)
    pred = flow_field_forward(Tensor(zt), t.astype(np.float64), params)
    diff = ad.sub(pred, Tensor(target))
    return ad.tmean(ad.mul(diff, diff))


def _pm_anchor_fn(stage1: ModelParams):
    def anchor(x_batch):
        with ad.no_grad():
            return posterior_mean_forward(Tensor(x_batch), stage1).data
    return anchor


def _rf_anchor_fn():
    return lambda x_batch: x_batch


def train(manifest, cfg: TrainConfig, net_cfg: UNetConfig, stage1: ModelParams | None = None, history_path=None, log=None):
    """Full training run; returns (best ModelParams, TrainHistory).

    Per epoch: sample ``patches_per_volume`` random patches from every train
    volume, minibatch them, apply the stage loss, and take AdamW steps on the
    cosine schedule. Validation uses a patch set fixed at startup; early
    stopping is strict-improvement with the configured patience.
    """
    if cfg.stage in ("pmrf_stage2", "rf_baseline") and not net_cfg.time_conditioned:
        raise TrainError("flow stages require a time-conditioned network config")
    if cfg.stage == "pm" and net_cfg.time_conditioned:
        raise TrainError("stage 'pm' requires time_conditioned=False")
    if cfg.stage == "pmrf_stage2":
        if stage1 is None:
            raise TrainError("stage 'pmrf_stage2' requires a trained stage-1 checkpoint")
        anchor_fn = _pm_anchor_fn(stage1)
    elif cfg.stage == "rf_baseline":
        anchor_fn = _rf_anchor_fn()
    else:
        anchor_fn = None

    stage_code = STAGES.index(cfg.stage) + 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage_code]))
    params = init_params(net_cfg, seed=int(rng.integers(2**31)))
    state = optim.OptimState(lr=cfg.lr0, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)

    train_recs = _load_split(manifest, "train")
    val_recs = _load_split(manifest, "val")

    # fixed validation set: patches, and for flow stages fixed (eps, t) draws
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage_code, 9009]))
    val_patches = _sample_epoch_patches(manifest, val_recs, cfg, val_rng, cfg.val_patches_per_volume)
    val_x = np.stack([p[0] for p in val_patches])[:, None]
    val_y = np.stack([p[1] for p in val_patches])[:, None]
    if cfg.stage != "pm":
        val_eps = val_rng.standard_normal(val_x.shape).astype(np.float32)
        val_t = val_rng.uniform(size=val_x.shape[0]).astype(np.float32)

    def val_loss_fn():
        with ad.no_grad():
            if cfg.stage == "pm":
                total, count = 0.0, 0
                for lo in range(0, val_x.shape[0], cfg.batch_size):
                    xb = val_x[lo : lo + cfg.batch_size]
                    yb = val_y[lo : lo + cfg.batch_size]
                    pred = posterior_mean_forward(Tensor(xb), params).data
                    total += float(np.sum((pred - yb) ** 2, dtype=np.float64))
                    count += yb.size
                return total / count
            total, count = 0.0, 0
            for lo in range(0, val_x.shape[0], cfg.batch_size):
                xb = val_x[lo : lo + cfg.batch_size]
                yb = val_y[lo : lo + cfg.batch_size]
                z0 = anchor_fn(xb) + np.float32(cfg.sigma_s) * val_eps[lo : lo + cfg.batch_size]
                t = val_t[lo : lo + cfg.batch_size]
                tb = t[:, None, None, None, None]
                zt = (1.0 - tb) * z0 + tb * yb
                target = yb - z0
                pred = flow_field_forward(Tensor(zt), t.astype(np.float64), params).data
                total += float(np.sum((pred - target) ** 2, dtype=np.float64))
                count += target.size
            return total / count

    history = TrainHistory()
    stopper = EarlyStopper(cfg.patience)
    best_params = params.copy()
    with ad.guard_nans(True):
        for epoch in range(cfg.epochs):
            t_start = time.perf_counter()
            lr = optim.cosine_lr(epoch, cfg.epochs, cfg.lr0)
            patches = _sample_epoch_patches(manifest, train_recs, cfg, rng, cfg.patches_per_volume)
            order = rng.permutation(len(patches))
            losses = []
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                xb = np.stack([patches[i][0] for i in idx])[:, None]
                yb = np.stack([patches[i][1] for i in idx])[:, None]
                if cfg.stage == "pm":
                    loss = stage1_loss(Tensor(xb), yb, params)
                else:
                    loss = _flow_minibatch_loss(params, anchor_fn(xb), yb, cfg, rng)
                lv = loss.item()
                if not np.isfinite(lv):
                    raise ad.NumericsError(
                        f"NaN loss at epoch {epoch}, step {lo // cfg.batch_size} (stage {cfg.stage}); aborting"
                    )
                params.zero_grad()
                loss.backward()
                optim.adamw_step(params._tensors, state, lr)
                losses.append(lv)
            vl = val_loss_fn()
            history.append(epoch, np.mean(losses), vl, lr, time.perf_counter() - t_start)
            if log:
                log(f"[{cfg.stage}] epoch {epoch}: train {np.mean(losses):.5f} val {vl:.5f} lr {lr:.2e}")
            if vl < stopper.best:
                best_params = params.copy()
            if stopper.update(epoch, vl):
                break
    history.best_epoch = stopper.best_epoch
    if history_path:
        history.to_csv(history_path)
    return best_params, history
