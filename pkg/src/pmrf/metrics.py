"""Distortion and perception metrics.

Distortion is volumetric (MSE, PSNR) plus mean slice-wise SSIM. Perception is
a Fréchet and an unbiased kernel (MMD^2) distance between feature
distributions of nine axial slices per volume, encoded by a fixed seeded
random convolutional encoder; absolute values are therefore comparable only
within one encoder id, and downstream checks use orderings and ratios.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

SLICE_OFFSETS = (-40, -30, -20, -10, 0, 10, 20, 30, 40)


class MetricError(RuntimeError):
    pass


@dataclass
class SliceSet:
    slices: list
    source_ids: list
    offsets: list


@dataclass
class FeatureMatrix:
    features: np.ndarray  # rows = slices
    encoder_id: str
    encoder_seed: int

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    fid_axial: float
    kid_axial: float
    config: dict = field(default_factory=dict)


# -- distortion -----------------------------------------------------------------


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range=None) -> float:
    """10 log10(R^2 / mse); R defaults to the ground-truth (first argument)
    value range. Near-identical inputs cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = float(a.max() - a.min()) if data_range is None else float(data_range)
    if r <= 0:
        raise MetricError("degenerate data range: constant ground truth")
    err = mse(a, b)
    if err < r * r * 1e-10:
        return 100.0
    return float(10.0 * np.log10(r * r / err))


def _gaussian_kernel2d(size, sigma):
    n = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(n**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img, kern):
    from scipy.signal import convolve2d

    return convolve2d(img, kern, mode="valid")


def ssim_slice(a, b, data_range, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    if min(a.shape) < window:
        window = min(a.shape) - (1 - min(a.shape) % 2)  # largest odd size that fits
        warnings.warn(f"slice smaller than SSIM window, reducing window to {window}")
    kern = _gaussian_kernel2d(window, sigma)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a = _filter_valid(a, kern)
    mu_b = _filter_valid(b, kern)
    var_a = _filter_valid(a * a, kern) - mu_a**2
    var_b = _filter_valid(b * b, kern) - mu_b**2
    cov = _filter_valid(a * b, kern) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_mean_axial(a, b, data_range=None) -> float:
    """Standard SSIM per axial slice, averaged over slices; the dynamic range
    comes from the ground-truth (first) volume."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    r = float(a.max() - a.min()) if data_range is None else float(data_range)
    if r <= 0:
        raise MetricError("degenerate data range: constant ground truth")
    return float(np.mean([ssim_slice(a[i], b[i], r) for i in range(a.shape[0])]))


# -- slice extraction and encoding ------------------------------------------------


def _bilinear_resize(img, out_side):
    h, w = img.shape
    if (h, w) == (out_side, out_side):
        return img.astype(np.float64)
    ry = np.linspace(0, h - 1, out_side)
    rx = np.linspace(0, w - 1, out_side)
    y0 = np.floor(ry).astype(int)
    x0 = np.floor(rx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    img = img.astype(np.float64)
    return (
        img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + img[np.ix_(y1, x0)] * fy * (1 - fx)
        + img[np.ix_(y0, x1)] * (1 - fy) * fx
        + img[np.ix_(y1, x1)] * fy * fx
    )


def extract_eval_slices(volume, raster=64, source_id="") -> SliceSet:
    """Nine axial slices at the central slice plus {0, +-10, +-20, +-30, +-40}
    voxels, clamped into range, each resampled to a raster x raster grid."""
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    d = vox.shape[0]
    center = d // 2
    idx = [int(np.clip(center + off, 0, d - 1)) for off in SLICE_OFFSETS]
    slices = [_bilinear_resize(vox[i], raster) for i in idx]
    return SliceSet(slices=slices, source_ids=[source_id] * len(idx), offsets=list(SLICE_OFFSETS))


def _conv2d_relu_pool(x, w, b):
    # x: (N,C,H,W); w: (F,C,3,3); stride-1 pad-1 conv, ReLU, 2x2 mean pool
    n, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, f, h * wd), dtype=np.float32)
    for i in range(3):
        for j in range(3):
            xv = np.ascontiguousarray(xp[:, :, i : i + h, j : j + wd]).reshape(n, c, h * wd)
            out += np.matmul(w[:, :, i, j], xv)
    out = out.reshape(n, f, h, wd) + b.reshape(1, f, 1, 1)
    out = np.maximum(out, 0.0)
    return out.reshape(n, f, h // 2, 2, wd // 2, 2).mean(axis=(3, 5))


class SliceEncoder:
    """Fixed random-weight 4-stage convolutional encoder: conv-relu-pool
    stages then global average pooling; deterministic per (seed, dim)."""

    def __init__(self, seed: int = 0, dim: int = 256, raster: int = 64):
        if dim % 8 != 0:
            raise MetricError("encoder dim must be divisible by 8")
        self.seed = seed
        self.dim = dim
        self.raster = raster
        widths = [dim // 8, dim // 4, dim // 2, dim]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE11C0DE]))
        self.layers = []
        c_in = 1
        for c_out in widths:
            std = np.sqrt(2.0 / (c_in * 9))
            w = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(np.float32)
            b = np.zeros(c_out, dtype=np.float32)
            self.layers.append((w, b))
            c_in = c_out

    @property
    def encoder_id(self) -> str:
        return f"randconv2d-v1/seed{self.seed}dim{self.dim}raster{self.raster}"

    def encode(self, slice_set: SliceSet) -> FeatureMatrix:
        x = np.stack([np.asarray(s, dtype=np.float32) for s in slice_set.slices])[:, None]
        if x.shape[2] != self.raster or x.shape[3] != self.raster:
            raise MetricError(f"encoder expects {self.raster}x{self.raster} slices, got {x.shape[2:]}")
        for w, b in self.layers:
            x = _conv2d_relu_pool(x, w, b)
        feats = x.mean(axis=(2, 3), dtype=np.float64)
        return FeatureMatrix(feats, self.encoder_id, self.seed)


def stack_features(mats) -> FeatureMatrix:
    ids = {m.encoder_id for m in mats}
    if len(ids) != 1:
        raise MetricError(f"cannot stack features from different encoders: {ids}")
    return FeatureMatrix(np.vstack([m.features for m in mats]), mats[0].encoder_id, mats[0].encoder_seed)


# -- distribution distances -------------------------------------------------------


def _as_rows(a):
    rows = a.features if isinstance(a, FeatureMatrix) else np.asarray(a, dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def frechet_distance(a, b, reg=1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with the
    matrix square roots taken by symmetric eigendecomposition."""
    fa, fb = _as_rows(a), _as_rows(b)
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise MetricError("Frechet distance needs at least 2 rows per set")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    sa = np.cov(fa, rowvar=False) + reg * np.eye(fa.shape[1])
    sb = np.cov(fb, rowvar=False) + reg * np.eye(fb.shape[1])
    la, ua = np.linalg.eigh(sa)
    sa_half = (ua * np.sqrt(np.maximum(la, 0.0))) @ ua.T
    m = sa_half @ sb @ sa_half
    m = (m + m.T) / 2.0
    ev = np.linalg.eigvalsh(m)
    if ev.min() < -1e-6:
        raise MetricError(f"covariance square root produced eigenvalue {ev.min():.3e} < -1e-6")
    trace_sqrt = np.sum(np.sqrt(np.maximum(ev, 0.0)))
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * trace_sqrt)
    return max(d2, 0.0)


def _poly_kernel(x, y, dim):
    return (x @ y.T / dim + 1.0) ** 3


def kernel_distance(a, b) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel; diagonal terms are
    excluded, so same-distribution estimates may be slightly negative."""
    fa, fb = _as_rows(a), _as_rows(b)
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise MetricError("kernel distance needs at least 2 rows per set")
    m, n = fa.shape[0], fb.shape[0]
    dim = fa.shape[1]
    kaa = _poly_kernel(fa, fa, dim)
    kbb = _poly_kernel(fb, fb, dim)
    kab = _poly_kernel(fa, fb, dim)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


# -- run-level evaluation -----------------------------------------------------------


def encode_volumes(volumes, encoder: SliceEncoder, ids=None) -> FeatureMatrix:
    ids = ids or [""] * len(volumes)
    mats = [encoder.encode(extract_eval_slices(v, raster=encoder.raster, source_id=i)) for v, i in zip(volumes, ids)]
    return stack_features(mats)


def evaluate_run(preds, gts, reference: FeatureMatrix, encoder: SliceEncoder, config=None) -> MetricReport:
    """All five metrics for matched prediction/ground-truth volume lists
    against a reference slice corpus (training-split targets)."""
    if not preds or len(preds) != len(gts):
        raise MetricError("need matched, non-empty prediction/ground-truth sets")
    pv = [p.voxels if hasattr(p, "voxels") else np.asarray(p) for p in preds]
    gv = [g.voxels if hasattr(g, "voxels") else np.asarray(g) for g in gts]
    sq_sum, count = 0.0, 0
    g_min, g_max = np.inf, -np.inf
    ssims = []
    for p, g in zip(pv, gv):
        if p.shape != g.shape:
            raise MetricError(f"pair shape mismatch: {p.shape} vs {g.shape}")
        sq_sum += float(np.sum((p.astype(np.float64) - g.astype(np.float64)) ** 2))
        count += p.size
        g_min = min(g_min, float(g.min()))
        g_max = max(g_max, float(g.max()))
        ssims.append(ssim_mean_axial(g, p))
    pooled_mse = sq_sum / count
    pooled_range = g_max - g_min
    if pooled_range <= 0:
        raise MetricError("degenerate data range: constant ground truth")
    if pooled_mse < pooled_range**2 * 1e-10:
        psnr_db = 100.0
    else:
        psnr_db = float(10.0 * np.log10(pooled_range**2 / pooled_mse))
    pred_feats = encode_volumes(preds, encoder)
    fid = frechet_distance(pred_feats, reference)
    kid = kernel_distance(pred_feats, reference)
    return MetricReport(
        mse=pooled_mse,
        psnr_db=psnr_db,
        ssim=float(np.mean(ssims)),
        fid_axial=fid,
        kid_axial=kid,
        config=dict(config or {}),
    )
