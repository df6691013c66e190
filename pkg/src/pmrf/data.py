"""Synthetic paired volumes, normalization, patch sampling and volume files.

The phantom generator is engineered so the conditional mean of the target
given the input has a closed form: deterministic core enhancement plus
Bernoulli rim enhancement plus zero-mean texture gives
``E[y | x] = x + core_gain * core + p * rim_gain * rim``, which downstream
tests use as an analytic oracle for the Stage-1 predictor.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

VOL_MAGIC = b"PMRFVOL1"
VOL_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


class DataError(RuntimeError):
    pass


class VolumeFormatError(DataError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    modality: str = "synthetic"
    mean: float | None = None
    std: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.voxels.shape

    def copy(self) -> "Volume":
        return Volume(self.voxels.copy(), self.modality, self.mean, self.std, dict(self.meta))


@dataclass
class VolumePair:
    x: Volume
    y: Volume
    id: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise DataError(f"pair {self.id}: shape mismatch {self.x.shape} vs {self.y.shape}")


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple = (96, 96, 96)
    n_lesions: int = 4
    rim_enhance_prob: float = 0.5
    rim_gain: float = 1.0
    core_gain: float = 1.2
    texture_amp: float = 0.3
    seed: int = 0
    lesion_radius: tuple = (2.5, 4.5)
    rim_width: float = 2.0
    core_visibility: float = 0.55
    base_texture_amp: float = 0.08

    def __post_init__(self):
        if not 0.0 <= self.rim_enhance_prob <= 1.0:
            raise DataError(f"rim_enhance_prob must be in [0,1], got {self.rim_enhance_prob}")
        if self.rim_gain < 0 or self.core_gain < 0 or self.texture_amp < 0:
            raise DataError("gains and texture_amp must be non-negative")

    def to_dict(self):
        d = dict(self.__dict__)
        d["size"] = list(self.size)
        d["lesion_radius"] = list(self.lesion_radius)
        return d


@dataclass
class PhantomSample:
    """Generator output with the ground-truth masks the oracles need."""

    x: Volume
    y: Volume
    core_mask: np.ndarray
    rim_mask: np.ndarray
    lesion_rims: list


def _trilinear_upsample(low, out_shape):
    # smooth band-limited field: trilinear interpolation of a coarse grid
    coords = [np.linspace(0, low.shape[i] - 1, out_shape[i]) for i in range(3)]
    i0 = [np.floor(c).astype(int) for c in coords]
    i1 = [np.minimum(i + 1, low.shape[k] - 1) for k, i in enumerate(i0)]
    f = [c - i for c, i in zip(coords, i0)]
    out = np.zeros(out_shape, dtype=np.float64)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                iz = (i1 if dz else i0)[0][:, None, None]
                iy = (i1 if dy else i0)[1][None, :, None]
                ix = (i1 if dx else i0)[2][None, None, :]
                wz = (f[0] if dz else 1 - f[0])[:, None, None]
                wy = (f[1] if dy else 1 - f[1])[None, :, None]
                wx = (f[2] if dx else 1 - f[2])[None, None, :]
                out += low[iz, iy, ix] * wz * wy * wx
    return out


def phantom_geometry(spec: PhantomSpec):
    """Deterministic anatomy for one phantom: textured ellipsoid base plus
    non-overlapping lesions, each a visible core with a surrounding rim shell."""
    if min(spec.size) < 32:
        raise DataError(f"phantom size {spec.size} too small, need >= 32 per axis")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    d, h, w = spec.size
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    center = np.array([d / 2, h / 2, w / 2])
    semi = np.array([d, h, w]) * rng.uniform(0.33, 0.42, size=3)
    r2 = ((zz - center[0]) / semi[0]) ** 2 + ((yy - center[1]) / semi[1]) ** 2 + ((xx - center[2]) / semi[2]) ** 2
    brain = r2 <= 1.0
    base = np.where(brain, 1.0 - 0.35 * r2, 0.0)

    low_shape = tuple(max(2, s // 8) for s in spec.size)
    texture = _trilinear_upsample(rng.standard_normal(low_shape), spec.size)
    base = base + spec.base_texture_amp * texture * brain

    core_mask = np.zeros(spec.size, dtype=bool)
    rim_mask = np.zeros(spec.size, dtype=bool)
    lesion_rims = []
    centers = []
    attempts = 0
    while len(lesion_rims) < spec.n_lesions and attempts < 200:
        attempts += 1
        c = center + (rng.uniform(-0.55, 0.55, size=3)) * semi
        r_core = rng.uniform(*spec.lesion_radius)
        r_out = r_core + spec.rim_width
        cr2 = ((c - center) / semi) @ ((c - center) / semi)
        if cr2 > 0.55:  # keep lesions well inside the brain
            continue
        if any(np.linalg.norm(c - p) < r_out + pr + 1.0 for p, pr in centers):
            continue
        dist = np.sqrt((zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2)
        core = dist <= r_core
        rim = (dist > r_core) & (dist <= r_out)
        if not core.any() or not rim.any():
            continue
        centers.append((c, r_out))
        core_mask |= core
        rim_mask |= rim
        lesion_rims.append(rim)
    base = base + spec.core_visibility * core_mask
    x = Volume(base.astype(np.float32), modality="nonce")
    return x, core_mask, rim_mask, lesion_rims


def apply_enhancement(x: Volume, core_mask, rim_mask, lesion_rims, spec: PhantomSpec, rng) -> Volume:
    """Stochastic contrast map: deterministic core gain, per-lesion Bernoulli
    rim gain, zero-mean texture restricted to the enhancing region."""
    y = x.voxels.astype(np.float64)
    y = y + spec.core_gain * core_mask
    enhancing = core_mask.copy()
    for rim in lesion_rims:
        if rng.random() < spec.rim_enhance_prob:
            y = y + spec.rim_gain * rim
            enhancing |= rim
    if spec.texture_amp > 0:
        eta = rng.standard_normal(y.shape)
        y = y + spec.texture_amp * eta * enhancing
    return Volume(y.astype(np.float32), modality="ce")


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    x, core_mask, rim_mask, lesion_rims = phantom_geometry(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 202]))
    y = apply_enhancement(x, core_mask, rim_mask, lesion_rims, spec, rng)
    return PhantomSample(x, y, core_mask, rim_mask, lesion_rims)


def generate_phantom_pair(spec: PhantomSpec) -> VolumePair:
    s = generate_phantom(spec)
    return VolumePair(s.x, s.y, id=f"phantom-{spec.seed:06d}")


def posterior_mean_target(x: Volume, core_mask, rim_mask, spec: PhantomSpec) -> np.ndarray:
    """Closed-form conditional mean of the enhanced volume given the input."""
    return (
        x.voxels.astype(np.float64)
        + spec.core_gain * core_mask
        + spec.rim_enhance_prob * spec.rim_gain * rim_mask
    )


def analytic_rim_variance(spec: PhantomSpec) -> float:
    """Variance of (y - x) at a rim voxel under the generator."""
    p = spec.rim_enhance_prob
    return p * (1 - p) * spec.rim_gain**2 + p * spec.texture_amp**2


# -- normalization / padding / patches ----------------------------------------


def zscore_normalize(v: Volume, foreground_only: bool = False):
    """Standardize to zero mean, unit variance; returns (volume, mean, std).

    With ``foreground_only`` the statistics come from nonzero voxels only
    (skull-stripped convention), but the affine map is applied everywhere.
    """
    vox = v.voxels.astype(np.float64)
    sel = vox[vox != 0] if foreground_only else vox
    if sel.size == 0:
        raise DataError("degenerate intensity distribution: no foreground voxels")
    mean = float(sel.mean())
    std = float(sel.std())
    if std < 1e-8:
        raise DataError("degenerate intensity distribution: near-constant volume")
    out = ((vox - mean) / std).astype(np.float32)
    return Volume(out, v.modality, mean, std, dict(v.meta)), mean, std


def denormalize(v: Volume) -> Volume:
    if v.mean is None or v.std is None:
        raise DataError("volume carries no normalization record")
    raw = (v.voxels.astype(np.float64) * v.std + v.mean).astype(np.float32)
    return Volume(raw, v.modality, None, None, dict(v.meta))


def pad_to_min(v: Volume, min_side: int = 64) -> Volume:
    """Centered zero-padding up to ``min_side`` per axis; offsets recorded in
    ``meta['pad_offset']`` for exact crop-back."""
    if min_side < 1:
        raise DataError("min_side must be >= 1")
    shape = v.shape
    pads = []
    for s in shape:
        total = max(0, min_side - s)
        pads.append((total // 2, total - total // 2))
    out = np.pad(v.voxels, pads)
    meta = dict(v.meta)
    meta["pad_offset"] = [p[0] for p in pads]
    meta["orig_shape"] = list(shape)
    return Volume(out, v.modality, v.mean, v.std, meta)


def crop_back(v: Volume) -> Volume:
    if "pad_offset" not in v.meta:
        return v.copy()
    off = v.meta["pad_offset"]
    orig = v.meta["orig_shape"]
    sl = tuple(slice(o, o + s) for o, s in zip(off, orig))
    meta = {k: val for k, val in v.meta.items() if k not in ("pad_offset", "orig_shape")}
    return Volume(v.voxels[sl].copy(), v.modality, v.mean, v.std, meta)


def sample_patches(pair: VolumePair, n: int = 8, side: int = 64, rng=None):
    """Aligned random crops; origins uniform (inclusive) over valid positions."""
    rng = rng or np.random.default_rng()
    shape = pair.x.shape
    if any(s < side for s in shape):
        raise DataError(f"volume {shape} smaller than patch side {side}; pad first")
    out = []
    for _ in range(n):
        oz, oy, ox = (int(rng.integers(0, s - side + 1)) for s in shape)
        sl = (slice(oz, oz + side), slice(oy, oy + side), slice(ox, ox + side))
        out.append((pair.x.voxels[sl].copy(), pair.y.voxels[sl].copy()))
    return out


# -- volume files and manifests ------------------------------------------------


def save_volume(path, v: Volume):
    vox = v.voxels
    if vox.dtype == np.bool_:
        vox = vox.astype(np.uint8)
    code = _DTYPE_TO_CODE.get(vox.dtype.newbyteorder("<") if vox.dtype.byteorder == ">" else vox.dtype)
    if code is None:
        raise VolumeFormatError(f"unsupported voxel dtype {vox.dtype}")
    meta = {"modality": v.modality, "mean": v.mean, "std": v.std, "meta": v.meta}
    raw = np.ascontiguousarray(vox, dtype=_DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(struct.pack("<IB", VOL_VERSION, code))
        fh.write(struct.pack("<3I", *vox.shape))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    return path


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        magic = fh.read(len(VOL_MAGIC))
        if magic != VOL_MAGIC:
            raise VolumeFormatError(f"{path}: not a volume file (bad magic)")
        hdr = fh.read(5)
        if len(hdr) != 5:
            raise VolumeFormatError(f"{path}: unexpected end of payload in header")
        version, code = struct.unpack("<IB", hdr)
        if version != VOL_VERSION:
            raise VolumeFormatError(f"{path}: unsupported volume format version {version}")
        if code not in _DTYPE_CODES:
            raise VolumeFormatError(f"{path}: unknown dtype code {code}")
        dims_raw = fh.read(12)
        if len(dims_raw) != 12:
            raise VolumeFormatError(f"{path}: unexpected end of payload in dims")
        dims = struct.unpack("<3I", dims_raw)
        (nbytes,) = struct.unpack("<Q", fh.read(8))
        raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise VolumeFormatError(f"{path}: unexpected end of payload")
        vox = np.frombuffer(raw, dtype=_DTYPE_CODES[code]).reshape(dims).copy()
        len_raw = fh.read(8)
        if len(len_raw) != 8:
            raise VolumeFormatError(f"{path}: unexpected end of payload before metadata")
        (meta_len,) = struct.unpack("<Q", len_raw)
        blob = fh.read(meta_len)
        if len(blob) != meta_len:
            raise VolumeFormatError(f"{path}: unexpected end of payload in metadata")
        meta = json.loads(blob)
    return Volume(vox, meta["modality"], meta["mean"], meta["std"], meta.get("meta", {}))


def split_ids(ids, counts, dataset_seed: int):
    """Deterministic split assignment: ids ordered by a seeded hash, then cut
    into train/val/test blocks of the requested sizes."""
    n_train, n_val, n_test = counts
    if len(ids) != n_train + n_val + n_test:
        raise DataError("counts do not cover the id list")
    ranked = sorted(ids, key=lambda i: hashlib.sha256(f"{dataset_seed}:{i}".encode()).hexdigest())
    assign = {}
    for k, i in enumerate(ranked):
        assign[i] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return assign


def make_dataset(out_dir, spec: PhantomSpec, counts=(200, 40, 20), dataset_seed: int = 0):
    """Generate, normalize and store a paired dataset plus its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_total = sum(counts)
    ids = [f"vol{i:05d}" for i in range(n_total)]
    assign = split_ids(ids, counts, dataset_seed)
    records = []
    for i, vid in enumerate(ids):
        seed_i = int(np.random.SeedSequence([dataset_seed, i]).generate_state(1)[0])
        vspec = replace(spec, seed=seed_i)
        sample = generate_phantom(vspec)
        xn, xm, xs = zscore_normalize(sample.x, foreground_only=True)
        yn, ym, ys = zscore_normalize(sample.y, foreground_only=True)
        rec = {
            "id": vid,
            "split": assign[vid],
            "x": f"{vid}_x.vol",
            "y": f"{vid}_y.vol",
            "core_mask": f"{vid}_core.vol",
            "rim_mask": f"{vid}_rim.vol",
            "x_mean": xm,
            "x_std": xs,
            "y_mean": ym,
            "y_std": ys,
            "phantom_seed": seed_i,
        }
        save_volume(out / rec["x"], xn)
        save_volume(out / rec["y"], yn)
        save_volume(out / rec["core_mask"], Volume(sample.core_mask.astype(np.uint8), "synthetic"))
        save_volume(out / rec["rim_mask"], Volume(sample.rim_mask.astype(np.uint8), "synthetic"))
        records.append(rec)
    manifest = {
        "dataset_seed": dataset_seed,
        "counts": list(counts),
        "phantom": spec.to_dict(),
        "volumes": records,
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return mpath


class Manifest:
    def __init__(self, path):
        self.path = Path(path)
        self.root = self.path.parent
        doc = json.loads(self.path.read_text())
        self.dataset_seed = doc["dataset_seed"]
        self.counts = doc["counts"]
        self.phantom = PhantomSpec(
            **{
                **doc["phantom"],
                "size": tuple(doc["phantom"]["size"]),
                "lesion_radius": tuple(doc["phantom"]["lesion_radius"]),
            }
        )
        self.records = doc["volumes"]

    def split(self, name):
        return [r for r in self.records if r["split"] == name]

    def load_pair(self, rec) -> VolumePair:
        x = load_volume(self.root / rec["x"])
        y = load_volume(self.root / rec["y"])
        return VolumePair(x, y, id=rec["id"], split=rec["split"])

    def load_mask(self, rec, which) -> np.ndarray:
        return load_volume(self.root / rec[which]).voxels.astype(bool)


def load_manifest(path) -> Manifest:
    return Manifest(path)
