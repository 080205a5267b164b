"""Volumes, the VOL1 file format, synthetic head phantoms and preprocessing.

Axes are (z, y, x) with x the left-right axis. In a 128^3 head the right
sinus sits at low x and the left sinus at high x, mirrored about the
sagittal midplane.
"""
from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

HEAD_EXTENT = 128
SAMPLE_EXTENT = 32
# 173 x 0.53 mm sagittal and 319 x 0.75 mm coronal/axial, resampled to 128^3
HEAD_SPACING = (319 * 0.75 / HEAD_EXTENT, 319 * 0.75 / HEAD_EXTENT, 173 * 0.53 / HEAD_EXTENT)

KINDS = ("none", "thickening", "polyp", "cyst")
ANOMALY_KINDS = KINDS[1:]
SIDES = ("left", "right")

TISSUE_THRESHOLD = 0.3
_TISSUE_RANGE = (0.35, 0.8)
_AIR_MAX = 0.15
_BONE_RANGE = (0.15, 0.25)
_LESION_RANGE = (0.85, 0.95)

MANIFEST_FIELDS = ("patient_id", "side", "label", "anomaly_kind", "path")


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"a volume is 3-d, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape


# VOL1 -----------------------------------------------------------------------

VOLUME_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4s3I3f")


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class ExtentMismatchError(VolumeFormatError):
    pass


def write_volume(volume: Volume, path) -> None:
    d, h, w = volume.shape
    header = _HEADER.pack(VOLUME_MAGIC, d, h, w, *volume.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(volume.voxels.astype("<f4").tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) >= 4 and buf[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {VOLUME_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedVolumeError(f"{path}: header is {len(buf)} bytes, need {_HEADER.size}")
    _, d, h, w, sz, sy, sx = _HEADER.unpack_from(buf)
    expected = 4 * d * h * w
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise TruncatedVolumeError(f"{path}: payload is {payload} bytes, header {d}x{h}x{w} needs {expected}")
    if payload > expected:
        raise ExtentMismatchError(f"{path}: {payload - expected} bytes beyond the {d}x{h}x{w} payload")
    vox = np.frombuffer(buf, dtype="<f4", count=d * h * w, offset=_HEADER.size).reshape(d, h, w)
    return Volume(vox.astype(np.float32), (sz, sy, sx))


# resampling -------------------------------------------------------------------

def _sample(voxels: np.ndarray, mat: np.ndarray, out_shape, fill: float) -> np.ndarray:
    out = np.empty(out_shape, dtype=np.float32)
    kernels.affine_sample3d(np.ascontiguousarray(voxels, dtype=np.float32),
                            np.ascontiguousarray(mat, dtype=np.float64), out, fill)
    return out


def resize_trilinear(v: Volume, target=SAMPLE_EXTENT) -> Volume:
    """Corner-aligned trilinear resize (output corners sample input corners)."""
    target = (target,) * 3 if np.isscalar(target) else tuple(target)
    if min(v.shape) < 2 or min(target) < 2:
        raise ValueError(f"resize needs at least 2 voxels per axis, got {v.shape} -> {target}")
    scale = [(n_in - 1) / (n_out - 1) for n_in, n_out in zip(v.shape, target)]
    mat = np.zeros((3, 4))
    mat[:, :3] = np.diag(scale)
    spacing = tuple(s * k for s, k in zip(v.spacing, scale))
    return Volume(_sample(v.voxels, mat, target, 0.0), spacing)


def flip_right_to_left(v: Volume) -> Volume:
    """Mirror every coronal plane along the left-right (x) axis."""
    return Volume(v.voxels[:, :, ::-1].copy(), v.spacing)


def normalize_minus1_1(v: Volume) -> Volume:
    """Affine map of [min, max] onto [-1, 1]; a constant volume becomes zeros."""
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return Volume(np.zeros_like(v.voxels), v.spacing)
    out = (x - lo) / (hi - lo) * 2.0 - 1.0
    return Volume(out.astype(np.float32), v.spacing)


# sinus extraction ---------------------------------------------------------------

@dataclass(frozen=True)
class CropBox:
    origin: Tuple[int, int, int]
    extent: Tuple[int, int, int]

    def slices(self):
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    def mirrored(self, width: int) -> "CropBox":
        z, y, x = self.origin
        return CropBox((z, y, width - x - self.extent[2]), self.extent)


RIGHT_BOX = CropBox((40, 40, 16), (48, 48, 48))
LEFT_BOX = RIGHT_BOX.mirrored(HEAD_EXTENT)


def extract_sinus_subvolumes(head: Volume, left_box: CropBox = LEFT_BOX,
                             right_box: CropBox = RIGHT_BOX) -> Tuple[Volume, Volume]:
    """Fixed-coordinate crops of the two maxillary sinus regions, (left, right)."""
    crops = []
    for box in (left_box, right_box):
        if any(o < 0 or o + e > n for o, e, n in zip(box.origin, box.extent, head.shape)):
            raise ValueError(f"crop box {box} lies outside a volume of shape {head.shape}")
        crops.append(Volume(head.voxels[box.slices()].copy(), head.spacing))
    return crops[0], crops[1]


# phantoms ---------------------------------------------------------------------

@dataclass
class Phantom:
    volume: Volume
    kinds: Dict[str, str]
    cavity_masks: Dict[str, np.ndarray]


def _smooth_noise(rng, shape, coarse=9):
    """Zero-mean, unit-ish smooth noise: coarse gaussian grid upsampled trilinearly."""
    grid = rng.standard_normal((coarse,) * 3).astype(np.float32)
    mat = np.zeros((3, 4))
    mat[:, :3] = np.diag([(coarse - 1) / (n - 1) for n in shape])
    return _sample(grid, mat, shape, 0.0)


def _rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    # rotates the (y, x) plane about the z axis
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ellipsoid_radius(coords, center, axes, rot):
    """Normalised ellipsoid radius at each coordinate (1 on the surface)."""
    local = np.einsum("ij,j...->i...", rot.T, coords - np.reshape(center, (3, 1, 1, 1)))
    return np.sqrt(sum((local[i] / axes[i]) ** 2 for i in range(3)))


def _wall_point(rng, center, axes, rot):
    """A random point on the ellipsoid surface in the floor half, with its outward normal."""
    d = rng.standard_normal(3)
    d[0] = abs(d[0]) + 0.5  # +z is the cavity floor
    d /= np.linalg.norm(d)
    local = d / np.sqrt(np.sum((d / axes) ** 2))
    normal = rot @ (local / axes ** 2)
    return np.asarray(center) + rot @ local, normal / np.linalg.norm(normal)


def _paint_sinus(vol, rng, box: CropBox, kind):
    """Paint one cavity (and its anomaly) inside ``box``; returns the full-size cavity mask."""
    region = box.slices()
    origin = np.array(box.origin, dtype=np.float32).reshape(3, 1, 1, 1)
    coords = np.indices(box.extent, dtype=np.float32) + origin
    mid = np.array(box.origin) + (np.array(box.extent) - 1) / 2.0
    center = mid + rng.uniform(-3, 3, 3)
    axes = np.array([rng.uniform(12, 16), rng.uniform(11, 15), rng.uniform(9, 12)])
    rot = _rotation_z(np.deg2rad(rng.uniform(-10, 10)))
    r = _ellipsoid_radius(coords, center, axes, rot)
    cavity = r < 1.0
    sub = vol[region]
    # thin cortical bone shell around the air space, dark on FLAIR like the air itself
    shell = (r >= 1.0) & (r < 1.0 + rng.uniform(1.5, 2.5) / axes.mean())
    sub[shell] = rng.uniform(*_BONE_RANGE)
    sub[cavity] = np.clip(0.05 + 0.03 * rng.standard_normal(int(cavity.sum())), 0.0, _AIR_MAX)
    # lesions are hyperintense relative to the surrounding soft tissue
    bright = rng.uniform(*_LESION_RANGE)
    if kind == "thickening":
        thickness = rng.uniform(1.0, 4.0)
        # mucosa lines the wall: voxels within ``thickness`` of the surface along the radius
        rim = cavity & (r > 1.0 - thickness / axes.mean())
        sub[rim] = bright
    elif kind == "polyp":
        radius = rng.uniform(4.0, 7.0)
        anchor, _ = _wall_point(rng, center, axes, rot)
        blob = np.linalg.norm(coords - anchor.reshape(3, 1, 1, 1), axis=0) < radius
        sub[blob & cavity] = bright
    elif kind == "cyst":
        radius = rng.uniform(7.0, 11.0)
        anchor, normal = _wall_point(rng, center, axes, rot)
        # centre pushed outside the wall so the intersection is a dome
        dome_center = anchor + 0.3 * radius * normal
        blob = np.linalg.norm(coords - dome_center.reshape(3, 1, 1, 1), axis=0) < radius
        sub[blob & cavity] = bright
    elif kind != "none":
        raise ValueError(f"unknown anomaly kind {kind!r}; expected one of {KINDS}")
    mask = np.zeros(vol.shape, dtype=bool)
    mask[region] = cavity
    return mask


def generate_head(left_kind: str, right_kind: str, seed, symmetric: bool = False) -> Phantom:
    """A 128^3 head phantom: textured tissue with two dark sinus cavities.

    With ``symmetric`` the right half is the exact mirror of the left half and
    ``right_kind`` is ignored.
    """
    for kind in (left_kind, right_kind):
        if kind not in KINDS:
            raise ValueError(f"unknown anomaly kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    n = HEAD_EXTENT
    vol = 0.575 + 0.08 * _smooth_noise(rng, (n, n, n))
    np.clip(vol, *_TISSUE_RANGE, out=vol)
    z, y, x = np.ogrid[:n, :n, :n]
    c, a = (n - 1) / 2.0, n / 2.0 - 2
    vol[((z - c) ** 2 + (y - c) ** 2 + (x - c) ** 2) > a * a] = 0.0
    left_cavity = _paint_sinus(vol, rng, LEFT_BOX, left_kind)
    if symmetric:
        half = n // 2
        vol[:, :, :half] = vol[:, :, half:][:, :, ::-1]
        right_cavity = left_cavity[:, :, ::-1].copy()
        right_kind = left_kind
    else:
        right_cavity = _paint_sinus(vol, rng, RIGHT_BOX, right_kind)
    return Phantom(Volume(vol, HEAD_SPACING), {"left": left_kind, "right": right_kind},
                   {"left": left_cavity, "right": right_cavity})


def generate_phantom(kind: str, seed) -> Tuple[Volume, int]:
    """Head phantom whose two sinuses both show ``kind``; returns (volume, label)."""
    ph = generate_head(kind, kind, seed)
    return ph.volume, int(kind != "none")


# augmentation -----------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    rotation_deg: Tuple[float, float, float] = (10.0, 10.0, 10.0)
    translation: float = 2.0
    scale: Tuple[float, float] = (0.9, 1.1)
    flip_axes: Tuple[int, ...] = (2,)
    flip_p: float = 0.5
    noise_sigma: float = 0.05
    fill: float = -1.0

    def __post_init__(self):
        self.rotation_deg = tuple(float(r) for r in self.rotation_deg)
        self.scale = tuple(float(s) for s in self.scale)
        self.flip_axes = tuple(int(a) for a in self.flip_axes)
        if len(self.rotation_deg) != 3 or min(self.rotation_deg) < 0:
            raise ValueError("rotation_deg needs three non-negative ranges")
        if self.translation < 0 or self.noise_sigma < 0:
            raise ValueError("translation and noise sigma must be non-negative")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale}")
        if not 0 <= self.flip_p <= 1 or any(a not in (0, 1, 2) for a in self.flip_axes):
            raise ValueError("flip_p must lie in [0, 1] and flip axes in {0, 1, 2}")

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0, 0.0), 0.0, (1.0, 1.0), (), 0.0, 0.0)

    def to_dict(self):
        return {"rotation_deg": list(self.rotation_deg), "translation": self.translation,
                "scale": list(self.scale), "flip_axes": list(self.flip_axes),
                "flip_p": self.flip_p, "noise_sigma": self.noise_sigma, "fill": self.fill}


def _rotation(angles):
    az, ay, ax = angles
    cz, sz, cy, sy, cx, sx = np.cos(az), np.sin(az), np.cos(ay), np.sin(ay), np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment_voxels(voxels: np.ndarray, policy: AugmentationPolicy, draw_seed) -> np.ndarray:
    rng = np.random.default_rng(draw_seed)
    angles = np.deg2rad([rng.uniform(-r, r) if r else 0.0 for r in policy.rotation_deg])
    shift = rng.uniform(-policy.translation, policy.translation, 3) if policy.translation else np.zeros(3)
    lo, hi = policy.scale
    s = rng.uniform(lo, hi) if hi > lo else lo
    out = voxels
    if np.any(angles) or np.any(shift) or s != 1.0:
        center = (np.asarray(voxels.shape) - 1) / 2.0
        a = _rotation(angles) / s
        mat = np.zeros((3, 4))
        mat[:, :3] = a
        mat[:, 3] = center - a @ center + shift
        out = _sample(voxels, mat, voxels.shape, policy.fill)
    for axis in policy.flip_axes:
        if rng.random() < policy.flip_p:
            out = np.flip(out, axis=axis)
    if policy.noise_sigma > 0:
        out = out + rng.normal(0.0, policy.noise_sigma, out.shape).astype(np.float32)
        out = np.clip(out, -1.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


@dataclass
class SinusSample:
    volume: Volume
    label: int
    patient_id: str
    side: str
    anomaly_kind: str = "none"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")

    @property
    def sample_id(self) -> str:
        return f"{self.patient_id}_{self.side}"

    def validate(self):
        if self.volume.shape != (SAMPLE_EXTENT,) * 3:
            raise ValueError(f"{self.sample_id}: extent {self.volume.shape}, expected {SAMPLE_EXTENT}^3")
        v = self.volume.voxels
        if v.min() < -1 or v.max() > 1:
            raise ValueError(f"{self.sample_id}: voxel values outside [-1, 1]")
        if self.anomaly_kind != "unknown" and (self.anomaly_kind == "none") != (self.label == 0):
            raise ValueError(f"{self.sample_id}: label {self.label} disagrees with kind {self.anomaly_kind!r}")


def augment(sample: SinusSample, policy: AugmentationPolicy, draw_seed) -> SinusSample:
    """Random affine, random flips, then additive noise clamped to [-1, 1]."""
    vox = augment_voxels(sample.volume.voxels, policy, draw_seed)
    return replace(sample, volume=Volume(vox, sample.volume.spacing))


def preprocess_pipeline(head: Volume, labels: Dict[str, int], patient_id: str,
                        kinds: Optional[Dict[str, str]] = None,
                        left_box: CropBox = LEFT_BOX, right_box: CropBox = RIGHT_BOX) -> List[SinusSample]:
    """extract -> flip (right only) -> resize to 32^3 -> normalise, one sample per labelled side."""
    if head.shape != (HEAD_EXTENT,) * 3:
        raise ValueError(f"head volume must be {HEAD_EXTENT}^3, got {head.shape}")
    left, right = extract_sinus_subvolumes(head, left_box, right_box)
    crops = {"left": left, "right": flip_right_to_left(right)}
    out = []
    for side in SIDES:
        if side not in labels:
            continue
        v = normalize_minus1_1(resize_trilinear(crops[side], SAMPLE_EXTENT))
        kind = (kinds or {}).get(side, "unknown")
        sample = SinusSample(v, int(labels[side]), patient_id, side, kind)
        sample.validate()
        out.append(sample)
    return out


# corpus -----------------------------------------------------------------------

def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (e.g. global seed, patient id, side)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


DEFAULT_NORMAL_RATIO = 269 / 399


@dataclass
class ManifestRow:
    patient_id: str
    side: str
    label: int
    anomaly_kind: str
    path: str

    @property
    def sample_id(self) -> str:
        return f"{self.patient_id}_{self.side}"


def assign_labels(patients: int, normal_ratio: float, seed: int, exclude: int = 0):
    """Per-sinus kinds with exact class counts: round(ratio * n) normal of n = 2P - exclude."""
    if patients < 1:
        raise ValueError("need at least one patient")
    if not 0 <= normal_ratio <= 1:
        raise ValueError(f"normal ratio must lie in [0, 1], got {normal_ratio}")
    slots = [(f"P{p:04d}", side) for p in range(patients) for side in SIDES]
    if not 0 <= exclude < len(slots):
        raise ValueError(f"cannot exclude {exclude} of {len(slots)} sinuses")
    rng = np.random.default_rng(derive_seed(seed, "labels"))
    order = rng.permutation(len(slots))
    kept = sorted(order[exclude:].tolist())
    n = len(kept)
    n_normal = int(round(normal_ratio * n))
    is_normal = np.zeros(n, dtype=bool)
    is_normal[rng.permutation(n)[:n_normal]] = True
    kinds = {}
    for slot, normal in zip(kept, is_normal):
        kinds[slots[slot]] = "none" if normal else ANOMALY_KINDS[rng.integers(len(ANOMALY_KINDS))]
    return kinds


def generate_corpus(out_dir, patients: int = 199, normal_ratio: float = DEFAULT_NORMAL_RATIO,
                    seed: int = 0, exclude: int = 0) -> List[ManifestRow]:
    """Write one VOL1 file per kept sinus plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    kinds = assign_labels(patients, normal_ratio, seed, exclude)
    rows = []
    for p in range(patients):
        pid = f"P{p:04d}"
        sides = {s: kinds[(pid, s)] for s in SIDES if (pid, s) in kinds}
        if not sides:
            continue
        ph = generate_head(kinds.get((pid, "left"), "none"), kinds.get((pid, "right"), "none"),
                           derive_seed(seed, pid))
        labels = {s: int(k != "none") for s, k in sides.items()}
        for sample in preprocess_pipeline(ph.volume, labels, pid, ph.kinds):
            rel = f"volumes/{sample.sample_id}.vol"
            write_volume(sample.volume, out_dir / rel)
            rows.append(ManifestRow(pid, sample.side, sample.label, sample.anomaly_kind, rel))
    write_manifest(rows, out_dir / "manifest.csv")
    return rows


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.patient_id, r.side, r.label, r.anomaly_kind, r.path])


def read_manifest(path) -> List[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            label = int(rec["label"])
            if label not in (0, 1) or rec["side"] not in SIDES:
                raise ValueError(f"{path}:{line}: bad label or side")
            rows.append(ManifestRow(rec["patient_id"], rec["side"], label, rec["anomaly_kind"], rec["path"]))
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate sample ids")
    return rows


def load_samples(manifest_path) -> List[SinusSample]:
    base = Path(manifest_path).parent
    samples = []
    for r in read_manifest(manifest_path):
        vol = read_volume(base / r.path if not os.path.isabs(r.path) else r.path)
        samples.append(SinusSample(vol, r.label, r.patient_id, r.side, r.anomaly_kind))
    return samples
