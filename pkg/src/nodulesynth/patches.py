"""Patch extraction, spherical noise masks, and phantom datasets.

All geometry is physical: masks are spheres in millimetres, extraction
resamples onto a fixed target spacing, and the continuous patch center sits
at voxel coordinates ``((X-1)/2, (Y-1)/2, (Z-1)/2)``.

A patch dataset on disk is a directory of ``.vol`` containers (the raw,
intensity-normalized patches) plus a ``manifest.csv`` with columns
``patch_file,label,diameter_mm,split[,synthetic]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from nodulesynth.volume_io import (
    LABEL_BENIGN,
    LABEL_MALIGNANT,
    Volume,
    load_volume,
    save_volume,
)

MANIFEST_COLUMNS = ["patch_file", "label", "diameter_mm", "split"]
SPLITS = ("train", "val", "test")


@dataclass
class PipelineConfig:
    """Knobs for resampling, windowing, and masking."""

    target_spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    patch_shape: tuple[int, int, int] = (64, 64, 32)
    hu_window: tuple[float, float] = (-1000.0, 400.0)
    noise_range: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if any(int(d) < 1 for d in self.patch_shape):
            raise ValueError(f"patch_shape must be positive, got {self.patch_shape}")
        if any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target_spacing must be positive, got {self.target_spacing}")
        if self.hu_window[0] >= self.hu_window[1]:
            raise ValueError(f"hu_window low must be < high, got {self.hu_window}")


@dataclass
class PatchSample:
    """Aligned (raw, masked, mask) patch triple with its class label.

    ``raw`` holds normalized intensities in [-1, 1]; ``mask`` is binary with
    1 marking the in-painting region; ``masked`` equals ``raw`` outside the
    mask and holds noise inside it.
    """

    raw: np.ndarray
    masked: np.ndarray
    mask: np.ndarray
    label: int
    diameter_mm: float
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    synthetic: bool = False

    def validate(self) -> None:
        if not (self.raw.shape == self.masked.shape == self.mask.shape):
            raise ValueError(
                f"shape mismatch: raw {self.raw.shape}, masked {self.masked.shape}, "
                f"mask {self.mask.shape}"
            )
        if self.label not in (LABEL_BENIGN, LABEL_MALIGNANT):
            raise ValueError(f"label must be 1 (benign) or 2 (malignant), got {self.label}")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"mask must be binary, found values {vals}")
        if self.raw.min() < -1 or self.raw.max() > 1:
            raise ValueError("raw intensities must lie in [-1, 1]")
        outside = self.mask == 0
        if not np.array_equal(self.raw[outside], self.masked[outside]):
            raise ValueError("masked patch differs from raw outside the mask")


def patch_center(shape: Sequence[int]) -> np.ndarray:
    """Continuous center of a patch in voxel coordinates."""
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def _axis_samples(voxels: np.ndarray, coords: list[np.ndarray], pad_value: float) -> np.ndarray:
    """Trilinear interpolation on a separable coordinate grid.

    ``coords`` holds one fractional-index array per axis; positions outside
    ``[0, dim-1]`` in any axis evaluate to ``pad_value``.
    """
    dims = voxels.shape
    lo, frac, valid = [], [], []
    for ax, u in enumerate(coords):
        ok = (u >= 0) & (u <= dims[ax] - 1)
        uc = np.clip(u, 0, dims[ax] - 1)
        i0 = np.floor(uc).astype(np.int64)
        i0 = np.minimum(i0, dims[ax] - 2) if dims[ax] > 1 else np.zeros_like(i0)
        lo.append(i0)
        frac.append(uc - i0)
        valid.append(ok)

    vox = voxels.astype(np.float64, copy=False)
    out = np.zeros((len(coords[0]), len(coords[1]), len(coords[2])), dtype=np.float64)
    for cx in (0, 1):
        wx = (1 - frac[0] if cx == 0 else frac[0])[:, None, None]
        ix = np.minimum(lo[0] + cx, dims[0] - 1)
        for cy in (0, 1):
            wy = (1 - frac[1] if cy == 0 else frac[1])[None, :, None]
            iy = np.minimum(lo[1] + cy, dims[1] - 1)
            for cz in (0, 1):
                wz = (1 - frac[2] if cz == 0 else frac[2])[None, None, :]
                iz = np.minimum(lo[2] + cz, dims[2] - 1)
                out += wx * wy * wz * vox[np.ix_(ix, iy, iz)]
    inside = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
    return np.where(inside, out, pad_value)


def extract_patch(volume: Volume, center: Sequence[float], config: PipelineConfig) -> np.ndarray:
    """Resample a patch of ``config.patch_shape`` centered at ``center`` (mm).

    Trilinear interpolation onto ``config.target_spacing``; regions outside
    the source volume are padded with the window minimum. Raises ValueError
    if the center lies outside the volume bounds.
    """
    lo, hi = volume.world_bounds()
    center = np.asarray(center, dtype=np.float64)
    if np.any(center < lo) or np.any(center > hi):
        raise ValueError(f"center {tuple(center)} outside volume bounds [{tuple(lo)}, {tuple(hi)}]")
    c = patch_center(config.patch_shape)
    coords = []
    for ax in range(3):
        idx = np.arange(config.patch_shape[ax], dtype=np.float64)
        world = center[ax] + (idx - c[ax]) * config.target_spacing[ax]
        coords.append((world - volume.origin[ax]) / volume.spacing[ax])
    patch = _axis_samples(volume.voxels, coords, pad_value=config.hu_window[0])
    return patch.astype(np.float32)


def resize_trilinear(arr: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Resize a 3D array with align-corners trilinear interpolation."""
    coords = []
    for ax in range(3):
        n_out, n_in = int(out_shape[ax]), arr.shape[ax]
        if n_out == 1:
            coords.append(np.array([(n_in - 1) / 2.0]))
        else:
            coords.append(np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1))
    return _axis_samples(arr, coords, pad_value=0.0).astype(arr.dtype)


def normalize_hu(patch: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    """Affine map of HU intensities: low -> -1, high -> +1, clipped."""
    low, high = window
    if low >= high:
        raise ValueError(f"degenerate window {window}")
    out = -1.0 + 2.0 * (patch.astype(np.float64) - low) / (high - low)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def make_spherical_mask(
    diameter_mm: float,
    spacing: Sequence[float],
    shape: Sequence[int],
) -> np.ndarray:
    """Binary sphere of the given physical diameter around the patch center.

    Voxel (i, j, k) is set iff its displacement from the continuous patch
    center has Euclidean norm <= diameter/2 in mm (anisotropic spacing
    honored). The sphere is implicitly clipped at the patch boundary.
    """
    if diameter_mm < 0:
        raise ValueError(f"diameter_mm must be >= 0, got {diameter_mm}")
    c = patch_center(shape)
    r2 = (float(diameter_mm) / 2.0) ** 2
    d2 = np.zeros(tuple(int(s) for s in shape), dtype=np.float64)
    for ax in range(3):
        off = (np.arange(shape[ax], dtype=np.float64) - c[ax]) * float(spacing[ax])
        view = [1, 1, 1]
        view[ax] = -1
        d2 = d2 + (off**2).reshape(view)
    return (d2 <= r2).astype(np.uint8)


def apply_noise_mask(
    raw: np.ndarray,
    mask: np.ndarray,
    seed: int,
    noise_range: tuple[float, float] = (-1.0, 1.0),
) -> np.ndarray:
    """Replace the masked region with seeded i.i.d. uniform noise."""
    if raw.shape != mask.shape:
        raise ValueError(f"shape mismatch: raw {raw.shape}, mask {mask.shape}")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(noise_range[0], noise_range[1], size=raw.shape).astype(raw.dtype)
    return np.where(mask > 0, noise, raw)


def make_label_map(label: int, shape: Sequence[int]) -> np.ndarray:
    """Constant conditioning channel: benign -> 0.0, malignant -> 1.0."""
    if label == LABEL_BENIGN:
        value = 0.0
    elif label == LABEL_MALIGNANT:
        value = 1.0
    else:
        raise ValueError(f"label must be 1 (benign) or 2 (malignant), got {label}")
    return np.full(tuple(int(s) for s in shape), value, dtype=np.float32)


# ---------------------------------------------------------------------------
# Phantom data


def _smooth_field(rng: np.random.Generator, shape: Sequence[int], low: float, high: float) -> np.ndarray:
    """Low-frequency random field: a coarse uniform grid upsampled trilinearly."""
    coarse = rng.uniform(low, high, size=(5, 5, 3))
    return resize_trilinear(coarse, shape)


def _phantom_blob(
    rng: np.random.Generator,
    label: int,
    shape: Sequence[int],
    spacing: Sequence[float],
    center_voxel: Sequence[float] | None = None,
) -> tuple[np.ndarray, float]:
    """One phantom field: smooth lung-like background plus a blob.

    Benign blobs underfill their annotated diameter with a sharp, regular
    boundary; malignant blobs nearly fill it with an irregular, fuzzy
    boundary. The blob sits at ``center_voxel`` (default: the patch center).
    Returns (raw array in [-1, 1], annotated diameter in mm).
    """
    background = _smooth_field(rng, shape, -0.85, -0.35)
    if label == LABEL_BENIGN:
        diameter = rng.uniform(9.0, 13.0)
        fill = rng.uniform(0.58, 0.66)
        wobble, edge = 0.03, 0.35
    else:
        diameter = rng.uniform(12.0, 18.0)
        fill = rng.uniform(0.90, 0.98)
        wobble, edge = 0.18, 1.0
    level = rng.uniform(0.35, 0.65)
    radius = fill * diameter / 2.0

    c = patch_center(shape) if center_voxel is None else np.asarray(center_voxel, dtype=np.float64)
    axes = [(np.arange(shape[ax]) - c[ax]) * spacing[ax] for ax in range(3)]
    dx = axes[0][:, None, None]
    dy = axes[1][None, :, None]
    dz = axes[2][None, None, :]
    dist = np.sqrt(dx**2 + dy**2 + dz**2)

    # Directional radius modulation for irregular boundaries.
    unit = np.stack(np.broadcast_arrays(dx, dy, dz)) / np.maximum(dist, 1e-9)
    eta = np.zeros(dist.shape)
    for _ in range(3):
        k = rng.normal(0.0, 2.0, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        eta += np.cos(k[0] * unit[0] + k[1] * unit[1] + k[2] * unit[2] + phase)
    eta /= 3.0

    r_eff = radius * (1.0 + wobble * eta)
    w = 1.0 / (1.0 + np.exp(np.clip((dist - r_eff) / edge, -60.0, 60.0)))
    patch = background + w * (level - background)
    return np.clip(patch, -1.0, 1.0).astype(np.float32), float(diameter)


def phantom_dataset(
    n: int,
    class_ratio: float,
    seed: int,
    shape: tuple[int, int, int] = (32, 32, 16),
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0),
) -> list[PatchSample]:
    """Generate ``n`` phantom patches with ``round(n * class_ratio)`` malignant.

    Deterministic per seed. Masks use each blob's annotated diameter; masked
    patches carry seeded uniform noise.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 < class_ratio < 1.0:
        raise ValueError(f"class_ratio must lie in (0, 1), got {class_ratio}")
    master = np.random.default_rng(seed)
    n_mal = int(round(n * class_ratio))
    labels = np.array([LABEL_MALIGNANT] * n_mal + [LABEL_BENIGN] * (n - n_mal))
    master.shuffle(labels)
    samples = []
    for label in labels:
        sample_rng = np.random.default_rng(master.integers(2**63))
        raw, diameter = _phantom_blob(sample_rng, int(label), shape, spacing)
        mask = make_spherical_mask(diameter, spacing, shape)
        noise_seed = int(master.integers(2**63))
        masked = apply_noise_mask(raw, mask, noise_seed)
        sample = PatchSample(
            raw=raw,
            masked=masked,
            mask=mask,
            label=int(label),
            diameter_mm=diameter,
            spacing=spacing,
        )
        sample.validate()
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# Patch dataset on disk


@dataclass
class ManifestRow:
    patch_file: str
    label: int
    diameter_mm: float
    split: str
    synthetic: bool = False


def write_manifest(rows: Sequence[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS + ["synthetic"])
        for r in rows:
            writer.writerow([r.patch_file, r.label, r.diameter_mm, r.split, int(r.synthetic)])


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: manifest missing columns {missing}")
        rows = []
        for rec in reader:
            split = rec["split"].strip()
            if split not in SPLITS:
                raise ValueError(f"{path}: invalid split {split!r}")
            rows.append(
                ManifestRow(
                    patch_file=rec["patch_file"].strip(),
                    label=int(rec["label"]),
                    diameter_mm=float(rec["diameter_mm"]),
                    split=split,
                    synthetic=bool(int(rec.get("synthetic", "0") or 0)),
                )
            )
    return rows


def save_patch_dataset(
    samples: Sequence[PatchSample],
    splits: Sequence[str],
    out_dir: str | Path,
    prefix: str = "patch",
) -> list[ManifestRow]:
    """Write patches as ``.vol`` files plus a manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (sample, split) in enumerate(zip(samples, splits)):
        name = f"{prefix}_{i:05d}.vol"
        vol = Volume(voxels=sample.raw, spacing=sample.spacing)
        save_volume(vol, out_dir / name)
        rows.append(
            ManifestRow(
                patch_file=name,
                label=sample.label,
                diameter_mm=sample.diameter_mm,
                split=split,
                synthetic=sample.synthetic,
            )
        )
    write_manifest(rows, out_dir / "manifest.csv")
    return rows


def load_patch_dataset(
    data_dir: str | Path,
    split: str | None = None,
    noise_seed: int = 0,
) -> list[PatchSample]:
    """Load patches listed in ``manifest.csv``, rebuilding masks from diameters.

    Masked patches get deterministic per-index noise derived from
    ``noise_seed`` (trainers re-noise per step anyway).
    """
    data_dir = Path(data_dir)
    rows = read_manifest(data_dir / "manifest.csv")
    samples = []
    for idx, row in enumerate(rows):
        if split is not None and row.split != split:
            continue
        vol = load_volume(data_dir / row.patch_file)
        mask = make_spherical_mask(row.diameter_mm, vol.spacing, vol.voxels.shape)
        masked = apply_noise_mask(vol.voxels, mask, seed=noise_seed + idx)
        samples.append(
            PatchSample(
                raw=vol.voxels,
                masked=masked,
                mask=mask,
                label=row.label,
                diameter_mm=row.diameter_mm,
                spacing=vol.spacing,
                synthetic=row.synthetic,
            )
        )
    return samples
