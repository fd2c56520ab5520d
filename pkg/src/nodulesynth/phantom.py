"""Desk-scale phantom fixture: volumes, annotations, and a split patch set.

Everything downstream (patch extraction, GAN training, synthesis, the
classifier experiments) can run end-to-end on a directory produced here.
The patch set mirrors a benign-heavy class skew; a handful of full phantom
volumes with annotation rows exercises the extraction path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nodulesynth.patches import (
    ManifestRow,
    _phantom_blob,
    phantom_dataset,
    save_patch_dataset,
    write_manifest,
)
from nodulesynth.seeding import derive_seed
from nodulesynth.volume_io import (
    LABEL_BENIGN,
    LABEL_MALIGNANT,
    NoduleAnnotation,
    Volume,
    save_annotations,
    save_volume,
)


@dataclass
class FixtureSpec:
    n_train: int = 240
    n_val: int = 30
    n_test: int = 30
    malignant_fraction: float = 0.2  # 4:1 benign-heavy skew
    n_volumes: int = 12
    patch_shape: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    volume_shape: tuple[int, int, int] = (48, 48, 24)
    hu_window: tuple[float, float] = (-1000.0, 400.0)


def _to_hu(normalized: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    low, high = window
    return (normalized.astype(np.float64) + 1.0) * (high - low) / 2.0 + low


def _rater_scores(rng: np.random.Generator, label: int) -> list[int]:
    if label == LABEL_MALIGNANT:
        scores = [int(rng.integers(4, 6)) for _ in range(3)] + [int(rng.integers(3, 6))]
    else:
        scores = [int(rng.integers(1, 4)) for _ in range(4)]
    rng.shuffle(scores)
    return scores


def make_phantom_fixture(out_dir: str | Path, seed: int, spec: FixtureSpec | None = None) -> dict:
    """Write a complete phantom dataset under ``out_dir``; deterministic per seed.

    Layout: ``volumes/*.vol`` + ``annotations.csv`` (extraction inputs) and
    ``patches/`` holding the split patch dataset with its manifest.
    """
    spec = spec or FixtureSpec()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    # Patch dataset with per-split class skew.
    samples, splits = [], []
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        part = phantom_dataset(
            count,
            spec.malignant_fraction,
            derive_seed(seed, "patches", split),
            shape=spec.patch_shape,
            spacing=spec.spacing,
        )
        samples.extend(part)
        splits.extend([split] * count)
    save_patch_dataset(samples, splits, out_dir / "patches")

    # A few full volumes with annotations for the extraction path. Centers are
    # chosen so the sampling grid of a patch_shape extraction aligns with the
    # volume grid (half-integer x/y voxel center, integer-millimetre z rule).
    annotations = []
    vol_rng = np.random.default_rng(derive_seed(seed, "volumes"))
    for v in range(spec.n_volumes):
        label = LABEL_MALIGNANT if v % 2 else LABEL_BENIGN
        jitter = vol_rng.integers(-2, 3, size=3)
        cx = spec.volume_shape[0] / 2.0 - 0.5 + jitter[0] * spec.spacing[0]
        cy = spec.volume_shape[1] / 2.0 - 0.5 + jitter[1] * spec.spacing[1]
        cz = (spec.volume_shape[2] - 1.0) * spec.spacing[2] / 2.0 + jitter[2] * spec.spacing[2]
        center_voxel = (
            cx / spec.spacing[0],
            cy / spec.spacing[1],
            cz / spec.spacing[2],
        )
        blob_rng = np.random.default_rng(derive_seed(seed, "volume-blob", v))
        normalized, diameter = _phantom_blob(
            blob_rng, label, spec.volume_shape, spec.spacing, center_voxel=center_voxel
        )
        voxels = _to_hu(normalized, spec.hu_window).astype(np.float32)
        volume_id = f"phantom_{v:04d}"
        save_volume(
            Volume(voxels=voxels, spacing=spec.spacing), out_dir / "volumes" / f"{volume_id}.vol"
        )
        annotations.append(
            NoduleAnnotation(
                center=(cx, cy, cz),
                diameter_mm=diameter,
                scores=_rater_scores(blob_rng, label),
                source_volume_id=volume_id,
            )
        )
    save_annotations(annotations, out_dir / "annotations.csv")

    return {
        "patches": spec.n_train + spec.n_val + spec.n_test,
        "volumes": spec.n_volumes,
        "splits": {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test},
    }


def combined_manifest(rows_real: list[ManifestRow], rows_syn: list[ManifestRow], path: str | Path) -> None:
    """Merge real and synthetic manifest rows into one table."""
    write_manifest(rows_real + rows_syn, path)
