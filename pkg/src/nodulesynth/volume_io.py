"""3D volume containers and nodule annotation tables.

The on-disk volume format (extension ``.vol``) is a single UTF-8 JSON header
line ``{"dims": [x, y, z], "spacing": [sx, sy, sz], "origin": [ox, oy, oz],
"dtype": "f32le"}`` terminated by ``\\n``, followed by the raw little-endian
float32 voxel payload in x-fastest order.

Annotation tables are CSV files with the header
``volume_id,cx_mm,cy_mm,cz_mm,diameter_mm,scores`` where ``scores`` is a
``;``-separated list of integer malignancy ratings in 1..5.

Everything here is pure functions plus file I/O: no shared mutable state,
safe to call concurrently on distinct paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# Domain class codes shared across the package.
DOMAIN_FAKE = 0
LABEL_BENIGN = 1
LABEL_MALIGNANT = 2

ANNOTATION_COLUMNS = ["volume_id", "cx_mm", "cy_mm", "cz_mm", "diameter_mm", "scores"]

_HEADER_KEYS = {"dims", "spacing", "origin", "dtype"}


class VolumeFormatError(ValueError):
    """Raised for malformed ``.vol`` files or invalid volume data."""


class AnnotationError(ValueError):
    """Raised for malformed annotation tables; carries the offending row."""


@dataclass
class Volume:
    """A 3D scalar field with physical spacing and world origin.

    ``voxels`` is indexed ``[x, y, z]``; voxel ``(i, j, k)`` sits at world
    position ``origin + (i, j, k) * spacing`` (mm).
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.validate()

    def validate(self) -> None:
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise VolumeFormatError(
                f"voxel array must be a non-empty 3D array, got shape {self.voxels.shape}"
            )
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be three positive floats, got {self.spacing}")
        if len(self.origin) != 3:
            raise VolumeFormatError(f"origin must have three components, got {self.origin}")
        if not np.isfinite(self.voxels).all():
            raise VolumeFormatError("voxel array contains NaN or Inf")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(low, high) world coordinates of the voxel-center bounding box."""
        lo = np.asarray(self.origin, dtype=np.float64)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing, dtype=np.float64)
        return lo, hi

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.voxels.shape == other.voxels.shape
            and bool(np.array_equal(self.voxels, other.voxels))
        )


@dataclass
class NoduleAnnotation:
    """One annotated nodule: world-space center, diameter, and rater scores."""

    center: tuple[float, float, float]
    diameter_mm: float
    scores: list[int] = field(default_factory=list)
    source_volume_id: str = ""

    def __post_init__(self) -> None:
        self.center = tuple(float(c) for c in self.center)
        self.diameter_mm = float(self.diameter_mm)
        self.scores = [int(s) for s in self.scores]
        if not self.scores:
            raise AnnotationError("scores list must be non-empty")
        for s in self.scores:
            if not 1 <= s <= 5:
                raise AnnotationError(f"score {s} outside the valid range 1..5")
        if self.diameter_mm <= 0:
            raise AnnotationError(f"diameter_mm must be positive, got {self.diameter_mm}")


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write ``volume`` to ``path`` in the ``.vol`` container format.

    Saving is deterministic: the same volume always produces identical bytes.
    """
    volume.validate()
    header = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "origin": list(volume.origin),
        "dtype": "f32le",
    }
    payload = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes(order="F")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_volume(path: str | Path) -> Volume:
    """Read a ``.vol`` container; inverse of :func:`save_volume`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header line: {exc}") from exc
    if not isinstance(header, dict) or not _HEADER_KEYS.issubset(header):
        raise VolumeFormatError(f"{path}: header missing keys {_HEADER_KEYS - set(header)}")
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    dims = [int(d) for d in header["dims"]]
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise VolumeFormatError(f"{path}: invalid dims {dims}")
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes but dims {dims} require {expected}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return Volume(voxels=voxels.copy(), spacing=tuple(header["spacing"]), origin=tuple(header["origin"]))


def parse_annotations(path: str | Path) -> list[NoduleAnnotation]:
    """Parse an annotation CSV into :class:`NoduleAnnotation` rows.

    Raises :class:`AnnotationError` naming the 1-based data row on any
    invalid field.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise AnnotationError(f"{path}: empty file, expected a header row")
    header = [c.strip() for c in lines[0].split(",")]
    if header != ANNOTATION_COLUMNS:
        unknown = [c for c in header if c not in ANNOTATION_COLUMNS]
        raise AnnotationError(
            f"{path}: unexpected columns {unknown or header}; expected {ANNOTATION_COLUMNS}"
        )
    annotations = []
    for row_no, line in enumerate(lines[1:], start=1):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(ANNOTATION_COLUMNS):
            raise AnnotationError(f"{path} row {row_no}: expected {len(ANNOTATION_COLUMNS)} fields")
        try:
            scores = [int(tok) for tok in cells[5].split(";") if tok.strip()]
            ann = NoduleAnnotation(
                center=(float(cells[1]), float(cells[2]), float(cells[3])),
                diameter_mm=float(cells[4]),
                scores=scores,
                source_volume_id=cells[0],
            )
        except (ValueError, AnnotationError) as exc:
            raise AnnotationError(f"{path} row {row_no}: {exc}") from exc
        annotations.append(ann)
    return annotations


def save_annotations(annotations: Sequence[NoduleAnnotation], path: str | Path) -> None:
    """Write annotations back to the CSV table format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ANNOTATION_COLUMNS) + "\n")
        for a in annotations:
            scores = ";".join(str(s) for s in a.scores)
            fh.write(
                f"{a.source_volume_id},{a.center[0]},{a.center[1]},{a.center[2]},"
                f"{a.diameter_mm},{scores}\n"
            )


def consensus_malignancy(scores: Sequence[int]) -> int:
    """Binary label from rater scores: malignant iff a strict majority is >= 4.

    Exact ties count as benign. Returns ``LABEL_BENIGN`` or ``LABEL_MALIGNANT``.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("scores list must be non-empty")
    high = sum(1 for s in scores if s >= 4)
    return LABEL_MALIGNANT if 2 * high > len(scores) else LABEL_BENIGN
