"""Point cloud container, normalization, sampling, grouping and partial views.

Everything here is pure numpy with fully deterministic tie rules so that the
rest of the pipeline (grouping, propagation, evaluation) is reproducible
bit-for-bit across runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FULL = "full"
PARTIAL = "partial"

CLOUD_MAGIC = b"PAVL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, n_points, reserved


class DegenerateCloudError(ValueError):
    """All points coincide; the cloud cannot be normalized."""


class FileFormatError(ValueError):
    """Binary point/score file is malformed (bad magic, version or length)."""


@dataclass
class PointCloud:
    """N x 3 coordinates with a full/partial flag and a category tag."""

    points: np.ndarray
    shape_kind: str = FULL
    category: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite coordinates")
        if self.shape_kind not in (FULL, PARTIAL):
            raise ValueError(f"shape_kind must be '{FULL}' or '{PARTIAL}'")
        self.points = pts

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    """K patch centers with their G-nearest-neighbor member indices.

    Row k of ``member_indices`` is sorted by (distance to center k, index);
    groups may overlap and need not cover the cloud.
    """

    center_indices: np.ndarray
    member_indices: np.ndarray
    centers: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.center_indices.shape[0]

    @property
    def group_size(self) -> int:
        return self.member_indices.shape[1]


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center the cloud at the origin and scale the farthest point to norm 1.

    Point order is preserved. Raises DegenerateCloudError when all points
    coincide (no scale can be defined).
    """
    if pc.n_points < 2:
        raise ValueError("need at least 2 points to normalize")
    centered = pc.points - pc.points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius <= 1e-12:
        raise DegenerateCloudError("all points are identical")
    return replace(pc, points=centered / radius)


def farthest_point_sample(pc: PointCloud, k: int) -> np.ndarray:
    """Greedy farthest point sampling over the cloud.

    The first center is the point farthest from the centroid; each subsequent
    center maximizes the minimum distance to the already chosen set. All ties
    break toward the smallest index (np.argmax returns the first maximum).

    Returns:
        int64 array of K distinct point indices, in selection order.
    """
    n = pc.n_points
    if not 1 <= k <= n:
        raise ValueError(f"K must be in [1, {n}], got {k}")
    pts = pc.points
    centroid = pts.mean(axis=0)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(np.argmax(((pts - centroid) ** 2).sum(axis=1)))
    min_sq = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(min_sq))
        cand = ((pts - pts[chosen[i]]) ** 2).sum(axis=1)
        np.minimum(min_sq, cand, out=min_sq)
    return chosen


def knn_group(pc: PointCloud, center_indices: np.ndarray, g: int) -> PatchSet:
    """Group the G nearest points (ties by ascending index) around each center."""
    n = pc.n_points
    if g > n:
        raise ValueError(f"group size {g} exceeds cloud size {n}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    pts = pc.points
    centers = pts[center_indices]
    # (K, N) squared distances; lexsort keys are applied last-key-first, so
    # the primary key is distance and the ascending index breaks ties.
    d2 = ((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    idx = np.arange(n)
    members = np.empty((center_indices.shape[0], g), dtype=np.int64)
    for row in range(center_indices.shape[0]):
        order = np.lexsort((idx, d2[row]))
        members[row] = order[:g]
    return PatchSet(center_indices=center_indices, member_indices=members, centers=centers)


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors of every point, self excluded, ties by ascending index.

    The graph depends only on the coordinates, so callers cache it per cloud.
    Returns int64 (N, min(k, N-1)).
    """
    n = points.shape[0]
    k = min(k, n - 1)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, -1.0)  # self sorts first even between coincident points
    idx = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    for row in range(n):
        order = np.lexsort((idx, d2[row]))
        out[row] = order[1 : k + 1]
    return out


def partial_view_indices(points: np.ndarray, view_direction: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Index map realizing a front-facing crop plus cyclic resampling.

    Keeps the ceil(keep_fraction * N) points with the largest dot product
    against ``view_direction`` (ties by smallest index, retained in original
    order), then cyclically repeats them back to length N.
    """
    if keep_fraction <= 0:
        raise ValueError("keep_fraction must be positive")
    if keep_fraction > 1:
        raise ValueError("keep_fraction must be <= 1")
    n = points.shape[0]
    keep = int(np.ceil(keep_fraction * n))
    dots = points @ np.asarray(view_direction, dtype=np.float64)
    order = np.lexsort((np.arange(n), -dots))
    retained = np.sort(order[:keep])
    return retained[np.arange(n) % keep]


def make_partial_view(pc: PointCloud, view_direction: np.ndarray, keep_fraction: float) -> PointCloud:
    """Simulate a single-viewpoint crop of a full-shape cloud.

    The result always has exactly n_points points (front-facing points,
    cyclically duplicated) and is flagged as partial.
    """
    if pc.shape_kind != FULL:
        raise ValueError("partial views are derived from full-shape clouds")
    mapping = partial_view_indices(pc.points, view_direction, keep_fraction)
    return PointCloud(points=pc.points[mapping].copy(), shape_kind=PARTIAL, category=pc.category)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def write_array_file(path: str | Path, magic: bytes, values: np.ndarray) -> None:
    """Write the 16-byte header (magic, version, N, reserved) plus LE float32 payload."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, FORMAT_VERSION, arr.shape[0], 0))
        f.write(arr.tobytes())


def read_array_file(path: str | Path, magic: bytes, row_width: int) -> np.ndarray:
    with open(path, "rb") as f:
        found, version, n, _reserved = _HEADER.unpack(_read_exact(f, _HEADER.size))
        if found != magic:
            raise FileFormatError(f"bad magic {found!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise FileFormatError(f"unsupported format version {version}")
        payload = _read_exact(f, 4 * row_width * n)
        if f.read(1):
            raise FileFormatError("trailing bytes after payload")
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.reshape(n, row_width) if row_width > 1 else flat


def save_points(path: str | Path, points: np.ndarray) -> None:
    """Serialize N x 3 coordinates in the PAVL binary format."""
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    write_array_file(path, CLOUD_MAGIC, pts)


def load_points(path: str | Path) -> np.ndarray:
    """Read a PAVL file back into float32 N x 3 coordinates."""
    return read_array_file(path, CLOUD_MAGIC, 3)
