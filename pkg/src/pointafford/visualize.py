"""Colored point cloud export (ASCII PLY) and matplotlib scatter figures for
affordance maps.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def score_to_rgb(scores: np.ndarray) -> np.ndarray:
    """Linear red-to-blue colormap: score 1 -> (255,0,0), score 0 -> (0,0,255).

    Channel values are truncated to integers (255 * 0.25 -> 63).
    """
    scores = np.asarray(scores, dtype=np.float64)
    red = (255.0 * scores).astype(np.int64)
    blue = (255.0 * (1.0 - scores)).astype(np.int64)
    return np.stack([red, np.zeros_like(red), blue], axis=1)


def export_vis(points: np.ndarray, scores: np.ndarray, path: str | Path) -> Path:
    """Write an ASCII PLY with per-vertex x,y,z,red,green,blue."""
    points = np.asarray(points, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if points.shape[0] != scores.shape[0]:
        raise ValueError("points and scores lengths differ")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    colors = score_to_rgb(scores)
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(points, colors):
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read back an ASCII PLY written by :func:`export_vis`."""
    with open(path, "r", encoding="ascii") as f:
        lines = [line.rstrip("\n") for line in f]
    if not lines or lines[0] != "ply":
        raise ValueError("not a PLY file")
    n_vertices = 0
    header_end = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vertices = int(line.split()[2])
        elif line == "end_header":
            header_end = i + 1
            break
    else:
        raise ValueError("PLY header has no end_header")
    points = np.empty((n_vertices, 3), dtype=np.float64)
    colors = np.empty((n_vertices, 3), dtype=np.int64)
    for row, line in enumerate(lines[header_end : header_end + n_vertices]):
        parts = line.split()
        points[row] = [float(v) for v in parts[:3]]
        colors[row] = [int(v) for v in parts[3:6]]
    return points, colors


def render_cloud_figure(
    points: np.ndarray, scores: np.ndarray, path: str | Path, title: str = ""
) -> Path:
    """3D scatter of the cloud colored by affordance score, saved to file."""
    points = np.asarray(points)
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(111, projection="3d")
    sc = ax.scatter(
        points[:, 0], points[:, 1], points[:, 2],
        c=np.asarray(scores), cmap="coolwarm", vmin=0.0, vmax=1.0, s=4,
    )
    fig.colorbar(sc, ax=ax, shrink=0.6, label="affordance score")
    if title:
        ax.set_title(title)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
