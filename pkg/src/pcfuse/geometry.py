"""Point clouds, unit-diagonal normalisation, FPS, kNN and file I/O.

Every tie (FPS selection, neighbour ordering) is broken by lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationRecord:
    center: np.ndarray  # original-space bounding-box center
    scale: float  # original bounding-box diagonal

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.center) / self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return pts * self.scale + self.center


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    norm: NormalizationRecord | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains NaN or Inf")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    return pts.reshape(0, 3) if pts.size == 0 else pts


def _require_nonempty(pts: np.ndarray, what: str = "point cloud") -> None:
    if pts.shape[0] == 0:
        raise GeometryError(f"{what} is empty")


def bbox_diagonal(cloud) -> float:
    pts = as_points(cloud)
    _require_nonempty(pts)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def normalize_unit(cloud) -> tuple[PointCloud, NormalizationRecord]:
    """Center the bounding box at the origin and scale its diagonal to 1."""
    pts = as_points(cloud)
    _require_nonempty(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float(np.linalg.norm(hi - lo))
    if not scale > 0.0:
        raise GeometryError("degenerate extent")
    rec = NormalizationRecord(center=(lo + hi) / 2.0, scale=scale)
    return PointCloud(rec.apply(pts), rec), rec


def denormalize(cloud, rec: NormalizationRecord) -> PointCloud:
    return PointCloud(rec.invert(as_points(cloud)))


def is_normalized(cloud, tol: float = 1e-6) -> bool:
    pts = as_points(cloud)
    if pts.shape[0] == 0:
        return True
    return abs(bbox_diagonal(pts) - 1.0) <= tol


def fps_indices(cloud, k: int, start: int = 0) -> np.ndarray:
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"cannot sample {k} points from a cloud of {n}")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range for {n} points")
    sel = np.empty(k, dtype=np.int64)
    sel[0] = start
    d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))  # first maximum = lowest index
        sel[i] = nxt
        np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=d2)
    return sel


def fps_downsample(cloud, k: int, start: int = 0) -> PointCloud:
    pts = as_points(cloud)
    norm = cloud.norm if isinstance(cloud, PointCloud) else None
    return PointCloud(pts[fps_indices(pts, k, start)], norm)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_query(ref: np.ndarray, queries: np.ndarray, k: int, exclude_self: bool = False,
              chunk: int = 512) -> np.ndarray:
    """Indices into ``ref`` of the k nearest neighbours of each query row.

    With ``exclude_self`` the queries must be ``ref`` itself and each row's own
    index is skipped.
    """
    ref = np.asarray(ref, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for s in range(0, queries.shape[0], chunk):
        d2 = _sq_dists(queries[s:s + chunk], ref)
        if exclude_self:
            rows = np.arange(d2.shape[0])
            d2[rows, rows + s] = np.inf
        out[s:s + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn(cloud, k: int) -> np.ndarray:
    """(N, k) neighbour index lists, self excluded, ascending distance."""
    pts = as_points(cloud)
    if not 1 <= k < pts.shape[0]:
        raise GeometryError(f"k={k} must be in [1, {pts.shape[0] - 1}] for {pts.shape[0]} points")
    return knn_query(pts, pts, k, exclude_self=True)


def centroid(cloud) -> np.ndarray:
    pts = as_points(cloud)
    _require_nonempty(pts)
    return pts.mean(axis=0)


# -- file formats -------------------------------------------------------------
def write_xyz(path, cloud) -> None:
    pts = as_points(cloud)
    lines = [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_xyz(path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise GeometryError(f"{path}:{lineno}: expected 'x y z'")
        rows.append([float(v) for v in parts[:3]])
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def read_ply(path) -> PointCloud:
    """ASCII PLY; only the x, y, z properties of the vertex element are read."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}: not a PLY file")
    n_vertex, props, in_vertex, body = 0, [], False, None
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise GeometryError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i + 1
            break
    if body is None:
        raise GeometryError(f"{path}: missing end_header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise GeometryError(f"{path}: vertex element lacks x/y/z") from None
    rows = [[float(v) for v in lines[body + j].split()] for j in range(n_vertex)]
    arr = np.array(rows, dtype=np.float64).reshape(n_vertex, -1)
    return PointCloud(arr[:, cols])


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices (V, 3) and triangle faces (F, 3); polygons are fan-triangulated."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(v) for v in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for a in range(1, len(idx) - 1):
                faces.append([idx[0], idx[a], idx[a + 1]])
    return (np.array(verts, dtype=np.float64).reshape(-1, 3),
            np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return PointCloud(read_obj(path)[0])
    return read_xyz(path)
