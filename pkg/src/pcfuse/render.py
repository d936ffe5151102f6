"""Orthographic depth rendering of normalised geometry along +X, +Y and +Z.

Each view looks down its axis from the +0.5 face of the unit box. Depth is
``0.5 - coord`` (0 at the near face, 1 at the far face) and intensity is
``1 - depth``; pixels that see nothing stay 0. Image rows run top to bottom
along -v and columns along +u, where (u, v) are the remaining axes in
cyclic order: +X -> (y, z), +Y -> (z, x), +Z -> (x, y).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GeometryError, as_points, bbox_diagonal

VIEW_AXES = {"x": (0, 1, 2), "y": (1, 2, 0), "z": (2, 0, 1)}  # (depth, u, v)
VIEW_ORDER = ("x", "y", "z")


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class ViewSet:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.x, self.y, self.z])

    def __iter__(self):
        return iter((self.x, self.y, self.z))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ViewSet":
        if arr.shape[0] != 3:
            raise RenderError(f"a view set needs exactly three images, got {arr.shape[0]}")
        return cls(arr[0], arr[1], arr[2])


def _check_normalized(pts: np.ndarray, tol: float = 1e-6) -> None:
    # subsets of a normalised cloud (partials, single points) have diagonal <= 1
    if not pts.shape[0]:
        return
    if bbox_diagonal(pts) > 1.0 + tol or np.abs(pts).max() > 0.5 + tol:
        raise RenderError("geometry must be normalized into the unit-diagonal frame")


def _pixel(coord: np.ndarray, res: int) -> np.ndarray:
    return np.clip(np.floor((coord + 0.5) * res).astype(np.int64), 0, res - 1)


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    di, dj = np.mgrid[-r:r + 1, -r:r + 1]
    keep = di * di + dj * dj <= radius * radius
    return np.stack([di[keep], dj[keep]], axis=1)


def _render_points(pts: np.ndarray, axis: str, res: int, radius: float) -> np.ndarray:
    a, u, v = VIEW_AXES[axis]
    depth = np.full((res, res), np.inf)
    if pts.shape[0]:
        d = 0.5 - pts[:, a]
        col = _pixel(pts[:, u], res)
        row = _pixel(-pts[:, v], res)  # +v points up: row 0 at v = +0.5
        for di, dj in _disc_offsets(radius):
            r, c = row + di, col + dj
            ok = (r >= 0) & (r < res) & (c >= 0) & (c < res)
            np.minimum.at(depth, (r[ok], c[ok]), d[ok])
    return _shade(depth)


def _render_mesh(verts: np.ndarray, faces: np.ndarray, axis: str, res: int) -> np.ndarray:
    a, u, v = VIEW_AXES[axis]
    depth = np.full((res, res), np.inf)
    centers = (np.arange(res) + 0.5) / res - 0.5
    for tri in faces:
        p = verts[tri]
        pu, pv, pd = p[:, u], p[:, v], 0.5 - p[:, a]
        area = (pu[1] - pu[0]) * (pv[2] - pv[0]) - (pu[2] - pu[0]) * (pv[1] - pv[0])
        if area == 0.0:
            continue
        c0, c1 = np.searchsorted(centers, [pu.min(), pu.max()])
        r0, r1 = np.searchsorted(centers, [pv.min(), pv.max()])
        if c0 >= c1 or r0 >= r1:
            continue
        gu, gv = np.meshgrid(centers[c0:c1], centers[r0:r1])
        w0 = ((pu[1] - gu) * (pv[2] - gv) - (pu[2] - gu) * (pv[1] - gv)) / area
        w1 = ((pu[2] - gu) * (pv[0] - gv) - (pu[0] - gu) * (pv[2] - gv)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * pd[0] + w1 * pd[1] + w2 * pd[2]
        vi, ui = np.nonzero(inside)
        rows = res - 1 - (vi + r0)
        cols = ui + c0
        np.minimum.at(depth, (rows, cols), z[inside])
    return _shade(depth)


def _shade(depth: np.ndarray) -> np.ndarray:
    img = np.where(np.isfinite(depth), 1.0 - depth, 0.0)
    return np.clip(img, 0.0, 1.0)


def render_views(geometry, resolution: int = 256, splat_radius: float = 2,
                 faces: np.ndarray | None = None) -> ViewSet:
    """Render +X, +Y, +Z depth images of a point cloud, or of a mesh when ``faces`` is given."""
    if resolution < 1:
        raise RenderError(f"resolution must be positive, got {resolution}")
    pts = as_points(geometry)
    _check_normalized(pts)
    if faces is not None and len(faces):
        imgs = [_render_mesh(pts, np.asarray(faces), ax, resolution) for ax in VIEW_ORDER]
    else:
        imgs = [_render_points(pts, ax, resolution, splat_radius) for ax in VIEW_ORDER]
    return ViewSet(*imgs)


# -- PGM --------------------------------------------------------------------
def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise GeometryError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_views(directory, views: ViewSet) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for ax, img in zip(VIEW_ORDER, views):
        p = directory / f"view_{ax}.pgm"
        write_pgm(p, img)
        paths.append(p)
    return paths


def read_views(paths) -> ViewSet:
    return ViewSet(*(read_pgm(p) for p in paths))
