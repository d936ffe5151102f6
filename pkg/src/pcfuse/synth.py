"""Procedural shape corpus with controlled defect ablation.

Shapes are sampled on a stratified parameter grid with seeded jitter and
then normalised to the unit-diagonal frame. Defects remove one contiguous
region whose size hits a severity fraction exactly (by count).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .geometry import GeometryError, PointCloud, knn, normalize_unit, write_xyz, read_xyz
from .render import ViewSet, render_views, write_views

FAMILIES = ("sphere", "torus", "superellipsoid", "height_field", "arch_composite", "cube_bump")
SEVERITY = {"mild": 0.10, "moderate": 0.25, "severe": 0.40}
MODES = ("sphere_cut", "axis_slab", "patch")


@dataclass
class ShapeSpec:
    family: str
    params: dict = field(default_factory=dict)
    count: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if self.count < 8:
            raise ValueError("shape sample count must be >= 8")


@dataclass
class DefectSpec:
    mode: str = "sphere_cut"
    severity: float | str = "moderate"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        if isinstance(self.severity, str):
            if self.severity not in SEVERITY:
                raise ValueError(f"unknown severity {self.severity!r}")
            self.severity = SEVERITY[self.severity]
        if not 0.0 <= self.severity < 1.0:
            raise ValueError("severity fraction must be in [0, 1)")


# -- samplers -----------------------------------------------------------------
def _strata(n: int, rng: np.random.Generator) -> np.ndarray:
    """n jittered stratified samples of the unit square, (n, 2)."""
    side = int(math.ceil(math.sqrt(n)))
    cells = np.arange(side * side)
    pick = np.sort(rng.choice(cells, n, replace=False)) if side * side > n else cells
    u = (pick // side + rng.random(n)) / side
    v = (pick % side + rng.random(n)) / side
    return np.stack([u, v], axis=1)


def _sphere(n, rng, radius=1.0):
    """Jittered Fibonacci lattice plus the six axis poles (keeps the bbox symmetric)."""
    axes = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    m = n - 6
    i = np.arange(m)
    z = 1.0 - (2.0 * i + 1.0 + 0.5 * (rng.random(m) - 0.5)) / m
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i + 0.5 * (rng.random(m) - 0.5) / np.sqrt(m)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return radius * np.concatenate([axes, pts])


def _torus(n, rng, major=2.0, minor=1.0):
    # area element is proportional to (R + r cos v); rejection keeps density uniform
    out = np.empty((0, 3))
    while out.shape[0] < n:
        uv = _strata(2 * n, rng)
        u, v = 2 * np.pi * uv[:, 0], 2 * np.pi * uv[:, 1]
        keep = rng.random(2 * n) * (major + minor) <= major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _superellipsoid(n, rng, radii=(1.0, 0.8, 0.6), e1=0.6, e2=0.6):
    uv = _strata(n, rng)
    eta = np.arcsin(2.0 * uv[:, 0] - 1.0)  # latitude, roughly area-uniform
    omega = 2 * np.pi * uv[:, 1] - np.pi
    ce, se = np.cos(eta), np.sin(eta)
    a, b, c = radii
    return np.stack([a * _spow(ce, e1) * _spow(np.cos(omega), e2),
                     b * _spow(ce, e1) * _spow(np.sin(omega), e2),
                     c * _spow(se, e1)], axis=1)


def _height_field(n, rng, bumps=None, amplitude=0.4):
    uv = _strata(n, rng) * 2.0 - 1.0
    if bumps is None:
        bumps = [[0.3, -0.2, 0.35, 1.0], [-0.4, 0.4, 0.3, -0.7]]
    z = np.zeros(n)
    for cx, cy, w, h in bumps:
        z += h * np.exp(-((uv[:, 0] - cx) ** 2 + (uv[:, 1] - cy) ** 2) / (2 * w * w))
    return np.stack([uv[:, 0], uv[:, 1], amplitude * z], axis=1)


def _arch_composite(n, rng, width=2.0, depth=1.5, tube=0.25):
    """Tube swept along a parabolic arch (U shape) in the xy plane."""
    uv = _strata(n, rng)
    t = 2.0 * uv[:, 0] - 1.0
    theta = 2 * np.pi * uv[:, 1]
    cx, cy = width / 2 * t, depth * (1.0 - t * t)
    tx, ty = np.full_like(t, width / 2), -2.0 * depth * t
    tn = np.hypot(tx, ty)
    nx, ny = -ty / tn, tx / tn
    return np.stack([cx + tube * np.cos(theta) * nx,
                     cy + tube * np.cos(theta) * ny,
                     tube * np.sin(theta)], axis=1)


def _box(n, rng, dims=(1.0, 1.0, 1.0)):
    a, b, c = dims
    faces = [  # (area, axis, sign)
        (b * c, 0, 1), (b * c, 0, -1), (a * c, 1, 1), (a * c, 1, -1), (a * b, 2, 1), (a * b, 2, -1)]
    areas = np.array([f[0] for f in faces])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argsort(-areas, kind="stable")[: n - counts.sum()]] += 1
    half = np.array(dims) / 2.0
    pts = []
    for (_, ax, sgn), k in zip(faces, counts):
        uv = _strata(k, rng) * 2.0 - 1.0
        others = [i for i in range(3) if i != ax]
        p = np.empty((k, 3))
        p[:, ax] = sgn * half[ax]
        p[:, others[0]] = uv[:, 0] * half[others[0]]
        p[:, others[1]] = uv[:, 1] * half[others[1]]
        pts.append(p)
    return np.concatenate(pts)


def _dent(pts: np.ndarray, depth: float, footprint: float) -> np.ndarray:
    """Push top-face points down with a flat-bottomed cosine dent of the given radius."""
    out = pts.copy()
    top = out[:, 2].max()
    on_top = np.isclose(out[:, 2], top)
    r = np.hypot(out[:, 0], out[:, 1])
    inside = on_top & (r < footprint)
    profile = np.minimum(1.0, 0.75 * (1.0 + np.cos(np.pi * r[inside] / footprint)))
    out[inside, 2] -= depth * profile
    return out


def cube_bump_pair(spec: ShapeSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(flat, dented, footprint mask) sharing every point outside the dent."""
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    flat, _ = normalize_unit(_box(spec.count, rng, tuple(p.get("dims", (1.0, 1.0, 1.0)))))
    pts = flat.points
    top = pts[:, 2].max()
    half_w = min(pts[:, 0].max(), pts[:, 1].max())
    footprint = p.get("footprint", 0.9) * half_w
    dented = _dent(pts, p.get("depth", 0.25), footprint)
    mask = np.isclose(pts[:, 2], top) & (np.hypot(pts[:, 0], pts[:, 1]) < footprint)
    return pts, dented, mask


def generate_shape(spec: ShapeSpec) -> PointCloud:
    rng = np.random.default_rng(spec.seed)
    p = dict(spec.params)
    n = spec.count
    if spec.family == "sphere":
        raw = _sphere(n, rng, p.get("radius", 1.0))
    elif spec.family == "torus":
        if not p.get("major", 2.0) > p.get("minor", 1.0) > 0:
            raise ValueError("torus needs major > minor > 0")
        raw = _torus(n, rng, p.get("major", 2.0), p.get("minor", 1.0))
    elif spec.family == "superellipsoid":
        e1, e2 = p.get("e1", 0.6), p.get("e2", 0.6)
        if not (0.1 <= e1 <= 2.5 and 0.1 <= e2 <= 2.5):
            raise ValueError("superellipsoid exponents must lie in [0.1, 2.5]")
        raw = _superellipsoid(n, rng, tuple(p.get("radii", (1.0, 0.8, 0.6))), e1, e2)
    elif spec.family == "height_field":
        raw = _height_field(n, rng, p.get("bumps"), p.get("amplitude", 0.4))
    elif spec.family == "arch_composite":
        raw = _arch_composite(n, rng, p.get("width", 2.0), p.get("depth", 1.5), p.get("tube", 0.25))
    else:
        flat, dented, _ = cube_bump_pair(spec)
        return PointCloud(dented if p.get("bump", True) else flat)
    cloud, _ = normalize_unit(raw)
    return cloud


# -- ablation -----------------------------------------------------------------
def _removal_count(n: int, severity: float) -> int:
    k = int(round(severity * n))
    if k >= n:
        raise GeometryError("severity would remove every point")
    return k


def ablation_mask(clean, defect: DefectSpec, seed: int, center_index: int | None = None) -> np.ndarray:
    """Boolean mask of removed points."""
    pts = clean.points if isinstance(clean, PointCloud) else np.asarray(clean)
    n = pts.shape[0]
    k = _removal_count(n, defect.severity)
    removed = np.zeros(n, dtype=bool)
    if k == 0:
        return removed
    rng = np.random.default_rng(seed)
    c = int(rng.integers(n)) if center_index is None else center_index
    if defect.mode == "sphere_cut":
        key = np.linalg.norm(pts - pts[c], axis=1)
    elif defect.mode == "axis_slab":
        axis = int(rng.integers(3))
        key = np.abs(pts[:, axis] - pts[c, axis])
    else:
        nbr = knn(pts, min(8, n - 1))
        w = np.linalg.norm(pts[nbr] - pts[:, None, :], axis=-1)
        rows = np.repeat(np.arange(n), nbr.shape[1])
        graph = csr_matrix((w.ravel(), (rows, nbr.ravel())), shape=(n, n))
        key = dijkstra(graph, directed=False, indices=c)
        key = np.where(np.isfinite(key), key, np.inf)
    # the k smallest keys; a cut radius between the k-th and (k+1)-th value
    removed[np.argsort(key, kind="stable")[:k]] = True
    return removed


def ablate(clean, defect: DefectSpec, seed: int) -> PointCloud:
    pts = clean.points if isinstance(clean, PointCloud) else np.asarray(clean)
    return PointCloud(pts[~ablation_mask(pts, defect, seed)])


# -- corpus -------------------------------------------------------------------
@dataclass
class CorpusConfig:
    root: str = "corpus"
    samples: int = 200
    families: list[str] = field(default_factory=lambda: ["sphere", "torus", "superellipsoid",
                                                           "height_field", "arch_composite"])
    points: int = 4096
    modes: list[str] = field(default_factory=lambda: ["sphere_cut"])
    severity: float | str = "moderate"
    resolution: int = 64
    splat_radius: float = 1.0
    test_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _random_params(family: str, rng: np.random.Generator) -> dict:
    if family == "sphere":
        return {"radius": 1.0}
    if family == "torus":
        minor = float(rng.uniform(0.25, 0.5))
        return {"major": 1.0, "minor": minor}
    if family == "superellipsoid":
        return {"radii": [1.0, float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.4, 1.0))],
                "e1": float(rng.uniform(0.3, 1.5)), "e2": float(rng.uniform(0.3, 1.5))}
    if family == "height_field":
        bumps = [[float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.6, 0.6)),
                  float(rng.uniform(0.2, 0.5)), float(rng.uniform(-1.0, 1.0))] for _ in range(3)]
        return {"bumps": bumps, "amplitude": 0.4}
    if family == "arch_composite":
        return {"width": float(rng.uniform(1.6, 2.4)), "depth": float(rng.uniform(1.0, 2.0)),
                "tube": float(rng.uniform(0.15, 0.35))}
    if family == "cube_bump":
        return {"dims": [1.0, float(rng.uniform(0.8, 1.2)), float(rng.uniform(0.5, 0.8))],
                "depth": 0.25, "footprint": 0.9, "bump": bool(rng.integers(2))}
    raise ValueError(family)


@dataclass
class CorpusSample:
    id: str
    clean: PointCloud
    partial: PointCloud
    views: ViewSet
    split: str
    meta: dict


def make_sample(i: int, cfg: CorpusConfig, rng: np.random.Generator) -> tuple[dict, PointCloud, PointCloud]:
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    params = _random_params(family, rng)
    shape_seed = int(rng.integers(2**31))
    defect_seed = int(rng.integers(2**31))
    mode = cfg.modes[int(rng.integers(len(cfg.modes)))]
    spec = ShapeSpec(family, params, cfg.points, shape_seed)
    defect = DefectSpec(mode, cfg.severity)
    if family == "cube_bump":
        flat, dented, footprint = cube_bump_pair(spec)
        clean = PointCloud(dented if params["bump"] else flat)
        removed = cube_bump_mask(flat, footprint, defect.severity)
        partial = PointCloud(flat[~removed])
        view_source = "clean"
    else:
        clean = generate_shape(spec)
        partial = ablate(clean, defect, defect_seed)
        view_source = "partial"
    meta = {"id": f"s{i:05d}", "family": family, "params": params, "shape_seed": shape_seed,
            "defect": {"mode": mode if family != "cube_bump" else "top_cut",
                       "severity": defect.severity, "seed": defect_seed},
            "view_source": view_source}
    return meta, clean, partial


def cube_bump_mask(flat: np.ndarray, footprint: np.ndarray, severity: float) -> np.ndarray:
    """Remove the points nearest the top-face centre, always covering the dent footprint."""
    n = flat.shape[0]
    top_center = np.array([0.0, 0.0, flat[:, 2].max()])
    key = np.linalg.norm(flat - top_center, axis=1)
    k = max(_removal_count(n, severity), int(footprint.sum()))
    order = np.argsort(key, kind="stable")
    removed = np.zeros(n, dtype=bool)
    removed[order[:k]] = True
    while not removed[footprint].all():
        k += 1
        removed[order[k - 1]] = True
    return removed


def sample_views(meta: dict, clean: PointCloud, partial: PointCloud, cfg: CorpusConfig) -> ViewSet:
    src = clean if meta["view_source"] == "clean" else partial
    return render_views(src, cfg.resolution, cfg.splat_radius)


def split_ids(n: int, test_fraction: float, seed: int) -> np.ndarray:
    """Boolean test mask from a seeded permutation; round(n * fraction) test samples."""
    n_test = int(round(n * test_fraction))
    perm = np.random.default_rng([seed, 7]).permutation(n)
    test = np.zeros(n, dtype=bool)
    test[perm[:n_test]] = True
    return test


def build_corpus(cfg: CorpusConfig, root=None) -> Path:
    root = Path(root or cfg.root)
    rng = np.random.default_rng(cfg.seed)
    test = split_ids(cfg.samples, cfg.test_fraction, cfg.seed)
    entries = []
    for i in range(cfg.samples):
        meta, clean, partial = make_sample(i, cfg, rng)
        meta["split"] = "test" if test[i] else "train"
        d = root / meta["split"] / meta["id"]
        try:
            d.mkdir(parents=True, exist_ok=True)
            write_xyz(d / "clean.xyz", clean)
            write_xyz(d / "partial.xyz", partial)
            write_views(d, sample_views(meta, clean, partial, cfg))
        except OSError as exc:
            raise OSError(f"failed writing sample {meta['id']} under {d}: {exc}") from exc
        entries.append(meta)
    index = {"schema_version": 1, "config": cfg.to_dict(), "samples": entries}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


def load_index(root) -> dict:
    path = Path(root) / "index.json"
    if not path.exists():
        raise FileNotFoundError(f"corpus index not found: {path}")
    return json.loads(path.read_text())


def load_sample(root, meta: dict, cfg: CorpusConfig | None = None, with_views: bool = True) -> CorpusSample:
    d = Path(root) / meta["split"] / meta["id"]
    clean, partial = read_xyz(d / "clean.xyz"), read_xyz(d / "partial.xyz")
    views = None
    if with_views:
        cfg = cfg or CorpusConfig(**load_index(root)["config"])
        views = sample_views(meta, clean, partial, cfg)
    return CorpusSample(meta["id"], clean, partial, views, meta["split"], meta)
