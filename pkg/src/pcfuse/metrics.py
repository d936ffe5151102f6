"""Reconstruction metrics: precision/recall/F-score, Chamfer (L1, L2), EMD, centroid offset.

Distances are in the unit-diagonal frame; the reporting convention multiplies
the distance metrics by 1000.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, as_points, centroid, fps_indices

SCALE = 1000.0
EXACT_EMD_LIMIT = 512


def _nonempty(*clouds):
    out = []
    for c in clouds:
        pts = as_points(c)
        if pts.shape[0] == 0:
            raise GeometryError("metric input cloud is empty")
        out.append(pts)
    return out


def nearest(ref: np.ndarray, queries: np.ndarray, p: float = 2) -> tuple[np.ndarray, np.ndarray]:
    """Distance (in the p-norm) and index of the nearest ``ref`` point for every query."""
    dist, idx = cKDTree(ref).query(queries, k=1, p=p)
    return dist, idx


def precision_recall(P, G, d: float = 0.01) -> tuple[float, float]:
    if not d > 0:
        raise ValueError("threshold d must be positive")
    P, G = _nonempty(P, G)
    dp, _ = nearest(G, P)
    dg, _ = nearest(P, G)
    return float(np.mean(dp < d)), float(np.mean(dg < d))


def f_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def chamfer(P, G, norm: str = "L1") -> float:
    """Sum of the two directional mean nearest-neighbour distances.

    ``L1`` uses the L1 norm of coordinate differences, ``L2`` the squared
    Euclidean distance (no square root).
    """
    P, G = _nonempty(P, G)
    if norm == "L1":
        a, _ = nearest(G, P, p=1)
        b, _ = nearest(P, G, p=1)
        return float(a.mean() + b.mean())
    if norm == "L2":
        a, _ = nearest(G, P)
        b, _ = nearest(P, G)
        return float((a * a).mean() + (b * b).mean())
    raise ValueError(f"unknown chamfer norm {norm!r}")


def centroid_diff(P, G) -> float:
    P, G = _nonempty(P, G)
    return float(np.linalg.norm(centroid(P) - centroid(G)))


# -- assignment solvers -----------------------------------------------------
def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Shortest-augmenting-path form with row/column potentials, O(n^3).
    Returns ``col`` with ``col[i]`` the column assigned to row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: 1-based row on column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    col[owner[1:] - 1] = np.arange(n)
    return col


@dataclass
class AuctionResult:
    assignment: np.ndarray
    cost: float  # total primal cost
    lower_bound: float  # dual bound on the optimal total cost
    phases: int

    @property
    def gap(self) -> float:
        return self.cost - self.lower_bound


def auction(cost: np.ndarray, rel_gap: float = 0.01, scaling: float = 5.0,
            abs_tol: float = 1e-12, max_phases: int = 200) -> AuctionResult:
    """Jacobi auction with epsilon scaling for minimum-cost assignment.

    Stops once the primal cost is certified within ``rel_gap`` of the dual
    lower bound (or within ``abs_tol`` absolutely).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    benefit = -cost
    prices = np.zeros(n)
    span = float(cost.max() - cost.min()) if n else 0.0
    eps = max(span / 4.0, abs_tol)
    best = None
    phase = 0
    while phase < max_phases:
        phase += 1
        person_obj = np.full(n, -1, dtype=np.int64)
        obj_person = np.full(n, -1, dtype=np.int64)
        unassigned = np.arange(n)
        while unassigned.size:
            vals = benefit[unassigned] - prices
            j1 = np.argmax(vals, axis=1)
            rows = np.arange(unassigned.size)
            v1 = vals[rows, j1]
            if n > 1:
                vals[rows, j1] = -np.inf
                v2 = vals.max(axis=1)
            else:
                v2 = v1
            bids = prices[j1] + (v1 - v2) + eps
            # highest bid per object wins; ties go to the lowest person index
            order = np.lexsort((unassigned, -bids, j1))
            objs = j1[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = objs[1:] != objs[:-1]
            win = order[first]
            wobj = j1[win]
            wperson = unassigned[win]
            prev = obj_person[wobj]
            dropped = prev[prev >= 0]
            person_obj[dropped] = -1
            obj_person[wobj] = wperson
            person_obj[wperson] = wobj
            prices[wobj] = bids[win]
            unassigned = np.flatnonzero(person_obj < 0)
        total = float(cost[np.arange(n), person_obj].sum())
        dual = float((benefit - prices).max(axis=1).sum() + prices.sum())
        lower = -dual
        if best is None or total < best.cost:
            best = AuctionResult(person_obj.copy(), total, lower, phase)
        best.lower_bound = max(best.lower_bound, lower)
        best.phases = phase
        if best.gap <= rel_gap * max(best.lower_bound, 0.0) or best.gap <= abs_tol:
            break
        eps /= scaling
    return best


def _emd_sizes(P: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if P.shape[0] > G.shape[0]:
        P = P[fps_indices(P, G.shape[0], 0)]
    elif G.shape[0] > P.shape[0]:
        G = G[fps_indices(G, P.shape[0], 0)]
    return P, G


def emd(P, G, mode: str = "exact") -> float:
    """Mean Euclidean displacement of the optimal bijection.

    Unequal sizes: the larger cloud is FPS-resampled (start 0) to the
    smaller's size. ``mode`` is ``exact`` (Hungarian, n <= 512),
    ``approximate`` (auction certified within 1%), or ``auto``.
    """
    P, G = _nonempty(P, G)
    P, G = _emd_sizes(P, G)
    n = P.shape[0]
    cost = np.linalg.norm(P[:, None, :] - G[None, :, :], axis=-1)
    if mode == "auto":
        mode = "exact" if n <= EXACT_EMD_LIMIT else "approximate"
    if mode == "exact":
        if n > EXACT_EMD_LIMIT:
            raise ValueError(f"exact EMD supports at most {EXACT_EMD_LIMIT} points, got {n}")
        col = hungarian(cost)
        return float(cost[np.arange(n), col].sum() / n)
    if mode == "approximate":
        return auction(cost).cost / n
    raise ValueError(f"unknown EMD mode {mode!r}")


# -- reports ----------------------------------------------------------------
@dataclass
class MetricReport:
    precision: float
    recall: float
    f_score: float
    cd_l1: float
    cd_l2: float
    emd: float
    centroid_diff: float

    @property
    def cd_l1_x1000(self) -> float:
        return self.cd_l1 * SCALE

    @property
    def cd_l2_x1000(self) -> float:
        return self.cd_l2 * SCALE

    @property
    def emd_x1000(self) -> float:
        return self.emd * SCALE

    @property
    def centroid_x1000(self) -> float:
        return self.centroid_diff * SCALE

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("cd_l1", "cd_l2", "emd"):
            out[f"{k}_x1000"] = getattr(self, f"{k}_x1000")
        out["centroid_x1000"] = self.centroid_x1000
        return out

    def csv_row(self, sample_id: str) -> list:
        return [sample_id, self.precision, self.recall, self.f_score, self.cd_l1_x1000,
                self.cd_l2_x1000, self.emd_x1000, self.centroid_x1000]


SCALED_FIELDS = (("cd_l1", "cd_l1_x1000"), ("cd_l2", "cd_l2_x1000"), ("emd", "emd_x1000"),
                 ("centroid_diff", "centroid_x1000"))

CSV_HEADER = ["id", "precision", "recall", "fscore", "cdl1_x1000", "cdl2_x1000", "emd_x1000",
              "centroid_x1000"]


def evaluate_pair(P, G, d: float = 0.01, emd_mode: str = "auto") -> MetricReport:
    P, G = _nonempty(P, G)
    prec, rec = precision_recall(P, G, d)
    return MetricReport(
        precision=prec,
        recall=rec,
        f_score=f_score(prec, rec),
        cd_l1=chamfer(P, G, "L1"),
        cd_l2=chamfer(P, G, "L2"),
        emd=emd(P, G, emd_mode),
        centroid_diff=centroid_diff(P, G),
    )


def aggregate(reports: list[MetricReport]) -> dict[str, dict[str, float]]:
    """Mean and population std of every raw and scaled field."""
    if not reports:
        return {}
    rows = [r.to_dict() for r in reports]
    out = {}
    for key in rows[0]:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    # scaled aggregates derive from the raw ones so the x1000 relation stays exact
    for raw, scaled in SCALED_FIELDS:
        out[scaled] = {k: v * SCALE for k, v in out[raw].items()}
    return out


def is_finite_report(r: MetricReport) -> bool:
    return all(math.isfinite(v) for v in asdict(r).values())
