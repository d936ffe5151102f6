from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import GeometryError, fps_indices
from ..numerics import T, Tensor


def chamfer_l1(pred: Tensor, targets) -> Tensor:
    """Differentiable CD-L1, averaged over the batch.

    ``pred`` is (B, P, 3); ``targets`` a sequence of B arrays (sizes may
    differ). Matches are found on the current values; the gradient flows
    through the matched differences.
    """
    b, p, _ = pred.shape
    if len(targets) != b:
        raise ValueError(f"{len(targets)} targets for a batch of {b}")
    fwd_match, bwd_rows, bwd_pts, bwd_w = [], [], [], []
    for i, tgt in enumerate(targets):
        tgt = np.asarray(tgt, dtype=np.float64)
        if tgt.shape[0] == 0 or p == 0:
            raise GeometryError("chamfer_l1: empty cloud")
        pi = pred.data[i]
        _, j = cKDTree(tgt).query(pi, k=1, p=1)
        fwd_match.append(tgt[j])
        _, k = cKDTree(pi).query(tgt, k=1, p=1)
        bwd_rows.append(k + i * p)
        bwd_pts.append(tgt)
        bwd_w.append(np.full(tgt.shape[0], 1.0 / tgt.shape[0]))
    fwd = T.tabs(pred - np.stack(fwd_match)).sum() * (1.0 / (b * p))
    flat = T.reshape(pred, (b * p, 3))
    back_pts = T.gather_rows(flat, np.concatenate(bwd_rows))
    per = T.tabs(back_pts - np.concatenate(bwd_pts)).sum(axis=-1)
    bwd = (per * np.concatenate(bwd_w)).sum() * (1.0 / b)
    return fwd + bwd


def completion_loss(coarse: Tensor, dense: Tensor, gts, coarse_targets=None) -> Tensor:
    """CD-L1(dense, gt) + CD-L1(coarse, FPS_M(gt))."""
    m = coarse.shape[1]
    if coarse_targets is None:
        coarse_targets = []
        for g in gts:
            g = np.asarray(g, dtype=np.float64)
            if g.shape[0] == 0:
                raise GeometryError("completion_loss: empty ground truth")
            coarse_targets.append(g[fps_indices(g, min(m, g.shape[0]), 0)])
    return chamfer_l1(dense, gts) + chamfer_l1(coarse, coarse_targets)
