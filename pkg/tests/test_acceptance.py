"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 to 9 drive the command-line interface end to end and take tens of
minutes on a CPU. Run only this file with ``pytest tests/test_acceptance.py -v``.
"""
import contextlib
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from conftest import ACCEPTANCE_LINES
from pcfuse.cli import main
from pcfuse.config import RunConfig
from pcfuse.geometry import normalize_unit, read_xyz
from pcfuse.metrics import chamfer, emd, evaluate_pair, f_score, precision_recall
from pcfuse.models.completion import CompletionModel, ModelConfig
from pcfuse.models.denoise import StepSchedule, denoise, sphere_score
from pcfuse.models.fusion import CrossModalFusion, ImageEncoder
from pcfuse.models.losses import completion_loss
from pcfuse.numerics import MLP, Linear, MultiHeadAttention, T, Tensor, multi_head_attention
from pcfuse.numerics.gradcheck import check_gradients, numeric_grad, relative_error
from pcfuse.render import render_views, write_views


@contextlib.contextmanager
def criterion(number: int, title: str):
    t0 = time.perf_counter()
    notes: dict = {}
    try:
        yield notes
    except BaseException as exc:
        detail = ", ".join(f"{k}={v}" for k, v in notes.items())
        line = f"criterion {number}: FAIL  {title} ({time.perf_counter() - t0:.1f}s) {detail} :: {exc!s:.200}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    detail = ", ".join(f"{k}={v}" for k, v in notes.items())
    line = f"criterion {number}: PASS  {title} ({time.perf_counter() - t0:.1f}s) {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def cli(*argv) -> int:
    return main([str(a) for a in argv])


def cd_mean(eval_dir: Path) -> float:
    return json.loads((eval_dir / "aggregate.json").read_text())["cd_l1"]["mean"]


# -- 1 ------------------------------------------------------------------------
def brute_emd(P, G):
    n = len(P)
    cost = cdist(P, G)
    perms = np.array(list(itertools.permutations(range(n))))
    return cost[np.arange(n), perms].sum(axis=1).min() / n


def brute_chamfer(P, G, norm):
    diff = P[:, None] - G[None]
    d = np.abs(diff).sum(-1) if norm == "L1" else (diff ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


def test_criterion_1_metric_oracles():
    with criterion(1, "metric-oracle equivalence") as notes:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst_emd = worst_cd = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 9))
            P, G = rng.random((n, 3)), rng.random((n, 3))
            worst_emd = max(worst_emd, abs(emd(P, G, "exact") - brute_emd(P, G)))
        for _ in range(100):
            n, m = rng.integers(1, 51, size=2)
            P, G = rng.random((n, 3)), rng.random((m, 3))
            for norm in ("L1", "L2"):
                worst_cd = max(worst_cd, abs(chamfer(P, G, norm) - brute_chamfer(P, G, norm)))
        elapsed = time.perf_counter() - t0
        notes.update(emd_err=f"{worst_emd:.1e}", cd_err=f"{worst_cd:.1e}", runtime=f"{elapsed:.1f}s")
        assert worst_emd <= 1e-9 and worst_cd <= 1e-12 and elapsed < 10


# -- 2 ------------------------------------------------------------------------
def test_criterion_2_hand_values():
    with criterion(2, "hand-value metric checks"):
        assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), "L1") == 2.0
        P = np.array([[0, 0, 0], [1, 0, 0]], float)
        assert emd(P, P + [0, 1, 0]) == 1.0
        assert precision_recall(np.array([[0, 0, 0], [0, 0, 0.02]]), np.zeros((1, 3)), 0.01) == (0.5, 1.0)
        assert f_score(0.5, 1.0) == 2 / 3


# -- 3 ------------------------------------------------------------------------
def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _numerics_block_errors(rng) -> dict:
    errs = {}

    def chk(name, fn, tensors):
        errs[name] = check_gradients(fn, tensors, h=1e-5)

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    w = rng.standard_normal((3, 4))
    pos = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)
    away = Tensor(np.where(np.abs(a.data) < 0.05, 0.3, a.data), requires_grad=True)
    for op in ("add", "sub", "mul"):
        chk(op, lambda op=op: (getattr(T, op)(a, b) * w).sum(), [a, b])
    chk("div", lambda: (T.div(b, pos) * w).sum(), [b, pos])
    for op in ("relu", "tabs"):
        chk(op, lambda op=op: (getattr(T, op)(away) * w).sum(), [away])
    chk("sqrt", lambda: (T.sqrt(pos) * w).sum(), [pos])
    for op in ("square", "exp", "tanh"):
        chk(op, lambda op=op: (getattr(T, op)(a) * w).sum(), [a])
    x, y = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w5 = rng.standard_normal((2, 3, 5))
    chk("matmul", lambda: (T.matmul(x, y) * w5).sum(), [x, y])
    w6 = rng.standard_normal((2, 1, 4))
    chk("max_pool_set", lambda: (T.max_pool_set(x, axis=-2) * w6).sum(), [x])
    chk("mean", lambda: (T.mean(x, axis=1, keepdims=True) * w6).sum(), [x])
    chk("softmax", lambda: (T.softmax(T.matmul(x, y)) * w5).sum(), [x, y])
    chk("layer_norm", lambda: (T.layer_norm(x) * rng_fixed(x.shape)).sum(), [x])
    p, q = _leaf(rng, 2, 5, 3), _leaf(rng, 2, 4, 3)
    w8 = rng.standard_normal((2, 5, 4))
    chk("pairwise_distance", lambda: (T.pairwise_distance(p, q) * w8).sum(), [p, q])
    idx = rng.integers(0, 5, size=(2, 5, 3))
    w9 = rng.standard_normal((2, 5, 3, 3))
    chk("gather_rows", lambda: (T.gather_rows(p, idx) * w9).sum(), [p])
    w10 = rng.standard_normal((2, 9, 3))
    chk("concat", lambda: (T.concat([p, q], axis=1) * w10).sum(), [p, q])
    lin = Linear(rng, 4, 3)
    chk("linear", lambda: (lin(x) * rng_fixed((2, 3, 3))).sum(), lin.parameters() + [x])
    mlp = MLP(rng, [4, 6, 2])
    chk("mlp", lambda: (mlp(x) * rng_fixed((2, 3, 2))).sum(), mlp.parameters() + [x])
    mha = MultiHeadAttention(rng, 4, 2)
    bias = _leaf(rng, 2, 3, 3)
    chk("attention", lambda: (multi_head_attention(x, x, x, 2, mha, bias) * rng_fixed((2, 3, 4))).sum(),
        mha.parameters() + [x, bias])
    return errs


_FIXED: dict = {}


def rng_fixed(shape):
    """A fixed random weight per shape, so repeated loss evaluations agree."""
    key = tuple(shape)
    if key not in _FIXED:
        _FIXED[key] = np.random.default_rng(hash(key) % 2**32).standard_normal(shape)
    return _FIXED[key]


def test_criterion_3_gradient_integrity():
    with criterion(3, "gradient integrity") as notes:
        t0 = time.perf_counter()
        errs = _numerics_block_errors(np.random.default_rng(0))
        worst_block = max(errs, key=errs.get)
        cfg = ModelConfig(proxy_count=8, embed_dim=8, heads=2, encoder_layers=1, decoder_layers=1, query_count=4,
                          fold_grid=2, knn_k=4, edge_dim=4, fold_hidden=8, fusion=True, image_size=8, patch=4,
                          img_dim=8, seed=0)
        model = CompletionModel(cfg)
        rng = np.random.default_rng(0)
        x, gt, views = rng.uniform(-0.3, 0.3, (8, 3)), rng.uniform(-0.4, 0.4, (40, 3)), rng.random((3, 8, 8))

        def loss():
            return completion_loss(*model(x, views), [gt])

        model.zero_grad()
        loss().backward()
        mini = {}
        for name, prm in model.named_parameters():
            numeric, _ = numeric_grad(lambda: loss().item(), prm.data, h=1e-5)
            mini[name] = relative_error(prm.grad, numeric)
        worst_mini = max(mini, key=mini.get)
        elapsed = time.perf_counter() - t0
        notes.update(blocks=f"{errs[worst_block]:.1e}({worst_block})",
                     miniature=f"{mini[worst_mini]:.1e}({worst_mini})", runtime=f"{elapsed:.0f}s")
        assert errs[worst_block] < 1e-5
        assert mini[worst_mini] < 1e-4
        assert elapsed < 60


# -- 4 ------------------------------------------------------------------------
def test_criterion_4_residual_identities():
    with criterion(4, "residual identities"):
        cfg = ModelConfig(proxy_count=16, embed_dim=16, heads=2, encoder_layers=2, decoder_layers=2,
                          query_count=8, knn_k=4, edge_dim=8, fold_hidden=16)
        model = CompletionModel(cfg)
        for layer in model.encoder + model.decoder:
            layer.zero_()
        rng = np.random.default_rng(0)
        coords = rng.uniform(-0.4, 0.4, (1, 16, 3))
        v = Tensor(rng.standard_normal((1, 16, 16)))
        assert np.array_equal(model.encode(v, coords).data, v.data)
        q = Tensor(rng.standard_normal((1, 8, 16)))
        assert np.array_equal(model.decode(q, Tensor(coords[:, :8]), v, coords).data, q.data)
        fusion = CrossModalFusion(rng, 16, 8, 2)
        fusion.attn.zero_("v_proj")
        tokens = ImageEncoder(rng, 16, 4, 8)(rng.random((3, 16, 16)))
        assert np.array_equal(fusion(v, tokens).data, v.data)


# -- 5 ------------------------------------------------------------------------
def test_criterion_5_analytic_denoising():
    with criterion(5, "analytic denoising oracle") as notes:
        rng = np.random.default_rng(5)
        d = rng.standard_normal((500, 3))
        clean = 0.4 * d / np.linalg.norm(d, axis=1, keepdims=True)
        noisy = clean + rng.normal(0, 0.05, clean.shape)
        out = denoise(noisy, StepSchedule(), sphere_score(np.zeros(3), 0.4))

        def dist(p):
            return np.abs(np.linalg.norm(p, axis=1) - 0.4).mean()

        reduction = 1 - dist(out) / dist(noisy)
        one = denoise(np.array([[0.9, -0.3, 0.2]]), StepSchedule(alphas=[1.0]), sphere_score(np.zeros(3), 0.4))
        notes.update(reduction=f"{reduction:.3f}", single_step_err=f"{dist(one):.1e}")
        assert reduction >= 0.8
        assert dist(one) < 1e-12


# -- 6 ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def denoiser_run(work):
    d = work / "denoiser"
    d.mkdir()
    cfg = RunConfig(out=str(d / "run"))
    cfg.dump(d / "config.json")
    t0 = time.perf_counter()
    code = cli("train-denoiser", "--config", d / "config.json")
    return d, code, time.perf_counter() - t0


def test_criterion_6_learned_denoiser(denoiser_run):
    d, code, elapsed = denoiser_run
    with criterion(6, "learned denoiser") as notes:
        assert code == 0
        man = json.loads((d / "run" / "manifest.json").read_text())
        rows = man["held_out"]
        notes.update(noisy=np.round([r["cd_l1_noisy"] for r in rows], 5).tolist(),
                     denoised=np.round([r["cd_l1_denoised"] for r in rows], 5).tolist(),
                     bbox=np.round([r["bbox_ratio"] for r in rows], 4).tolist(), runtime=f"{elapsed:.0f}s")
        assert len(man["epoch_loss"]) == 10
        for r in rows:
            assert r["cd_l1_denoised"] < r["cd_l1_noisy"]
            assert abs(r["bbox_ratio"] - 1) <= 0.05
        assert elapsed < 15 * 60


# -- 7 and 10 -----------------------------------------------------------------
@pytest.fixture(scope="module")
def toy_run(work):
    d = work / "toy"
    d.mkdir()
    cfg = RunConfig(corpus=str(d / "corpus"), out=str(d / "run"))
    cfg.dump(d / "config.json")
    t0 = time.perf_counter()
    codes = [cli("gen", "--config", d / "config.json"),
             cli("eval", "--config", d / "config.json", "--baseline", "copy-partial", "--out", d / "baseline"),
             cli("train", "--config", d / "config.json")]
    return d, codes, time.perf_counter() - t0


def test_criterion_7_toy_completion(toy_run):
    d, codes, elapsed = toy_run
    with criterion(7, "toy completion beats copy-partial by 30%") as notes:
        assert codes == [0, 0, 0]
        base = cd_mean(d / "baseline")
        model = cd_mean(d / "run" / "eval")
        notes.update(model=f"{model:.5f}", baseline=f"{base:.5f}", ratio=f"{model / base:.3f}",
                     runtime=f"{elapsed:.0f}s")
        assert model <= 0.7 * base
        assert elapsed < 30 * 60


def test_criterion_10_reporting_convention(toy_run):
    d, codes, _ = toy_run
    with criterion(10, "scaled fields are exactly 1000 x raw"):
        assert codes == [0, 0, 0]
        checked = 0
        for sub in ("baseline", "run/eval"):
            recs = json.loads((d / sub / "per_sample.json").read_text())
            agg = json.loads((d / sub / "aggregate.json").read_text())
            for raw, scaled in (("cd_l1", "cd_l1_x1000"), ("cd_l2", "cd_l2_x1000"), ("emd", "emd_x1000"),
                                ("centroid_diff", "centroid_x1000")):
                for rec in recs:
                    assert rec[scaled] == 1000 * rec[raw]
                    checked += 1
                for stat in ("mean", "std"):
                    assert agg[scaled][stat] == 1000 * agg[raw][stat]
        assert checked > 0
        # a report built directly obeys the same relation
        r = evaluate_pair(np.zeros((1, 3)), np.ones((1, 3)) * 0.1).to_dict()
        assert r["cd_l1_x1000"] == 1000 * r["cd_l1"]


def test_reconstruct_denoise_pass_does_not_hurt(toy_run, denoiser_run):
    """Paired run: the refined prediction is no farther from the clean shape."""
    d, codes, _ = toy_run
    den, dcode, _ = denoiser_run
    assert codes == [0, 0, 0] and dcode == 0
    index = json.loads((d / "corpus" / "index.json").read_text())
    raw_cd, den_cd = [], []
    for meta in [m for m in index["samples"] if m["split"] == "test"][:5]:
        sdir = d / "corpus" / "test" / meta["id"]
        ck = d / "run" / "model.pcfw"
        assert cli("reconstruct", "--checkpoint", ck, "--input", sdir / "partial.xyz", "--out", d / "r.xyz") == 0
        assert cli("reconstruct", "--checkpoint", ck, "--input", sdir / "partial.xyz", "--out", d / "rd.xyz",
                   "--denoise", den / "run" / "denoiser.pcfw") == 0
        clean = read_xyz(sdir / "clean.xyz").points
        raw_cd.append(chamfer(read_xyz(d / "r.xyz").points, clean, "L1"))
        den_cd.append(chamfer(read_xyz(d / "rd.xyz").points, clean, "L1"))
    assert np.mean(den_cd) <= np.mean(raw_cd), (raw_cd, den_cd)


# -- 8 ------------------------------------------------------------------------
def test_criterion_8_fusion_discriminates(work):
    d = work / "cube_bump"
    d.mkdir()
    cfg = RunConfig(corpus=str(d / "corpus"), fusion=True)
    cfg.gen.families = ["cube_bump"]
    cfg.dump(d / "config.json")
    with criterion(8, "fusion resolves the cube_bump ambiguity") as notes:
        t0 = time.perf_counter()
        assert cli("gen", "--config", d / "config.json") == 0
        assert cli("train", "--config", d / "config.json", "--out", d / "fusion") == 0
        assert cli("train", "--config", d / "config.json", "--no-fusion", "--out", d / "points") == 0
        fused, points = cd_mean(d / "fusion" / "eval"), cd_mean(d / "points" / "eval")
        notes.update(fusion=f"{fused:.5f}", point_only=f"{points:.5f}", ratio=f"{fused / points:.3f}",
                     runtime=f"{time.perf_counter() - t0:.0f}s")
        assert fused <= 0.7 * points


# -- 9 ------------------------------------------------------------------------
def test_criterion_9_determinism(work):
    with criterion(9, "end-to-end determinism") as notes:
        outputs = []
        for name in ("first", "second"):
            d = work / "determinism" / name
            d.mkdir(parents=True)
            cfg = RunConfig(corpus=str(d / "corpus"), out=str(d / "run"), fusion=True, epochs=2, batch_size=4,
                            model=ModelConfig(proxy_count=64, embed_dim=32, heads=4, encoder_layers=1,
                                              decoder_layers=1, query_count=16, edge_dim=16, fold_hidden=32,
                                              image_size=32, patch=8, img_dim=32))
            cfg.gen.samples, cfg.gen.points, cfg.gen.resolution = 20, 1024, 32
            cfg.with_seed(11)
            cfg.dump(d / "config.json")
            assert cli("gen", "--config", d / "config.json") == 0
            assert cli("train", "--config", d / "config.json") == 0
            assert cli("eval", "--config", d / "config.json", "--checkpoint", d / "run" / "model.pcfw",
                       "--out", d / "eval") == 0
            pts, _ = normalize_unit(np.random.default_rng(3).random((500, 3)))
            write_views(d / "views", render_views(pts.points, 256))
            outputs.append(d)
        a, b = outputs
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "manifest.json")
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "manifest.json")
        for rel in files:
            if rel.name == "config.json":
                continue  # holds the run's own absolute paths
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        ma, mb = (json.loads((x / "run" / "manifest.json").read_text()) for x in (a, b))
        for m in (ma, mb):
            m.pop("wall_clock_s")
            m.pop("config")
        assert ma == mb
        notes.update(files=len(files))
