import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pcfuse.numerics import (MLP, Adam, CheckpointError, Linear, MissingGradientError, Module,
                             MultiHeadAttention, Parameter, ShapeError, T, Tensor, adam_step, load,
                             mlp_forward, multi_head_attention, save)
from pcfuse.numerics.gradcheck import check_gradients

TOL = 1e-5


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def weighted(out: Tensor, rng) -> Tensor:
    """Random linear functional, so every output entry matters to the check."""
    return (out * rng.standard_normal(out.shape)).sum()


# -- forward examples ---------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_max_pool_set_example():
    out = T.max_pool_set(Tensor(np.array([[1.0, 5.0], [3.0, 2.0]])), axis=0, keepdims=False)
    np.testing.assert_array_equal(out.data, [3, 5])


def test_max_pool_ties_route_to_lowest_index():
    x = Tensor(np.array([[2.0], [2.0], [1.0]]), requires_grad=True)
    T.max_pool_set(x, axis=0).sum().backward()
    np.testing.assert_array_equal(x.grad, [[1], [0], [0]])


def test_matmul_hand_case():
    a = np.array([[1.0, 2, 3], [4, 5, 6]])
    b = np.array([[7.0, 8], [9, 10], [11, 12]])
    # rows: [1*7+2*9+3*11, 1*8+2*10+3*12], [4*7+5*9+6*11, 4*8+5*10+6*12]
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, [[58, 64], [139, 154]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_backward_examples():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.sum().backward()
    np.testing.assert_array_equal(p.grad, [1, 1])
    p.grad = None
    T.square(p).sum().backward()
    np.testing.assert_array_equal(p.grad, [2, 4])


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()  # d/dx 2x^2 = 4x
    np.testing.assert_array_equal(x.grad, [12.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 16)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_layer_norm_moments(x):
    if np.any(x.std(-1) < 1e-3):
        return
    y = T.layer_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(-1)) < 1e-10)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-8)


# -- gradient checks ----------------------------------------------------------
def _check(fn, tensors):
    return check_gradients(fn, tensors, h=1e-5)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "relu", "tabs", "square", "sqrt", "exp",
                                "tanh"])
def test_elementwise_grads(op):
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    if op in ("sqrt",):
        a.data = np.abs(a.data) + 0.5
    if op == "div":
        b.data = np.abs(b.data) + 0.5
    if op in ("relu", "tabs"):
        a.data = np.where(np.abs(a.data) < 0.05, 0.3, a.data)  # keep away from the kink
    w = rng.standard_normal((3, 4))
    f = getattr(T, op)
    if op in ("add", "sub", "mul", "div"):
        assert _check(lambda: (f(a, b) * w).sum(), [a, b]) < TOL
    else:
        assert _check(lambda: (f(a) * w).sum(), [a]) < TOL


def test_matmul_and_batched_grads():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    assert _check(lambda: (T.matmul(a, b) * w).sum(), [a, b]) < TOL


def test_reduction_and_shape_grads():
    rng = np.random.default_rng(2)
    x = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((2, 1, 4))
    assert _check(lambda: (T.max_pool_set(x, axis=-2) * w).sum(), [x]) < TOL
    assert _check(lambda: (T.mean(x, axis=1, keepdims=True) * w).sum(), [x]) < TOL
    w2 = rng.standard_normal((4, 3, 2))
    assert _check(lambda: (T.transpose(x, (2, 1, 0)) * w2).sum(), [x]) < TOL
    w3 = rng.standard_normal((2, 12))
    assert _check(lambda: (T.reshape(x, (2, 12)) * w3).sum(), [x]) < TOL
    w4 = rng.standard_normal((2, 3, 3, 4))
    assert _check(lambda: (T.broadcast_to(T.reshape(x, (2, 3, 1, 4)), (2, 3, 3, 4)) * w4).sum(),
                  [x]) < TOL


def test_concat_index_gather_grads():
    rng = np.random.default_rng(3)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 5)
    w = rng.standard_normal((2, 8))
    assert _check(lambda: (T.concat([a, b], axis=-1) * w).sum(), [a, b]) < TOL
    x = leaf(rng, 2, 6, 3)
    idx = rng.integers(0, 6, size=(2, 6, 4))
    w2 = rng.standard_normal((2, 6, 4, 3))
    assert _check(lambda: (T.gather_rows(x, idx) * w2).sum(), [x]) < TOL
    w3 = rng.standard_normal((2, 3))
    assert _check(lambda: (x[:, [0, 0, 4]].sum(axis=-1) * w3).sum(), [x]) < TOL


def test_fused_op_grads():
    rng = np.random.default_rng(4)
    x = leaf(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    assert _check(lambda: (T.softmax(x) * w).sum(), [x]) < TOL
    assert _check(lambda: (T.layer_norm(x) * w).sum(), [x]) < TOL
    a, b = leaf(rng, 2, 4, 3), leaf(rng, 2, 6, 3)
    w2 = rng.standard_normal((2, 4, 6))
    assert _check(lambda: (T.pairwise_distance(a, b) * w2).sum(), [a, b]) < TOL


def test_mlp_and_attention_block_grads():
    rng = np.random.default_rng(5)
    mlp = MLP(rng, [4, 7, 3])
    x = leaf(rng, 2, 5, 4)
    assert _check(lambda: weighted(mlp(x), np.random.default_rng(9)), [x] + mlp.parameters()) < TOL
    mha = MultiHeadAttention(rng, 8, 2)
    q, kv = leaf(rng, 2, 3, 8), leaf(rng, 2, 5, 8)
    bias = leaf(rng, 2, 3, 5)
    fn = lambda: weighted(mha(q, kv, kv, bias), np.random.default_rng(9))  # noqa: E731
    assert _check(fn, [q, kv, bias] + mha.parameters()) < TOL


# -- mlp / attention ----------------------------------------------------------
def test_mlp_zero_and_identity():
    rng = np.random.default_rng(6)
    mlp = MLP(rng, [3, 3, 3])
    for p in mlp.parameters():
        p.data[...] = 0
    x = Tensor(rng.random((4, 3)) + 0.1)
    np.testing.assert_array_equal(mlp(x).data, 0)
    for layer in mlp.layers:
        layer.weight.data[...] = np.eye(3)
    np.testing.assert_array_equal(mlp(x).data, x.data)


def test_mlp_matches_hand_rolled():
    rng = np.random.default_rng(7)
    mlp = MLP(rng, [3, 5, 2])
    x = rng.standard_normal((4, 3))
    l1, l2 = mlp.layers
    ref = np.maximum(x @ l1.weight.data + l1.bias.data, 0) @ l2.weight.data + l2.bias.data
    np.testing.assert_allclose(mlp_forward(Tensor(x), mlp.layers).data, ref, rtol=1e-14, atol=1e-14)
    with pytest.raises(ShapeError):
        mlp(Tensor(np.zeros((2, 4))))


def test_attention_zero_value_projection():
    rng = np.random.default_rng(8)
    mha = MultiHeadAttention(rng, 8, 4)
    mha.v_proj.weight.data[...] = 0
    out = mha(Tensor(rng.standard_normal((3, 8))), Tensor(rng.standard_normal((5, 8))),
              Tensor(rng.standard_normal((5, 8))))
    assert np.all(out.data == 0)


def test_attention_single_head_scalar():
    rng = np.random.default_rng(9)
    mha = MultiHeadAttention(rng, 1, 1)
    one = Tensor(np.array([[1.0]]))
    out, w = multi_head_attention(one, one, one, 1, mha, return_weights=True)
    assert w.data.item() == 1.0
    assert out.data.item() == pytest.approx(mha.v_proj.weight.data.item() * mha.out_proj.weight.data.item(),
                                            rel=1e-15)


def test_attention_singleton_keys():
    rng = np.random.default_rng(10)
    mha = MultiHeadAttention(rng, 8, 2)
    _, w = multi_head_attention(Tensor(rng.standard_normal((6, 8))), Tensor(rng.standard_normal((1, 8))),
                                Tensor(rng.standard_normal((1, 8))), 2, mha, return_weights=True)
    assert np.all(w.data == 1.0)


def test_attention_indivisible_heads():
    with pytest.raises(ValueError):
        MultiHeadAttention(np.random.default_rng(0), 6, 4)


def test_seeded_init_bounds_and_determinism():
    a = Linear(np.random.default_rng(11), 16, 4)
    b = Linear(np.random.default_rng(11), 16, 4)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    assert np.abs(a.weight.data).max() <= 0.25 and np.abs(a.bias.data).max() <= 0.25


# -- optimizer ----------------------------------------------------------------
def test_adam_zero_gradient_no_change():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_descends():
    p = Parameter(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    T.square(p).sum().backward()
    adam_step(opt)
    assert p.data[0] < 1.0


def test_adam_converges_on_quadratic():
    p = Parameter(np.array([0.0, 0.0]))
    opt = Adam([p], lr=0.05)
    target, scale = np.array([1.0, -0.5]), np.array([1.0, 3.0])

    def loss():
        return (T.square(p - target) * scale).sum()

    for _ in range(500):
        opt.zero_grad()
        loss().backward()
        opt.step()
    assert loss().item() < 1e-6


def test_adam_missing_gradients():
    p, q = Parameter(np.ones(2)), Parameter(np.ones(2))
    opt = Adam([p, q])
    with pytest.raises(MissingGradientError):
        opt.step()
    p.grad = np.ones(2)
    with pytest.raises(MissingGradientError):
        opt.step(allow_missing=False)
    opt.step()
    np.testing.assert_array_equal(q.data, 1.0)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(12)
        mlp = MLP(rng, [2, 4, 1])
        opt = Adam(mlp.parameters(), lr=0.01)
        x = Tensor(rng.standard_normal((8, 2)))
        for _ in range(20):
            opt.zero_grad()
            T.square(mlp(x)).mean().backward()
            opt.step()
        return mlp.state_dict()
    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


# -- checkpoints --------------------------------------------------------------
class _Tiny(Module):
    def __init__(self, rng, width=3):
        self.mlp = MLP(rng, [2, width, 1])
        self.scale = Parameter(np.array([2.0]))


def test_checkpoint_round_trip_and_layout(tmp_path):
    m = _Tiny(np.random.default_rng(13))
    save(tmp_path / "m.pcfw", m.state_dict())
    raw = (tmp_path / "m.pcfw").read_bytes()
    assert raw[:4] == b"PCFW"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(m.state_dict())
    n = int.from_bytes(raw[12:16], "little")
    assert raw[16:16 + n] == b"mlp.layers.0.weight"
    m2 = _Tiny(np.random.default_rng(99))
    m2.load_state_dict(load(tmp_path / "m.pcfw"))
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(m2.state_dict()[k], v)


def test_checkpoint_errors(tmp_path):
    m = _Tiny(np.random.default_rng(14))
    path = tmp_path / "m.pcfw"
    save(path, m.state_dict())
    with pytest.raises(ShapeError, match=r"mlp\.layers\.0\.weight: checkpoint \(2, 3\) vs model \(2, 5\)"):
        _Tiny(np.random.default_rng(0), width=5).load_state_dict(load(path))
    raw = path.read_bytes()
    (tmp_path / "bad.pcfw").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load(tmp_path / "bad.pcfw")
    (tmp_path / "short.pcfw").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load(tmp_path / "short.pcfw")
