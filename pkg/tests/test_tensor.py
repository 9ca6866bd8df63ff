import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lenslesskit import tensor as T
from lenslesskit.tensor import Tape, Tensor

from conftest import gradcheck

TOL = 1e-4


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def probe(out, rng):
    """Scalar ``sum(out * R)`` with a fixed random ``R`` so every output entry matters."""
    R = Tensor(np.random.default_rng(99).standard_normal(out.shape))
    return T.sum_all(T.mul(out, R))


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -2.5), [(2, 5)]),
    "add_bias": (lambda x, b: T.add_bias(x, b), [(2, 3, 4), (4,)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "bmm": (lambda a, b: T.bmm(a, b), [(2, 3, 4), (2, 4, 2)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (6, 4)), [(2, 3, 4)]),
    "gelu": (lambda a: T.gelu(a), [(3, 5)]),
    "softmax_rows": (lambda a: T.softmax_rows(a), [(3, 5)]),
    "conv2d": (lambda x, w: T.conv2d(x, w, stride=1, padding=1), [(2, 5, 5, 2), (3, 3, 2, 3)]),
    "conv2d_strided": (lambda x, w: T.conv2d(x, w, stride=2, padding=2), [(1, 6, 6, 2), (3, 3, 2, 2)]),
    "batch_norm": (lambda x, g, b: T.batch_norm(x, g, b)[0], [(4, 3, 5), (5,), (5,)]),
    "bilinear_down": (lambda x: T.bilinear_resize(x, (3, 2)), [(1, 6, 5, 2)]),
    "bilinear_up": (lambda x: T.bilinear_resize(x, (7, 9)), [(2, 4, 3, 1)]),
    "space_to_depth": (lambda x: T.space_to_depth(x, 2), [(1, 4, 6, 2)]),
    "depth_to_space": (lambda x: T.depth_to_space(x, 2), [(1, 2, 3, 8)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    fn, shapes = OPS[name]
    args = [leaf(rng, *s) for s in shapes]
    assert gradcheck(lambda: probe(fn(*args), rng), args) < TOL


def test_batch_norm_running_stats_gradient(rng):
    x, g, b = leaf(rng, 6, 4), leaf(rng, 4), leaf(rng, 4)
    stats = (rng.standard_normal(4), rng.uniform(0.5, 2.0, 4))
    assert gradcheck(lambda: probe(T.batch_norm(x, g, b, stats=stats)[0], rng), [x, g, b]) < TOL


def test_mse_loss_gradient(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    assert gradcheck(lambda: T.mse_loss(a, b), [a, b]) < TOL


def test_mults_counted_per_rules(rng):
    a, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    x, k = leaf(rng, 2, 6, 6, 3), leaf(rng, 3, 3, 3, 4)
    with Tape() as tape:
        T.matmul(a, w)
        T.conv2d(x, k, stride=1, padding=1)
        T.mul(a, a)
        T.gelu(a)
        T.add(a, a)
    assert tape.by_kind["matmul"] == 2 * 3 * 4 * 5
    assert tape.by_kind["conv2d"] == 2 * 6 * 6 * 9 * 3 * 4
    assert tape.by_kind["mul"] == 24
    assert tape.mults == 120 + 2 * 36 * 9 * 12 + 24


def test_backward_is_replayable_and_disconnected_params_get_zero(rng):
    a, unused = leaf(rng, 3), leaf(rng, 2)
    with Tape() as tape:
        loss = T.sum_all(T.mul(a, a))
    g1 = tape.backward(loss, [a, unused])
    g2 = tape.backward(loss, [a, unused])
    np.testing.assert_array_equal(g1[a], 2 * a.data)
    np.testing.assert_array_equal(g1[a], g2[a])
    assert not g1[unused].any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    x = Tensor(np.array([1e308]), requires_grad=True)
    with pytest.raises(T.NonFiniteError):
        T.scale(x, 10.0)


def test_shape_mismatch_raises(rng):
    with pytest.raises(ValueError, match="matmul"):
        T.matmul(leaf(rng, 2, 3), leaf(rng, 4, 5))
    with pytest.raises(ValueError, match="add"):
        T.add(leaf(rng, 2, 3), leaf(rng, 3, 2))


def test_conv2d_matches_direct_loop(rng):
    x, w = rng.standard_normal((1, 5, 4, 2)), rng.standard_normal((3, 3, 2, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 4, 3))
    for i in range(5):
        for j in range(4):
            ref[0, i, j] = np.einsum("abc,abco->o", xp[0, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n_in=st.integers(1, 40), n_out=st.integers(1, 40))
def test_bilinear_matrix_rows_sum_to_one(n_in, n_out):
    m = T.bilinear_matrix(n_in, n_out)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert (m >= 0).all()


def test_bilinear_same_size_is_identity():
    np.testing.assert_allclose(T.bilinear_matrix(7, 7), np.eye(7), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(b=st.sampled_from([1, 2, 3]), h=st.integers(1, 3), w=st.integers(1, 3), c=st.integers(1, 3))
def test_space_depth_roundtrip(b, h, w, c):
    x = Tensor(np.arange(2 * 2 * h * w * c * b, dtype=float).reshape(b, 2 * h, 2 * w, c))
    np.testing.assert_array_equal(T.depth_to_space(T.space_to_depth(x, 2), 2).data, x.data)


def test_checkpoint_roundtrip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": np.arange(5, dtype=np.float32)}
    bin_path, man_path = T.save_checkpoint(tmp_path / "ck", arrays)
    manifest = json.loads(man_path.read_text())
    assert manifest["total_bytes"] == bin_path.stat().st_size == (12 + 5) * 4
    assert manifest["byteorder"] == "little"
    back = T.load_checkpoint(tmp_path / "ck")
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_truncated_raises(tmp_path):
    T.save_checkpoint(tmp_path / "ck", {"a": np.ones(4, np.float32)})
    (tmp_path / "ck.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError, match="manifest"):
        T.load_checkpoint(tmp_path / "ck")


def test_scalar_tensor_keeps_shape():
    assert Tensor(np.float64(2.0)).shape == ()
