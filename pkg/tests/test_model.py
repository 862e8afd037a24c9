import numpy as np
import pytest

from oodlab.model import (Checkpoint, ModelParams, forward, forward_graph, head_width, init_params, load_checkpoint,
                          save_checkpoint)
from oodlab.diffcore import Graph

DIMS = [8, 64, 64, 16]


def test_init_is_deterministic():
    a = init_params(DIMS, 5, "softmax_c", 7)
    b = init_params(DIMS, 5, "softmax_c", 7)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert a.digest() == b.digest()
    assert a.digest() != init_params(DIMS, 5, "softmax_c", 8).digest()


def test_glorot_bounds_and_zero_bias():
    p = init_params(DIMS, 5, "softmax_c", 0)
    widths = DIMS + [5]
    for w, b, fi, fo in zip(p.weights, p.biases, widths[:-1], widths[1:]):
        assert np.abs(w).max() <= np.sqrt(6.0 / (fi + fo))
        assert not b.any()


def test_ood_class_head_has_extra_output():
    p = init_params(DIMS, 5, "sigmoid_c_plus_1", 0)
    assert p.weights[-1].shape[1] == 6
    assert head_width("sigmoid_c", 5) == 5


def test_zero_depth_rejected():
    with pytest.raises(ValueError):
        init_params([8], 5, "softmax_c", 0)
    with pytest.raises(ValueError):
        init_params([8, 0, 4], 5, "softmax_c", 0)
    with pytest.raises(ValueError):
        init_params(DIMS, 5, "tanh_c", 0)


def test_broken_chain_rejected():
    p = init_params(DIMS, 5, "softmax_c", 0)
    w = list(p.weights)
    w[1] = np.zeros((63, 64))
    with pytest.raises(ValueError, match="chain"):
        ModelParams(tuple(w), p.biases, "softmax_c", 5)


def test_forward_shapes_and_purity(rng):
    p = init_params(DIMS, 5, "softmax_c", 0)
    x = rng.normal(size=(11, 8))
    e1, z1 = forward(p, x)
    e2, z2 = forward(p, x)
    assert e1.shape == (11, 16) and z1.shape == (11, 5)
    np.testing.assert_array_equal(z1, z2)
    with pytest.raises(ValueError):
        forward(p, rng.normal(size=(3, 7)))


def test_zero_weights_give_uniform_softmax(rng):
    p = init_params(DIMS, 5, "softmax_c", 0)
    p0 = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    _, z = forward(p0, rng.normal(size=(4, 8)))
    assert not z.any()
    sm = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    np.testing.assert_allclose(sm, 0.2)


def test_embedding_independent_of_head(rng):
    a = init_params(DIMS, 5, "softmax_c", 3)
    b = init_params(DIMS, 5, "sigmoid_c_plus_1", 3)
    feat = [*a.arrays()[:-2]]
    b = b.with_arrays(feat + b.arrays()[-2:])
    x = rng.normal(size=(6, 8))
    np.testing.assert_array_equal(forward(a, x)[0], forward(b, x)[0])


def test_graph_forward_matches_numpy(rng):
    p = init_params(DIMS, 5, "sigmoid_c", 1)
    x = rng.normal(size=(5, 8))
    g = Graph()
    nodes = [g.param(a) for a in p.arrays()]
    emb, z = forward_graph(g, nodes, p, x)
    e_np, z_np = forward(p, x)
    np.testing.assert_allclose(z.value, z_np, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(emb.value, e_np, rtol=1e-14, atol=1e-14)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    p = init_params(DIMS, 5, "sigmoid_c_plus_1", 9)
    p = p.with_arrays([a + rng.normal(size=a.shape) for a in p.arrays()])
    ck = Checkpoint(p, "best_val_loss", 4, 0.123456789, {"seed": 3})
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.params.digest() == p.digest()
    assert (back.criterion, back.epoch, back.metric, back.meta) == ("best_val_loss", 4, 0.123456789, {"seed": 3})
    assert back.params.head_kind == "sigmoid_c_plus_1" and back.params.dims == tuple(DIMS)


def test_corrupt_checkpoint_rejected(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
    p = init_params([3, 4, 2], 2, "softmax_c", 0)
    save_checkpoint(tmp_path / "c.bin", Checkpoint(p, "x", 0, 0.0))
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="payload"):
        load_checkpoint(tmp_path / "t.bin")
