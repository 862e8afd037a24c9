import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodlab import objectives as obj
from oodlab.diffcore import Graph, finite_difference_check
from oodlab.scoring import msp_score

LOG5 = np.log(5.0)


def onehot(y, c):
    return np.eye(c)[np.asarray(y)]


# hand-written oracles, no shared code with the package

def ce_oracle(z, y):
    out = []
    for row, label in zip(z, y):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        out.append(lse - row[label])
    return float(np.mean(out))


def bce_oracle(z, t):
    cells = []
    for zr, tr in zip(z, t):
        for v, lab in zip(zr, tr):
            p = 1.0 / (1.0 + np.exp(-v))
            cells.append(-(lab * np.log(p) + (1 - lab) * np.log(1 - p)))
    return float(np.mean(cells))


def test_cross_entropy_uniform():
    assert obj.cross_entropy(np.zeros((3, 5)), onehot([0, 2, 4], 5)) == pytest.approx(LOG5, abs=1e-12)


def test_cross_entropy_confident_correct():
    z = np.array([[10.0, -10, -10, -10, -10]])
    assert obj.cross_entropy(z, onehot([0], 5)) < 1e-4


def test_cross_entropy_matches_per_sample_oracle(rng):
    z = rng.normal(size=(4, 5)) * 3
    y = rng.integers(5, size=4)
    assert obj.cross_entropy(z, onehot(y, 5)) == pytest.approx(ce_oracle(z, y), rel=1e-12)


def test_cross_entropy_rejects_non_onehot():
    with pytest.raises(ValueError):
        obj.cross_entropy(np.zeros((2, 3)), np.array([[1, 1, 0], [0, 1, 0]]))
    with pytest.raises(ValueError):
        obj.cross_entropy(np.zeros((2, 3)), np.array([[0.5, 0.5, 0], [0, 1, 0]]))


def test_bce_cells():
    assert obj.bce_multi(np.array([[0.0]]), np.array([[1]])) == pytest.approx(np.log(2.0), abs=1e-15)
    assert obj.bce_multi(np.array([[20.0]]), np.array([[1]])) < 1e-8
    # saturated logits never produce inf
    assert np.isfinite(obj.bce_multi(np.array([[800.0, -800.0]]), np.array([[0, 1]])))


def test_bce_two_by_two(rng):
    z = rng.normal(size=(2, 2)) * 2
    t = np.array([[1, 0], [0, 0]])
    assert obj.bce_multi(z, t) == pytest.approx(bce_oracle(z, t), rel=1e-12)


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError):
        obj.bce_multi(np.zeros((1, 2)), np.array([[2, 0]]))


def test_oe_uniform_values():
    assert obj.oe_uniform_loss(np.zeros((2, 5))) == pytest.approx(LOG5, abs=1e-12)
    z = np.array([[10.0, 0, 0, 0, 0]])
    lse = 10 + np.log(1 + 4 * np.exp(-10))
    expected = (lse - 10) / 5 + 4 * lse / 5
    assert obj.oe_uniform_loss(z) == pytest.approx(expected, rel=1e-12)
    # the rounded hand figure 8.0003 agrees to its stated precision
    assert obj.oe_uniform_loss(z) == pytest.approx(8.0003, abs=2e-4)


vec5 = arrays(np.float64, (3, 5), elements=st.floats(-20, 20, allow_nan=False))


@given(vec5, st.floats(-50, 50))
def test_oe_shift_invariant(z, c):
    assert obj.oe_uniform_loss(z + c) == pytest.approx(obj.oe_uniform_loss(z), abs=1e-9)


@given(vec5)
def test_oe_minimum_is_log_c(z):
    loss = obj.oe_uniform_loss(z)
    assert loss >= LOG5 - 1e-9
    if np.allclose(z, z[:, :1], atol=0):
        assert loss == pytest.approx(LOG5, abs=1e-9)


def test_oe_equality_only_at_constant_rows():
    assert obj.oe_uniform_loss(np.full((1, 5), 3.3)) == pytest.approx(LOG5, abs=1e-12)
    assert obj.oe_uniform_loss(np.array([[0, 0, 0, 0, 1e-3]])) > LOG5


def test_free_energy_values():
    np.testing.assert_allclose(obj.free_energy(np.zeros((1, 5))), [-LOG5])
    np.testing.assert_allclose(obj.free_energy(np.array([[3.5], [-2.0]])), [-3.5, 2.0])
    with pytest.raises(ValueError):
        obj.free_energy(np.zeros((1, 5)), T=0.0)


def test_free_energy_confident_row_is_lower():
    confident = np.array([[9.0, -1, -1, -1, -1]])
    flat = np.zeros((1, 5))
    assert obj.free_energy(confident)[0] < obj.free_energy(flat)[0] - 5


@given(vec5, st.floats(-30, 30), st.floats(0.25, 4))
def test_shift_moves_energy_not_softmax(z, c, T):
    np.testing.assert_allclose(obj.free_energy(z + c, T), obj.free_energy(z, T) - c, atol=1e-9)
    np.testing.assert_allclose(msp_score(z + c), msp_score(z), atol=1e-12)


@given(vec5, st.floats(0.25, 4))
def test_energy_bounded_by_max_logit(z, T):
    # -T*lse(z/T) lies in [-max z - T log C, -max z]
    e = obj.free_energy(z, T)
    assert np.all(e <= -z.max(1) + 1e-9)
    assert np.all(e >= -z.max(1) - T * LOG5 - 1e-9)


M = obj.MarginPair(-5.0, -1.0)


def test_hinge_inactive_is_zero():
    assert obj.energy_hinge_loss(np.array([-7.0, -5.0]), np.array([-1.0, 2.0]), M) == 0.0


def test_hinge_single_violation():
    assert obj.energy_hinge_loss(np.array([-3.0]), np.array([0.0]), M) == pytest.approx(4.0)


def test_hinge_mixed_oracle(rng):
    e_in = rng.normal(-5, 2, size=7)
    e_out = rng.normal(-1, 2, size=4)
    expected = np.mean([max(0, e + 5) ** 2 for e in e_in]) + np.mean([max(0, -1 - e) ** 2 for e in e_out])
    assert obj.energy_hinge_loss(e_in, e_out, M) == pytest.approx(expected, rel=1e-12)


def test_hinge_rejects_empty():
    with pytest.raises(ValueError):
        obj.energy_hinge_loss(np.array([]), np.array([1.0]), M)


@given(arrays(np.float64, 6, elements=st.floats(-10, 5)), arrays(np.float64, 4, elements=st.floats(-10, 5)))
def test_hinge_zero_iff_no_violation(e_in, e_out):
    loss = obj.energy_hinge_loss(e_in, e_out, M)
    frac = obj.hinge_violation_fraction(e_in, e_out, M)
    assert (loss == 0.0) == (frac == 0.0)


def test_margins_odd_and_even():
    m = obj.derive_margins([1.0, 2.0, 3.0], [5.0, 6.0, 7.0])
    assert (m.m_in, m.m_out) == (2.0, 6.0)
    assert obj.derive_margins([4.0, 1.0, 3.0, 2.0], [1.0]).m_in == 2.5
    with pytest.raises(ValueError):
        obj.derive_margins([], [1.0])


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-20, 20)), st.randoms(use_true_random=False))
def test_margins_permutation_invariant(v, r):
    w = list(v)
    r.shuffle(w)
    assert obj.median(w) == obj.median(v)
    # sort-and-midpoint oracle
    s = sorted(v)
    n = len(s)
    expected = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    assert obj.median(v) == expected


def test_inverted_margins_warn(caplog):
    with caplog.at_level(logging.WARNING, logger="oodlab.objectives"):
        m = obj.MarginPair(1.0, 0.0)
    assert m.m_in == 1.0
    assert "inverted" in caplog.text
    with pytest.raises(ValueError):
        obj.MarginPair(float("nan"), 0.0)


def test_combined_values():
    assert obj.combined_oe_objective(1.3, 2.0, 0.0) == 1.3
    assert obj.combined_oe_objective(1.0, 2.0, 0.5) == 2.0
    assert obj.combined_energy_objective(1.0, 2.0, 0.5) == 2.0
    with pytest.raises(ValueError):
        obj.combined_oe_objective(1.0, 2.0, -0.1)
    with pytest.raises(ValueError):
        obj.combined_energy_objective(1.0, 2.0, -1.0)


def _grad(fn, z):
    g = Graph()
    p = g.param(z)
    return g.backward(fn(p))[p.id]


def test_combined_gradient_is_linear(rng):
    zi = rng.normal(size=(4, 5))
    zo = rng.normal(size=(4, 5))
    y = onehot(rng.integers(5, size=4), 5)
    lam = 0.7

    def combo(g, p):
        return obj.combined_oe_objective(obj.cross_entropy(p[0], y), obj.oe_uniform_loss(p[1]), lam)
    g = Graph()
    a, b = g.param(zi), g.param(zo)
    grads = g.backward(combo(g, [a, b]))
    np.testing.assert_allclose(grads[a.id], _grad(lambda p: obj.cross_entropy(p, y), zi), atol=1e-12)
    np.testing.assert_allclose(grads[b.id], lam * _grad(obj.oe_uniform_loss, zo), atol=1e-12)
    assert finite_difference_check(combo, [zi, zo]) <= 1e-4


def test_hinge_gradient_inside_active_region(rng):
    zi = rng.normal(size=(5, 4)) + 1.0
    zo = rng.normal(size=(5, 4)) * 0.3
    e_in = -np.log(np.exp(zi).sum(1))
    e_out = -np.log(np.exp(zo).sum(1))
    # every sample strictly inside its active region, away from the kink
    m = obj.MarginPair(float(e_in.min() - 0.5), float(e_out.max() + 0.5))

    def loss(g, p):
        return obj.energy_hinge_loss(obj.free_energy(p[0]), obj.free_energy(p[1]), m)
    assert obj.hinge_violation_fraction(e_in, e_out, m) == 1.0
    assert finite_difference_check(loss, [zi, zo]) <= 1e-4


def test_oe_gradient(rng):
    assert finite_difference_check(lambda g, p: obj.oe_uniform_loss(p[0]), [rng.normal(size=(6, 5))]) <= 1e-4


def test_node_and_array_paths_agree(rng):
    z = rng.normal(size=(3, 5))
    g = Graph()
    node = obj.oe_uniform_loss(g.param(z))
    assert float(node.value) == obj.oe_uniform_loss(z)
