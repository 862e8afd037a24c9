"""Training losses and the free-energy function.

Every loss accepts either graph nodes (returns a node, differentiable) or plain
arrays (returns a float / ndarray evaluated on a throwaway graph).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import Graph, Node

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarginPair:
    m_in: float
    m_out: float

    def __post_init__(self):
        if not (np.isfinite(self.m_in) and np.isfinite(self.m_out)):
            raise ValueError("margins must be finite")
        if self.m_in > self.m_out:
            log.warning("inverted energy margins: m_in=%.4f > m_out=%.4f", self.m_in, self.m_out)


def _lift(*xs):
    """Return (graph, nodes, plain) where ``plain`` says inputs were arrays."""
    for x in xs:
        if isinstance(x, Node):
            g = x.graph
            return g, [g._own(v) for v in xs], False
    g = Graph()
    return g, [g.const(np.asarray(v, dtype=np.float64)) for v in xs], True


def _out(node: Node, plain: bool):
    if not plain:
        return node
    return float(node.value) if node.value.ndim == 0 else np.array(node.value)


def _as_2d(name, v: np.ndarray):
    if v.ndim != 2:
        raise ValueError(f"{name}: expected (n, C) logits, got shape {v.shape}")


def cross_entropy(logits, onehot_labels):
    """Mean over the batch of ``-sum_c y_c log softmax(z)_c``."""
    y = np.asarray(onehot_labels, dtype=np.float64)
    g, (z,), plain = _lift(logits)
    _as_2d("cross_entropy", z.value)
    if y.shape != z.shape:
        raise ValueError(f"cross_entropy: labels {y.shape} vs logits {z.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("cross_entropy: labels must be one-hot rows")
    per = -g.sum(g.mul(g.log_softmax(z), g.const(y)), axis=1)
    return _out(g.mean(per), plain)


def bce_multi(logits, binary_labels):
    """Mean over all (sample, class) cells of binary cross-entropy on logits.

    Uses ``softplus(z) - y*z`` so saturated logits never hit ``log(0)``.
    """
    y = np.asarray(binary_labels, dtype=np.float64)
    g, (z,), plain = _lift(logits)
    _as_2d("bce_multi", z.value)
    if y.shape != z.shape:
        raise ValueError(f"bce_multi: labels {y.shape} vs logits {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_multi: labels must be in {0, 1}")
    cells = g.sub(g.softplus(z), g.mul(z, g.const(y)))
    return _out(g.mean(cells), plain)


def oe_uniform_loss(logits):
    """Cross-entropy from the predictive distribution to uniform over C classes."""
    g, (z,), plain = _lift(logits)
    _as_2d("oe_uniform_loss", z.value)
    return _out(-g.mean(g.log_softmax(z)), plain)


def free_energy(logits, T: float = 1.0):
    """Per-sample ``-T * logsumexp(z / T)``. Lower means more ID-like."""
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    g, (z,), plain = _lift(logits)
    _as_2d("free_energy", z.value)
    e = g.scale(g.logsumexp(g.scale(z, 1.0 / T)), -T)
    return _out(e, plain)


def energy_hinge_loss(id_energies, ood_energies, margins: MarginPair):
    """``mean max(0, E_in - m_in)^2 + mean max(0, m_out - E_out)^2``."""
    g, (e_in, e_out), plain = _lift(id_energies, ood_energies)
    if e_in.value.size == 0 or e_out.value.size == 0:
        raise ValueError("energy_hinge_loss: empty batch")
    hin = g.mean(g.square(g.rectify(g.shift(e_in, -margins.m_in))))
    hout = g.mean(g.square(g.rectify(g.shift(-e_out, margins.m_out))))
    return _out(g.add(hin, hout), plain)


def hinge_violation_fraction(id_energies, ood_energies, margins: MarginPair) -> float:
    """Fraction of samples whose hinge term is active."""
    e_in = np.asarray(id_energies)
    e_out = np.asarray(ood_energies)
    active = np.count_nonzero(e_in > margins.m_in) + np.count_nonzero(e_out < margins.m_out)
    return active / (e_in.size + e_out.size)


def median(values) -> float:
    """Median; midpoint of the two central order statistics for even length."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("median of empty array")
    mid = v.size // 2
    if v.size % 2:
        return float(v[mid])
    return float(0.5 * (v[mid - 1] + v[mid]))


def derive_margins(val_id_energies, val_ood_energies) -> MarginPair:
    """Margins at the medians of validation ID and OOD energies."""
    return MarginPair(median(val_id_energies), median(val_ood_energies))


def _combine(base, extra, lam, name):
    if lam < 0:
        raise ValueError(f"{name}: weight must be nonnegative, got {lam}")
    if isinstance(base, Node) or isinstance(extra, Node):
        g = base.graph if isinstance(base, Node) else extra.graph
        return g.add(g._own(base), g.scale(extra, lam))
    return float(base) + lam * float(extra)


def combined_oe_objective(ce_loss, oe_loss, lambda_oe: float):
    return _combine(ce_loss, oe_loss, lambda_oe, "combined_oe_objective")


def combined_energy_objective(ce_loss, energy_loss, lambda_energy: float):
    return _combine(ce_loss, energy_loss, lambda_energy, "combined_energy_objective")
