"""Augmented Lagrangian state for wild-data constrained training.

Two inequality constraints ``c_i <= 0``:

* ``c1 = id_false_alarm_loss - alpha``  (ID samples flagged as OOD)
* ``c2 = cls_loss - tau``                (classification loss bound)

Penalty per constraint: ``lambda_i * c_i + beta_i / 2 * max(0, c_i)^2``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .diffcore import Graph, Node


@dataclass(frozen=True)
class AlmConfig:
    alpha: float = 0.1
    tau: float = 1.0
    eta_lambda: float = 0.001
    beta_max: float | None = 5.0  # None removes the cap
    beta_growth: float = 2.0
    beta_init: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.eta_lambda <= 0:
            raise ValueError("eta_lambda must be positive")
        if self.beta_init <= 0:
            raise ValueError("beta_init must be positive")
        if self.beta_max is not None and self.beta_max < self.beta_init:
            raise ValueError("beta_max must be >= beta_init")
        if self.beta_growth <= 1:
            raise ValueError("beta_growth must exceed 1")

    @property
    def cap(self) -> float:
        return math.inf if self.beta_max is None else self.beta_max


@dataclass(frozen=True)
class AlmState:
    lambda1: float = 0.0
    lambda2: float = 0.0
    beta1: float = 0.5
    beta2: float = 0.5
    c1: float = 0.0
    c2: float = 0.0

    @classmethod
    def initial(cls, config: AlmConfig) -> "AlmState":
        return cls(beta1=config.beta_init, beta2=config.beta_init)

    def validate(self, config: AlmConfig) -> None:
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ValueError(f"invalid ALM state: {name}={v}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (config.beta_init <= v <= config.cap):
                raise ValueError(f"invalid ALM state: {name}={v} outside [{config.beta_init}, {config.cap}]")

    def as_dict(self) -> dict:
        return asdict(self)


def _penalty(g: Graph, c: Node, lam: float, beta: float) -> Node:
    return g.add(g.scale(c, lam), g.scale(g.square(g.rectify(c)), 0.5 * beta))


def alm_objective(wild_loss, id_false_alarm_loss, cls_loss, state: AlmState, config: AlmConfig):
    """Augmented Lagrangian training loss. Nodes in, node out; floats in, float out."""
    state.validate(config)
    terms = (wild_loss, id_false_alarm_loss, cls_loss)
    graph = next((t.graph for t in terms if isinstance(t, Node)), None)
    if graph is None:
        c1 = float(id_false_alarm_loss) - config.alpha
        c2 = float(cls_loss) - config.tau
        return (
            float(wild_loss)
            + state.lambda1 * c1 + 0.5 * state.beta1 * max(0.0, c1) ** 2
            + state.lambda2 * c2 + 0.5 * state.beta2 * max(0.0, c2) ** 2
        )
    g = graph
    wild, fa, cls = (g._own(t) for t in terms)
    c1 = g.shift(fa, -config.alpha)
    c2 = g.shift(cls, -config.tau)
    return g.add(wild, g.add(_penalty(g, c1, state.lambda1, state.beta1),
                             _penalty(g, c2, state.lambda2, state.beta2)))


def alm_epoch_update(state: AlmState, measured_c1: float, measured_c2: float, config: AlmConfig) -> AlmState:
    """Dual ascent on lambda, multiplicative capped growth on beta for violated constraints."""
    lam1 = max(0.0, state.lambda1 + config.eta_lambda * measured_c1)
    lam2 = max(0.0, state.lambda2 + config.eta_lambda * measured_c2)
    beta1 = min(state.beta1 * config.beta_growth, config.cap) if measured_c1 > 0 else state.beta1
    beta2 = min(state.beta2 * config.beta_growth, config.cap) if measured_c2 > 0 else state.beta2
    return replace(state, lambda1=lam1, lambda2=lam2, beta1=beta1, beta2=beta2,
                   c1=float(measured_c1), c2=float(measured_c2))


def ood_detector_loss(energies, target_side: str, threshold: float = 0.0):
    """Sigmoid cross-entropy of the detector logit ``energy - threshold``.

    ``target_side="in"`` is small when energy sits below the threshold;
    ``"out"`` is small when it sits above.
    """
    if target_side not in ("in", "out"):
        raise ValueError(f"target_side must be 'in' or 'out', got {target_side!r}")
    if isinstance(energies, Node):
        g, e, plain = energies.graph, energies, False
    else:
        g = Graph()
        e, plain = g.const(np.asarray(energies, dtype=np.float64)), True
    if e.value.size == 0:
        raise ValueError("ood_detector_loss: empty batch")
    logit = g.shift(e, -threshold)
    # detector logit > 0 means "out"; CE = softplus(-logit) for out, softplus(logit) for in
    cell = g.softplus(logit if target_side == "in" else -logit)
    loss = g.mean(cell)
    return float(loss.value) if plain else loss
