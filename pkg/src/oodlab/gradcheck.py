"""Finite-difference gradient checks for every training objective.

Each check draws random logits (and whatever side inputs the loss needs) and
compares tape gradients with central differences on the logits.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import objectives as obj
from .almstate import AlmConfig, AlmState, alm_objective, ood_detector_loss
from .diffcore import finite_difference_check

N, C = 6, 5


def _onehot(rng, n, c):
    y = np.zeros((n, c))
    y[np.arange(n), rng.integers(c, size=n)] = 1.0
    return y


def _ce(rng):
    y = _onehot(rng, N, C)
    return [rng.normal(size=(N, C))], lambda g, p: obj.cross_entropy(p[0], y)


def _bce(rng):
    y = (rng.random((N, C + 1)) < 0.3).astype(float)
    return [rng.normal(size=(N, C + 1))], lambda g, p: obj.bce_multi(p[0], y)


def _oe(rng):
    return [rng.normal(size=(N, C))], lambda g, p: obj.oe_uniform_loss(p[0])


def _oe_combined(rng):
    y = _onehot(rng, N, C)
    lam = float(rng.uniform(0.1, 2.0))

    def f(g, p):
        return obj.combined_oe_objective(obj.cross_entropy(p[0], y), obj.oe_uniform_loss(p[1]), lam)
    return [rng.normal(size=(N, C)), rng.normal(size=(N, C))], f


def _margins_for(zi, zo, T):
    # put margins inside the energy range so both hinge sides are active somewhere
    ei = -T * np.log(np.exp(zi / T).sum(1))
    eo = -T * np.log(np.exp(zo / T).sum(1))
    return obj.MarginPair(float(np.median(ei)), float(np.median(eo)))


def _hinge(rng):
    T = float(rng.uniform(0.5, 2.0))
    zi, zo = 2.0 * rng.normal(size=(N, C)), 0.5 * rng.normal(size=(N, C))
    m = _margins_for(zi, zo, T)

    def f(g, p):
        return obj.energy_hinge_loss(obj.free_energy(p[0], T), obj.free_energy(p[1], T), m)
    return [zi, zo], f


def _energy_combined(rng):
    T = 1.0
    y = _onehot(rng, N, C)
    zi, zo = 2.0 * rng.normal(size=(N, C)), 0.5 * rng.normal(size=(N, C))
    m = _margins_for(zi, zo, T)
    lam = float(rng.uniform(0.1, 2.0))

    def f(g, p):
        hinge = obj.energy_hinge_loss(obj.free_energy(p[0], T), obj.free_energy(p[1], T), m)
        return obj.combined_energy_objective(obj.cross_entropy(p[0], y), hinge, lam)
    return [zi, zo], f


def _alm(rng):
    y = _onehot(rng, N, C)
    cfg = AlmConfig(alpha=0.1, tau=0.5, beta_max=5.0)
    state = AlmState(lambda1=float(rng.uniform(0, 1)), lambda2=float(rng.uniform(0, 1)),
                     beta1=float(rng.uniform(0.5, 5)), beta2=float(rng.uniform(0.5, 5)))
    threshold = float(rng.normal(-1.5, 0.5))

    def f(g, p):
        zi, zw = p
        wild = ood_detector_loss(obj.free_energy(zw), "out", threshold)
        fa = ood_detector_loss(obj.free_energy(zi), "in", threshold)
        return alm_objective(wild, fa, obj.cross_entropy(zi, y), state, cfg)
    return [rng.normal(size=(N, C)), rng.normal(size=(N, C))], f


OBJECTIVES: dict[str, Callable] = {
    "cross_entropy": _ce,
    "bce_multi": _bce,
    "oe_uniform": _oe,
    "combined_oe": _oe_combined,
    "energy_hinge": _hinge,
    "combined_energy": _energy_combined,
    "alm_objective": _alm,
}


def run_suite(points: int = 10, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error per objective over ``points`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, build in OBJECTIVES.items():
        errs = []
        for _ in range(points):
            params, fn = build(rng)
            errs.append(finite_difference_check(fn, params, step))
        worst[name] = max(errs)
    return worst


def main_report(points: int = 10, seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    t0 = time.perf_counter()
    worst = run_suite(points, seed)
    lines = [f"{name:16s} max_rel_err={err:.3e} {'ok' if err <= tol else 'FAIL'}" for name, err in worst.items()]
    lines.append(f"{len(worst)} objectives x {points} points in {time.perf_counter() - t0:.2f}s")
    return all(e <= tol for e in worst.values()), "\n".join(lines)
