"""Method protocols E1-E6, evaluation, run outputs, and the embedding analysis."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objectives as obj
from .almstate import AlmConfig, AlmState, alm_epoch_update, alm_objective, ood_detector_loss
from .config import FINETUNE_METHODS, ExperimentConfig
from .data import BenchmarkData, cycle_shorter, generate, inverse_frequency_sampler
from .metrics import (OOD_SETS, MethodReport, auroc, balanced_accuracy, fpr_at_95_tpr, roc_curve,
                      wasserstein1, write_histogram_csv)
from .model import Checkpoint, ModelParams, forward, forward_graph, init_params, load_checkpoint, save_checkpoint
from .scoring import (EmbeddingBank, ScoreSet, energy_score, knn_cosine_score, max_sigmoid_score,
                      msp_score, ood_class_score)
from .train import EpochStats, TrainingDiverged, noam_lr, run_epochs, scaled_warmup

log = logging.getLogger(__name__)

HEAD_FOR = {"e1": "softmax_c", "e2": "sigmoid_c", "e3": "sigmoid_c_plus_1", "e4": "softmax_c",
            "e5a": "softmax_c", "e5b": "softmax_c", "e6": "softmax_c"}
SCORE_FOR = {"e1": "msp", "e2": "max_sigmoid", "e3": "ood_class", "e4": "msp",
             "e5a": "energy", "e5b": "energy", "e6": "energy"}


class MissingCheckpoint(ValueError):
    pass


@dataclass
class RunRecord:
    method: str
    seed: int
    config_hash: str
    status: str
    epochs: list[dict]
    checkpoints: dict
    selected: dict
    report: MethodReport | None
    flags: list[str] = field(default_factory=list)
    lineage: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    params: ModelParams | None = field(default=None, repr=False)

    def to_json(self) -> str:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("params", "report")}
        d["report"] = None if self.report is None else dataclasses.asdict(self.report)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# helpers

def onehot(y, width) -> np.ndarray:
    out = np.zeros((len(y), width))
    out[np.arange(len(y)), y] = 1.0
    return out


def seeds_for(seed: int) -> dict[str, int]:
    """Independent integer seeds for init and sampling, derived from the run seed."""
    ss = np.random.SeedSequence([seed, 0x00D1AB])
    init, sample, ood = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    return {"init": init, "sample": sample, "ood": ood}


def model_dims(cfg: ExperimentConfig) -> list[int]:
    return [cfg.data.dim, *cfg.model.hidden, cfg.model.embed]


def score(method_score: str, logits: np.ndarray, n_classes: int, T: float) -> np.ndarray:
    if method_score == "msp":
        return msp_score(logits)
    if method_score == "max_sigmoid":
        return max_sigmoid_score(logits)
    if method_score == "ood_class":
        return ood_class_score(logits, n_classes)
    if method_score == "energy":
        return energy_score(logits, T)
    raise ValueError(method_score)


def predict(params: ModelParams, x) -> np.ndarray:
    _, z = forward(params, x)
    return np.argmax(z[:, : params.n_classes], axis=1)


def energies(params: ModelParams, x, T=1.0) -> np.ndarray:
    return energy_score(forward(params, x)[1], T)


def val_ce(params: ModelParams, data: BenchmarkData) -> float:
    z = forward(params, data.id_val.x)[1]
    return obj.cross_entropy(z, onehot(data.id_val.y, params.n_classes))


def _epoch_id_batches(labels, n: int, batch_size: int, rng_seed: int):
    stream = inverse_frequency_sampler(labels, rng_seed)
    idx = np.fromiter((next(stream) for _ in range(n)), dtype=int, count=n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch_seed(base: int, epoch: int) -> int:
    return int(np.random.SeedSequence([base, epoch]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# evaluation

def evaluate_method(params: ModelParams, data: BenchmarkData, cfg: ExperimentConfig,
                    method: str) -> tuple[MethodReport, dict[str, np.ndarray]]:
    """Balanced accuracy on ID test plus AUROC / FPR95 per OOD set."""
    kind = SCORE_FOR[method]
    T = cfg.objectives.temperature
    C = data.n_classes
    z_id = forward(params, data.id_test.x)[1]
    bal = balanced_accuracy(np.argmax(z_id[:, :C], axis=1), data.id_test.y)
    scores = {"id_test": score(kind, z_id, C, T)}
    for name in OOD_SETS:
        scores[name] = score(kind, forward(params, data.test_ood_sets[name].x)[1], C, T)
    scores["aux_ood_val"] = score(kind, forward(params, data.aux_ood_val.x)[1], C, T)

    def pair(name):
        return {"auroc": auroc(scores["id_test"], scores[name]),
                "fpr95": fpr_at_95_tpr(scores["id_test"], scores[name])}

    report = MethodReport(
        method=method,
        balanced_accuracy=bal,
        ood={name: pair(name) for name in OOD_SETS},
        seed=cfg.seed,
        config_hash=cfg.digest(),
        extra_ood={"aux_ood_val": pair("aux_ood_val")},
    )
    return report, scores


# ---------------------------------------------------------------------------
# training protocols

def _id_only_eval(data: BenchmarkData, loss_fn):
    def evaluate(params, epoch, train_loss):
        z = forward(params, data.id_val.x)[1]
        val_loss = float(loss_fn(z, data.id_val.y, params.n_classes))
        acc = balanced_accuracy(np.argmax(z[:, : params.n_classes], axis=1), data.id_val.y)
        return EpochStats(epoch, train_loss, val_loss, acc)
    return evaluate


def _ce_labels(z, y, C):
    return obj.cross_entropy(z, onehot(y, C))


def _bce_labels(z, y, C):
    return obj.bce_multi(z, onehot(y, z.shape[1]))


def _train_supervised(cfg: ExperimentConfig, data: BenchmarkData, x, y, head_kind: str, loss_fn,
                      evaluate, width_labels: int):
    seeds = seeds_for(cfg.seed)
    C = data.n_classes
    params = init_params(model_dims(cfg), C, head_kind, seeds["init"])
    init_digest = params.digest()
    n = len(y)
    bs = cfg.train.batch_size

    def batches(epoch):
        return _epoch_id_batches(y, n, bs, _epoch_seed(seeds["sample"], epoch))

    def step_loss(g, nodes, p, idx, epoch):
        _, logits = forward_graph(g, nodes, p, x[idx])
        if loss_fn is _ce_labels:
            return obj.cross_entropy(logits, onehot(y[idx], width_labels))
        return obj.bce_multi(logits, onehot(y[idx], width_labels))

    warm = scaled_warmup(cfg.train.warmup_steps_ref, cfg.train.ref_train_size, n)
    params, tracker, history = run_epochs(
        params, epochs=cfg.train.epochs, lr_at=lambda step: noam_lr(step, cfg.train.lr, warm),
        weight_decay=cfg.train.weight_decay, batches=batches, step_loss=step_loss, evaluate=evaluate)
    return tracker, history, {"init_digest": init_digest}


def train_e1(cfg: ExperimentConfig, data: BenchmarkData) -> RunRecord:
    """Softmax head, cross-entropy, inverse-frequency sampling."""
    evaluate = _id_only_eval(data, _ce_labels)
    tracker, history, lineage = _train_supervised(
        cfg, data, data.id_train.x, data.id_train.y, "softmax_c", _ce_labels, evaluate, data.n_classes)
    return _finish(cfg, data, "e1", tracker, history, lineage)


def train_e2(cfg: ExperimentConfig, data: BenchmarkData) -> RunRecord:
    """Independent sigmoid heads with BCE; touches ID splits only."""
    evaluate = _id_only_eval(data, _bce_labels)
    tracker, history, lineage = _train_supervised(
        cfg, data, data.id_train.x, data.id_train.y, "sigmoid_c", _bce_labels, evaluate, data.n_classes)
    return _finish(cfg, data, "e2", tracker, history, lineage)


def train_e3(cfg: ExperimentConfig, data: BenchmarkData) -> RunRecord:
    """Extra OOD output trained with BCE on ID plus aux OOD (label vector 0..0,1)."""
    C = data.n_classes
    x = np.concatenate([data.id_train.x, data.aux_ood_train.x])
    y = np.concatenate([data.id_train.y, np.full(len(data.aux_ood_train), C)])
    xv = np.concatenate([data.id_val.x, data.aux_ood_val.x])
    yv = np.concatenate([data.id_val.y, np.full(len(data.aux_ood_val), C)])

    def evaluate(params, epoch, train_loss):
        z = forward(params, xv)[1]
        val_loss = obj.bce_multi(z, onehot(yv, C + 1))
        # OOD rows count as correct when the OOD output beats every class output
        acc = balanced_accuracy(np.argmax(z, axis=1), yv)
        return EpochStats(epoch, train_loss, val_loss, acc)

    tracker, history, lineage = _train_supervised(cfg, data, x, y, "sigmoid_c_plus_1", _bce_labels,
                                                  evaluate, C + 1)
    return _finish(cfg, data, "e3", tracker, history, lineage)


def _require_e1(e1: Checkpoint | None, cfg: ExperimentConfig) -> ModelParams:
    if e1 is None:
        raise MissingCheckpoint(f"method {cfg.method} needs an E1 checkpoint")
    if e1.params.head_kind != "softmax_c":
        raise MissingCheckpoint("E1 checkpoint must have a softmax_c head")
    seed = e1.meta.get("seed")
    if seed is not None and seed != cfg.seed:
        raise MissingCheckpoint(f"E1 checkpoint was trained with seed {seed}, run uses {cfg.seed}")
    return e1.params


def _paired_batches(cfg, data: BenchmarkData, ood_len: int, seeds):
    bs = cfg.train.batch_size
    y = data.id_train.y
    n = len(y)

    def batches(epoch):
        es = _epoch_seed(seeds["sample"], epoch)
        id_batches = _epoch_id_batches(y, n, bs, es)
        id_idx = np.concatenate(id_batches)
        ood_order = np.random.default_rng(_epoch_seed(seeds["ood"], epoch)).permutation(ood_len)
        return list(cycle_shorter(id_idx, ood_order, bs))
    return batches


def _finetune(cfg: ExperimentConfig, data: BenchmarkData, e1_params: ModelParams, *, ood_len, step_loss,
              evaluate, on_epoch_end=None):
    seeds = seeds_for(cfg.seed)
    params = e1_params.copy()
    lineage = {"init_digest": params.digest(), "e1_digest": e1_params.digest()}
    ft_lr = cfg.train.lr * cfg.train.finetune_lr_factor
    params, tracker, history = run_epochs(
        params,
        epochs=cfg.train.finetune_epochs,
        lr_at=lambda step: ft_lr,
        weight_decay=cfg.train.weight_decay,
        batches=_paired_batches(cfg, data, ood_len, seeds),
        step_loss=step_loss,
        evaluate=evaluate,
        track_from=min(cfg.train.classification_warmup_epochs, cfg.train.finetune_epochs - 1),
        on_epoch_end=on_epoch_end,
    )
    return tracker, history, lineage


def _ce_step(g, nodes, p, x, y):
    _, logits = forward_graph(g, nodes, p, x)
    return logits, obj.cross_entropy(logits, onehot(y, p.n_classes))


def train_e4(cfg: ExperimentConfig, data: BenchmarkData, e1: Checkpoint | None) -> RunRecord:
    """Outlier exposure fine-tuning from E1 with paired ID / aux-OOD batches."""
    e1_params = _require_e1(e1, cfg)
    lam = cfg.objectives.lambda_oe
    warmup = cfg.train.classification_warmup_epochs
    C = data.n_classes
    xo = data.aux_ood_train.x

    def step_loss(g, nodes, p, batch, epoch):
        ia, ib = batch
        _, ce = _ce_step(g, nodes, p, data.id_train.x[ia], data.id_train.y[ia])
        if epoch < warmup:
            return ce
        _, zo = forward_graph(g, nodes, p, xo[ib])
        return obj.combined_oe_objective(ce, obj.oe_uniform_loss(zo), lam)

    flags: list[str] = []

    def evaluate(params, epoch, train_loss):
        z = forward(params, data.id_val.x)[1]
        ce = obj.cross_entropy(z, onehot(data.id_val.y, C))
        oe = obj.oe_uniform_loss(forward(params, data.aux_ood_val.x)[1])
        acc = balanced_accuracy(np.argmax(z, axis=1), data.id_val.y)
        mean_msp = float(np.mean(-msp_score(z)))
        if mean_msp < 1.0 / C + cfg.train.collapse_eps and "oe_collapse" not in flags:
            log.warning("OE collapse: mean ID max-softmax %.3f at epoch %d", mean_msp, epoch)
            flags.append("oe_collapse")
        return EpochStats(epoch, train_loss, ce + lam * oe, acc, {"val_mean_msp": mean_msp})

    tracker, history, lineage = _finetune(cfg, data, e1_params, ood_len=len(xo), step_loss=step_loss,
                                          evaluate=evaluate)
    return _finish(cfg, data, "e4", tracker, history, lineage, flags=flags)


def run_e5a(cfg: ExperimentConfig, data: BenchmarkData, e1: Checkpoint | None) -> RunRecord:
    """Energy rescoring of the E1 checkpoint; no parameter updates."""
    e1_params = _require_e1(e1, cfg)
    before = e1_params.digest()
    report, scores = evaluate_method(e1_params, data, cfg, "e5a")
    if e1_params.digest() != before:
        raise AssertionError("E5a modified parameters")
    lineage = {"init_digest": before, "e1_digest": before}
    return RunRecord("e5a", cfg.seed, cfg.digest(), "ok", [], {}, {"criterion": "e1", "epoch": e1.epoch},
                     report, lineage=lineage, params=e1_params, diagnostics={"scores": _score_digest(scores)})


def e5b_margins(cfg: ExperimentConfig, data: BenchmarkData, e1_params: ModelParams) -> obj.MarginPair:
    o = cfg.objectives
    if o.m_in is not None and o.m_out is not None:
        return obj.MarginPair(o.m_in, o.m_out)
    T = o.temperature
    derived = obj.derive_margins(energies(e1_params, data.id_val.x, T), energies(e1_params, data.aux_ood_val.x, T))
    return obj.MarginPair(derived.m_in if o.m_in is None else o.m_in,
                          derived.m_out if o.m_out is None else o.m_out)


def energy_gap_stats(params: ModelParams, data: BenchmarkData, margins: obj.MarginPair, T: float) -> dict:
    e_in = energies(params, data.id_val.x, T)
    e_out = energies(params, data.aux_ood_val.x, T)
    return {"mean_id": float(e_in.mean()), "mean_ood": float(e_out.mean()),
            "gap": float(e_out.mean() - e_in.mean()),
            "violation_fraction": obj.hinge_violation_fraction(e_in, e_out, margins)}


def train_e5b(cfg: ExperimentConfig, data: BenchmarkData, e1: Checkpoint | None) -> RunRecord:
    """Energy fine-tuning with squared hinges at margins frozen from E1 validation energies."""
    e1_params = _require_e1(e1, cfg)
    T = cfg.objectives.temperature
    lam = cfg.objectives.lambda_energy
    warmup = cfg.train.classification_warmup_epochs
    margins = e5b_margins(cfg, data, e1_params)
    C = data.n_classes
    xo = data.aux_ood_train.x

    def step_loss(g, nodes, p, batch, epoch):
        ia, ib = batch
        zi, ce = _ce_step(g, nodes, p, data.id_train.x[ia], data.id_train.y[ia])
        if epoch < warmup:
            return ce
        _, zo = forward_graph(g, nodes, p, xo[ib])
        hinge = obj.energy_hinge_loss(obj.free_energy(zi, T), obj.free_energy(zo, T), margins)
        return obj.combined_energy_objective(ce, hinge, lam)

    hinge_hist: list[float] = []

    def evaluate(params, epoch, train_loss):
        z = forward(params, data.id_val.x)[1]
        ce = obj.cross_entropy(z, onehot(data.id_val.y, C))
        e_in = energy_score(z, T)
        e_out = energies(params, data.aux_ood_val.x, T)
        hinge = obj.energy_hinge_loss(e_in, e_out, margins)
        acc = balanced_accuracy(np.argmax(z, axis=1), data.id_val.y)
        if epoch >= warmup:
            hinge_hist.append(hinge)
        return EpochStats(epoch, train_loss, ce + lam * hinge, acc, {"val_hinge": hinge})

    tracker, history, lineage = _finetune(cfg, data, e1_params, ood_len=len(xo), step_loss=step_loss,
                                          evaluate=evaluate)
    flags = []
    k = cfg.train.stall_epochs
    for i in range(k, len(hinge_hist)):
        if min(hinge_hist[i - k + 1: i + 1]) >= hinge_hist[i - k]:
            flags.append("margin_stall")
            break
    record = _finish(cfg, data, "e5b", tracker, history, lineage, flags=flags)
    record.report.margins = {"m_in": margins.m_in, "m_out": margins.m_out}
    record.diagnostics["energy_before"] = energy_gap_stats(e1_params, data, margins, T)
    if record.params is not None:
        record.diagnostics["energy_after"] = energy_gap_stats(record.params, data, margins, T)
    return record


def alm_config_for(cfg: ExperimentConfig, e1_params: ModelParams, data: BenchmarkData) -> AlmConfig:
    a = cfg.alm
    tau = a.tau if a.tau is not None else a.tau_factor * val_ce(e1_params, data)
    return AlmConfig(alpha=a.alpha, tau=tau, eta_lambda=a.eta_lambda, beta_max=a.beta_max,
                     beta_growth=a.beta_growth, beta_init=a.beta_init)


def train_e6(cfg: ExperimentConfig, data: BenchmarkData, e1: Checkpoint | None) -> RunRecord:
    """Wild-data constrained training solved with the augmented Lagrangian.

    The detector is the free energy thresholded at the E1 median validation ID
    energy; wild rows are used without labels.
    """
    e1_params = _require_e1(e1, cfg)
    T = cfg.objectives.temperature
    C = data.n_classes
    warmup = cfg.train.classification_warmup_epochs
    alm_cfg = alm_config_for(cfg, e1_params, data)
    threshold = obj.median(energies(e1_params, data.id_val.x, T))
    xw = data.wild_train.x
    state = {"alm": AlmState.initial(alm_cfg)}
    trajectory: list[dict] = []

    def step_loss(g, nodes, p, batch, epoch):
        ia, ib = batch
        zi, ce = _ce_step(g, nodes, p, data.id_train.x[ia], data.id_train.y[ia])
        if epoch < warmup:
            return ce
        _, zw = forward_graph(g, nodes, p, xw[ib])
        wild = ood_detector_loss(obj.free_energy(zw, T), "out", threshold)
        fa = ood_detector_loss(obj.free_energy(zi, T), "in", threshold)
        return alm_objective(wild, fa, ce, state["alm"], alm_cfg)

    def evaluate(params, epoch, train_loss):
        z = forward(params, data.id_val.x)[1]
        ce = obj.cross_entropy(z, onehot(data.id_val.y, C))
        e_in = energy_score(z, T)
        c1 = ood_detector_loss(e_in, "in", threshold) - alm_cfg.alpha
        c2 = ce - alm_cfg.tau
        acc = balanced_accuracy(np.argmax(z, axis=1), data.id_val.y)
        extra = {"c1": c1, "c2": c2, "val_median_id_energy": obj.median(e_in)}
        return EpochStats(epoch, train_loss, ce, acc, extra)

    def on_epoch_end(params, stats):
        if stats.epoch >= warmup:
            state["alm"] = alm_epoch_update(state["alm"], stats.extra["c1"], stats.extra["c2"], alm_cfg)
        s = state["alm"]
        for key in ("lambda1", "lambda2", "beta1", "beta2"):
            stats.extra[key] = getattr(s, key)
        trajectory.append({"epoch": stats.epoch, **s.as_dict()})

    tracker, history, lineage = _finetune(cfg, data, e1_params, ood_len=len(xw), step_loss=step_loss,
                                          evaluate=evaluate, on_epoch_end=on_epoch_end)
    flags = []
    post = trajectory[warmup:]
    if alm_cfg.beta_max is not None and post:
        at_cap = sum(1 for t in post if max(t["beta1"], t["beta2"]) >= alm_cfg.beta_max)
        if at_cap > len(post) / 2:
            flags.append("beta_at_cap")
    record = _finish(cfg, data, "e6", tracker, history, lineage, flags=flags)
    record.report.alm_trajectory = trajectory
    e1_acc = balanced_accuracy(predict(e1_params, data.id_val.x), data.id_val.y)
    start_median = threshold
    end_median = history[-1].extra["val_median_id_energy"]
    record.diagnostics["alm"] = {
        "tau": alm_cfg.tau,
        "threshold": threshold,
        "max_beta": max(max(t["beta1"], t["beta2"]) for t in trajectory),
        "e1_val_balanced_accuracy": e1_acc,
        "min_val_balanced_accuracy": min(h.val_balanced_accuracy for h in history),
        "start_median_id_energy": start_median,
        "end_median_id_energy": end_median,
        # >0.5 means the median moved more than halfway from its start toward 0
        "median_energy_rise": (end_median - start_median) / abs(start_median) if start_median else 0.0,
    }
    return record


def divergence_signature(diag: dict) -> bool:
    return (diag["max_beta"] > 20.0
            or diag["median_energy_rise"] > 0.5
            or diag["e1_val_balanced_accuracy"] - diag["min_val_balanced_accuracy"] >= 0.15)


def _score_digest(scores: dict[str, np.ndarray]) -> dict:
    return {k: {"n": int(v.size), "mean": float(v.mean())} for k, v in scores.items()}


def _finish(cfg, data, method, tracker, history, lineage, flags=()) -> RunRecord:
    chosen = tracker.select()
    report, scores = evaluate_method(chosen.params, data, cfg, method)
    report.flags = list(flags)
    selected = {"criterion": chosen.criterion, "epoch": chosen.epoch, "metric": chosen.metric,
                "val_balanced_accuracy": tracker.val_acc[chosen.criterion]}
    return RunRecord(method, cfg.seed, cfg.digest(), "ok", [h.row() for h in history], tracker.summary(),
                     selected, report, list(flags), lineage, {"scores": _score_digest(scores)},
                     params=chosen.params)


def execute(cfg: ExperimentConfig, data: BenchmarkData | None = None, e1: Checkpoint | None = None) -> RunRecord:
    """Run ``cfg.method``. Non-finite losses produce a ``diverged`` record, not an exception."""
    data = generate(cfg.data) if data is None else data
    m = cfg.method
    try:
        if m == "e1":
            return train_e1(cfg, data)
        if m == "e2":
            return train_e2(cfg, data)
        if m == "e3":
            return train_e3(cfg, data)
        if m == "e4":
            return train_e4(cfg, data, e1)
        if m == "e5a":
            return run_e5a(cfg, data, e1)
        if m == "e5b":
            return train_e5b(cfg, data, e1)
        if m == "e6":
            return train_e6(cfg, data, e1)
    except TrainingDiverged as exc:
        log.error("run %s seed %d diverged: %s", m, cfg.seed, exc)
        return RunRecord(m, cfg.seed, cfg.digest(), "diverged", [], {}, {}, None, ["diverged"],
                         diagnostics={"error": str(exc)})
    raise ValueError(f"unknown method {m!r}")


MAX_SWEEP = 8


def validation_auroc(params: ModelParams, data: BenchmarkData, cfg: ExperimentConfig, method: str) -> float:
    """AUROC of the method's score on ID val vs aux-OOD val."""
    kind, C, T = SCORE_FOR[method], data.n_classes, cfg.objectives.temperature
    s_id = score(kind, forward(params, data.id_val.x)[1], C, T)
    s_ood = score(kind, forward(params, data.aux_ood_val.x)[1], C, T)
    return auroc(s_id, s_ood)


def sweep(cfg: ExperimentConfig, grid: list[dict], data: BenchmarkData | None = None,
          e1: Checkpoint | None = None) -> tuple[ExperimentConfig, RunRecord, list[dict]]:
    """Run ``cfg`` with each override dict in ``grid`` (at most 8).

    The winner has the highest validation balanced accuracy of its selected
    checkpoint, then the highest aux-OOD validation AUROC; grid order breaks
    remaining ties. Diverged runs never win.
    """
    if not 1 <= len(grid) <= MAX_SWEEP:
        raise ValueError(f"sweep grid must have 1..{MAX_SWEEP} entries, got {len(grid)}")
    data = generate(cfg.data) if data is None else data
    rows, best = [], None
    for i, overrides in enumerate(grid):
        c = cfg
        for key, value in overrides.items():
            c = c.override(key, value)
        rec = execute(c, data, e1)
        row = {"index": i, "overrides": dict(overrides), "status": rec.status}
        if rec.status == "ok":
            row["val_balanced_accuracy"] = float(rec.selected.get("val_balanced_accuracy",
                                                                 balanced_accuracy(predict(rec.params, data.id_val.x),
                                                                                   data.id_val.y)))
            row["val_auroc"] = validation_auroc(rec.params, data, c, c.method)
            key = (row["val_balanced_accuracy"], row["val_auroc"])
            if best is None or key > best[0]:
                best = (key, c, rec)
        rows.append(row)
    if best is None:
        raise TrainingDiverged("every sweep configuration diverged")
    return best[1], best[2], rows


# ---------------------------------------------------------------------------
# outputs

def write_run(record: RunRecord, cfg: ExperimentConfig, data: BenchmarkData, out_dir) -> Path:
    """Write report.json, run_record.json, trajectory.csv, scores/, roc/, hist/, checkpoint.bin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_record.json").write_text(record.to_json())
    _write_trajectory(out / "trajectory.csv", record.epochs)
    if record.report is None:
        return out
    (out / "report.json").write_text(record.report.to_json())
    params = record.params
    meta = {"seed": cfg.seed, "method": record.method, "config_hash": record.config_hash,
            "val_ce": val_ce(params, data) if params.head_kind == "softmax_c" else None}
    sel = record.selected
    save_checkpoint(out / "checkpoint.bin",
                    Checkpoint(params, sel.get("criterion", "none"), int(sel.get("epoch", -1)),
                               float(sel.get("metric", 0.0) or 0.0), meta))
    _, scores = evaluate_method(params, data, cfg, record.method)
    ids = {"id_test": data.id_test.ids, "aux_ood_val": data.aux_ood_val.ids,
           **{k: v.ids for k, v in data.test_ood_sets.items()}}
    for name, s in scores.items():
        ScoreSet(record.method, name, s).to_csv(out / "scores" / f"{record.method}_{name}.csv", ids[name])
    for name in (*OOD_SETS, "aux_ood_val"):
        roc_curve(scores["id_test"], scores[name]).to_csv(out / "roc" / f"{record.method}_{name}.csv")
    write_histogram_csv(out / "hist" / f"{record.method}_scores.csv",
                        {k: scores[k] for k in ("id_test", *OOD_SETS)}, cfg.scoring.hist_bins)
    return out


def _write_trajectory(path: Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["epoch"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# embedding geometry

def _knn_half(params: ModelParams, data: BenchmarkData, cfg: ExperimentConfig, primary: str) -> dict:
    k = cfg.scoring.knn_k
    bank = EmbeddingBank(forward(params, data.id_train.x)[0])
    emb_id, z_id = forward(params, data.id_test.x)
    emb_near, z_near = forward(params, data.test_ood_sets["near"].x)
    d_id = knn_cosine_score(emb_id, bank, k)
    d_near = knn_cosine_score(emb_near, bank, k)
    p_id = score(primary, z_id, data.n_classes, cfg.objectives.temperature)
    p_near = score(primary, z_near, data.n_classes, cfg.objectives.temperature)
    return {
        "knn_id": d_id,
        "knn_near": d_near,
        "wasserstein": wasserstein1(d_id, d_near),
        "knn_roc": roc_curve(d_id, d_near),
        "primary_roc": roc_curve(p_id, p_near),
        "primary_score": primary,
    }


def embedding_analysis(params_a: ModelParams, params_b: ModelParams, data: BenchmarkData,
                       cfg: ExperimentConfig, labels=("e1", "e5b"), primaries=("msp", "energy")) -> dict:
    """k-NN cosine distance distributions (ID test vs near OOD), their W1, and ROC curves."""
    return {lab: _knn_half(p, data, cfg, prim) for lab, p, prim in zip(labels, (params_a, params_b), primaries)}


def write_analysis(analysis: dict, out_dir, bins: int = 50) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for lab, half in analysis.items():
        half["knn_roc"].to_csv(out / f"{lab}_knn_roc.csv")
        half["primary_roc"].to_csv(out / f"{lab}_{half['primary_score']}_roc.csv")
        write_histogram_csv(out / f"{lab}_knn_hist.csv", {"id_test": half["knn_id"], "near": half["knn_near"]}, bins)
        summary[lab] = {"wasserstein": half["wasserstein"], "knn_auroc": half["knn_roc"].auroc,
                        "primary_auroc": half["primary_roc"].auroc, "primary_score": half["primary_score"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_checkpoint_for(path, what: str = "checkpoint") -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise MissingCheckpoint(f"{what} not found: {p}")
    return load_checkpoint(p)


def load_e1(path) -> Checkpoint:
    return load_checkpoint_for(path, "E1 checkpoint")


__all__ = ["FINETUNE_METHODS", "RunRecord", "execute", "write_run", "embedding_analysis", "write_analysis",
           "train_e1", "train_e2", "train_e3", "train_e4", "run_e5a", "train_e5b", "train_e6",
           "divergence_signature", "load_e1", "load_checkpoint_for", "sweep"]
