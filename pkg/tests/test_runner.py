import dataclasses
import json

import numpy as np
import pytest

from oodlab import runner
from oodlab.config import ExperimentConfig
from oodlab.data import UnlabeledSet, generate
from oodlab.metrics import OOD_SETS
from oodlab.model import load_checkpoint


def small_cfg(method="e1", seed=5, **over) -> ExperimentConfig:
    cfg = ExperimentConfig().with_run(method=method, seed=seed)
    base = {"data.n_id": 800, "data.n_aux": 200, "data.n_test_ood": 150, "train.epochs": 4,
            "train.finetune_epochs": 4, "train.warmup_steps_ref": 400}
    for k, v in {**base, **over}.items():
        cfg = cfg.override(k, v)
    return cfg


@pytest.fixture(scope="module")
def data():
    return generate(small_cfg().data)


@pytest.fixture(scope="module")
def e1(data):
    return runner.execute(small_cfg("e1"), data)


def as_ckpt(record):
    from oodlab.model import Checkpoint
    return Checkpoint(record.params, record.selected["criterion"], record.selected["epoch"],
                      record.selected["metric"], {"seed": record.seed})


def poisoned(data):
    """Copy with every OOD-bearing training/validation split replaced by NaNs."""
    def nan_like(s):
        return UnlabeledSet(np.full_like(s.x, np.nan), s.ids)
    return dataclasses.replace(data, aux_ood_train=nan_like(data.aux_ood_train),
                               aux_ood_val=nan_like(data.aux_ood_val), wild_train=nan_like(data.wild_train))


def test_e1_deterministic(data, e1):
    again = runner.execute(small_cfg("e1"), data)
    assert again.params.digest() == e1.params.digest()
    assert again.report.to_json() == e1.report.to_json()
    assert e1.status == "ok" and len(e1.epochs) == 4


def test_e1_learns(e1):
    assert e1.report.balanced_accuracy > 0.8


@pytest.mark.parametrize("method", ["e1", "e2"])
def test_id_only_methods_ignore_ood_training_data(data, method):
    clean = runner.train_e1 if method == "e1" else runner.train_e2
    cfg = small_cfg(method)
    a = clean(cfg, data)
    with np.errstate(invalid="ignore"):
        b = clean(cfg, poisoned(data))
    assert a.params.digest() == b.params.digest()


def test_e3_uses_extra_output_for_aux(data):
    cfg = small_cfg("e3", **{"train.epochs": 12})
    rec = runner.execute(cfg, data)
    assert rec.params.head_kind == "sigmoid_c_plus_1"
    assert rec.report.extra_ood["aux_ood_val"]["auroc"] > 0.9
    assert rec.report.ood["far_a"]["auroc"] > 0.95
    wild_free = dataclasses.replace(data, wild_train=UnlabeledSet(np.full_like(data.wild_train.x, np.nan),
                                                                  data.wild_train.ids))
    assert runner.execute(cfg, wild_free).params.digest() == rec.params.digest()


@pytest.mark.parametrize("method", ["e4", "e5a", "e5b", "e6"])
def test_finetunes_require_e1(data, method):
    with pytest.raises(runner.MissingCheckpoint):
        runner.execute(small_cfg(method), data, None)


def test_seed_mismatch_rejected(data, e1):
    ck = as_ckpt(e1)
    ck.meta["seed"] = 99
    with pytest.raises(runner.MissingCheckpoint, match="seed"):
        runner.execute(small_cfg("e4"), data, ck)


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(runner.MissingCheckpoint):
        runner.load_e1(tmp_path / "absent.bin")


@pytest.mark.parametrize("method", ["e4", "e5b", "e6"])
def test_finetune_lineage(data, e1, method):
    rec = runner.execute(small_cfg(method), data, as_ckpt(e1))
    assert rec.lineage["init_digest"] == e1.params.digest() == rec.lineage["e1_digest"]
    assert rec.params.digest() != e1.params.digest()
    # tracking starts after the classification-only epochs
    assert rec.selected["epoch"] >= small_cfg().train.classification_warmup_epochs


def test_e5a_leaves_params_untouched(data, e1):
    before = e1.params.digest()
    rec = runner.execute(small_cfg("e5a"), data, as_ckpt(e1))
    assert rec.params.digest() == before == e1.params.digest()
    assert rec.report.balanced_accuracy == e1.report.balanced_accuracy


def test_oe_weight_zero_keeps_accuracy(data, e1):
    rec = runner.execute(small_cfg("e4", **{"objectives.lambda_oe": 0.0}), data, as_ckpt(e1))
    assert abs(rec.report.balanced_accuracy - e1.report.balanced_accuracy) < 0.05
    assert "oe_collapse" not in rec.flags


def test_oe_collapse_flagged(data, e1):
    cfg = small_cfg("e4", **{"objectives.lambda_oe": 200.0, "train.finetune_lr_factor": 30.0})
    rec = runner.execute(cfg, data, as_ckpt(e1))
    assert "oe_collapse" in rec.flags


def test_e5b_margins_and_diagnostics(data, e1):
    rec = runner.execute(small_cfg("e5b"), data, as_ckpt(e1))
    m = rec.report.margins
    assert m["m_in"] < m["m_out"]
    assert set(rec.diagnostics) >= {"energy_before", "energy_after"}
    fixed = runner.e5b_margins(small_cfg("e5b", **{"objectives.m_in": -9.0, "objectives.m_out": -2.0}),
                               data, e1.params)
    assert (fixed.m_in, fixed.m_out) == (-9.0, -2.0)


def test_e6_stable_trajectory(data, e1):
    cfg = small_cfg("e6")
    rec = runner.execute(cfg, data, as_ckpt(e1))
    traj = rec.report.alm_trajectory
    assert len(traj) == cfg.train.finetune_epochs
    betas = [max(t["beta1"], t["beta2"]) for t in traj]
    assert max(betas) <= cfg.alm.beta_max
    assert all(b2 >= b1 for b1, b2 in zip(betas, betas[1:]))
    assert all(t["lambda1"] >= 0 and t["lambda2"] >= 0 for t in traj)
    assert rec.diagnostics["alm"]["max_beta"] <= cfg.alm.beta_max


def test_e6_uncapped_instability(data, e1):
    cfg = small_cfg("e6", **{"alm.eta_lambda": 0.1, "alm.alpha": 0.05, "alm.beta_max": None,
                             "train.finetune_epochs": 9})
    rec = runner.execute(cfg, data, as_ckpt(e1))
    assert rec.status == "diverged" or runner.divergence_signature(rec.diagnostics["alm"])


def test_nonfinite_training_gives_diverged_record(data):
    with np.errstate(all="ignore"):
        rec = runner.execute(small_cfg("e1", **{"train.lr": 1e300, "train.warmup_steps_ref": 1}), data)
    assert rec.status == "diverged" and rec.report is None and "error" in rec.diagnostics


def test_write_run_and_reload(tmp_path, data, e1):
    cfg = small_cfg("e1")
    out = runner.write_run(e1, cfg, data, tmp_path / "e1")
    for rel in ("report.json", "run_record.json", "trajectory.csv", "checkpoint.bin",
                "scores/e1_id_test.csv", "roc/e1_near.csv", "hist/e1_scores.csv"):
        assert (out / rel).is_file(), rel
    report = json.loads((out / "report.json").read_text())
    ck = load_checkpoint(out / "checkpoint.bin")
    assert ck.meta["seed"] == cfg.seed
    again, _ = runner.evaluate_method(ck.params, data, cfg, "e1")
    assert again.balanced_accuracy == report["balanced_accuracy"]
    for name in OOD_SETS:
        assert again.ood[name]["auroc"] == report["ood"][name]["auroc"]
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,") and len(rows) == 1 + len(e1.epochs)


def test_embedding_analysis_shapes(data, e1):
    an = runner.embedding_analysis(e1.params, e1.params, data, small_cfg(), labels=("a", "b"))
    assert an["a"]["wasserstein"] == pytest.approx(an["b"]["wasserstein"])
    assert len(an["a"]["knn_id"]) == len(data.id_test)
    assert np.all(an["a"]["knn_id"] >= 0)


def test_sweep_picks_by_validation_then_grid_order(data, e1):
    grid = [{"objectives.lambda_oe": 0.0}, {"objectives.lambda_oe": 0.5}, {"objectives.lambda_oe": 0.0}]
    cfg, rec, rows = runner.sweep(small_cfg("e4"), grid, data, as_ckpt(e1))
    assert len(rows) == 3 and all(r["status"] == "ok" for r in rows)
    keys = [(r["val_balanced_accuracy"], r["val_auroc"]) for r in rows]
    winner = max(range(3), key=lambda i: (keys[i], -i))
    assert cfg.objectives.lambda_oe == grid[winner]["objectives.lambda_oe"]
    # identical configs give identical rows
    assert keys[0] == keys[2]
    assert winner != 2


def test_sweep_grid_size_bounds(data):
    with pytest.raises(ValueError):
        runner.sweep(small_cfg("e1"), [], data)
    with pytest.raises(ValueError):
        runner.sweep(small_cfg("e1"), [{}] * 9, data)
