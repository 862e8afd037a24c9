"""Evaluation metrics: balanced accuracy, ROC/AUROC, FPR95, 1-D Wasserstein."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

OOD_SETS = ("far_a", "far_b", "near")
TABLE_COLUMNS = tuple(
    ["method", "balanced_accuracy"]
    + [f"auroc_{s}" for s in OOD_SETS]
    + [f"fpr95_{s}" for s in OOD_SETS]
)


def _nonempty(name, *arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.size == 0:
            raise ValueError(f"{name}: empty score array")
        out.append(a)
    return out


def balanced_accuracy(predictions, labels) -> float:
    """Unweighted mean of per-class recall over classes present in ``labels``."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {y.shape} labels")
    if y.size == 0:
        raise ValueError("balanced_accuracy: no labels")
    recalls = [np.mean(pred[y == c] == c) for c in np.unique(y)]
    return float(np.mean(recalls))


def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score), ties counted as 1/2."""
    s_id, s_ood = _nonempty("auroc", id_scores, ood_scores)
    ranks = rankdata(np.concatenate([s_ood, s_id]))  # average ranks handle ties
    n_o, n_i = s_ood.size, s_id.size
    u = ranks[:n_o].sum() - n_o * (n_o + 1) / 2.0
    return float(u / (n_o * n_i))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            for a, b in zip(self.fpr, self.tpr):
                w.writerow([repr(float(a)), repr(float(b))])


def roc_curve(id_scores, ood_scores) -> RocCurve:
    """ROC with OOD as the positive class, one point per distinct threshold."""
    s_id, s_ood = _nonempty("roc_curve", id_scores, ood_scores)
    thresholds = np.unique(np.concatenate([s_id, s_ood]))[::-1]
    id_sorted = np.sort(s_id)
    ood_sorted = np.sort(s_ood)
    # count of scores >= t
    fp = s_id.size - np.searchsorted(id_sorted, thresholds, side="left")
    tp = s_ood.size - np.searchsorted(ood_sorted, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / s_id.size])
    tpr = np.concatenate([[0.0], tp / s_ood.size])
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, area)


def fpr_at_95_tpr(id_scores, ood_scores) -> float:
    """Fraction of ID samples scored >= t, where t keeps ceil(0.95 n_ood) OOD samples above it."""
    s_id, s_ood = _nonempty("fpr_at_95_tpr", id_scores, ood_scores)
    need = math.ceil(0.95 * s_ood.size)
    t = np.sort(s_ood)[::-1][need - 1]
    return float(np.mean(s_id >= t))


def wasserstein1(samples_a, samples_b) -> float:
    """Exact 1-D W1 between empirical distributions.

    Integrates ``|Qa(u) - Qb(u)|`` over the merged grid of quantile breakpoints
    ``{i/n_a} U {j/n_b}``, on which both step quantile functions are constant.
    """
    a, b = _nonempty("wasserstein1", samples_a, samples_b)
    a, b = np.sort(a), np.sort(b)
    grid = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    widths = np.diff(grid)
    mids = 0.5 * (grid[1:] + grid[:-1])
    qa = a[np.minimum((mids * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mids * b.size).astype(int), b.size - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def histogram_rows(named_samples: dict[str, np.ndarray], bins: int = 50) -> list[dict]:
    """Shared-edge histograms over the pooled min/max of all samples."""
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in named_samples.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for name, v in named_samples.items():
        counts, _ = np.histogram(v, bins=edges)
        for i, c in enumerate(counts):
            rows.append({"series": name, "bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "count": int(c)})
    return rows


def write_histogram_csv(path, named_samples: dict[str, np.ndarray], bins: int = 50) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["series", "bin_lo", "bin_hi", "count"], lineterminator="\n")
        w.writeheader()
        for row in histogram_rows(named_samples, bins):
            w.writerow({**row, "bin_lo": repr(row["bin_lo"]), "bin_hi": repr(row["bin_hi"])})


@dataclass
class MethodReport:
    method: str
    balanced_accuracy: float
    ood: dict[str, dict[str, float]]
    seed: int
    config_hash: str
    margins: dict[str, float] | None = None
    alm_trajectory: list[dict] | None = None
    extra_ood: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def table_row(self) -> dict:
        row = {"method": self.method, "balanced_accuracy": self.balanced_accuracy}
        for s in OOD_SETS:
            row[f"auroc_{s}"] = self.ood[s]["auroc"]
        for s in OOD_SETS:
            row[f"fpr95_{s}"] = self.ood[s]["fpr95"]
        return row

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MethodReport":
        return cls(**d)


def write_results_table(reports: list[MethodReport], out_dir) -> list[dict]:
    """Aggregate reports into one row per method (seed-averaged) in the canonical column order."""
    by_method: dict[str, list[dict]] = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r.table_row())
    rows = []
    for method in sorted(by_method):
        group = by_method[method]
        row = {"method": method}
        for col in TABLE_COLUMNS[1:]:
            row[col] = float(np.mean([g[col] for g in group]))
        rows.append(row)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results_table.json").write_text(json.dumps(rows, indent=2) + "\n")
    with open(out / "results_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
