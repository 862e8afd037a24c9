"""Synthetic OOD benchmark with the topology of an imbalanced real-world task.

ID data are Gaussian clusters with an imbalanced class profile. OOD families:

* ``near``  - ring just outside one class, stepped sideways into dimensions no
  class mean uses: classifiers extrapolate that class into it with high
  confidence
* ``far_a`` - Gaussian displaced along a direction orthogonal to every class mean
* ``far_b`` - uniform points on a hypercube shell around the origin
* aux (train/val only) - halo of points a few class-std units off the ID
  clusters, never used at test time

Every sample carries a globally unique integer id.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

ID_FRACTIONS = (0.64, 0.16, 0.20)  # train pool / val / test
WILD_FRACTION = 0.15               # of the train pool
AUX_FRACTIONS = (0.80, 0.20)       # aux OOD train / val
DEFAULT_PROPORTIONS = (0.31, 0.29, 0.20, 0.12, 0.08)

_ID_BASE = 0
_AUX_BASE = 1_000_000
_TEST_OOD_BASE = {"far_a": 2_000_000, "far_b": 3_000_000, "near": 4_000_000}


@dataclass(frozen=True)
class GenConfig:
    n_classes: int = 5
    dim: int = 8
    n_id: int = 3000
    class_proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    class_radius: float = 6.0
    class_std: float = 1.0
    near_class: int = 2
    near_radial: float = 0.1
    near_lateral: float = 4.5
    far_shift: float = 2.0
    far_b_half_width: float = 2.0
    aux_min_dist: float = 5.5
    aux_max_dist: float = 8.0
    aux_max_radial: float | None = 1.0
    aux_lateral_frac: float = 0.5
    label_noise: float = 0.05
    n_aux: int = 400
    n_test_ood: int = 500
    wild_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1:
            raise ValueError("n_classes and dim must be positive")
        if len(self.class_proportions) != self.n_classes:
            raise ValueError("one proportion per class required")
        if min(self.class_counts()) < 1:
            raise ValueError(f"degenerate config: class counts {self.class_counts()}")
        if self.n_aux < 1 or self.n_test_ood < 1:
            raise ValueError("degenerate config: OOD counts must be positive")
        if not 0.0 < self.aux_min_dist < self.aux_max_dist:
            raise ValueError("need 0 < aux_min_dist < aux_max_dist")
        if not 0.0 <= self.aux_lateral_frac <= 1.0:
            raise ValueError("aux_lateral_frac must be in [0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must be in [0, 1)")
        if not 0.0 < self.wild_ratio < 1.0:
            raise ValueError("wild_ratio must be in (0, 1)")
        if not 0 <= self.near_class < self.n_classes:
            raise ValueError("near_class out of range")
        if self.dim < self.n_classes + 2:
            raise ValueError(f"dim must be at least n_classes + 2 = {self.n_classes + 2}")

    def class_counts(self) -> list[int]:
        return _apportion(self.n_id, self.class_proportions)


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class UnlabeledSet:
    x: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class BenchmarkData:
    n_classes: int
    id_train: LabeledSet
    id_wild_pool: LabeledSet
    id_val: LabeledSet
    id_test: LabeledSet
    aux_ood_train: UnlabeledSet
    aux_ood_val: UnlabeledSet
    test_ood_sets: dict[str, UnlabeledSet]
    wild_train: UnlabeledSet
    # provenance of wild_train rows (True = came from the ID wild pool); evaluation only
    wild_is_id: np.ndarray = field(repr=False, default=None)
    # generator ground truth, for diagnostics and tests
    class_means: np.ndarray = field(repr=False, default=None)


def _apportion(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total * fractions``."""
    f = np.asarray(fractions, dtype=np.float64)
    f = f / f.sum()
    raw = total * f
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def _layout(rng, cfg: GenConfig) -> np.ndarray:
    """Class means on mutually orthogonal axes, ``class_radius`` from the origin,
    in a random orientation."""
    q, r = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    axes = (q * np.sign(np.diag(r))).T  # Haar-random orthonormal rows
    return cfg.class_radius * axes[: cfg.n_classes]


def _orthogonal_direction(rng, means: np.ndarray) -> np.ndarray:
    """Random unit vector orthogonal to every cluster mean (any direction if none exists)."""
    _, sv, vt = np.linalg.svd(means)
    rank = int(np.sum(sv > 1e-9 * sv.max()))
    basis = vt[rank:]
    if len(basis) == 0:
        basis = np.eye(means.shape[1])
    d = rng.normal(size=len(basis)) @ basis
    return d / np.linalg.norm(d)


def _free_basis(means: np.ndarray) -> np.ndarray:
    """Orthonormal rows spanning the complement of the class-mean span."""
    _, sv, vt = np.linalg.svd(means)
    return vt[int(np.sum(sv > 1e-9 * sv.max())):]


def _near_ring(rng, cfg: GenConfig, means: np.ndarray) -> np.ndarray:
    """Points just outside one class: slightly further out along its axis, then
    a sideways step of ``near_lateral`` class-std units in a random direction of
    the subspace no class mean occupies, then the usual cluster noise."""
    n = cfg.n_test_ood
    free = _free_basis(means)
    w = rng.normal(size=(n, len(free))) @ free
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    center = (1 + cfg.near_radial) * means[cfg.near_class]
    return center + cfg.near_lateral * cfg.class_std * w + cfg.class_std * rng.normal(size=(n, cfg.dim))


def _aux_family(rng, cfg: GenConfig, means: np.ndarray) -> np.ndarray:
    """Halo around the ID clusters: a random class mean plus a uniformly
    oriented offset of length in ``[aux_min_dist, aux_max_dist]`` class-std
    units. A fraction ``aux_lateral_frac`` of offsets point into the subspace no
    class mean occupies. Draws closer than ``aux_min_dist`` to any mean are
    rejected, and so are draws further out along their source axis than
    ``aux_max_radial`` class radii."""
    free = _free_basis(means)
    kept, have = [], 0
    lo, hi = cfg.aux_min_dist * cfg.class_std, cfg.aux_max_dist * cfg.class_std
    while have < cfg.n_aux:
        m = 2 * cfg.n_aux
        w = rng.normal(size=(m, cfg.dim))
        lateral = rng.random(m) < cfg.aux_lateral_frac
        w[lateral] = rng.normal(size=(int(lateral.sum()), len(free))) @ free
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        base = means[rng.integers(len(means), size=m)]
        cand = base + rng.uniform(lo, hi, size=(m, 1)) * w
        d = np.sqrt(((cand[:, None, :] - means[None]) ** 2).sum(-1)).min(axis=1)
        keep = d >= lo
        if cfg.aux_max_radial is not None:
            # drop points beyond their source cluster along its own axis
            radial = np.einsum("ij,ij->i", cand, base) / np.linalg.norm(base, axis=1)
            keep &= radial <= cfg.aux_max_radial * cfg.class_radius
        cand = cand[keep]
        kept.append(cand)
        have += len(cand)
    return np.concatenate(kept)[: cfg.n_aux]


def _hypercube_shell(rng, n, dim, half_width) -> np.ndarray:
    pts = rng.uniform(-half_width, half_width, size=(n, dim))
    face = rng.integers(dim, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), face] = sign * half_width
    return pts


def generate(cfg: GenConfig) -> BenchmarkData:
    """Materialize the full benchmark; deterministic per ``cfg.seed``."""
    ss = np.random.SeedSequence(cfg.seed)
    geo_rng, id_rng, ood_rng, split_seed = (np.random.default_rng(s) for s in ss.spawn(4))
    means = _layout(geo_rng, cfg)
    far_dir = _orthogonal_direction(geo_rng, means)

    counts = cfg.class_counts()
    xs = []
    for c, n in enumerate(counts):
        xs.append(means[c] + cfg.class_std * id_rng.normal(size=(n, cfg.dim)))
    x = np.concatenate(xs)
    y = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    # annotation noise: relabel a fraction uniformly among the other classes
    flip = id_rng.random(len(y)) < cfg.label_noise
    y[flip] = (y[flip] + id_rng.integers(1, cfg.n_classes, size=flip.sum())) % cfg.n_classes
    ids = _ID_BASE + np.arange(len(y))

    seeds = split_seed.integers(2**32, size=3)
    pool, val, test = stratified_split(ids, y, ID_FRACTIONS, int(seeds[0]))
    train_idx, wild_idx = stratified_split(ids[pool], y[pool], (1 - WILD_FRACTION, WILD_FRACTION), int(seeds[1]))
    train_idx, wild_idx = pool[train_idx], pool[wild_idx]

    def labeled(ix):
        return LabeledSet(x[ix], y[ix], ids[ix])

    near_x = _near_ring(ood_rng, cfg, means)
    test_sets = {
        "far_a": cfg.far_shift * far_dir + cfg.class_std * ood_rng.normal(size=(cfg.n_test_ood, cfg.dim)),
        "far_b": _hypercube_shell(ood_rng, cfg.n_test_ood, cfg.dim, cfg.far_b_half_width),
        "near": near_x,
    }
    test_ood = {k: UnlabeledSet(v, _TEST_OOD_BASE[k] + np.arange(len(v))) for k, v in test_sets.items()}

    aux_x = _aux_family(ood_rng, cfg, means)
    aux_ids = _AUX_BASE + np.arange(cfg.n_aux)
    perm = np.random.default_rng(int(seeds[2])).permutation(cfg.n_aux)
    n_aux_train = _apportion(cfg.n_aux, AUX_FRACTIONS)[0]
    aux_train = UnlabeledSet(aux_x[perm[:n_aux_train]], aux_ids[perm[:n_aux_train]])
    aux_val = UnlabeledSet(aux_x[perm[n_aux_train:]], aux_ids[perm[n_aux_train:]])

    wild_pool = labeled(wild_idx)
    wild, wild_is_id = build_wild(wild_pool, aux_train, cfg.wild_ratio, int(seeds[2]))
    return BenchmarkData(
        n_classes=cfg.n_classes,
        id_train=labeled(train_idx),
        id_wild_pool=wild_pool,
        id_val=labeled(val),
        id_test=labeled(test),
        aux_ood_train=aux_train,
        aux_ood_val=aux_val,
        test_ood_sets=test_ood,
        wild_train=wild,
        wild_is_id=wild_is_id,
        class_means=means,
    )


def build_wild(wild_pool: LabeledSet, aux_train: UnlabeledSet, ratio: float, seed: int):
    """Unlabeled union of the ID wild pool and aux OOD with ID fraction ``ratio``.

    Uses every pool sample and ``round(n_pool * (1 - ratio) / ratio)`` aux samples.
    """
    n_id = len(wild_pool)
    n_ood = int(round(n_id * (1 - ratio) / ratio))
    if n_ood > len(aux_train) or n_ood < 1:
        raise ValueError(f"wild ratio {ratio} needs {n_ood} aux samples, have {len(aux_train)}")
    x = np.concatenate([wild_pool.x, aux_train.x[:n_ood]])
    ids = np.concatenate([wild_pool.ids, aux_train.ids[:n_ood]])
    is_id = np.concatenate([np.ones(n_id, bool), np.zeros(n_ood, bool)])
    perm = np.random.default_rng(seed).permutation(len(ids))
    return UnlabeledSet(x[perm], ids[perm]), is_id[perm]


def stratified_split(ids, labels, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Split positions into groups with per-class proportions preserved.

    Membership depends only on sample ids, not on input order. Returns index
    arrays into the given ``ids``/``labels``, each sorted by id.
    """
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    groups: list[list[np.ndarray]] = [[] for _ in fractions]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[np.argsort(ids[members], kind="stable")]
        members = members[rng.permutation(len(members))]
        counts = _apportion(len(members), fractions)
        for k, (f, n) in enumerate(zip(fractions, counts)):
            if f > 0 and n == 0:
                raise ValueError(f"class {c} ({len(members)} samples) leaves split {k} empty")
        start = 0
        for k, n in enumerate(counts):
            groups[k].append(members[start:start + n])
            start += n
    out = []
    for parts in groups:
        ix = np.concatenate(parts) if parts else np.array([], dtype=int)
        out.append(ix[np.argsort(ids[ix], kind="stable")])
    return out


def inverse_frequency_sampler(labels, seed: int, chunk: int = 4096) -> Iterator[int]:
    """Endless index stream with each class drawn equally often in expectation."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no labels to sample from")
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if np.any(counts == 0):
        raise ValueError("empty class")
    p = 1.0 / counts[inverse]
    p /= p.sum()
    rng = np.random.default_rng(seed)
    while True:
        yield from rng.choice(labels.size, size=chunk, p=p).tolist()


def cycle_shorter(index_a, index_b, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Pair batches of ``index_a`` with batches of ``index_b``, cycling ``b``.

    Yields ``ceil(len(a) / batch_size)`` pairs; the OOD stream restarts from its
    first element whenever exhausted.
    """
    a = np.asarray(index_a)
    b = np.asarray(index_b)
    if a.size == 0 or b.size == 0:
        raise ValueError("cycle_shorter: both streams must be nonempty")
    pos = 0
    for start in range(0, a.size, batch_size):
        ia = a[start:start + batch_size]
        take = (pos + np.arange(ia.size)) % b.size
        pos = (pos + ia.size) % b.size
        yield ia, b[take]


class CsvFormatError(ValueError):
    pass


def export_csv(path, data: LabeledSet | UnlabeledSet) -> None:
    labeled = isinstance(data, LabeledSet)
    dim = data.x.shape[1]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + (["label"] if labeled else []) + [f"f{i}" for i in range(dim)])
        for r in range(len(data)):
            row = [int(data.ids[r])]
            if labeled:
                row.append(int(data.y[r]))
            w.writerow(row + [repr(float(v)) for v in data.x[r]])


def ingest_csv(path, labeled: bool, dim: int | None = None) -> LabeledSet | UnlabeledSet:
    """Read the ``sample_id[,label],f0..f{D-1}`` schema back into arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    header = rows[0]
    feat_cols = [h for h in header if h.startswith("f") and h[1:].isdigit()]
    expected = ["sample_id"] + (["label"] if labeled else []) + [f"f{i}" for i in range(len(feat_cols))]
    if header != expected or not feat_cols:
        raise CsvFormatError(f"{path}: header {header} does not match schema {expected}")
    if dim is not None and len(feat_cols) != dim:
        raise CsvFormatError(f"{path}: expected {dim} features, found {len(feat_cols)}")
    ids, ys, xs = [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CsvFormatError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        vals = []
        for col, cell in zip(header, row):
            try:
                vals.append(int(cell) if col in ("sample_id", "label") else float(cell))
            except ValueError:
                raise CsvFormatError(f"{path}: row {r}, column {col!r}: bad value {cell!r}") from None
        ids.append(vals[0])
        if labeled:
            ys.append(vals[1])
        xs.append(vals[2 if labeled else 1:])
    x = np.array(xs, dtype=np.float64).reshape(len(xs), len(feat_cols))
    if labeled:
        return LabeledSet(x, np.array(ys, dtype=int), np.array(ids, dtype=int))
    return UnlabeledSet(x, np.array(ids, dtype=int))


def export_benchmark(data: BenchmarkData, out_dir) -> list[Path]:
    out = Path(out_dir)
    written = []
    for name in ("id_train", "id_wild_pool", "id_val", "id_test", "aux_ood_train", "aux_ood_val", "wild_train"):
        p = out / f"{name}.csv"
        export_csv(p, getattr(data, name))
        written.append(p)
    for name, s in data.test_ood_sets.items():
        p = out / f"test_ood_{name}.csv"
        export_csv(p, s)
        written.append(p)
    return written
