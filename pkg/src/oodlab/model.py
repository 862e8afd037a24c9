"""MLP feature extractor with interchangeable classification heads.

Architecture: ``D -> H ... H`` (ReLU) ``-> E`` (linear embedding) ``-> head``.
The embedding is the representation the head reads directly, and is what the
k-NN analysis consumes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Graph, Node

HEAD_KINDS = ("softmax_c", "sigmoid_c", "sigmoid_c_plus_1")

CHECKPOINT_MAGIC = b"OODLAB-CKPT 1\n"
CRITERIA = ("best_train_loss", "best_val_loss", "best_val_balanced_accuracy")


@dataclass(frozen=True)
class ModelParams:
    """Weights ``(fan_in, fan_out)`` and biases for every layer, head last."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    head_kind: str
    n_classes: int

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("need at least one feature layer plus a head")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} does not chain")
        if self.weights[-1].shape[1] != head_width(self.head_kind, self.n_classes):
            raise ValueError("head width does not match head kind")

    @property
    def dims(self) -> tuple[int, ...]:
        """Feature-stack widths ``(D, H..., E)``."""
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights[:-1]])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat list in fixed order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        return ModelParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.head_kind, self.n_classes)

    def copy(self) -> "ModelParams":
        return self.with_arrays(self.arrays())

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.head_kind}:{self.n_classes}".encode())
        for a in self.arrays():
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def head_width(head_kind: str, n_classes: int) -> int:
    return n_classes + 1 if head_kind == "sigmoid_c_plus_1" else n_classes


def init_params(dims: Sequence[int], n_classes: int, head_kind: str, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases. ``dims`` is ``(D, H..., E)``."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"feature stack needs at least input and embedding widths, got {dims}")
    if min(dims) < 1 or n_classes < 1:
        raise ValueError(f"all widths must be >= 1, got dims={dims}, n_classes={n_classes}")
    if head_kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {head_kind!r}")
    rng = np.random.default_rng(seed)
    widths = dims + [head_width(head_kind, n_classes)]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(tuple(weights), tuple(biases), head_kind, n_classes)


def _check_batch(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input dim {params.input_dim}")
    return x


def forward(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(embeddings, logits)`` for a batch; pure."""
    h = _check_batch(params, x)
    n_feat = len(params.weights) - 1
    for i in range(n_feat):
        h = h @ params.weights[i] + params.biases[i]
        if i < n_feat - 1:
            h = np.maximum(h, 0.0)
    logits = h @ params.weights[-1] + params.biases[-1]
    return h, logits


def forward_graph(g: Graph, nodes: Sequence[Node], params: ModelParams, x) -> tuple[Node, Node]:
    """Same as :func:`forward` but recorded on ``g`` using param ``nodes``."""
    x = _check_batch(params, x)
    h = g.const(x)
    n_feat = len(params.weights) - 1
    for i in range(n_feat):
        h = g.add_bias(g.matmul(h, nodes[2 * i]), nodes[2 * i + 1])
        if i < n_feat - 1:
            h = g.relu(h)
    logits = g.add_bias(g.matmul(h, nodes[-2]), nodes[-1])
    return h, logits


@dataclass
class Checkpoint:
    params: ModelParams
    criterion: str
    epoch: int
    metric: float
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the magic line, one JSON header line, then raw little-endian f8 arrays."""
    p = ckpt.params
    header = {
        "dims": list(p.dims),
        "n_classes": p.n_classes,
        "head_kind": p.head_kind,
        "shapes": [list(a.shape) for a in p.arrays()],
        "criterion": ckpt.criterion,
        "epoch": ckpt.epoch,
        "metric": ckpt.metric,
        "meta": ckpt.meta,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in p.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an oodlab checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    buf = rest[nl + 1:]
    arrays, off = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) * 8
        if off + n > len(buf):
            raise ValueError(f"{path}: payload length {len(buf)} is shorter than the header requires")
        arrays.append(np.frombuffer(buf[off:off + n], dtype="<f8").reshape(shape).astype(np.float64))
        off += n
    if off != len(buf):
        raise ValueError(f"{path}: payload length {len(buf)} does not match header ({off})")
    params = ModelParams(tuple(arrays[0::2]), tuple(arrays[1::2]), header["head_kind"], header["n_classes"])
    return Checkpoint(params, header["criterion"], header["epoch"], header["metric"], header["meta"])
