"""Desk-scale unified training on curated pairs.

Two small towers (affine, optionally one tanh hidden layer) map raw image and
text features into a shared space. The objective is the multimodal margin
identity loss plus a weighted alignment loss. Class weight rows are projected
back to the unit sphere after every optimizer step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import PairedDataset, l2_normalize_rows
from .errors import DegenerateRank, InsufficientSamples, NonFiniteLoss, SingleIdentityDataset
from .losses import AlignmentLoss, MarginConfig, SymmetricContrastive, init_class_weights, multimodal_ma_id


@dataclass
class Tower:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> "Tower":
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            ws.append(rng.standard_normal((a, b)) / math.sqrt(a))
            bs.append(np.zeros(b))
        return cls(ws, bs)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=np.float64))[0]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        gws, gbs = [], []
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            gws.append(acts[i].T @ g)
            gbs.append(g.sum(axis=0))
            if i > 0:
                g = (g @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return gws[::-1], gbs[::-1]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "Tower":
        return Tower([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class EncoderParams:
    image: Tower
    text: Tower

    @property
    def in_dim(self) -> int:
        return self.image.in_dim

    @property
    def out_dim(self) -> int:
        return self.image.out_dim

    def embed_images(self, x) -> np.ndarray:
        return self.image(x)

    def embed_texts(self, x) -> np.ndarray:
        return self.text(x)

    @classmethod
    def identity(cls, dim: int) -> "EncoderParams":
        eye = lambda: Tower([np.eye(dim)], [np.zeros(dim)])
        return cls(eye(), eye())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.image.copy(), self.text.copy())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    margin: float = 0.35
    scale: float = 30.0
    temperature: float = 0.07
    id_weight: float = 1.0
    align_weight: float = 1.0
    optimizer: str = "sgd"
    embed_dim: int = 16
    hidden_dim: int = 0
    deterministic: bool = True
    dump_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def margin_config(self) -> MarginConfig:
        return MarginConfig(self.margin, self.scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SeparationMetrics:
    mean_intra_cos: float
    mean_inter_cos: float

    @property
    def separation(self) -> float:
        return self.mean_intra_cos - self.mean_inter_cos


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_ma_id: float
    loss_align: float
    separation: SeparationMetrics


@dataclass
class TrainResult:
    encoder: EncoderParams
    class_weights: np.ndarray
    history: list[EpochRecord]
    label_map: dict[int, int] = field(default_factory=dict)
    degenerate_angles: int = 0

    def __iter__(self):
        return iter((self.encoder, self.class_weights, self.history))


def separation_metrics(embeddings, labels=None) -> SeparationMetrics:
    """Mean same-identity vs cross-identity cosine over all pairs.

    ``embeddings`` is either an (n, d) array with ``labels`` given, or a list
    of ``(vector, person_id)`` tuples. Both means are exact: the cosine sum
    over all pairs inside a group is ``(|sum of unit vectors|^2 - n) / 2``.
    """
    if labels is None:
        vecs, labels = zip(*embeddings)
        x = np.asarray(vecs, dtype=np.float64)
    else:
        x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    if classes.size < 2 or counts.max() < 2:
        raise InsufficientSamples("need two identities and at least one identity with two samples")
    x = l2_normalize_rows(x)
    n = x.shape[0]
    group_sums = np.zeros((classes.size, x.shape[1]))
    np.add.at(group_sums, inverse, x)
    intra_sum = float((np.einsum("ij,ij->i", group_sums, group_sums) - counts).sum()) / 2
    intra_pairs = float((counts * (counts - 1)).sum()) / 2
    total = x.sum(axis=0)
    all_sum = (float(total @ total) - n) / 2
    inter_pairs = n * (n - 1) / 2 - intra_pairs
    intra = min(1.0, max(-1.0, intra_sum / intra_pairs))
    inter = min(1.0, max(-1.0, (all_sum - intra_sum) / inter_pairs))
    return SeparationMetrics(intra, inter)


def project_2d(embeddings) -> np.ndarray:
    """Coordinates on the top two principal axes of the centered data."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError("need at least 3 points of dimension >= 2")
    xc = x - x.mean(axis=0)
    if np.abs(xc).max() < 1e-12:
        raise DegenerateRank("all points are identical")
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    # fix the sign so the largest-magnitude loading of each axis is positive
    flip = np.sign(axes[np.arange(2), np.abs(axes).argmax(axis=1)])
    axes = axes * flip[:, None]
    return xc @ axes.T


def write_projection_csv(path, points: np.ndarray, person_ids, source_ids) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "person_id", "source_id"])
        for (px, py), pid, sid in zip(points, person_ids, source_ids):
            w.writerow([repr(float(px)), repr(float(py)), int(pid), int(sid)])
    return path


def _batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(labels.shape[0])
    out: list[np.ndarray] = []
    carry = None
    for s in range(0, order.shape[0], batch_size):
        c = order[s : s + batch_size] if carry is None else np.concatenate([carry, order[s : s + batch_size]])
        carry = None
        if np.unique(labels[c]).size < 2:
            # fold single-identity chunks into a neighbour so the contrast stays informative
            if out:
                out[-1] = np.concatenate([out[-1], c])
            else:
                carry = c
            continue
        out.append(c)
    if carry is not None:
        out.append(carry)
    return out


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _embed_pairs(encoder: EncoderParams, dataset: PairedDataset):
    return encoder.embed_images(dataset.image_matrix()), encoder.embed_texts(dataset.text_matrix())


def _epoch_record(epoch, encoder, weights, dataset, labels, cfg, alignment) -> EpochRecord:
    fv, ft = _embed_pairs(encoder, dataset)
    mm = multimodal_ma_id(fv, ft, labels, weights, cfg.margin_config, need_grad=False)
    la = 0.0
    if alignment is not None:
        # fixed in-order chunks so the value is comparable across epochs
        chunks = [np.arange(a, min(a + cfg.batch_size, len(labels))) for a in range(0, len(labels), cfg.batch_size)]
        chunks = [c for c in chunks if np.unique(labels[c]).size > 1]
        la = float(np.mean([alignment(fv[c], ft[c], labels[c])[0] for c in chunks])) if chunks else 0.0
    # separation over distinct images plus every caption
    gal = encoder.embed_images(dataset.gallery_matrix())
    gal_labels = np.array([rec.person_id for rec in dataset.gallery])
    sep = separation_metrics(
        np.vstack([gal, ft]),
        np.concatenate([gal_labels, dataset.person_ids]),
    )
    return EpochRecord(epoch, mm.loss, float(la), sep)


def train(
    dataset: PairedDataset,
    cfg: TrainConfig,
    alignment: AlignmentLoss | None = None,
) -> TrainResult:
    """Minibatch training; history[0] describes the seeded initialization."""
    if len(dataset) == 0:
        raise SingleIdentityDataset("dataset is empty")
    pids = dataset.person_ids
    classes = np.unique(pids)
    if classes.size < 2:
        raise SingleIdentityDataset("training needs at least two identities")
    label_map = {int(p): i for i, p in enumerate(classes)}
    labels = np.searchsorted(classes, pids)
    if alignment is None and cfg.align_weight > 0:
        alignment = SymmetricContrastive(cfg.temperature)

    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))
    d_in = dataset.pairs[0].image.dim
    dims = [d_in] + ([cfg.hidden_dim] if cfg.hidden_dim else []) + [cfg.embed_dim]
    encoder = EncoderParams(Tower.init(dims, init_rng), Tower.init(dims, init_rng))
    weights = init_class_weights(classes.size, cfg.embed_dim, init_rng)

    params = encoder.image.params() + encoder.text.params() + [weights]
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else None
    align = alignment if cfg.align_weight > 0 else None
    history = [_epoch_record(0, encoder, weights, dataset, labels, cfg, align)]

    xv_all = dataset.image_matrix()
    xt_all = dataset.text_matrix()
    degenerate = 0
    mcfg = cfg.margin_config
    for epoch in range(1, cfg.epochs + 1):
        for step, idx in enumerate(_batches(labels, cfg.batch_size, batch_rng)):
            y = labels[idx]
            fv, acts_v = encoder.image.forward(xv_all[idx])
            ft, acts_t = encoder.text.forward(xt_all[idx])
            mm = multimodal_ma_id(fv, ft, y, weights, mcfg)
            degenerate += mm.degenerate
            gv = cfg.id_weight * mm.grad_image_features
            gt = cfg.id_weight * mm.grad_text_features
            gw = cfg.id_weight * mm.grad_weights
            la = 0.0
            if align is not None and np.unique(y).size > 1:
                la, agv, agt = align(fv, ft, y)
                gv = gv + cfg.align_weight * agv
                gt = gt + cfg.align_weight * agt
            total = cfg.id_weight * mm.loss + cfg.align_weight * la
            if not math.isfinite(total):
                diag = {
                    "epoch": epoch,
                    "step": step,
                    "loss_ma_id": mm.loss,
                    "loss_align": la,
                    "grad_feature_norm": float(np.linalg.norm(gv) + np.linalg.norm(gt)),
                    "grad_weight_norm": float(np.linalg.norm(gw)),
                }
                if cfg.dump_path:
                    Path(cfg.dump_path).write_text(json.dumps(diag, indent=2))
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}", diag)
            gws_v, gbs_v = encoder.image.backward(acts_v, gv)
            gws_t, gbs_t = encoder.text.backward(acts_t, gt)
            grads = gws_v + gbs_v + gws_t + gbs_t + [gw]
            if opt is None:
                for p, g in zip(params, grads):
                    p -= cfg.learning_rate * g
            else:
                opt.step(params, grads)
            weights /= np.linalg.norm(weights, axis=1, keepdims=True)
        history.append(_epoch_record(epoch, encoder, weights, dataset, labels, cfg, align))
    return TrainResult(encoder, weights, history, label_map, degenerate)


def history_rows(history: Sequence[EpochRecord]) -> list[dict]:
    return [
        {
            "epoch": h.epoch,
            "loss_ma_id": h.loss_ma_id,
            "loss_align": h.loss_align,
            "intra": h.separation.mean_intra_cos,
            "inter": h.separation.mean_inter_cos,
            "separation": h.separation.separation,
        }
        for h in history
    ]


def write_history_csv(path, history: Sequence[EpochRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = history_rows(history)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


CHECKPOINT_VERSION = 1


def save_checkpoint(path, result: TrainResult, cfg: TrainConfig) -> Path:
    """One JSON header line, then the float32 little-endian parameter blob."""
    enc = result.encoder
    arrays = enc.image.params() + enc.text.params() + [result.class_weights]
    header = {
        "version": CHECKPOINT_VERSION,
        "in_dim": enc.in_dim,
        "embed_dim": enc.out_dim,
        "hidden_dim": cfg.hidden_dim,
        "layers": len(enc.image.weights),
        "num_classes": int(result.class_weights.shape[0]),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "shapes": [list(a.shape) for a in arrays],
        "label_map": {str(k): v for k, v in result.label_map.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    path.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)
    return path


def load_checkpoint(path) -> tuple[EncoderParams, np.ndarray, dict]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    flat = np.frombuffer(data[nl + 1 :], dtype="<f4").astype(np.float64)
    arrays, off = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape))
        arrays.append(flat[off : off + size].reshape(shape).copy())
        off += size
    n = header["layers"]
    image = Tower(arrays[:n], arrays[n : 2 * n])
    text = Tower(arrays[2 * n : 3 * n], arrays[3 * n : 4 * n])
    return EncoderParams(image, text), arrays[-1], header
