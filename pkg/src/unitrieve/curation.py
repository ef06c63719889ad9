"""Ensemble top-K consensus filtering of a paired dataset.

Each frozen expert scores every caption against every distinct image of the
dataset. A pair survives when at least one expert places its own image within
the top ``K``. Ranks are computed once; every threshold reuses them.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .embedding import PairedDataset, similarity_matrix
from .errors import IndexOutOfRange, KTooLarge, LengthMismatch, MissingEmbedding

DEFAULT_K = 25


@dataclass(frozen=True, eq=False)
class ExpertScorer:
    """Precomputed unit embeddings of one frozen retrieval model."""

    expert_id: int
    text_embeddings: Mapping[int, np.ndarray]
    image_embeddings: Mapping[int, np.ndarray]

    def __post_init__(self):
        for table in (self.text_embeddings, self.image_embeddings):
            for sid, vec in table.items():
                n = float(np.linalg.norm(vec))
                if abs(n - 1.0) > 1e-6:
                    raise ValueError(f"expert {self.expert_id}: embedding {sid} has norm {n:.8f}")

    def text_matrix(self, sample_ids: Sequence[int]) -> np.ndarray:
        return self._lookup(self.text_embeddings, sample_ids, "text")

    def image_matrix(self, sample_ids: Sequence[int]) -> np.ndarray:
        return self._lookup(self.image_embeddings, sample_ids, "image")

    def _lookup(self, table, sample_ids, what) -> np.ndarray:
        try:
            return np.stack([np.asarray(table[int(s)], dtype=np.float64) for s in sample_ids])
        except KeyError as exc:
            raise MissingEmbedding(f"expert {self.expert_id} has no {what} embedding for sample {exc.args[0]}") from None


@dataclass(frozen=True, eq=False)
class CurationMask:
    delta: np.ndarray  # (N,) uint8
    ranks: np.ndarray  # (N, p) 1-based
    K: int

    def __len__(self) -> int:
        return self.delta.shape[0]

    def rows(self) -> list[dict]:
        return [
            {"pair_id": i, "delta": int(d), "ranks": [int(r) for r in rk]}
            for i, (d, rk) in enumerate(zip(self.delta, self.ranks))
        ]


@dataclass(frozen=True)
class SourceRetention:
    retained: int
    total: int

    @property
    def percent(self) -> float:
        return 100.0 * self.retained / self.total if self.total else 0.0


@dataclass(frozen=True)
class RetentionReport:
    per_source: dict[int, SourceRetention]
    retained: int
    total: int
    seconds: float = 0.0

    @property
    def overall_percent(self) -> float:
        return 100.0 * self.retained / self.total if self.total else 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "per_source": {
                str(sid): {"retained": r.retained, "total": r.total, "percent": r.percent}
                for sid, r in sorted(self.per_source.items())
            },
            "retained": self.retained,
            "total": self.total,
            "overall_percent": self.overall_percent,
        }
        if include_timing:
            out["seconds"] = self.seconds
        return out


def rank_of_ground_truth(sim_row, gt_index: int) -> int:
    """1-based position of ``gt_index`` in the descending, index-stable order."""
    row = np.asarray(sim_row, dtype=np.float64)
    if not 0 <= gt_index < row.shape[0]:
        raise IndexOutOfRange(f"gt_index {gt_index} outside [0, {row.shape[0]})")
    s = row[gt_index]
    return 1 + int(np.count_nonzero(row > s)) + int(np.count_nonzero(row[:gt_index] == s))


def _ranks_for_expert(texts: np.ndarray, gallery: np.ndarray, gt: np.ndarray, rows: int = 256) -> np.ndarray:
    out = np.empty(texts.shape[0], dtype=np.int64)
    cols = np.arange(gallery.shape[0])
    for s in range(0, texts.shape[0], rows):
        e = min(s + rows, texts.shape[0])
        sims = similarity_matrix(texts[s:e], gallery)
        g = gt[s:e]
        sg = sims[np.arange(e - s), g][:, None]
        higher = np.count_nonzero(sims > sg, axis=1)
        tied_before = np.count_nonzero((sims == sg) & (cols[None, :] < g[:, None]), axis=1)
        out[s:e] = 1 + higher + tied_before
    return out


def expert_ranks(dataset: PairedDataset, experts: Sequence[ExpertScorer], threads: int = 1) -> np.ndarray:
    """(N, p) matrix of ground-truth image ranks over the full distinct-image gallery."""
    if not experts:
        raise ValueError("at least one expert is required")
    text_ids = [p.text.sample_id for p in dataset.pairs]
    image_ids = [rec.sample_id for rec in dataset.gallery]
    gt = dataset.gallery_index

    def one(expert: ExpertScorer) -> np.ndarray:
        return _ranks_for_expert(expert.text_matrix(text_ids), expert.image_matrix(image_ids), gt)

    if threads > 1 and len(experts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(one, experts))
    else:
        cols = [one(e) for e in experts]
    return np.stack(cols, axis=1)


def mask_from_ranks(ranks: np.ndarray, K: int, gallery_size: int) -> CurationMask:
    if K < 1:
        raise ValueError("K must be positive")
    if K > gallery_size:
        raise KTooLarge(f"K={K} exceeds gallery size {gallery_size}")
    delta = (ranks.min(axis=1) <= K).astype(np.uint8)
    return CurationMask(delta=delta, ranks=ranks, K=K)


def retention_by_source(mask: CurationMask, dataset: PairedDataset, seconds: float = 0.0) -> RetentionReport:
    if len(mask) != len(dataset):
        raise LengthMismatch(f"mask has {len(mask)} entries, dataset has {len(dataset)} pairs")
    sources = dataset.source_ids
    per = {}
    for sid in np.unique(sources):
        sel = sources == sid
        per[int(sid)] = SourceRetention(int(mask.delta[sel].sum()), int(sel.sum()))
    return RetentionReport(per, int(mask.delta.sum()), len(dataset), seconds)


def curate(
    dataset: PairedDataset,
    experts: Sequence[ExpertScorer],
    K: int = DEFAULT_K,
    threads: int = 1,
) -> tuple[CurationMask, PairedDataset, RetentionReport]:
    t0 = time.perf_counter()
    gallery_size = len(dataset.gallery)
    if K > gallery_size:
        raise KTooLarge(f"K={K} exceeds gallery size {gallery_size}")
    ranks = expert_ranks(dataset, experts, threads=threads)
    mask = mask_from_ranks(ranks, K, gallery_size)
    clean = dataset.subset(mask.delta.astype(bool))
    report = retention_by_source(mask, dataset, seconds=time.perf_counter() - t0)
    return mask, clean, report


def retention_curve(
    dataset: PairedDataset,
    experts: Sequence[ExpertScorer],
    k_values: Sequence[int],
    threads: int = 1,
) -> list[tuple[int, float]]:
    k_values = [int(k) for k in k_values]
    if k_values != sorted(k_values):
        raise ValueError("k_values must be sorted ascending")
    gallery_size = len(dataset.gallery)
    if k_values and k_values[-1] > gallery_size:
        raise KTooLarge(f"K={k_values[-1]} exceeds gallery size {gallery_size}")
    best = expert_ranks(dataset, experts, threads=threads).min(axis=1)
    n = len(dataset)
    return [(k, 100.0 * int(np.count_nonzero(best <= k)) / n) for k in k_values]


def experts_from_files(paths: Sequence[str]) -> list[ExpertScorer]:
    from .formats import read_records

    experts = []
    for idx, path in enumerate(paths, 1):
        texts, images = {}, {}
        for rec, _ in read_records(path, normalize=True):
            (texts if rec.modality == "text" else images)[rec.sample_id] = rec.vector
        experts.append(ExpertScorer(idx, texts, images))
    return experts
