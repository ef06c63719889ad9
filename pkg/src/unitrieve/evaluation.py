"""Text-to-image retrieval metrics: Rank-k accuracy and mAP."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .embedding import PairedDataset, l2_normalize_rows, rank_rows, similarity_matrix
from .errors import DimensionMismatch, LengthMismatch, NoRelevantItems
from .nnn import NnnConfig, compute_bias, normalize_scores

DEFAULT_KS = (1, 5, 10)


class Encoder(Protocol):
    in_dim: int

    def embed_images(self, x: np.ndarray) -> np.ndarray: ...

    def embed_texts(self, x: np.ndarray) -> np.ndarray: ...


def relevance_from_labels(query_labels, gallery_labels) -> np.ndarray:
    q = np.asarray(query_labels)
    g = np.asarray(gallery_labels)
    return q[:, None] == g[None, :]


def _relevance_matrix(relevance, shape) -> np.ndarray:
    if isinstance(relevance, np.ndarray) and relevance.dtype == bool:
        rel = relevance
    else:
        rel = np.zeros(shape, dtype=bool)
        relevance = list(relevance)
        if len(relevance) != shape[0]:
            raise LengthMismatch(f"{len(relevance)} relevance sets for {shape[0]} queries")
        for i, items in enumerate(relevance):
            rel[i, list(items)] = True
    if rel.shape != shape:
        raise LengthMismatch(f"relevance shape {rel.shape} != score shape {shape}")
    empty = ~rel.any(axis=1)
    if empty.any():
        raise NoRelevantItems(f"query {int(np.flatnonzero(empty)[0])} has no relevant gallery item")
    return rel


def _sorted_relevance(scores, relevance) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    rel = _relevance_matrix(relevance, scores.shape)
    order = rank_rows(scores)
    return np.take_along_axis(rel, order, axis=1)


def rank_k_accuracy(scores, relevance, ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    hits = _sorted_relevance(scores, relevance)
    first = hits.argmax(axis=1)  # 0-based position of the first relevant item
    n = hits.shape[0]
    return {int(k): 100.0 * int(np.count_nonzero(first < k)) / n for k in ks}


def average_precisions(scores, relevance) -> np.ndarray:
    hits = _sorted_relevance(scores, relevance)
    cum = np.cumsum(hits, axis=1)
    positions = np.arange(1, hits.shape[1] + 1)
    precision_at_hits = np.where(hits, cum / positions, 0.0)
    return precision_at_hits.sum(axis=1) / hits.sum(axis=1)


def mean_average_precision(scores, relevance) -> float:
    return 100.0 * float(np.mean(average_precisions(scores, relevance)))


@dataclass
class RetrievalMetrics:
    rank_k: dict[int, float]
    map_percent: float
    per_query_ap: np.ndarray

    @classmethod
    def from_scores(cls, scores, relevance, ks=DEFAULT_KS) -> "RetrievalMetrics":
        aps = average_precisions(scores, relevance)
        return cls(rank_k_accuracy(scores, relevance, ks), 100.0 * float(np.mean(aps)), aps)

    def to_dict(self) -> dict:
        return {
            "rank_k": {str(k): v for k, v in self.rank_k.items()},
            "map": self.map_percent,
        }


@dataclass
class RetrievalResult:
    raw_scores: np.ndarray
    raw: RetrievalMetrics
    normalized_scores: np.ndarray | None = None
    normalized: RetrievalMetrics | None = None
    bias_seconds: float = field(default=0.0, compare=False)

    @property
    def rank_k(self) -> dict[int, float]:
        return self.raw.rank_k

    @property
    def map_percent(self) -> float:
        return self.raw.map_percent

    @property
    def per_query_ap(self) -> np.ndarray:
        return self.raw.per_query_ap

    def to_dict(self, per_query: bool = False) -> dict:
        out = {"num_queries": int(self.raw_scores.shape[0]), "gallery_size": int(self.raw_scores.shape[1])}
        out["raw"] = self.raw.to_dict()
        if per_query:
            out["raw"]["per_query_ap"] = [float(a) for a in self.raw.per_query_ap]
        if self.normalized is not None:
            out["normalized"] = self.normalized.to_dict()
            if per_query:
                out["normalized"]["per_query_ap"] = [float(a) for a in self.normalized.per_query_ap]
        return out


def evaluate_embeddings(
    query_emb: np.ndarray,
    query_labels,
    gallery_emb: np.ndarray,
    gallery_labels,
    nnn_cfg: NnnConfig | None = None,
    reference_emb: np.ndarray | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> RetrievalResult:
    """Score unit query embeddings against a unit gallery and summarize."""
    raw = similarity_matrix(query_emb, gallery_emb)
    relevance = relevance_from_labels(query_labels, gallery_labels)
    result = RetrievalResult(raw_scores=raw, raw=RetrievalMetrics.from_scores(raw, relevance, ks))
    if nnn_cfg is not None:
        t0 = time.perf_counter()
        refs = query_emb if reference_emb is None else reference_emb
        bias = compute_bias(gallery_emb, refs, nnn_cfg)
        result.normalized_scores = normalize_scores(raw, bias)
        result.bias_seconds = time.perf_counter() - t0
        result.normalized = RetrievalMetrics.from_scores(result.normalized_scores, relevance, ks)
    return result


def run_protocol(
    encoder: Encoder,
    test_set: PairedDataset,
    nnn_cfg: NnnConfig | None = None,
    reference: PairedDataset | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> RetrievalResult:
    """Embed the test gallery (distinct images) and queries (captions), then score."""
    gallery_raw = test_set.gallery_matrix()
    query_raw = test_set.text_matrix()
    for name, x in (("gallery", gallery_raw), ("queries", query_raw)):
        if x.shape[1] != encoder.in_dim:
            raise DimensionMismatch(f"{name} dim {x.shape[1]} != encoder input dim {encoder.in_dim}")
    gallery = l2_normalize_rows(encoder.embed_images(gallery_raw))
    queries = l2_normalize_rows(encoder.embed_texts(query_raw))
    refs = None
    if nnn_cfg is not None and reference is not None:
        refs = l2_normalize_rows(encoder.embed_texts(reference.text_matrix()))
    return evaluate_embeddings(
        queries,
        test_set.person_ids,
        gallery,
        [rec.person_id for rec in test_set.gallery],
        nnn_cfg=nnn_cfg,
        reference_emb=refs,
        ks=ks,
    )
