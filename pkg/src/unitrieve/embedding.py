"""Records, paired datasets and the similarity/ranking primitives.

Everything downstream (curation, losses, evaluation) consumes the types and
functions defined here. Similarities are float64 and every entry of a
similarity matrix is produced by the same elementwise-multiply-and-sum
sequence, so equal vectors always yield bit-equal scores wherever they sit
in the gallery. Exact ties therefore behave predictably under the stable
"smaller index first" rule.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidDataset,
    KTooLarge,
    NonFiniteVector,
    ZeroVector,
)

EPS_NORM = 1e-12

Modality = Literal["image", "text"]

# Q x G float64 array, query rows and gallery columns.
SimilarityMatrix = np.ndarray


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    sample_id: int
    person_id: int
    source_id: int
    modality: Modality
    vector: np.ndarray

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionMismatch("record vector must be one-dimensional")
        if not np.all(np.isfinite(vec)):
            raise NonFiniteVector(f"record {self.sample_id} has non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def normalized(self) -> "EmbeddingRecord":
        return EmbeddingRecord(
            self.sample_id, self.person_id, self.source_id, self.modality, l2_normalize(self.vector)
        )


@dataclass(frozen=True, eq=False)
class Pair:
    image: EmbeddingRecord
    text: EmbeddingRecord
    person_id: int


@dataclass(frozen=True, eq=False)
class PairedDataset:
    """Aligned image/text pairs.

    An image record may be shared by several pairs (one image, several
    captions). The retrieval gallery is the set of distinct images, in order
    of first appearance.
    """

    pairs: tuple[Pair, ...] = field(default_factory=tuple)

    def __post_init__(self):
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        images: dict[int, EmbeddingRecord] = {}
        text_ids: set[int] = set()
        for i, p in enumerate(pairs):
            if p.image.modality != "image" or p.text.modality != "text":
                raise InvalidDataset(f"pair {i}: modality tags are wrong")
            if not (p.image.person_id == p.text.person_id == p.person_id):
                raise InvalidDataset(f"pair {i}: person_id disagrees between image, text and pair")
            seen = images.get(p.image.sample_id)
            if seen is None:
                images[p.image.sample_id] = p.image
            elif seen is not p.image and (
                seen.person_id != p.image.person_id or not np.array_equal(seen.vector, p.image.vector)
            ):
                raise InvalidDataset(f"image sample_id {p.image.sample_id} reused for a different image")
            if p.text.sample_id in text_ids:
                raise InvalidDataset(f"text sample_id {p.text.sample_id} is not unique")
            text_ids.add(p.text.sample_id)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def n_sources(self) -> int:
        return len({p.image.source_id for p in self.pairs})

    @property
    def num_identities(self) -> int:
        return len({p.person_id for p in self.pairs})

    @cached_property
    def gallery(self) -> tuple[EmbeddingRecord, ...]:
        """Distinct images in first-appearance order."""
        seen: dict[int, EmbeddingRecord] = {}
        for p in self.pairs:
            seen.setdefault(p.image.sample_id, p.image)
        return tuple(seen.values())

    @cached_property
    def gallery_index(self) -> np.ndarray:
        """Per pair, the gallery position of its image."""
        pos = {rec.sample_id: i for i, rec in enumerate(self.gallery)}
        return np.array([pos[p.image.sample_id] for p in self.pairs], dtype=np.int64)

    @property
    def person_ids(self) -> np.ndarray:
        return np.array([p.person_id for p in self.pairs], dtype=np.int64)

    @property
    def source_ids(self) -> np.ndarray:
        return np.array([p.image.source_id for p in self.pairs], dtype=np.int64)

    def text_matrix(self) -> np.ndarray:
        return np.stack([p.text.vector for p in self.pairs])

    def image_matrix(self) -> np.ndarray:
        """Per-pair image vectors (rows repeat for shared images)."""
        return np.stack([p.image.vector for p in self.pairs])

    def gallery_matrix(self) -> np.ndarray:
        return np.stack([rec.vector for rec in self.gallery])

    def subset(self, keep: Iterable[int] | np.ndarray) -> "PairedDataset":
        keep = np.asarray(list(keep) if not isinstance(keep, np.ndarray) else keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return PairedDataset(tuple(self.pairs[int(i)] for i in keep))

    def by_source(self, source_id: int) -> "PairedDataset":
        return self.subset([i for i, p in enumerate(self.pairs) if p.image.source_id == source_id])


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = math.sqrt(float(np.dot(v, v)))
    if not norm > eps:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def l2_normalize_rows(m, eps: float = EPS_NORM) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(~(norms > eps)):
        bad = int(np.flatnonzero(~(norms > eps))[0])
        raise ZeroVector(f"row {bad} has norm {norms[bad]:g}")
    return m / norms[:, None]


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return min(1.0, max(-1.0, float(np.dot(a, b))))


def _as_matrix(vectors, name: str) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        m = np.asarray(vectors, dtype=np.float64)
    else:
        vectors = list(vectors)
        if not vectors:
            raise EmptyInput(f"{name} is empty")
        lengths = {len(v) for v in vectors}
        if len(lengths) != 1:
            raise DimensionMismatch(f"{name} vectors have differing lengths {sorted(lengths)}")
        m = np.array(vectors, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be a list of vectors")
    if m.shape[0] == 0:
        raise EmptyInput(f"{name} is empty")
    return m


def _dot_block(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Same reduction for every entry: equal inputs give bit-equal outputs.
    return (q[:, None, :] * g[None, :, :]).sum(axis=2)


def similarity_matrix(queries, gallery, *, threads: int = 1, clamp: bool = True) -> SimilarityMatrix:
    q = _as_matrix(queries, "queries")
    g = _as_matrix(gallery, "gallery")
    if q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    rows = max(1, 2_000_000 // max(1, g.shape[0] * g.shape[1]))
    chunks = [(s, min(s + rows, q.shape[0])) for s in range(0, q.shape[0], rows)]
    out = np.empty((q.shape[0], g.shape[0]), dtype=np.float64)

    def work(span):
        s, e = span
        out[s:e] = _dot_block(q[s:e], g)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, chunks))
    else:
        for span in chunks:
            work(span)
    if clamp:
        np.clip(out, -1.0, 1.0, out=out)
    return out


def ranking(scores) -> np.ndarray:
    """Full descending order of ``scores``; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def top_k_indices(scores, k: int) -> list[int]:
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be positive")
    if k > scores.shape[0]:
        raise KTooLarge(f"k={k} exceeds {scores.shape[0]} scores")
    return ranking(scores)[:k].tolist()


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise :func:`ranking` for a 2-d score matrix."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")


def stack_records(records: Sequence[EmbeddingRecord]) -> np.ndarray:
    if not records:
        raise EmptyInput("no records")
    return np.stack([r.vector for r in records])
