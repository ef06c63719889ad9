"""On-disk embedding format: JSONL manifest plus a little-endian float32 blob.

Manifest lines carry ``sample_id, person_id, source_id, modality, offset,
dim``; record ``i`` occupies ``dim`` floats starting at byte ``offset * 4``
of the blob. The blob lives next to the manifest with a ``.bin`` suffix.
Paired datasets add ``image_id`` to text lines to name the paired image.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import EmbeddingRecord, Pair, PairedDataset, l2_normalize
from .errors import InvalidDataset

FORMAT_VERSION = 1


def blob_path(manifest: str | Path) -> Path:
    return Path(manifest).with_suffix(".bin")


def write_records(
    manifest: str | Path,
    records: Sequence[EmbeddingRecord],
    extras: Sequence[dict] | None = None,
) -> Path:
    manifest = Path(manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = []
    chunks = []
    for i, rec in enumerate(records):
        line = {
            "sample_id": int(rec.sample_id),
            "person_id": int(rec.person_id),
            "source_id": int(rec.source_id),
            "modality": rec.modality,
            "offset": offset,
            "dim": rec.dim,
        }
        if extras is not None and extras[i]:
            line.update(extras[i])
        lines.append(json.dumps(line, sort_keys=False))
        chunks.append(np.asarray(rec.vector, dtype="<f4"))
        offset += rec.dim
    manifest.write_text("".join(l + "\n" for l in lines))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob_path(manifest).write_bytes(blob.astype("<f4").tobytes())
    return manifest


def read_records(manifest: str | Path, normalize: bool = True) -> list[tuple[EmbeddingRecord, dict]]:
    """Load records and each line's extra fields."""
    manifest = Path(manifest)
    blob = np.frombuffer(blob_path(manifest).read_bytes(), dtype="<f4")
    out = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        if not raw.strip():
            continue
        line = json.loads(raw)
        off, dim = int(line["offset"]), int(line["dim"])
        if off < 0 or off + dim > blob.shape[0]:
            raise InvalidDataset(f"{manifest}:{lineno}: vector runs past end of blob")
        vec = blob[off : off + dim].astype(np.float64)
        if normalize:
            vec = l2_normalize(vec)
        rec = EmbeddingRecord(
            int(line["sample_id"]), int(line["person_id"]), int(line["source_id"]), line["modality"], vec
        )
        extra = {k: v for k, v in line.items() if k not in _BASE_KEYS}
        out.append((rec, extra))
    return out


_BASE_KEYS = {"sample_id", "person_id", "source_id", "modality", "offset", "dim"}


def write_dataset(manifest: str | Path, dataset: PairedDataset) -> Path:
    records: list[EmbeddingRecord] = list(dataset.gallery)
    extras: list[dict] = [{} for _ in records]
    for p in dataset.pairs:
        records.append(p.text)
        extras.append({"image_id": int(p.image.sample_id)})
    return write_records(manifest, records, extras)


def read_dataset(manifest: str | Path, normalize: bool = True) -> PairedDataset:
    images: dict[int, EmbeddingRecord] = {}
    texts: list[tuple[EmbeddingRecord, int]] = []
    for rec, extra in read_records(manifest, normalize=normalize):
        if rec.modality == "image":
            if rec.sample_id in images:
                raise InvalidDataset(f"duplicate image sample_id {rec.sample_id}")
            images[rec.sample_id] = rec
        else:
            if "image_id" not in extra:
                raise InvalidDataset(f"text {rec.sample_id} has no image_id")
            texts.append((rec, int(extra["image_id"])))
    pairs = []
    for text, image_id in texts:
        if image_id not in images:
            raise InvalidDataset(f"text {text.sample_id} points at unknown image {image_id}")
        pairs.append(Pair(images[image_id], text, text.person_id))
    return PairedDataset(tuple(pairs))


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
