"""Seeded multi-source paired data with planted identities and caption noise.

Every identity owns a unit latent vector. A sample's raw feature is a fixed
source- and modality-specific linear map applied to
``latent + source_offset + gaussian_noise``. Caption noise regenerates a
text from another identity of the same source while keeping the nominal
label, which is exactly the mismatch curation is meant to catch.

World parameters (maps and offsets) depend only on the seed, so the train
and test splits of one spec share the same sources.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .curation import ExpertScorer
from .embedding import EmbeddingRecord, Pair, PairedDataset
from .errors import SpecInvalid

TEST_ID_OFFSET = 1_000_000


@dataclass(frozen=True)
class GenSpec:
    n_sources: int = 4
    identities_per_source: int = 50
    images_per_identity: int = 3
    texts_per_image: int = 2
    d_latent: int = 16
    d_raw: int = 32
    source_shift_scale: float = 0.5
    modality_noise_sigma: float = 0.25
    caption_noise_rate: tuple[float, ...] = (0.0, 0.05, 0.10, 0.40)
    seed: int = 7
    # Per-source deviation of the linear maps around a shared base map.
    source_map_jitter: float = 0.5
    test_identities_per_source: int = 25

    def __post_init__(self):
        rates = self.caption_noise_rate
        if isinstance(rates, (int, float)):
            rates = (float(rates),) * self.n_sources
        object.__setattr__(self, "caption_noise_rate", tuple(float(r) for r in rates))
        self.validate()

    def validate(self) -> None:
        for name in (
            "n_sources",
            "identities_per_source",
            "images_per_identity",
            "texts_per_image",
            "d_latent",
            "d_raw",
            "test_identities_per_source",
        ):
            if int(getattr(self, name)) < 1:
                raise SpecInvalid(f"{name} must be >= 1")
        for name in ("source_shift_scale", "modality_noise_sigma", "source_map_jitter"):
            if not getattr(self, name) >= 0:
                raise SpecInvalid(f"{name} must be >= 0")
        if len(self.caption_noise_rate) != self.n_sources:
            raise SpecInvalid(f"need {self.n_sources} caption noise rates, got {len(self.caption_noise_rate)}")
        if any(not 0.0 <= r <= 1.0 for r in self.caption_noise_rate):
            raise SpecInvalid("caption noise rates must lie in [0, 1]")
        if self.identities_per_source < 2 and any(r > 0 for r in self.caption_noise_rate):
            raise SpecInvalid("caption noise needs at least two identities per source")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["caption_noise_rate"] = list(self.caption_noise_rate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecInvalid(f"unknown GenSpec fields: {sorted(unknown)}")
        d = dict(d)
        if "caption_noise_rate" in d and isinstance(d["caption_noise_rate"], list):
            d["caption_noise_rate"] = tuple(d["caption_noise_rate"])
        return cls(**d)

    @property
    def total_pairs(self) -> int:
        return self.n_sources * self.identities_per_source * self.images_per_identity * self.texts_per_image


@dataclass(frozen=True, eq=False)
class GroundTruth:
    clean: np.ndarray  # (N,) bool, per pair
    latents: dict[int, np.ndarray]  # person_id -> unit latent
    text_identity: np.ndarray  # (N,) person_id whose latent generated the caption

    def rows(self) -> list[dict]:
        return [{"pair_id": i, "clean": bool(c)} for i, c in enumerate(self.clean)]


@dataclass(frozen=True)
class _World:
    image_maps: np.ndarray  # (n_sources, d_raw, d_latent)
    text_maps: np.ndarray
    offsets: np.ndarray  # (n_sources, d_latent)


def _world(spec: GenSpec) -> _World:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    scale = 1.0 / math.sqrt(spec.d_latent)
    maps = []
    for _ in range(2):
        base = rng.standard_normal((spec.d_raw, spec.d_latent)) * scale
        jitter = rng.standard_normal((spec.n_sources, spec.d_raw, spec.d_latent)) * scale
        maps.append(base[None] + spec.source_map_jitter * jitter)
    directions = rng.standard_normal((spec.n_sources, spec.d_latent))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return _World(maps[0], maps[1], spec.source_shift_scale * directions)


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def generate(spec: GenSpec, split: str = "train") -> tuple[PairedDataset, GroundTruth]:
    """Build one split. ``split="test"`` uses fresh identities and no caption noise."""
    if split not in ("train", "test"):
        raise SpecInvalid(f"unknown split {split!r}")
    spec.validate()
    world = _world(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1 if split == "train" else 2]))
    per_source = spec.identities_per_source if split == "train" else spec.test_identities_per_source
    id_base = 0 if split == "train" else TEST_ID_OFFSET
    sigma = spec.modality_noise_sigma

    pairs: list[Pair] = []
    clean: list[bool] = []
    text_identity: list[int] = []
    latents: dict[int, np.ndarray] = {}
    image_id = text_id = id_base

    def raw(mapping, latent, s):
        z = latent + world.offsets[s] + sigma * rng.standard_normal(spec.d_latent)
        return mapping @ z

    for s in range(spec.n_sources):
        pids = [id_base + s * per_source + k for k in range(per_source)]
        for pid in pids:
            latents[pid] = _unit(rng, spec.d_latent)
        n_texts = per_source * spec.images_per_identity * spec.texts_per_image
        rate = spec.caption_noise_rate[s] if split == "train" else 0.0
        noisy = np.zeros(n_texts, dtype=bool)
        noisy[rng.choice(n_texts, size=int(round(rate * n_texts)), replace=False)] = True

        t = 0
        for k, pid in enumerate(pids):
            for _ in range(spec.images_per_identity):
                img = EmbeddingRecord(image_id, pid, s, "image", raw(world.image_maps[s], latents[pid], s))
                image_id += 1
                for _ in range(spec.texts_per_image):
                    src_pid = pid
                    if noisy[t]:
                        other = int(rng.integers(per_source - 1))
                        src_pid = pids[other + (other >= k)]
                    txt = EmbeddingRecord(text_id, pid, s, "text", raw(world.text_maps[s], latents[src_pid], s))
                    text_id += 1
                    pairs.append(Pair(img, txt, pid))
                    clean.append(not noisy[t])
                    text_identity.append(src_pid)
                    t += 1
    gt = GroundTruth(np.array(clean), latents, np.array(text_identity, dtype=np.int64))
    return PairedDataset(tuple(pairs)), gt


def make_oracle_expert(dataset: PairedDataset, ground_truth: GroundTruth, expert_id: int = 0) -> ExpertScorer:
    """Expert that embeds every sample as the latent of the identity that generated it."""
    images = {rec.sample_id: ground_truth.latents[rec.person_id] for rec in dataset.gallery}
    texts = {
        p.text.sample_id: ground_truth.latents[int(src)]
        for p, src in zip(dataset.pairs, ground_truth.text_identity)
    }
    return ExpertScorer(expert_id, texts, images)


def make_imperfect_expert(
    dataset: PairedDataset,
    ground_truth: GroundTruth,
    corruption_sigma: float,
    seed: int,
    expert_id: int = 0,
) -> ExpertScorer:
    """Oracle embeddings plus isotropic noise of expected norm ~``corruption_sigma``."""
    if corruption_sigma < 0:
        raise ValueError("corruption_sigma must be >= 0")
    oracle = make_oracle_expert(dataset, ground_truth, expert_id)
    if corruption_sigma == 0:
        return oracle
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    d = next(iter(ground_truth.latents.values())).shape[0]
    std = corruption_sigma / math.sqrt(d)

    def perturb(table):
        out = {}
        for sid in sorted(table):
            v = table[sid] + std * rng.standard_normal(d)
            out[sid] = v / np.linalg.norm(v)
        return out

    return ExpertScorer(expert_id, perturb(oracle.text_embeddings), perturb(oracle.image_embeddings))


def expert_records(expert: ExpertScorer, dataset: PairedDataset) -> list[EmbeddingRecord]:
    """Expert embeddings laid out as records, for the embedding file format."""
    recs = [
        EmbeddingRecord(r.sample_id, r.person_id, r.source_id, "image", expert.image_embeddings[r.sample_id])
        for r in dataset.gallery
    ]
    recs += [
        EmbeddingRecord(p.text.sample_id, p.person_id, p.text.source_id, "text", expert.text_embeddings[p.text.sample_id])
        for p in dataset.pairs
    ]
    return recs
