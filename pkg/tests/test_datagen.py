import numpy as np
import pytest

from unitrieve.curation import curate
from unitrieve.datagen import TEST_ID_OFFSET, GenSpec, generate, make_imperfect_expert, make_oracle_expert
from unitrieve.errors import SpecInvalid
from unitrieve.formats import write_dataset


def spec(**kw):
    base = dict(n_sources=3, identities_per_source=12, images_per_identity=2, texts_per_image=2,
                caption_noise_rate=(0.0, 0.1, 0.4), seed=5)
    base.update(kw)
    return GenSpec(**base)


class TestGenerate:
    def test_counts(self):
        s = spec()
        ds, gt = generate(s)
        assert len(ds) == s.total_pairs == 3 * 12 * 2 * 2
        assert len(ds.gallery) == 3 * 12 * 2
        assert ds.num_identities == 36 and ds.n_sources == 3
        assert gt.clean.shape == (len(ds),)

    def test_default_benchmark_size(self):
        assert GenSpec().total_pairs == 1200

    def test_no_noise_all_clean(self):
        _, gt = generate(spec(caption_noise_rate=0.0))
        assert gt.clean.all()

    def test_planted_noise_counts(self):
        ds, gt = generate(spec())
        sources = ds.source_ids
        per_source = 12 * 2 * 2
        for s, rate in enumerate((0.0, 0.1, 0.4)):
            assert int((~gt.clean[sources == s]).sum()) == round(rate * per_source)

    def test_noisy_flags_match_text_identity(self):
        ds, gt = generate(spec())
        assert np.array_equal(gt.clean, gt.text_identity == ds.person_ids)
        # swaps stay inside their source
        src_of = {pid: p.image.source_id for p in ds.pairs for pid in [p.person_id]}
        for p, t in zip(ds.pairs, gt.text_identity):
            assert src_of[int(t)] == p.image.source_id

    def test_latents_unit(self):
        _, gt = generate(spec())
        for v in gt.latents.values():
            assert abs(np.linalg.norm(v) - 1) < 1e-12

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            write_dataset(tmp_path / name / "d.jsonl", generate(spec())[0])
        assert (tmp_path / "a/d.jsonl").read_bytes() == (tmp_path / "b/d.jsonl").read_bytes()
        assert (tmp_path / "a/d.bin").read_bytes() == (tmp_path / "b/d.bin").read_bytes()

    def test_seed_changes_output(self):
        a, _ = generate(spec(seed=1))
        b, _ = generate(spec(seed=2))
        assert not np.array_equal(a.text_matrix(), b.text_matrix())

    def test_test_split(self):
        ds, gt = generate(spec(test_identities_per_source=5), split="test")
        assert gt.clean.all()
        assert ds.person_ids.min() >= TEST_ID_OFFSET
        assert len(ds) == 3 * 5 * 2 * 2

    @pytest.mark.parametrize(
        "bad",
        [dict(n_sources=0), dict(caption_noise_rate=(0.1, 0.2)), dict(caption_noise_rate=(0, 0, 1.5)),
         dict(modality_noise_sigma=-1.0), dict(identities_per_source=1)],
    )
    def test_invalid(self, bad):
        with pytest.raises(SpecInvalid):
            spec(**bad)

    def test_dict_roundtrip(self):
        s = spec()
        assert GenSpec.from_dict(s.to_dict()) == s
        with pytest.raises(SpecInvalid):
            GenSpec.from_dict({"nope": 1})

    def test_shift_grows_inter_source_distance(self):
        dists = []
        for scale in (0.0, 0.5, 1.5):
            ds, _ = generate(spec(source_shift_scale=scale, caption_noise_rate=0.0))
            x = ds.image_matrix()
            means = np.array([x[ds.source_ids == s].mean(axis=0) for s in range(3)])
            dists.append(np.mean([np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]))
        assert dists[0] < dists[1] < dists[2]


class TestExperts:
    def test_oracle_clean_pair_similarity_one(self):
        ds, gt = generate(spec())
        e = make_oracle_expert(ds, gt)
        for p, clean in zip(ds.pairs, gt.clean):
            sim = float(e.text_embeddings[p.text.sample_id] @ e.image_embeddings[p.image.sample_id])
            if clean:
                assert sim == pytest.approx(1.0, abs=1e-12)
            else:
                assert sim < 1 - 1e-6

    def test_oracle_keeps_every_clean_pair(self):
        s = spec()
        ds, gt = generate(s)
        mask, _, _ = curate(ds, [make_oracle_expert(ds, gt)], K=s.images_per_identity)
        assert mask.delta[gt.clean].all()

    def test_planted_separability(self):
        s = spec(modality_noise_sigma=0.0, caption_noise_rate=0.0)
        ds, gt = generate(s)
        mask, _, _ = curate(ds, [make_oracle_expert(ds, gt)], K=s.images_per_identity)
        assert mask.delta.all()

    def test_sigma_zero_is_oracle(self):
        ds, gt = generate(spec())
        a = make_oracle_expert(ds, gt)
        b = make_imperfect_expert(ds, gt, 0.0, seed=1)
        for sid, v in a.text_embeddings.items():
            assert np.array_equal(v, b.text_embeddings[sid])

    def test_imperfect_deterministic(self):
        ds, gt = generate(spec())
        a = make_imperfect_expert(ds, gt, 0.5, seed=3)
        b = make_imperfect_expert(ds, gt, 0.5, seed=3)
        assert all(np.array_equal(v, b.image_embeddings[k]) for k, v in a.image_embeddings.items())

    def test_clean_retention_nonincreasing_in_sigma(self):
        s = spec()
        ds, gt = generate(s)
        means = []
        for sigma in (0.0, 0.3, 0.8):
            kept = []
            for seed in range(10):
                e = make_imperfect_expert(ds, gt, sigma, seed=seed)
                mask, _, _ = curate(ds, [e], K=s.images_per_identity)
                kept.append(mask.delta[gt.clean].mean())
            means.append(np.mean(kept))
        assert means[0] >= means[1] >= means[2]
        assert means[0] == 1.0

    def test_union_of_experts_keeps_at_least_each(self):
        s = spec()
        ds, gt = generate(s)
        experts = [make_imperfect_expert(ds, gt, 0.5, seed=k, expert_id=k) for k in range(3)]
        union, _, _ = curate(ds, experts, K=s.images_per_identity)
        for e in experts:
            single, _, _ = curate(ds, [e], K=s.images_per_identity)
            assert np.all(union.delta >= single.delta)
            assert union.delta[gt.clean].sum() >= single.delta[gt.clean].sum()
