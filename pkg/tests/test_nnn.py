import numpy as np
import pytest

from oracles import sort_order
from unitrieve.errors import EmptyGallery, KappaTooLarge, LengthMismatch
from unitrieve.nnn import NnnConfig, compute_bias, normalize_scores


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_defaults():
    assert NnnConfig() == NnnConfig(0.75, 16)


def test_alpha_zero_gives_zero_bias():
    rng = np.random.default_rng(0)
    bias = compute_bias(unit_rows(rng, 5, 4), unit_rows(rng, 20, 4), NnnConfig(0.0, 16))
    assert np.array_equal(bias, np.zeros(5))


def test_kappa_one_is_scaled_max():
    rng = np.random.default_rng(1)
    g, q = unit_rows(rng, 6, 4), unit_rows(rng, 9, 4)
    bias = compute_bias(g, q, NnnConfig(0.5, 1))
    np.testing.assert_allclose(bias, 0.5 * (g @ q.T).max(axis=1), atol=1e-15)


def test_hand_computed_two_by_three():
    gallery = np.array([[1.0, 0.0], [0.0, 1.0]])
    queries = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    # image 0 sims (1, .6, 0): top-2 mean .8; image 1 sims (0, .8, 1): top-2 mean .9
    bias = compute_bias(gallery, queries, NnnConfig(0.75, 2))
    np.testing.assert_allclose(bias, [0.6, 0.675], atol=1e-15)


def test_errors():
    with pytest.raises(KappaTooLarge):
        compute_bias(np.eye(2), np.eye(2), NnnConfig(0.75, 3))
    with pytest.raises(EmptyGallery):
        compute_bias(np.zeros((0, 2)), np.eye(2), NnnConfig(0.75, 1))
    with pytest.raises(LengthMismatch):
        normalize_scores(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        NnnConfig(-1.0, 2)
    with pytest.raises(ValueError):
        NnnConfig(0.5, 0)


def test_zero_bias_is_identity():
    raw = np.random.default_rng(2).standard_normal((4, 5))
    assert np.array_equal(normalize_scores(raw, np.zeros(5)), raw)


def test_uniform_shift_keeps_rankings():
    raw = np.random.default_rng(3).standard_normal((6, 7))
    out = normalize_scores(raw, np.full(7, 0.3))
    for a, b in zip(raw, out):
        assert sort_order(a) == sort_order(b)


def test_bias_ignores_query_order():
    rng = np.random.default_rng(4)
    g, q = unit_rows(rng, 8, 5), unit_rows(rng, 40, 5)
    a = compute_bias(g, q, NnnConfig())
    b = compute_bias(g, q[rng.permutation(40)], NnnConfig())
    assert np.array_equal(a, b)


def test_orthogonal_references_give_zero_bias():
    gallery = np.eye(6)[:3]
    refs = np.eye(6)[3:]
    assert np.array_equal(compute_bias(gallery, refs, NnnConfig(0.75, 3)), np.zeros(3))


def test_hub_is_demoted():
    rng = np.random.default_rng(5)
    d = 16
    queries = unit_rows(rng, 64, d)
    gallery = unit_rows(rng, 40, d)
    hub = queries.mean(axis=0)
    gallery[0] = hub / np.linalg.norm(hub)
    raw = queries @ gallery.T
    col_means = raw.mean(axis=0)
    assert col_means[0] >= col_means.mean() + 2 * col_means.std()

    normalized = normalize_scores(raw, compute_bias(gallery, queries, NnnConfig()))

    def mean_rank(scores):
        return np.mean([sort_order(row).index(0) + 1 for row in scores])

    assert mean_rank(normalized) > mean_rank(raw)
