import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metric_ensemble.base_metrics import kissme_from_differences
from metric_ensemble.errors import InvalidInputError
from metric_ensemble.evaluation import (RANK_GRID, RankingResult, average_curves, cmc_curve, ensemble_scores,
                                        format_cmc_table, mean_reciprocal_rank, normalize_probe_distances,
                                        rank_from_distances, rank_gallery)
from metric_ensemble.types import DescriptorSet, WeightVector


def _results(ranks, n):
    return [RankingResult(str(i), tuple(str(j) for j in range(n)), r) for i, r in enumerate(ranks)]


def test_normalization_examples():
    np.testing.assert_allclose(normalize_probe_distances([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(normalize_probe_distances([3.0, 3.0]), [0.0, 0.0])
    with pytest.raises(InvalidInputError):
        normalize_probe_distances([])


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e6, 1e6)))
def test_normalization_preserves_argsort(d):
    out = normalize_probe_distances(d)
    assert out.min() >= 0 and out.max() <= 1
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    # rounding can merge nearly equal values; otherwise the order is identical
    if np.unique(out).size == np.unique(d).size:
        np.testing.assert_array_equal(np.argsort(out, kind="stable"), order)


def test_cmc_examples():
    np.testing.assert_allclose(cmc_curve(_results([1, 3], 3)).recognition_rate, [0.5, 0.5, 1.0])
    np.testing.assert_array_equal(cmc_curve(_results([1, 1], 4)).recognition_rate, np.ones(4))
    assert mean_reciprocal_rank(_results([1, 2], 2)) == 0.75
    assert mean_reciprocal_rank(_results([1, 1, 1], 3)) == 1.0
    with pytest.raises(InvalidInputError, match="mixed"):
        cmc_curve(_results([1], 2) + _results([1], 3))


@given(st.lists(st.integers(1, 12), min_size=1, max_size=40))
def test_cmc_and_mrr_properties(ranks):
    res = _results(ranks, 12)
    curve = cmc_curve(res).recognition_rate
    assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0
    assert mean_reciprocal_rank(res) >= curve[0]


def test_rank_grid_rows():
    assert RANK_GRID == (1, 2, 5, 10, 20, 50, 100)


def test_ties_break_by_gallery_order():
    D = np.zeros((1, 2, 3))
    res = rank_from_distances([1.0], D, ["b", "c"], ["a", "b", "c"])
    assert res[0].gallery_order == ("a", "b", "c") and res[0].true_rank == 2


def test_first_channel_wins_with_selector_weights():
    D = np.stack([np.array([[0.0, 1.0, 2.0]]), np.array([[2.0, 1.0, 0.0]])])
    res = rank_from_distances([1.0, 0.0], D, ["x"], ["x", "y", "z"])[0]
    assert res.gallery_order == ("x", "y", "z") and res.true_rank == 1


def _metrics_and_sets(rng, T=3, n=5, d=4):
    ids = tuple(f"g{j}" for j in range(n))
    metrics, gallery = [], []
    for t in range(T):
        metrics.append(kissme_from_differences(rng.standard_normal((20, d)), 3 * rng.standard_normal((40, d)),
                                               feature_name=f"f{t}"))
        gallery.append(DescriptorSet(f"f{t}", "b", ids, rng.random((n, d))))
    probe = [rng.random(d) for _ in range(T)]
    return metrics, probe, gallery, ids


def test_rank_gallery_matches_recompute_and_sort(rng):
    metrics, probe, gallery, ids = _metrics_and_sets(rng)
    w = WeightVector(rng.random(3))
    res = rank_gallery(w, metrics, probe, gallery, probe_id="g2")
    total = np.zeros(5)
    for t, (M, x, G) in enumerate(zip(metrics, probe, gallery)):
        d = np.array([M.distance(x, g) for g in G.descriptors])
        total += w.w[t] * (d - d.min()) / (d.max() - d.min())
    order = sorted(range(5), key=lambda j: (total[j], j))
    assert res.gallery_order == tuple(ids[j] for j in order)
    assert res.true_rank == order.index(2) + 1


def test_rank_gallery_scale_invariant(rng):
    metrics, probe, gallery, _ = _metrics_and_sets(rng)
    w = rng.random(3)
    assert rank_gallery(w, metrics, probe, gallery, "g1") == rank_gallery(7.5 * w, metrics, probe, gallery, "g1")


def test_rank_gallery_channel_mismatch(rng):
    metrics, probe, gallery, _ = _metrics_and_sets(rng)
    with pytest.raises(InvalidInputError):
        rank_gallery(np.ones(3), metrics[:2], probe, gallery, "g0")
    with pytest.raises(InvalidInputError):
        ensemble_scores(np.ones(2), np.zeros((3, 1, 2)))


def test_average_and_table():
    curves = [cmc_curve(_results([1, 2], 2)), cmc_curve(_results([1, 1], 2))]
    mean, std = average_curves(curves)
    np.testing.assert_allclose(mean.recognition_rate, [0.75, 1.0])
    np.testing.assert_allclose(std, [np.std([0.5, 1.0], ddof=1), 0.0])
    lines = format_cmc_table(curves).splitlines()
    assert lines[0].split("\t") == ["rank", "repeat_0", "repeat_1", "mean", "std"]
    assert lines[1].split("\t")[:4] == ["1", "0.500000", "1.000000", "0.750000"]
