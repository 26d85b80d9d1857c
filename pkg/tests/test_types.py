import numpy as np
import pytest

from metric_ensemble.errors import InvalidInputError
from metric_ensemble.types import (DescriptorSet, OrderingMatrix, TripletDistanceTable, WeightVector,
                                   weighted_distance)


def test_descriptor_set_validates_and_subsets():
    ds = DescriptorSet("lab", "a", ("x", "y", "z"), np.arange(6.0).reshape(3, 2))
    assert ds.dimension == 2 and len(ds) == 3
    sub = ds.subset(["z", "x"])
    assert sub.identities == ("z", "x")
    np.testing.assert_array_equal(sub.descriptors, [[4, 5], [0, 1]])
    with pytest.raises(InvalidInputError, match="duplicate"):
        DescriptorSet("lab", "a", ("x", "x"), np.zeros((2, 2)))
    bad = np.zeros((3, 2))
    bad[2, 1] = np.nan
    with pytest.raises(InvalidInputError, match="row 2"):
        DescriptorSet("lab", "a", ("x", "y", "z"), bad)


def test_descriptors_are_read_only():
    ds = DescriptorSet("lab", "a", ("x",), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        ds.descriptors[0, 0] = 1.0


def test_weight_vector_rejects_negative():
    with pytest.raises(InvalidInputError):
        WeightVector([0.5, -0.1])
    w = WeightVector([1.0, 2.0], xi=0.5, objective=3.0)
    np.testing.assert_allclose(w.scaled(2).w, [2.0, 4.0])


def test_weighted_distance():
    assert weighted_distance([0.5, 2.0], [4.0, 1.0]) == pytest.approx(4.0)


def test_table_from_distances_uses_diagonal_as_match():
    D = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
    t = TripletDistanceTable.from_distances(D, ["a", "b", "c"])
    assert (t.m, t.m_prime, t.T) == (3, 2, 2)
    np.testing.assert_array_equal(t.d_plus[1], [4.0, 13.0])  # D[:, 1, 1]
    np.testing.assert_array_equal(t.d_minus[1, :, 0], [3.0, 5.0])
    assert t.candidate_ids[1] == ("a", "c")
    np.testing.assert_array_equal(t.margins, t.d_minus - t.d_plus[:, None, :])


def test_ordering_matrix_key_and_reference():
    P = OrderingMatrix(np.array([[1, 0, 1], [0, 1, 1]]), 2, np.array([[2, 1], [0, 2]]))
    np.testing.assert_array_equal(P.top_entries(), [[1, 0], [0, 1]])
    assert P.key() == frozenset({(0, 2), (1, 2)})
    assert not OrderingMatrix.reference(2, 3, 2).entries.any()
    with pytest.raises(InvalidInputError):
        OrderingMatrix(np.zeros((2, 3)), 4)
    with pytest.raises(InvalidInputError):
        OrderingMatrix(np.zeros((1, 3)), 2, np.array([[1, 1]]))
