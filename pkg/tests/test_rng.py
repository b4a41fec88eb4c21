import numpy as np
import pytest

from conestable.rng import RngStream, as_stream


def test_same_stream_same_draws():
    a = RngStream(7).generator().standard_normal(100)
    b = RngStream(7).generator().standard_normal(100)
    np.testing.assert_array_equal(a, b)


def test_distinct_seeds_differ():
    a = RngStream(7).generator().standard_normal(100)
    b = RngStream(8).generator().standard_normal(100)
    assert not np.array_equal(a, b)


def test_child_is_deterministic():
    a = RngStream(7).child(3, 1).generator().standard_normal(10)
    b = RngStream(7).child(3, 1).generator().standard_normal(10)
    np.testing.assert_array_equal(a, b)


def test_children_are_independent_streams():
    parent = RngStream(7)
    a = parent.child(0).generator().standard_normal(100)
    b = parent.child(1).generator().standard_normal(100)
    assert not np.array_equal(a, b)


def test_child_differs_from_parent():
    parent = RngStream(7)
    a = parent.generator().standard_normal(100)
    b = parent.child(0).generator().standard_normal(100)
    assert not np.array_equal(a, b)


def test_nested_child_path_matters():
    a = RngStream(7).child(1).child(2).generator().standard_normal(10)
    b = RngStream(7).child(1, 2).generator().standard_normal(10)
    np.testing.assert_array_equal(a, b)
    c = RngStream(7).child(2, 1).generator().standard_normal(10)
    assert not np.array_equal(a, c)


def test_as_stream_coerces_int():
    s = as_stream(42)
    assert isinstance(s, RngStream)
    assert s.seed == 42
    assert as_stream(s) is s


def test_seed_range_validated():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)
