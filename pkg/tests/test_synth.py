import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepca.synth import depth_dataset, depth_field_gen, dictionary_gen, sparse_code_gen


def test_dictionary_columns_and_coherence():
    D = dictionary_gen(16, 32, coherence=0.7, seed=1)
    assert D.shape == (16, 32)
    np.testing.assert_allclose(np.linalg.norm(D, axis=0), 1.0, atol=1e-12)
    G = np.abs(D.T @ D)
    np.testing.assert_allclose(G[:16, :16], np.eye(16), atol=1e-12)
    np.testing.assert_allclose(np.diag(G[:16, 16:]), 0.7, atol=1e-12)


def test_dictionary_validation():
    with pytest.raises(ValueError):
        dictionary_gen(4, 8, coherence=1.0)
    with pytest.raises(ValueError):
        dictionary_gen(0, 8)


def test_sparse_codes():
    np.testing.assert_array_equal(sparse_code_gen(10, 0.0, seed=3), np.zeros(10))
    c = sparse_code_gen(20, 0.25, seed=4, n=6)
    assert c.shape == (6, 20)
    np.testing.assert_array_equal((c > 0).sum(axis=1), 5)
    assert c[c > 0].min() >= 0.5 and c.max() <= 1.5
    with pytest.raises(ValueError):
        sparse_code_gen(5, 1.5)


def test_depth_mask_count_floor():
    t = depth_field_gen(28, 28, mask_density=0.1, seed=0)
    assert t.mask.sum() == 78
    np.testing.assert_array_equal(t.observed[t.mask], t.field[t.mask])
    assert np.all(t.observed[~t.mask] == 0.0)
    with pytest.raises(ValueError):
        depth_field_gen(4, 4, mask_density=0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_generators_deterministic(seed):
    a = depth_field_gen(12, 9, seed=seed)
    b = depth_field_gen(12, 9, seed=seed)
    assert a.field.tobytes() == b.field.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    assert dictionary_gen(5, 9, 0.3, seed).tobytes() == dictionary_gen(5, 9, 0.3, seed).tobytes()
    assert sparse_code_gen(9, 0.3, seed).tobytes() == sparse_code_gen(9, 0.3, seed).tobytes()


def test_depth_noise_only_touches_observations():
    t = depth_field_gen(10, 10, noise=0.05, seed=2)
    assert np.all(t.observed[~t.mask] == 0.0)
    assert np.any(t.observed[t.mask] != t.field[t.mask])


def test_depth_dataset_layout():
    inputs, field, mask, observed = depth_dataset(3, 8, 8, seed=5)
    assert inputs.shape == (3, 2, 8, 8) and field.shape == (3, 1, 8, 8)
    np.testing.assert_array_equal(inputs[:, 1:], mask.astype(float))
    np.testing.assert_array_equal(inputs[:, :1], observed)
    assert not np.array_equal(mask[0], mask[1])
