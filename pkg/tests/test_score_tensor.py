import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semattn.errors import FormatError, ShapeError
from semattn.score_tensor import SemanticScoreTensor, densify, sparsify


def pixel(values, L=None):
    """1x1 dense tensor from a flat value list."""
    arr = np.asarray(values, dtype=np.float32).reshape(1, 1, -1)
    return arr


class TestSparsify:
    def test_top3_selection(self):
        sp = sparsify(pixel([0.40, 0.30, 0.10, 0.15, 0.05]))
        kept = dict(zip(sp.labels[0, 0].tolist(), sp.scores[0, 0].tolist()))
        assert kept == pytest.approx({0: 0.40, 1: 0.30, 3: 0.15})

    def test_uniform_tie_breaks_to_lowest_labels(self):
        sp = sparsify(pixel([0.2] * 5))
        assert sorted(sp.labels[0, 0].tolist()) == [0, 1, 2]
        npt.assert_allclose(sp.scores[0, 0], 0.2)

    def test_one_hot_pads_with_lowest_remaining_indices(self):
        vec = np.zeros(6, dtype=np.float32)
        vec[4] = 1.0
        sp = sparsify(pixel(vec))
        assert sp.labels[0, 0].tolist() == [4, 0, 1]
        npt.assert_allclose(sp.scores[0, 0], [1.0, 0.0, 0.0])

    def test_small_label_space_survives(self):
        sp = sparsify(pixel([0.7, 0.3]))
        assert sp.num_classes == 2
        nz = dict(
            (l, s)
            for l, s in zip(sp.labels[0, 0].tolist(), sp.scores[0, 0].tolist())
            if s > 0
        )
        assert nz == pytest.approx({0: 0.7, 1: 0.3})
        sp.validate()

    def test_scores_nonincreasing(self):
        rng = np.random.default_rng(7)
        sp = sparsify(rng.random((5, 4, 9), dtype=np.float32))
        assert (sp.scores[..., :-1] >= sp.scores[..., 1:]).all()
        sp.validate()

    def test_negative_scores_rejected(self):
        with pytest.raises(ShapeError):
            sparsify(pixel([0.5, -0.1, 0.2]))


class TestDensify:
    def test_placement(self):
        sp = sparsify(pixel([0.40, 0.30, 0.0, 0.15, 0.0]))
        npt.assert_allclose(densify(sp)[0, 0], [0.40, 0.30, 0.0, 0.15, 0.0])

    def test_all_zero_scores_give_zero_vector(self):
        sp = SemanticScoreTensor(
            labels=np.zeros((1, 1, 3), dtype=np.int64),
            scores=np.zeros((1, 1, 3), dtype=np.float32),
            num_classes=4,
        )
        npt.assert_array_equal(densify(sp), np.zeros((1, 1, 4)))

    def test_label_out_of_range_rejected(self):
        sp = sparsify(pixel([0.4, 0.3, 0.2, 0.1]))
        sp.num_classes = 2
        with pytest.raises(FormatError):
            densify(sp)

    def test_round_trip_preserves_kept_mass(self):
        rng = np.random.default_rng(123)
        for _ in range(20):
            h, w, L = rng.integers(1, 6), rng.integers(1, 6), rng.integers(3, 12)
            dense = rng.random((h, w, L)).astype(np.float32)
            sp = sparsify(dense)
            back = densify(sp)
            # nonzeros exactly at the top-3 positions, original values kept
            order = np.argsort(-dense, axis=2, kind="stable")
            for i in range(h):
                for j in range(w):
                    top = set(order[i, j, :3].tolist())
                    for l in range(L):
                        if l in top:
                            assert back[i, j, l] == dense[i, j, l]
                        else:
                            assert back[i, j, l] == 0.0


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(3, 10),
    st.integers(0, 2**31 - 1),
)
def test_sparsify_idempotent(h, w, L, seed):
    dense = np.random.default_rng(seed).random((h, w, L)).astype(np.float32)
    once = sparsify(dense)
    twice = sparsify(densify(once))
    npt.assert_array_equal(once.labels, twice.labels)
    npt.assert_array_equal(once.scores, twice.scores)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 10), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_nonzero_count_after_sparsify(L, zero_count, seed):
    rng = np.random.default_rng(seed)
    vec = rng.random(L).astype(np.float32) + 0.01
    zero_positions = rng.choice(L, size=min(zero_count, L), replace=False)
    vec[zero_positions] = 0.0
    sp = sparsify(vec.reshape(1, 1, -1))
    expected = min(3, int((vec > 0).sum()))
    assert int((sp.scores > 0).sum()) == expected
