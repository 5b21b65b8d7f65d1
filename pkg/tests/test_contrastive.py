import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emforge import numerics as nx
from emforge.contrastive import TrainBatch, build_score_matrix, info_nce, log_similarity, similarity
from emforge.numerics import GradTape, Tensor

from oracles import central_diff, info_nce_per_query, max_rel_err


def unit_rows(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_similarity_examples():
    e = np.array([1.0, 0.0, 0.0])
    assert similarity(e, e, 0.02) == pytest.approx(math.exp(50), rel=1e-12)
    assert similarity(e, np.array([0.0, 1.0, 0.0]), 0.3) == 1.0
    assert similarity(e, -e, 0.02) == pytest.approx(math.exp(-50), rel=1e-12)
    assert log_similarity(e, e, 0.02) == pytest.approx(50.0, rel=1e-15)


def test_similarity_errors():
    with pytest.raises(ValueError, match="zero"):
        similarity(np.zeros(3), np.ones(3), 1.0)
    with pytest.raises(ValueError, match="temperature"):
        similarity(np.ones(3), np.ones(3), 0.0)


def test_single_pair_without_negatives_is_zero():
    q = Tensor(np.array([[1.0, 0.0]]))
    with pytest.warns(RuntimeWarning, match="empty negative set"):
        lv = info_nce(TrainBatch(q, q, None, 0.02))
    assert lv.value == 0.0


def test_uniform_scores_give_log_four():
    # every query is orthogonal to every target, so all cosines are 0
    eye = np.eye(5)
    q = Tensor(np.tile(eye[4:], (4, 1)))
    t = Tensor(eye[:4])
    assert info_nce(TrainBatch(q, t, None, 0.1)).value == pytest.approx(math.log(4), abs=1e-12)


@pytest.mark.parametrize("n_pairs,k", [(2, 0), (3, 2), (5, 0), (1, 7), (4, 3)])
def test_uniform_scores_give_log_n_exactly(n_pairs, k):
    d = n_pairs * (k + 1) + 1
    basis = np.eye(d)
    q = Tensor(np.tile(basis[-1:], (n_pairs, 1)))
    t = Tensor(basis[:n_pairs])
    hard = Tensor(basis[n_pairs:n_pairs * (k + 1)].reshape(n_pairs, k, d)) if k else None
    lv = info_nce(TrainBatch(q, t, hard, 0.02))
    assert abs(lv.value - math.log(n_pairs + k)) <= 1e-12


def test_one_negative_scalar_case():
    q = Tensor(np.array([[1.0, 0.0]]))
    t = Tensor(np.array([[1.0, 0.0]]))
    hard = Tensor(np.array([[[0.0, 1.0]]]))
    lv = info_nce(TrainBatch(q, t, hard, 1.0))
    assert lv.value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert lv.value == pytest.approx(0.313262, abs=1e-6)


def test_score_matrix_layout():
    q = Tensor(np.eye(2))
    s = build_score_matrix(q, q, None, 0.5).data
    np.testing.assert_array_equal(s, [[2.0, 0.0], [0.0, 2.0]])
    rng = np.random.default_rng(0)
    hard = Tensor(unit_rows(rng, 2, 3, 2))
    assert build_score_matrix(q, q, hard, 0.5).shape == (2, 5)


def test_score_matrix_shape_mismatch():
    with pytest.raises(ValueError):
        build_score_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), None, 1.0)
    with pytest.raises(ValueError):
        TrainBatch(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_matches_per_query_oracle(seed, k):
    rng = np.random.default_rng(seed)
    q, t = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    hard = rng.normal(size=(4, k, 6)) if k else None
    lv = info_nce(TrainBatch(Tensor(q), Tensor(t), None if hard is None else Tensor(hard), 0.5))
    assert abs(lv.value - info_nce_per_query(q, t, 0.5, hard)) <= 1e-12


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    q, t = unit_rows(rng, 6, 8), unit_rows(rng, 6, 8)
    perm = rng.permutation(6)
    a = info_nce(TrainBatch(Tensor(q), Tensor(t), None, 0.05)).value
    b = info_nce(TrainBatch(Tensor(q[perm]), Tensor(t[perm]), None, 0.05)).value
    assert a == pytest.approx(b, rel=1e-12)


def test_monotone_in_positive_score():
    # raising s_ii with every other score fixed lowers the loss
    rng = np.random.default_rng(2)
    scores = rng.normal(size=(4, 4))
    from emforge.contrastive import info_nce_scores

    base = info_nce_scores(Tensor(scores)).item()
    for delta in (1e-3, 0.1, 1.0):
        bumped = scores.copy()
        bumped[1, 1] += delta
        assert info_nce_scores(Tensor(bumped)).item() < base


def test_gradient_wrt_embeddings_matches_finite_differences():
    rng = np.random.default_rng(3)
    arrays = {"q": rng.normal(size=(3, 4)), "t": rng.normal(size=(3, 4)), "h": rng.normal(size=(3, 2, 4))}

    def loss(a):
        return info_nce(TrainBatch(Tensor(a["q"]), Tensor(a["t"]), Tensor(a["h"]), 0.2)).loss

    tensors = {k: Tensor(v) for k, v in arrays.items()}
    with GradTape() as tape:
        tape.watch(tensors)
        out = info_nce(TrainBatch(tensors["q"], tensors["t"], tensors["h"], 0.2)).loss
    grads = nx.grad(out, tape, tensors)
    for name, value in arrays.items():
        num = central_diff(lambda v, name=name: loss({**arrays, name: v}).item(), value)
        assert max_rel_err(grads[name], num) <= 1e-4


def test_loss_is_non_negative():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert info_nce(TrainBatch(Tensor(q), Tensor(t), None, 0.02)).value >= 0
