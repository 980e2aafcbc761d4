import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matrrec import evaluation as ev
from matrrec import model as M
from matrrec.data import Split
from matrrec.errors import ContractError


def brute_rank(scores, target, eligible):
    """Position of the target in an explicit sort of eligible items (ties: smaller id first)."""
    items = [j + 1 for j in range(len(scores)) if eligible[j]]
    ordered = sorted(items, key=lambda i: (-scores[i - 1], i))
    return ordered.index(target) + 1


def brute_recall(ranks, k):
    return sum(1 for r in ranks if r <= k) / len(ranks)


def brute_ndcg(ranks, k):
    return sum((1 / math.log2(r + 1)) if r <= k else 0.0 for r in ranks) / len(ranks)


def test_unique_max_is_rank_one():
    assert ev.rank_of_targets(np.array([[0.1, 0.7, 0.3]]), np.array([2])).tolist() == [1]


def test_rank_example():
    assert ev.rank_of_targets(np.array([[0.2, 0.9, 0.5]]), np.array([3])).tolist() == [2]


def test_exclusion_improves_rank_by_one():
    scores = np.array([[0.2, 0.9, 0.5]])
    eligible = np.array([[True, False, True]])
    assert ev.rank_of_targets(scores, np.array([3]), eligible).tolist() == [1]


def test_ties_go_to_smaller_id():
    tri = np.full((3, 3), 0.5)
    assert ev.rank_of_targets(tri, np.array([1, 2, 3])).tolist() == [1, 2, 3]


def test_excluded_target_is_contract_error():
    with pytest.raises(ContractError):
        ev.rank_of_targets(np.array([[0.1, 0.2]]), np.array([2]), np.array([[True, False]]))


def test_recall_examples():
    assert ev.recall_at_k(np.array([1, 3, 10]), 10) == 1.0
    assert ev.recall_at_k(np.array([1, 15]), 10) == 0.5
    assert ev.recall_at_k(np.array([7]), 7) == 1.0


def test_ndcg_examples():
    assert ev.ndcg_at_k(np.array([1]), 10) == 1.0
    assert ev.ndcg_at_k(np.array([3]), 10) == 0.5
    assert ev.ndcg_at_k(np.array([11]), 10) == 0.0


def test_metric_errors():
    with pytest.raises(ContractError):
        ev.recall_at_k(np.array([], dtype=int), 5)
    with pytest.raises(ContractError):
        ev.ndcg_at_k(np.array([], dtype=int), 5)
    with pytest.raises(ContractError):
        ev.recall_at_k(np.array([1]), 0)


instance = st.integers(1, 20).flatmap(lambda U: st.integers(2, 50).flatmap(lambda V: st.tuples(
    st.lists(st.lists(st.integers(-3, 3), min_size=V, max_size=V), min_size=U, max_size=U),
    st.lists(st.integers(1, V), min_size=U, max_size=U),
    st.lists(st.lists(st.booleans(), min_size=V, max_size=V), min_size=U, max_size=U),
    st.integers(1, V + 2),
)))


@settings(max_examples=200, deadline=None)
@given(instance)
def test_matches_brute_force(inst):
    scores, targets, elig, k = inst
    scores = np.array(scores, dtype=float) / 2
    elig = np.array(elig)
    targets = np.array(targets)
    elig[np.arange(len(targets)), targets - 1] = True
    ranks = ev.rank_of_targets(scores, targets, elig)
    want = [brute_rank(scores[u], targets[u], elig[u]) for u in range(len(targets))]
    assert ranks.tolist() == want
    assert ev.recall_at_k(ranks, k) == brute_recall(want, k)
    assert ev.ndcg_at_k(ranks, k) == pytest.approx(brute_ndcg(want, k), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(5, 12))
    targets = rng.integers(1, 13, size=5)
    a = ev.rank_of_targets(scores, targets)
    b = ev.rank_of_targets(np.exp(3 * scores) + 1, targets)
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=30), st.integers(1, 40))
def test_hit_rate_equals_recall(ranks, k):
    r = np.array(ranks)
    assert ev.hit_rate_at_k(r, k) == ev.recall_at_k(r, k)


# --- model-level evaluation -------------------------------------------------------------


def small_model(V=30):
    return M.build_model(M.MaTrRecConfig(vocab_size=V, d_model=8, d_state=4, max_len=10, dropout=0.0))


def test_full_rank_matches_direct_scoring():
    rng = np.random.default_rng(0)
    model = small_model()
    part = [(rng.integers(1, 31, size=int(n)).tolist(), int(t))
            for n, t in zip(rng.integers(1, 14, size=25), rng.integers(1, 31, size=25))]
    ranks = ev.full_rank(model, part, exclusion=True, batch_size=7, chunk=3)
    for (prefix, target), r in zip(part, ranks):
        p = prefix[-10:]
        logits = M.forward(model, np.array([p])).data[0, -1]
        elig = np.ones(30, bool)
        elig[np.array(prefix) - 1] = False
        elig[target - 1] = True
        assert r == brute_rank(logits, target, elig)


def test_exclusion_never_hurts():
    rng = np.random.default_rng(1)
    model = small_model()
    part = [(rng.integers(1, 31, size=6).tolist(), int(t)) for t in rng.integers(1, 31, size=20)]
    assert np.all(ev.full_rank(model, part, True) <= ev.full_rank(model, part, False))


def test_untrained_model_is_near_random():
    V, hits = 500, []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = M.build_model(M.MaTrRecConfig(vocab_size=V, d_model=8, d_state=4, max_len=10, seed=seed))
        part = [(rng.integers(1, V + 1, size=5).tolist(), int(t)) for t in rng.integers(1, V + 1, size=200)]
        hits.append(ev.recall_at_k(ev.full_rank(model, part, False), 10))
    assert np.mean(hits) < 0.06  # chance is 10/500 = 0.02


def test_report_monotone_and_deterministic():
    rng = np.random.default_rng(2)
    seqs = [rng.integers(1, 31, size=7).tolist() for _ in range(30)]
    split = Split(list(range(30)), [s[:-2] for s in seqs], [(s[:-2], s[-2]) for s in seqs],
                  [(s[:-1], s[-1]) for s in seqs])
    model = small_model()
    a = ev.evaluate(model, split, "test", ks=(1,))
    b = ev.evaluate(model, split, "test", ks=(1,))
    assert a.to_json(timing=False) == b.to_json(timing=False)
    assert set(a.metrics) >= {"recall@1", "recall@5", "recall@10", "recall@20", "ndcg@10"}
    ev.assert_monotone(a)
    assert a.to_csv().splitlines()[0] == ",".join(ev.CSV_COLUMNS)
    with pytest.raises(ContractError):
        ev.evaluate(model, split, "train")
