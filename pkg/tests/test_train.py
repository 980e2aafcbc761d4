import dataclasses
import math

import numpy as np
import pytest

from matrrec import model as M
from matrrec import numerics as nx
from matrrec import train as tr
from matrrec.data import Batch, Split, make_batches
from matrrec.errors import ConfigError, ContractError, TrainingDivergence
from matrrec.numerics import Tensor


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- loss ---------------------------------------------------------------------------


def test_uniform_logits_give_log_v():
    loss = tr.cross_entropy_loss(T(np.zeros((1, 1, 10))), np.array([[3]]))
    assert float(loss.data) == pytest.approx(math.log(10), abs=1e-12)
    assert round(float(loss.data), 4) == 2.3026


def test_saturated_logit():
    z = np.zeros((1, 1, 10))
    z[0, 0, 4] = 30
    assert float(tr.cross_entropy_loss(T(z), np.array([[5]])).data) < 1e-9


def test_mean_over_valid_positions():
    z = np.zeros((1, 3, 10))
    z[0, 1, 0] = 1e4
    loss = tr.cross_entropy_loss(T(z), np.array([[7, 1, 0]]))
    assert round(float(loss.data), 4) == 1.1513


def test_no_targets_is_contract_error():
    with pytest.raises(ContractError):
        tr.cross_entropy_loss(T(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int))


def test_loss_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    z = T(rng.normal(size=(1, 2, 5)), True)
    tape = nx.Tape()
    with tape:
        loss = tr.cross_entropy_loss(z, np.array([[2, 5]]))
    nx.backward(tape, loss)
    p = np.exp(z.data) / np.exp(z.data).sum(-1, keepdims=True)
    want = p.copy()
    want[0, 0, 1] -= 1
    want[0, 1, 4] -= 1
    np.testing.assert_allclose(z.grad, want / 2, rtol=1e-12)


# --- Adam ----------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = T([1.0, -2.0], True)
    p.grad = np.zeros(2)
    tr.adam_step([p], tr.AdamState.for_params([p]), tr.TrainConfig())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    p = T([0.0, 0.0, 0.0], True)
    p.grad = np.array([3.0, -0.5, 1e-3])
    tr.adam_step([p], tr.AdamState.for_params([p]), tr.TrainConfig(lr=0.01))
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_reference_trajectory():
    rng = np.random.default_rng(1)
    grads = rng.normal(size=(5, 3))
    cfg = tr.TrainConfig(lr=0.1)
    p = T(np.zeros(3), True)
    state = tr.AdamState.for_params([p])
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g
        tr.adam_step([p], state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_clip_gradients_rescales():
    p = T([0.0, 0.0], True)
    p.grad = np.array([3.0, 4.0])
    assert tr.clip_gradients([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(betas=(0.9, 1.0)).validate()


# --- training loop -----------------------------------------------------------------------


def small_model(V=20, **kw):
    base = dict(vocab_size=V, d_model=16, d_state=4, max_len=12, dropout=0.0)
    base.update(kw)
    return M.build_model(M.MaTrRecConfig(**base))


def random_split(V=20, n=24, L=8, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, V + 1, size=L).tolist() for _ in range(n)]
    return Split(list(range(n)), [s[:-2] for s in seqs], [(s[:-2], s[-2]) for s in seqs],
                 [(s[:-1], s[-1]) for s in seqs])


def test_initial_loss_near_log_v():
    V = 200
    model = small_model(V)
    (batch,) = make_batches(random_split(V).train, 12, 64)
    loss = float(tr.batch_loss(model, batch, False, None).data)
    assert abs(loss - math.log(V)) / math.log(V) < 0.05


@pytest.mark.parametrize("seed", range(10))
def test_one_small_step_decreases_loss(seed):
    model = small_model(seed=seed)
    (batch,) = make_batches(random_split(seed=seed).train, 12, 64)
    before = tr.accumulate_gradients(model, batch, 256, False, None)
    tr.adam_step(model.parameters(), tr.AdamState.for_params(model.parameters()), tr.TrainConfig(lr=1e-4))
    model.zero_grad()
    assert float(tr.batch_loss(model, batch, False, None).data) < before


def test_micro_batches_sum_to_full_batch_gradient():
    model = small_model(dtype="float64")
    (batch,) = make_batches(random_split().train, 12, 64)
    full = tr.accumulate_gradients(model, batch, 1000, False, None)
    g_full = [p.grad.copy() for p in model.parameters()]
    model.zero_grad()
    split = tr.accumulate_gradients(model, batch, 5, False, None)
    assert split == pytest.approx(full, rel=1e-12)
    for a, p in zip(g_full, model.parameters()):
        np.testing.assert_allclose(p.grad, a, rtol=1e-9, atol=1e-14)


def test_max_epochs_zero_leaves_initialisation():
    model = small_model()
    init = model.state()
    report = tr.fit(model, random_split(), tr.TrainConfig(max_epochs=0))
    assert report.epoch_loss == [] and report.best_epoch == 0
    assert all(np.array_equal(a, b) for a, b in zip(init, model.state()))


def test_patience_stops_after_constant_metric():
    # lr so small that validation ranks never move: epoch 1 is best, then `patience` more epochs run
    model = small_model()
    report = tr.fit(model, random_split(), tr.TrainConfig(lr=1e-12, max_epochs=50, patience=3))
    assert report.best_epoch == 1
    assert len(report.epoch_loss) == 1 + 3
    assert report.stop_reason == "patience"


def test_fit_restores_best_epoch_exactly():
    from matrrec.evaluation import evaluate_part

    split = random_split(n=40)
    model = small_model()
    report = tr.fit(model, split, tr.TrainConfig(lr=3e-3, max_epochs=8, patience=2, batch_size=16))
    again = evaluate_part(model, split.valid, ks=(5, 10, 20))
    assert again == report.valid_metrics[report.best_epoch - 1]


def test_fit_is_deterministic():
    split = random_split()
    cfg = tr.TrainConfig(lr=3e-3, max_epochs=3, batch_size=8)
    a, b = small_model(dropout=0.3), small_model(dropout=0.3)
    ra, rb = tr.fit(a, split, cfg), tr.fit(b, split, cfg)
    assert ra.to_json(timing=False) == rb.to_json(timing=False)
    assert all(np.array_equal(x, y) for x, y in zip(a.state(), b.state()))


def test_divergence_is_reported():
    model = small_model()
    model.head_b.data[0] = np.nan
    with pytest.raises(TrainingDivergence):
        tr.fit(model, random_split(), tr.TrainConfig(max_epochs=1))


def test_empty_split_rejected():
    with pytest.raises(ContractError):
        tr.fit(small_model(), Split([], [], [], []), tr.TrainConfig())
