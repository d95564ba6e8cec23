import math

import numpy as np
import pytest

from palora.adapters import AdapterBank, full_mask, init_adapters_for, sample_mask_pair
from palora.model import Dataset, TaskSpec, accuracy, make_dataset
from palora.optim import AdamWState, adamw_step, cosine_lr
from palora.training import (
    RunRecord,
    TrainConfig,
    few_shot_sample,
    multi_task_train,
    summarize,
    sweep,
    top_k_by_validation,
    train_adapters,
)
from palora.tensor import ContractError


@pytest.fixture(scope="module")
def split(small_model):
    spec = TaskSpec("rotated_mixture", 3, 8, 0.7, seed=3, rotation=0.4)
    pool = make_dataset(spec, 30, seed=5)
    test = make_dataset(spec, 100, seed=6)
    train, val = few_shot_sample(pool, 8, seed=0)
    return train, val, test


def test_few_shot_counts_and_disjointness():
    y = np.repeat(np.arange(3), 10)
    data = Dataset(np.arange(30.0)[None, :], y)
    train, val = few_shot_sample(data, 4, seed=2)
    assert np.bincount(train.y).tolist() == [4, 4, 4]
    assert np.bincount(val.y).tolist() == [4, 4, 4]
    assert not set(train.x[0]) & set(val.x[0])
    again, _ = few_shot_sample(data, 4, seed=2)
    assert np.array_equal(again.x, train.x)
    with pytest.raises(ContractError):
        few_shot_sample(data, 6, seed=0)


def test_adamw_two_step_hand_trace():
    p = {"w": np.array([[1.0]])}
    g = {"w": np.array([[0.5]])}
    st = AdamWState()
    lr, wd, eps = 0.1, 0.01, 1e-8
    adamw_step(p, g, st, lr, weight_decay=wd)
    # first step: bias-corrected m = g, v = g^2
    want = 1.0 - (lr * 0.5 / (0.5 + eps) + lr * wd * 1.0)
    assert p["w"][0, 0] == pytest.approx(want, rel=1e-15, abs=1e-15)
    adamw_step(p, g, st, lr, weight_decay=wd)
    m = (0.9 * 0.05 + 0.05) / (1 - 0.9**2)
    v = (0.999 * 0.00025 + 0.00025) / (1 - 0.999**2)
    want2 = want - (lr * m / (math.sqrt(v) + eps) + lr * wd * want)
    assert p["w"][0, 0] == pytest.approx(want2, rel=1e-14)


def test_adamw_zero_gradient_is_pure_decay():
    p = {"w": np.array([[2.0, -4.0]])}
    adamw_step(p, {"w": np.zeros((1, 2))}, AdamWState(), 0.1, weight_decay=0.5)
    assert np.allclose(p["w"], [[2.0 * 0.95, -4.0 * 0.95]], rtol=0, atol=1e-15)
    q = {"w": np.array([[3.0]])}
    adamw_step(q, {"w": np.zeros((1, 1))}, AdamWState(), 0.1)
    assert q["w"][0, 0] == 3.0


def test_adamw_frozen_entries_untouched():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 4))
    frozen = w.copy()
    keep = np.zeros((3, 4))
    keep[1] = 1
    p = {"w": w}
    st = AdamWState()
    for _ in range(5):
        adamw_step(p, {"w": rng.standard_normal((3, 4))}, st, 0.05, weight_decay=0.1, trainable={"w": keep})
    assert np.array_equal(w[[0, 2]], frozen[[0, 2]])
    assert not np.array_equal(w[1], frozen[1])


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros((2, 2))}, {"w": np.zeros((2, 1))}, AdamWState(), 0.1)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, rel=1e-15)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, rel=1e-15)
    assert cosine_lr(150, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(3, 0, 2e-3) == 2e-3


def test_config_rejects_bad_values():
    for kw in ({"learning_rate": 0.0}, {"epochs": -1}, {"early_stop_patience": 0},
               {"scheduler": "step"}, {"batch_size": 0}):
        with pytest.raises(ContractError):
            TrainConfig(**kw)


def test_zero_epochs_leaves_adapters_alone(small_model, split):
    train, val, test = split
    ad = init_adapters_for(small_model, 2, seed=1)
    before = [(a.B.copy(), a.A.copy()) for a in ad]
    rec = train_adapters(small_model, ad, None, train, val, TrainConfig(epochs=0), test=test)
    for a, (B, A) in zip(ad, before):
        assert np.array_equal(a.B, B) and np.array_equal(a.A, A)
    assert rec.train_loss == [] and rec.best_epoch == 0
    # B = 0 at init, so the adapted model is the frozen one
    assert rec.test_acc == accuracy(small_model, None, test)


def test_dense_training_beats_frozen_model(small_model, split):
    train, val, test = split
    frozen = accuracy(small_model, None, test)
    ad = init_adapters_for(small_model, 2, seed=1)
    rec = train_adapters(small_model, ad, None, train, val, TrainConfig(learning_rate=1e-2, epochs=150), test=test)
    assert rec.status == "ok"
    assert rec.test_acc >= frozen + 0.05
    assert rec.train_loss[-1] < rec.train_loss[0]


def test_masked_entries_bitwise_unchanged(small_model, split):
    train, val, _ = split
    ad = init_adapters_for(small_model, 2, seed=3)
    masks = [sample_mask_pair(m, n, 0.5, 0.5, seed=l) for l, (m, n) in enumerate(small_model.dims)]
    before = [(a.B.copy(), a.A.copy()) for a in ad]
    train_adapters(small_model, ad, masks, train, val, TrainConfig(learning_rate=1e-2, epochs=30, weight_decay=0.1))
    moved = False
    for a, u, (B, A) in zip(ad, masks, before):
        off_rows = u.u_row == 0
        off_cols = u.u_col == 0
        assert np.array_equal(a.B[off_rows], B[off_rows])
        assert np.array_equal(a.A[:, off_cols], A[:, off_cols])
        moved |= not np.array_equal(a.B, B)
    assert moved


def test_training_is_deterministic(small_model, split):
    train, val, test = split
    cfg = TrainConfig(learning_rate=5e-3, epochs=20, batch_size=7, seed=4)
    outs = []
    for _ in range(2):
        ad = init_adapters_for(small_model, 2, seed=4)
        rec = train_adapters(small_model, ad, None, train, val, cfg, test=test)
        outs.append((rec.to_json(include_time=False), [a.B.tobytes() + a.A.tobytes() for a in ad]))
    assert outs[0] == outs[1]


def test_small_lr_loss_decreases(small_model, split):
    train, val, _ = split
    ad = init_adapters_for(small_model, 2, seed=0)
    rec = train_adapters(small_model, ad, None, train, val,
                         TrainConfig(learning_rate=1e-4, epochs=10, early_stop_patience=50))
    assert all(np.isfinite(rec.train_loss))
    assert rec.train_loss[-1] <= rec.train_loss[0]


def test_early_stopping_and_restore(small_model, split):
    train, val, _ = split
    ad = init_adapters_for(small_model, 2, seed=0)
    rec = train_adapters(small_model, ad, None, train, val,
                         TrainConfig(learning_rate=5e-2, epochs=400, early_stop_patience=3))
    assert len(rec.val_acc) <= 400
    assert len(rec.val_acc) - rec.best_epoch <= 3 or rec.best_epoch == 0
    assert rec.best_val_acc == max([rec.best_val_acc] + rec.val_acc)


def test_shape_checks(small_model, split):
    train, val, _ = split
    ad = init_adapters_for(small_model, 2)
    with pytest.raises(ContractError):
        train_adapters(small_model, ad[:-1], None, train, val, TrainConfig(epochs=1))


def test_multi_task_single_matches_train_adapters(small_model, split):
    train, val, test = split
    cfg = TrainConfig(learning_rate=5e-3, epochs=15, batch_size=8, seed=2)
    masks = [full_mask(m, n) for m, n in small_model.dims]
    a1 = init_adapters_for(small_model, 2, seed=2)
    r1 = train_adapters(small_model, a1, masks, train, val, cfg, test=test, method="multi", name="t")
    bank = AdapterBank()
    a2 = init_adapters_for(small_model, 2, seed=2)
    bank.add("t", a2, masks)
    r2 = multi_task_train(small_model, bank, {"t": (train, val, test)}, cfg)["t"]
    assert r1.to_json(include_time=False) == r2.to_json(include_time=False)
    for x, y in zip(a1, a2):
        assert np.array_equal(x.B, y.B) and np.array_equal(x.A, y.A)


def test_multi_task_identical_tasks_give_identical_adapters(small_model, split):
    train, val, test = split
    bank = AdapterBank()
    bank.add("a", init_adapters_for(small_model, 2, seed=1))
    bank.add("b", init_adapters_for(small_model, 2, seed=1))
    recs = multi_task_train(small_model, bank, {"a": split, "b": split}, TrainConfig(learning_rate=5e-3, epochs=10))
    for x, y in zip(bank["a"][0], bank["b"][0]):
        assert np.array_equal(x.B, y.B) and np.array_equal(x.A, y.A)
    assert recs["a"].test_acc == recs["b"].test_acc
    with pytest.raises(ContractError):
        multi_task_train(small_model, bank, {"a": split}, TrainConfig(epochs=1))


def _rec(method, val, test, params=10):
    return RunRecord(config={"learning_rate": 1e-3}, method=method, best_val_acc=val, test_acc=test,
                     trainable_params=params)


def test_top_k_and_summary():
    recs = [_rec("a", 0.5, 0.1), _rec("a", 0.9, 0.2), _rec("a", 0.9, 0.3), _rec("b", 0.7, 0.4)]
    assert [r.test_acc for r in top_k_by_validation(recs[:3], 2)] == [0.2, 0.3]
    s = summarize(recs, 2)
    assert s["a"]["mean_test_acc"] == pytest.approx(0.25) and s["a"]["runs"] == 3 and s["a"]["top_k"] == 2
    assert s["b"]["top_k"] == 1 and s["b"]["std_test_acc"] == 0.0


def test_sweep_grid_and_csv():
    calls = []

    def run(cfg, seed):
        calls.append((cfg["lr"], seed))
        return _rec("m", val=cfg["lr"] * 100 + seed, test=seed)

    s = sweep(run, [{"lr": 1e-3}, {"lr": 5e-3}], [0, 1], top_k=1)
    assert calls == [(1e-3, 0), (1e-3, 1), (5e-3, 0), (5e-3, 1)]
    assert s.groups["m"]["mean_test_acc"] == 1
    csv_text = s.to_csv(include_time=False)
    assert csv_text.splitlines()[0] == "method,dataset,seed,lr,val_acc,test_acc,params"
    assert len(csv_text.splitlines()) == 5
    with pytest.raises(ContractError):
        sweep(run, [{"lr": 1e-3}], [0], top_k=0)


def test_record_json_round_trip():
    r = _rec("partial", 0.8, 0.75)
    r.train_loss = [1.0, 0.5]
    assert RunRecord.from_json(r.to_json()) == r
    assert "wall_time" not in r.to_json(include_time=False)
