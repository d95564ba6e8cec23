import math

import mpmath as mp
import numpy as np
import pytest

from oracles import mp_epsilon, mp_rho, mp_width
from palora.slt import (
    EXHAUSTIVE_LIMIT,
    FactorPair,
    SltConfig,
    all_masks,
    empirical_approximation,
    epsilon_l,
    feature_l1_bound,
    matrix_inf_norm,
    max_error,
    rho,
    theorem_widths,
    uniform_factors,
    width_bound,
    width_bound_value,
    width_sweep,
)
from palora.tensor import ContractError

E = math.e



def rel(a, b):
    return abs(mp.mpf(a) - b) / abs(b)


def test_rho_trivial():
    assert rho(1.0, 1, 1 - 1 / E, 0.0, 1 / E, 0.5) == pytest.approx(1.0, rel=1e-14)
    base = rho(1.0, 5, 0.3, 0.5, 0.01, 0.1)
    assert rho(2.0, 5, 0.3, 0.5, 0.01, 0.1) == pytest.approx(2 * base, rel=1e-15)


def test_epsilon_trivial():
    assert epsilon_l(0.5, 1, 2, 0.0, []) == pytest.approx(0.2, rel=1e-15)
    vals = [epsilon_l(0.1, 2, 4, 1.0, [1.0, v]) for v in (0.5, 1.0, 2.0, 8.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_width_trivial():
    # log(1/(1-p)) = 1 and log(1/min(.)) = 1
    assert width_bound(7, 1 - 1 / E, 1 / E, 0.9, 1.0) == 7
    seq = [width_bound(n, 0.4, 0.01, 0.1, 3.0) for n in range(1, 30)]
    assert all(a <= b for a, b in zip(seq, seq[1:]))


def test_calculators_match_high_precision_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        C = rng.uniform(0.1, 10)
        N = int(rng.integers(1, 10_000))
        p = rng.uniform(0.01, 0.99)
        g = rng.uniform(0, 2)
        e = rng.uniform(1e-6, 0.9)
        d = rng.uniform(1e-3, 0.9)
        r = rho(C, N, p, g, e, d)
        assert rel(r, mp_rho(C, N, p, g, e, d)) < 1e-10

        L = int(rng.integers(2, 6))
        norms = rng.uniform(0, 5, size=int(rng.integers(0, L - 1))).tolist()
        eps, n, B = rng.uniform(0.01, 0.99), int(rng.integers(1, 64)), rng.uniform(0, 10)
        assert rel(epsilon_l(eps, n, L, B, norms), mp_epsilon(eps, n, L, B, norms)) < 1e-10

        nT = int(rng.integers(1, 100))
        el = rng.uniform(1e-6, 0.5)
        rv = rng.uniform(1.5, 1e4)
        want = mp_width(nT, p, el, d, rv, C)
        assert rel(width_bound_value(nT, p, el, d, rv, C), want) < 1e-10
        got = width_bound(nT, p, el, d, rv, C)
        if abs(want - mp.nint(want)) > 1e-9:
            assert got == int(mp.ceil(want))


def test_calculator_domain_errors():
    with pytest.raises(ContractError):
        rho(1.0, 1, 1.0, 0.0, 0.1, 0.1)
    with pytest.raises(ContractError):
        rho(1.0, 1, 0.5, 0.0, 0.0, 0.1)
    with pytest.raises(ContractError):
        epsilon_l(0.1, 1, 1, 0.0, [])
    with pytest.raises(ContractError):
        epsilon_l(0.1, 1, 3, 0.0, [math.inf])
    with pytest.raises(ContractError):
        width_bound(3, 0.5, 0.0, 0.1, 1.0)
    with pytest.raises(ContractError):
        SltConfig(epsilon=1.0)
    with pytest.raises(ContractError):
        SltConfig(sparsities=(0.5, 1.0))


def test_theorem_widths_and_norm_helpers():
    cfg = SltConfig(epsilon=0.1, delta=0.1, sparsities=(0.5, 0.3), target_widths=(2, 3))
    w = theorem_widths(cfg, [1.0, 1.0], [1.0, 1.0], 3, 10)
    e0 = epsilon_l(0.1, 3, 2, 1.0, [])
    e1 = epsilon_l(0.1, 3, 2, 1.0, [])
    r = rho(1.0, 10, 0.3, 0.0, min(e0, e1), 0.1)
    assert w == [width_bound(2, 0.3, e0, 0.1, r), width_bound(3, 0.3, e1, 0.1, r)]
    assert matrix_inf_norm([[1, -2], [0.5, 0.5]]) == 3.0
    assert feature_l1_bound([[1, -3], [2, 0]]) == 3.0


def test_identical_adapter_gives_zero_error():
    rng = np.random.default_rng(0)
    t = uniform_factors(2, 2, 2, rng)
    X = rng.uniform(-1, 1, size=(2, 8))
    for search in ("exhaustive", "greedy"):
        res = empirical_approximation(t, t, X, search)
        assert res.best_error == pytest.approx(0.0, abs=1e-12)
    assert empirical_approximation(t, t, X, "greedy").density == 1.0


def test_zero_target_empty_mask():
    rng = np.random.default_rng(1)
    zero = FactorPair(np.zeros((2, 2)), np.zeros((2, 2)))
    wide = uniform_factors(2, 2, 3, rng)
    X = rng.uniform(-1, 1, size=(2, 5))
    res = empirical_approximation(zero, wide, X, "greedy", start="empty")
    assert res.best_error == 0.0 and res.density == 0.0
    assert empirical_approximation(zero, wide, X, "exhaustive").best_error == 0.0


def test_exhaustive_matches_brute_force_and_greedy_is_no_better():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        t = uniform_factors(2, 2, 1, rng)
        wide = uniform_factors(2, 2, 2, rng)
        X = rng.uniform(-1, 1, size=(2, 6))
        ex = empirical_approximation(t, wide, X, "exhaustive")
        brute = min(max_error(t.delta(), (wide.B * np.reshape(u[:4], (2, 2))) @ (wide.A * np.reshape(u[4:], (2, 2))), X)
                    for u in all_masks(8))
        assert ex.best_error == pytest.approx(brute, rel=1e-12, abs=1e-14)
        got = max_error(t.delta(), (wide.B * ex.mask_B) @ (wide.A * ex.mask_A), X)
        assert got == pytest.approx(ex.best_error, rel=1e-12, abs=1e-14)
        for start in ("full", "empty"):
            gr = empirical_approximation(t, wide, X, "greedy", start=start)
            assert gr.best_error >= ex.best_error - 1e-12
            assert max_error(t.delta(), (wide.B * gr.mask_B) @ (wide.A * gr.mask_A), X) == pytest.approx(
                gr.best_error, rel=1e-12, abs=1e-14)


def test_permuting_hidden_units_keeps_error():
    rng = np.random.default_rng(5)
    t = uniform_factors(2, 2, 1, rng)
    wide = uniform_factors(2, 2, 3, rng)
    X = rng.uniform(-1, 1, size=(2, 7))
    perm = np.array([2, 0, 1])
    pw = FactorPair(wide.B[:, perm], wide.A[perm])
    a = empirical_approximation(t, wide, X, "exhaustive")
    b = empirical_approximation(t, pw, X, "exhaustive")
    assert a.best_error == pytest.approx(b.best_error, rel=1e-12)
    moved = max_error(t.delta(), (pw.B * a.mask_B[:, perm]) @ (pw.A * a.mask_A[perm]), X)
    assert moved == pytest.approx(a.best_error, rel=1e-12)


def test_exhaustive_overflow_and_argument_errors():
    rng = np.random.default_rng(0)
    t = uniform_factors(3, 3, 2, rng)
    wide = uniform_factors(3, 3, 4, rng)  # 24 bits
    assert 24 > EXHAUSTIVE_LIMIT
    X = rng.uniform(-1, 1, size=(3, 4))
    with pytest.raises(ContractError):
        empirical_approximation(t, wide, X, "exhaustive")
    with pytest.raises(ContractError):
        empirical_approximation(t, wide, X, "anneal")
    with pytest.raises(ContractError):
        empirical_approximation(t, uniform_factors(2, 3, 4, rng), X)
    with pytest.raises(ContractError):
        empirical_approximation(t, wide, X[:2])


def test_width_sweep_csv_and_determinism():
    a = width_sweep([2, 4], 3, seed=9)
    b = width_sweep([2, 4], 3, seed=9)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "width,trial,search,best_error,mask_density,seed"
    assert len(lines) == 7
    assert set(a.medians()) == {2, 4}
