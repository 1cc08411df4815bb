import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bespokemlp import fixtures, hwcost, quant
from bespokemlp.hwcost import GateLibrary, InfeasibleConstraint

from conftest import random_quantized


def brute_min_signed_digits(w, max_bits=10):
    """Fewest nonzero digits over every {-1, 0, 1} representation (exhaustive)."""
    best = None
    for digits in itertools.product((-1, 0, 1), repeat=max_bits):
        if sum(d << p for p, d in enumerate(digits)) == w:
            nz = sum(1 for d in digits if d)
            best = nz if best is None else min(best, nz)
    return best


def test_csd_examples():
    assert hwcost.csd(0) == []
    assert hwcost.csd(8) == [(3, 1)]
    assert sorted(hwcost.csd(23)) == [(0, -1), (3, -1), (5, 1)]


def test_csd_canonical_and_minimal():
    for w in range(0, 200):
        d = hwcost.csd(w)
        assert sum(s << p for p, s in d) == w
        pos = [p for p, _ in d]
        assert all(b - a >= 2 for a, b in zip(pos, pos[1:]))
    for w in (0, 1, 7, 23, 45, 111, 127, 128):
        assert len(hwcost.csd(w)) == brute_min_signed_digits(w, 9)


def test_multiplier_oracle_examples(lib):
    assert hwcost.multiplier_oracle(0, 4, lib) == 0
    assert hwcost.multiplier_oracle(16, 4, lib) == 0
    assert hwcost.multiplier_oracle(3, 4, lib) == 5 * lib.area["FA"] == 45


def test_subtract_stage_cost(lib):
    # 7 = 8 - 1 as CSD: one 7-bit stage (z + 3 - 0) with inverters, versus two binary adds
    csd_cost = 7 * (lib.area["FA"] + lib.area["INV"])
    binary_cost = (4 + 1) * lib.area["FA"] + (4 + 2) * lib.area["FA"]
    assert hwcost.multiplier_oracle(7, 4, lib) == min(csd_cost, binary_cost)


def test_lut_construction(lib):
    lut = hwcost.build_multiplier_lut(lib)
    assert len(lut) == 4 * 129
    assert lut.lookup(4, 0) == 0
    rng = np.random.default_rng(0)
    for _ in range(50):
        z, w = int(rng.integers(1, 5)), int(rng.integers(0, 129))
        assert lut.lookup(z, w) == hwcost.multiplier_oracle(w, z, lib)
    for k in range(8):
        assert lut.lookup(3, 1 << k) == 0
    with pytest.raises(hwcost.EstimatorError):
        lut.lookup(5, 3)


def test_accumulator_oracle_examples(lib):
    assert hwcost.accumulator_oracle([], 0, lib) == 0
    assert hwcost.accumulator_oracle([6], 4, lib) == 4 * 9 + 2 * 5 == 46


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=0, max_size=10), st.randoms(use_true_random=False))
def test_accumulator_permutation_invariant(widths, rnd):
    lib = GateLibrary.default()
    shuffled = list(widths)
    rnd.shuffle(shuffled)
    assert hwcost.accumulator_oracle(widths, 3, lib) == hwcost.accumulator_oracle(shuffled, 3, lib)


def test_lr_recovers_linear_oracle(lib):
    def linear(codes, bias, z, lib):
        f = hwcost.accumulator_features(codes, z)
        return 3.0 * f[0] + 0.5 * f[1] + 2.0 * f[2] + 7.0

    r = hwcost.fit_accumulator_lr(3, lib, 50, 0, oracle=linear)
    assert abs(r.r2 - 1.0) <= 1e-9
    np.testing.assert_allclose(r.coef, [3.0, 0.5, 2.0], atol=1e-8)


def test_lr_singular_fallback():
    x = np.tile([[2.0, 8.0, 4.0]], (10, 1))
    with pytest.warns(RuntimeWarning, match="mean predictor"):
        r = hwcost.AccumulatorRegressor.fit(4, x, np.full(10, 5.0))
    assert r.fallback and r.predict([1, 2]) == 5.0


def test_lr_pearson_fresh_samples(lib):
    r = hwcost.fit_accumulator_lr(4, lib, 100, 7)
    rng = np.random.default_rng(12345)
    pred, true = [], []
    for _ in range(1000):
        codes, bias = hwcost.sample_neuron(rng)
        pred.append(r.predict(codes))
        true.append(hwcost.neuron_oracle(codes, bias, 4, lib))
    assert np.corrcoef(pred, true)[0, 1] >= 0.85


def test_qrelu_area_examples(lib):
    assert hwcost.qrelu_area(4, 6, 1, 3, lib) == 13
    assert hwcost.qrelu_area(2, 3, 1, 3, lib) == lib.area["INV"] + 4 * lib.area["AND2"]
    # output wider than the accumulator: the missing bits are constant zero
    assert hwcost.qrelu_area(1, 0, 2, 3, lib) == lib.area["INV"] + 1 * lib.area["AND2"]
    big_and = GateLibrary({**lib.area, "AND2": 5.0}, lib.delay)
    assert hwcost.qrelu_area(4, 6, 1, 3, big_and) - hwcost.qrelu_area(4, 6, 1, 3, lib) == 4 * 3.0


def test_qrelu_enumeration_exhaustive(lib):
    n = 0
    for ii, fi, ir, fr in itertools.product(range(8), range(8), range(9), range(9)):
        if ii + fi + 1 > 8 or ir + fr > 8 or ir + fr < 1:
            continue
        assert hwcost.qrelu_area(ii, fi, ir, fr, lib) == hwcost.enumerated_qrelu_area(ii, fi, ir, fr, lib)
        n += 1
    assert n == 1584


# ---------------------------------------------------------------- estimate_area

def test_report_additivity(estimator):
    q = fixtures.reference_net()
    r = estimator(q)
    assert math.isclose(r.total, r.multipliers + r.accumulators + r.qrelu)
    assert math.isclose(r.total, sum(n.total for n in r.neurons))
    assert r.census == [3, 4]
    json.dumps(r.to_dict())


def test_zero_weights_no_multipliers(estimator):
    q = fixtures.reference_net()
    z = q.with_codes([np.zeros((2, 2), int), np.zeros((2, 2), int)])
    r = estimator(z)
    assert r.multipliers == 0
    assert r.qrelu == sum(hwcost.qrelu_area(*hwcost._qrelu_formats(z, n), estimator.lib) for n in range(2))


def test_duplicate_neuron_adds_no_multipliers(estimator):
    q = fixtures.reference_net()
    g = q.genes
    w0 = np.vstack([q.weight_codes[0], q.weight_codes[0][:1]])
    w1 = np.hstack([q.weight_codes[1], np.zeros((2, 1), int)])
    dup = quant.QuantizedMLP([w0, w1], [np.append(q.bias_codes[0], q.bias_codes[0][0]), q.bias_codes[1]], g,
                             [np.ones_like(w0, bool), np.ones_like(w1, bool)],
                             [np.zeros(3, int), np.zeros(2, int)])
    dup = quant.assign_widths(dup, None)
    a, b = estimator(q), estimator(dup)
    assert b.multipliers == a.multipliers
    assert b.neurons[2].multipliers == 0 and b.neurons[2].accumulator > 0 and b.neurons[2].qrelu > 0


def test_estimate_close_to_oracle_4x3x2(estimator, lib):
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(200):
        q = random_quantized(rng, dims=(4, 3, 2))
        est, ora = estimator(q).total, hwcost.oracle_area(q, lib).total
        errs.append(abs(est - ora) / max(ora, 1.0))
    # only the regression term deviates; a few outliers exceed 25%
    assert np.mean(np.array(errs) <= 0.25) >= 0.9


def test_missing_precision_errors(lib):
    est = hwcost.build_estimator(lib, z_set=range(1, 3))
    q = fixtures.reference_net()  # hidden precision is 4 bits
    with pytest.raises(hwcost.EstimatorError):
        est(q)


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pruning_and_sharing_never_increase_area(seed):
    est = _EST
    rng = np.random.default_rng(seed)
    q = random_quantized(rng)
    base = est(q).total
    # prune one live weight
    layer = int(rng.integers(0, 2))
    live = np.argwhere(q.mask[layer])
    if len(live):
        r, c = live[int(rng.integers(len(live)))]
        mask = [m.copy() for m in q.mask]
        mask[layer][r, c] = False
        codes = [w.copy() for w in q.weight_codes]
        codes[layer][r, c] = 0
        assert est(q.with_codes(codes, mask)).total <= base + 1e-9
    # force two same-column weights to share |code|
    w = q.weight_codes[layer]
    col = int(rng.integers(0, w.shape[1]))
    rows = np.flatnonzero(w[:, col])
    if len(rows) >= 2:
        a, b = rng.choice(rows, 2, replace=False)
        codes = [x.copy() for x in q.weight_codes]
        codes[layer][b, col] = np.sign(codes[layer][b, col]) * abs(codes[layer][a, col])
        codes[layer][b, col] = np.clip(codes[layer][b, col], q.genes.c.min_code, q.genes.c.max_code)
        if abs(codes[layer][b, col]) == abs(codes[layer][a, col]):
            shared = q.with_codes(codes)
            assert est(shared).multipliers <= est(q).multipliers + 1e-9


_EST = hwcost.build_estimator(GateLibrary.default())


# ---------------------------------------------------------------- delay and voltage

def test_delay_empty_network(lib):
    q = fixtures.reference_net()
    empty = q.with_codes([np.zeros((2, 2), int), np.zeros((2, 2), int)],
                         [np.zeros((2, 2), bool), np.zeros((2, 2), bool)])
    empty = quant.QuantizedMLP(empty.weight_codes, [np.zeros(2, int), np.zeros(2, int)], q.genes, empty.mask,
                               q.acc_widths)
    assert hwcost.critical_path_delay(empty, lib) == 0


def test_delay_voltage_monotone(lib):
    q = fixtures.reference_net()
    assert hwcost.critical_path_delay(q, lib, 0.6) > hwcost.critical_path_delay(q, lib, 1.0)
    with pytest.raises(ValueError):
        hwcost.critical_path_delay(q, lib, 1.2)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pruning_never_increases_delay(seed):
    lib = GateLibrary.default()
    rng = np.random.default_rng(seed)
    q = random_quantized(rng)
    keep = [m & (rng.random(m.shape) < 0.6) for m in q.mask]
    pruned = q.with_codes([np.where(k, w, 0) for k, w in zip(keep, q.weight_codes)], keep)
    assert hwcost.critical_path_delay(pruned, lib) <= hwcost.critical_path_delay(q, lib) + 1e-15


def test_min_voltage_rules(lib):
    q = fixtures.reference_net()
    assert hwcost.min_voltage(q, lib, math.inf) == 0.6
    d06 = hwcost.critical_path_delay(q, lib, 0.6)
    v = hwcost.min_voltage(q, lib, d06 * (1 - 1e-9))
    assert v == 0.61
    for c in np.linspace(hwcost.critical_path_delay(q, lib, 1.0), d06, 7):
        v = hwcost.min_voltage(q, lib, c)
        assert hwcost.critical_path_delay(q, lib, v) <= c
        assert v == 0.6 or hwcost.critical_path_delay(q, lib, round(v - 0.01, 2)) > c


def test_min_voltage_infeasible(lib):
    q = fixtures.reference_net()
    with pytest.raises(InfeasibleConstraint) as exc:
        hwcost.min_voltage(q, lib, 1e-9)
    assert exc.value.achievable == pytest.approx(hwcost.critical_path_delay(q, lib, 1.0))
    assert "achievable" in str(exc.value)


def test_library_validation_and_load(tmp_path, lib):
    with pytest.raises(ValueError):
        GateLibrary({**lib.area, "FA": 0}, lib.delay)
    with pytest.raises(ValueError):
        GateLibrary(lib.area, lib.delay, ((0.6, 1.0), (1.0, 2.0)))
    p = tmp_path / "lib.toml"
    p.write_text('name = "x"\n[area]\nFA = 11.0\n[voltage_table]\n"0.6" = 2.5\n"1.0" = 1.0\n')
    got = GateLibrary.load(p)
    assert got.area["FA"] == 11.0 and got.delay_scale(0.8) == pytest.approx(1.75)
    assert got.digest() != lib.digest()


def test_estimator_cache(tmp_path, lib):
    a = hwcost.cached_estimator(lib, tmp_path, n_samples=20)
    b = hwcost.cached_estimator(lib, tmp_path, n_samples=20)
    assert a.to_dict() == b.to_dict()
    assert len(list(tmp_path.iterdir())) == 1
