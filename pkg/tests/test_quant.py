import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bespokemlp import compress, dataio, fixtures, model, quant
from bespokemlp.quant import (AccumulatorOverflow, FixedPointFormat as F, FormatError, QuantGenes,
                              fixed_point_inference, qrelu, qrelu_code, quantize_value)

from conftest import random_quantized
from helpers import real_inference

UQ13 = F.uq(1, 3)
Q46 = F.q(4, 6)


def test_format_ranges():
    assert (Q46.total_bits, Q46.frac_bits, str(Q46)) == (11, 6, "Q4.6")
    assert (Q46.min_value, Q46.max_value) == (-16.0, 16.0 - 2 ** -6)
    assert (UQ13.total_bits, UQ13.max_value, str(UQ13)) == (4, 1.875, "UQ1.3")
    with pytest.raises(FormatError):
        F(3, 3, True)


def test_genes_invariants():
    ok = QuantGenes(F(8, 2, True), F(8, 2, True), F(8, 1, False), F(4, 0, False), 0.3)
    assert QuantGenes.from_dict(ok.to_dict()) == ok
    with pytest.raises(FormatError):
        QuantGenes(F(9, 2, True), ok.b, ok.r, ok.i)
    with pytest.raises(FormatError):
        QuantGenes(ok.c, ok.b, ok.r, F(5, 0, False))
    with pytest.raises(FormatError):
        QuantGenes(ok.c, ok.b, ok.r, ok.i, 0.25)
    with pytest.raises(FormatError):
        QuantGenes(ok.r, ok.b, ok.r, ok.i)


def test_quantize_value_examples():
    rng = np.random.default_rng(0)
    for mode in ("nearest", "truncate", "stochastic"):
        assert quantize_value(0.0, UQ13, mode, rng)[0] == 0
    assert quantize_value(5.0, UQ13, "nearest") == (15, 1.875)
    assert quantize_value(0.33, UQ13, "truncate")[1] == 0.25
    assert quantize_value(-9.0, F.q(1, 2), "nearest") == (-8, -2.0)


def test_stochastic_unbiased():
    rng = np.random.default_rng(1)
    vals = quant.quantize_array(np.full(10000, 0.3), UQ13, "stochastic", rng)[1]
    assert abs(vals.mean() - 0.3) <= 0.01
    # 3-sigma bound of the Bernoulli estimator
    p = (0.3 - 0.25) / 0.125
    assert abs(vals.mean() - 0.3) <= 3 * 0.125 * np.sqrt(p * (1 - p) / 10000)


def test_qrelu_examples():
    assert qrelu(-17, Q46, UQ13) == 0
    assert qrelu(26, Q46, UQ13) * UQ13.step == 0.375  # 0.40625 truncates to 0.375
    assert qrelu(480, Q46, UQ13) == 15  # 7.5 saturates to 1.875
    with pytest.raises(FormatError):
        qrelu(0, F.q(0, 2), UQ13)
    with pytest.raises(FormatError):
        qrelu(1 << 12, Q46, UQ13)


@settings(max_examples=1000, deadline=None)
@given(a=st.integers(-5000, 5000), b=st.integers(-5000, 5000), shift=st.integers(-3, 8), bits=st.integers(1, 8))
def test_qrelu_monotone_bounded(a, b, shift, bits):
    lo, hi = min(a, b), max(a, b)
    ql, qh = qrelu_code(lo, shift, bits), qrelu_code(hi, shift, bits)
    assert ql <= qh <= (1 << bits) - 1
    if lo < 0:
        assert ql == 0


def test_accumulator_width():
    assert quant.accumulator_width(0) == 2
    assert quant.accumulator_width(7) == 5  # 3 magnitude bits + sign + guard


# ---------------------------------------------------------------- quantize_model

def _tiny_model(w0, w1, b0=None, b1=None):
    m = model.init_model(w0.shape[1], w0.shape[0], w1.shape[0], 0)
    m.layers[0].weights[:] = w0
    m.layers[1].weights[:] = w1
    if b0 is not None:
        m.layers[0].biases[:] = b0
    if b1 is not None:
        m.layers[1].biases[:] = b1
    return m


def _genes():
    return QuantGenes(F.q(1, 2), F.q(1, 2), F.uq(1, 3), F.uq(0, 2), 0.0)


def test_quantize_exact_weights():
    w0 = np.array([[0.25, -0.5], [1.0, 0.75]])
    w1 = np.array([[-1.25, 0.5], [0.0, 1.5]])
    m = _tiny_model(w0, w1)
    for seed in range(5):
        q = quant.quantize_model(m, _genes(), None, np.random.default_rng(0).random((10, 2)), seed)
        np.testing.assert_array_equal(q.weight_codes[0], (w0 * 4).astype(int))
        np.testing.assert_array_equal(q.weight_codes[1], (w1 * 4).astype(int))


def test_quantize_pruned_and_deterministic():
    m = model.init_model(3, 4, 2, 0)
    mask = compress.prune_low_magnitude(m, 0.5)
    x = np.random.default_rng(0).random((20, 3))
    a = quant.quantize_model(m, _genes(), mask, x, 3)
    b = quant.quantize_model(m, _genes(), mask, x, 3)
    for wa, wb, mk in zip(a.weight_codes, b.weight_codes, mask):
        assert not wa[~mk].any()
        np.testing.assert_array_equal(wa, wb)


def test_profiled_widths_cover_training_rows(blob_splits, blob_model):
    train, _ = blob_splits
    g = quant.reference_genes(blob_model, model.profile_activations(blob_model, train))
    q = quant.quantize_model(blob_model, g, None, train, 0)
    q.forward_codes(q.input_codes(train.features))  # raises on overflow
    for layer in range(2):
        assert (q.acc_widths[layer] >= [quant.accumulator_width(v) for v in q.acc_max[layer]]).all()


def test_serialization_round_trip(tmp_path):
    q = fixtures.reference_net()
    q.save(tmp_path / "q.json")
    back = quant.QuantizedMLP.load(tmp_path / "q.json")
    assert back.to_dict() == q.to_dict()


def test_invalid_quantized_mlp():
    q = fixtures.reference_net()
    bad_mask = [np.zeros((2, 2), bool), q.mask[1]]
    with pytest.raises(ValueError, match="pruned"):
        quant.QuantizedMLP(q.weight_codes, q.bias_codes, q.genes, bad_mask, q.acc_widths)
    with pytest.raises(ValueError, match="outside"):
        quant.QuantizedMLP([q.weight_codes[0] * 10, q.weight_codes[1]], q.bias_codes, q.genes, q.mask, q.acc_widths)


# ---------------------------------------------------------------- interpreter

def test_zero_weights_give_biases():
    q = fixtures.reference_net()
    z = q.with_codes([np.zeros((2, 2), int), np.zeros((2, 2), int)])
    cls, accs = fixed_point_inference(z, [3, 1])
    assert accs[1] == z.aligned_bias(1).tolist()
    assert cls == int(np.argmax(z.bias_codes[1]))


def test_identity_neuron():
    g = QuantGenes(F.q(1, 2), F.q(1, 2), F.uq(1, 3), F.uq(0, 2), 0.0)
    q = quant.QuantizedMLP([[[4]], [[4], [0]]], [[1], [0, 0]], g, [np.ones((1, 1), bool), np.ones((2, 1), bool)],
                           [[8], [8, 8]])
    _, accs = fixed_point_inference(q, [3])
    # x = 0.75 (code 3, F=2), w = 1.0 (code 4, F=2): product 12 at F=4; bias 0.25 -> 1 << 2
    assert accs[0] == [3 * 4 + (1 << 2)]


def test_interpreter_matches_real_arithmetic():
    rng = np.random.default_rng(0)
    q = random_quantized(rng, dims=(3, 4, 2))
    rows = rng.integers(0, q.genes.i.max_code + 1, (50, 3))
    batch = q.forward_codes(rows)[0]
    for row, c in zip(rows, batch):
        assert fixed_point_inference(q, row)[0] == real_inference(q, row) == c


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_interpreter_real_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    q = random_quantized(rng)
    rows = rng.integers(0, q.genes.i.max_code + 1, (5, q.dims[0]))
    for row in rows:
        assert fixed_point_inference(q, row)[0] == real_inference(q, row)


def test_overflow_raises():
    q = fixtures.reference_net()
    narrow = quant.QuantizedMLP(q.weight_codes, q.bias_codes, q.genes, q.mask, [[2, 2], [2, 2]])
    with pytest.raises(AccumulatorOverflow):
        fixed_point_inference(narrow, [3, 3])
    with pytest.raises(AccumulatorOverflow):
        narrow.forward_codes(np.array([[3, 3]]))


def test_input_code_validation():
    with pytest.raises(ValueError):
        fixed_point_inference(fixtures.reference_net(), [4, 0])


# ---------------------------------------------------------------- QAT

def test_qat_wide_formats_close_to_float(blob_splits, blob_model):
    train, test = blob_splits
    g = QuantGenes(F(8, 3, True), F(8, 3, True), F(8, 4, False), F(4, 0, False), 0.0)
    m = quant.qat_retrain(blob_model, g, model.TrainConfig("adam", 0.005, 30, 32, 0.0, 0), train)
    q = quant.quantize_model(m, g, None, train, 0)
    assert model.accuracy(q, test) >= model.accuracy(blob_model, test) - 0.01 - 1e-9


def test_qat_everything_pruned(blob_splits, blob_model):
    train, test = blob_splits
    g = _genes()
    mask = [np.zeros_like(w, dtype=bool) for w in blob_model.weights]
    m = quant.qat_retrain(blob_model, g, model.TrainConfig("adam", 0.01, 5, 32, 0.0, 0), train, mask)
    assert all(not w.any() for w in m.weights)
    q = quant.quantize_model(m, g, mask, train, 0)
    pred = q.predict(test.features)
    assert len(set(pred.tolist())) == 1
    assert model.accuracy(q, test) == np.mean(test.labels == pred[0])


def test_qat_frozen_weight_stays(blob_splits, blob_model):
    train, _ = blob_splits
    frozen = [np.full(w.shape, np.nan) for w in blob_model.weights]
    frozen[0][1, 2] = 0.5
    m = quant.qat_retrain(blob_model, _genes(), model.TrainConfig("adam", 0.05, 20, 16, 0.0, 0), train,
                          frozen=frozen)
    assert m.layers[0].weights[1, 2] == 0.5
    assert blob_model.layers[0].weights[1, 2] != 0.5  # input model untouched
