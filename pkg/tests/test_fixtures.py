import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bespokemlp import compress, fixtures, hwcost, quant

GOLDEN = Path(__file__).parent / "golden" / "v1"


@pytest.fixture(scope="module")
def golden_net():
    return json.loads((GOLDEN / "reference_net.json").read_text())


def test_reference_net_is_bit_stable(golden_net):
    assert fixtures.reference_net().to_dict() == golden_net["net"]


def test_reference_census(golden_net):
    assert compress.sharing_census(fixtures.reference_net()) == golden_net["sharing_census"] == [3, 4]


def test_reference_area(golden_net, lib):
    assert hwcost.oracle_area(fixtures.reference_net(), lib).to_dict() == golden_net["oracle_area"]


def test_reference_interpreter(golden_net):
    q = fixtures.reference_net()
    for case in golden_net["interpreter"]:
        assert quant.fixed_point_inference(q, case["input"])[0] == case["class"]
    assert len(golden_net["interpreter"]) == 16


def test_reference_net_roundtrip(tmp_path):
    q = fixtures.reference_net()
    q.save(tmp_path / "q.json")
    back = quant.QuantizedMLP.load(tmp_path / "q.json")
    assert back.to_dict() == q.to_dict()
    back.save(tmp_path / "r.json")
    assert (tmp_path / "q.json").read_bytes() == (tmp_path / "r.json").read_bytes()


def test_mask_edit_propagates_to_census():
    q = fixtures.reference_net()
    w0 = q.weight_codes[0].copy()
    m0 = q.mask[0].copy()
    w0[1, 1], m0[1, 1] = 0, False  # drop the only |2| in column 1
    assert compress.sharing_census(q.with_codes([w0, q.weight_codes[1]], [m0, q.mask[1]])) == [2, 4]


def test_blob_fixture_is_bit_stable():
    d = fixtures.blob_fixture()
    ref = json.loads((GOLDEN / "blob_fixture.json").read_text())
    assert list(d.features.shape) == ref["shape"]
    assert hashlib.sha256(d.features.astype("<f8").tobytes()).hexdigest() == ref["features_sha256"]
    assert hashlib.sha256(d.labels.astype("<i8").tobytes()).hexdigest() == ref["labels_sha256"]


def test_blobs_deterministic_and_balanced():
    a = fixtures.make_blobs(3, 2, 100, 5.0, seed=7)
    b = fixtures.make_blobs(3, 2, 100, 5.0, seed=7)
    assert a.features.tobytes() == b.features.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    counts = np.bincount(a.labels, minlength=3)
    assert counts.max() - counts.min() <= 1


def test_wide_separation_is_threshold_separable():
    d = fixtures.make_blobs(4, 3, 400, 10.0, seed=2)
    # depth-1 rule: thresholds halfway between neighbouring class centers on feature 0
    pred = np.clip(np.floor(d.features[:, 0] / 10.0 + 0.5), 0, 3).astype(int)
    assert (pred == d.labels).all()


def test_make_blobs_validation():
    with pytest.raises(ValueError):
        fixtures.make_blobs(separation=0)
    with pytest.raises(ValueError):
        fixtures.make_blobs(n_rows=0)
