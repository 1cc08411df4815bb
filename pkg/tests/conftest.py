import numpy as np
import pytest

from bespokemlp import dataio, fixtures, hwcost, model


@pytest.fixture(scope="session")
def lib():
    return hwcost.GateLibrary.default()


@pytest.fixture(scope="session")
def estimator(lib):
    return hwcost.build_estimator(lib)


@pytest.fixture(scope="session")
def blob_splits():
    d = fixtures.blob_fixture()
    train, test = dataio.split(d, dataio.SplitSpec(0.7, 0))
    stats = dataio.NormStats.of(train)
    return dataio.normalize(train, stats), dataio.normalize(test, stats)


@pytest.fixture(scope="session")
def blob_model(blob_splits):
    train, _ = blob_splits
    return model.train(train, (4, 6, 3), model.TrainConfig("adam", 0.01, 200, 32, 0.0, 1))


def write_csv(path, rows, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return path


def random_quantized(rng, genes=None, dims=None, density=0.8):
    """A random, fully specified QuantizedMLP sized for its worst case."""
    from bespokemlp import quant
    if dims is None:
        dims = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 5)))
    if genes is None:
        cp = int(rng.integers(2, 9))
        bp = int(rng.integers(2, 9))
        rp = int(rng.integers(1, 9))
        ip = int(rng.integers(1, 5))
        genes = quant.QuantGenes(
            quant.FixedPointFormat(cp, int(rng.integers(0, cp)), True),
            quant.FixedPointFormat(bp, int(rng.integers(0, bp)), True),
            quant.FixedPointFormat(rp, int(rng.integers(0, rp + 1)), False),
            quant.FixedPointFormat(ip, int(rng.integers(0, ip + 1)), False),
            0.0,
        )
    d, h, k = dims
    ws, bs, ms = [], [], []
    for shape in ((h, d), (k, h)):
        w = rng.integers(genes.c.min_code, genes.c.max_code + 1, shape)
        m = rng.random(shape) < density
        ws.append(np.where(m, w, 0))
        ms.append(m)
    for n in (h, k):
        bs.append(rng.integers(genes.b.min_code, genes.b.max_code + 1, n))
    q = quant.QuantizedMLP(ws, bs, genes, ms, [np.zeros(h, np.int64), np.zeros(k, np.int64)])
    return quant.assign_widths(q, None)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
