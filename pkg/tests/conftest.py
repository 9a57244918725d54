import numpy as np
import pytest

from qpburst.protocol import DEFAULT_GEOMETRY

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def draw_clusters(rng, pops, n, geometry=DEFAULT_GEOMETRY):
    """I/Q records from Gaussian clusters; returns records and realised fractions."""
    names = list(pops)
    counts = rng.multinomial(n, [pops[s] for s in names])
    parts = []
    for s, c in zip(names, counts):
        i, q, si, sq = geometry[s]
        parts.append(np.column_stack([rng.normal(i, si, c), rng.normal(q, sq, c)]))
    x = np.concatenate(parts)
    rng.shuffle(x)
    return x, dict(zip(names, counts / n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
