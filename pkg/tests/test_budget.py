import itertools
import math

import pytest

from qpburst.budget import (SourceEntry, budget_csv, builtin_sources, parse_sources,
                            scale_drivers, scale_source_rate, thorium_coefficient, thorium_entry,
                            total_budget)
from qpburst.datasets import source_rates
from qpburst.errors import ConfigError, DomainError


def test_lab_gamma_rate():
    gamma = builtin_sources("fnal")[0]
    r = scale_source_rate(gamma)
    assert (round(r.rate * 1e3), round(r.error * 1e3)) == (31, 2)
    # with the flux error folded in the error is dominated by the flux
    wide = scale_source_rate(gamma, include_driver_error=True)
    assert wide.error == pytest.approx(r.rate * math.hypot(0.0645, 0.9 / 1.7), rel=1e-3)


def test_zero_driver():
    r = scale_source_rate(SourceEntry("x", "flux", 0.02, 0.001, 0.0, 0.0))
    assert (r.rate, r.error) == (0.0, 0.0)


def test_missing_driver():
    with pytest.raises(ConfigError):
        scale_source_rate(SourceEntry("x", "flux", 0.02, 0.001, None))


def test_thorium_coefficient():
    cal = source_rates()
    k, k_err = thorium_coefficient([c.activity for c in cal], [c.rate for c in cal],
                                   [c.rate_err for c in cal])
    assert k == pytest.approx(2.7e-3, rel=0.05)
    assert scale_source_rate(thorium_entry(100.0)).rate == pytest.approx(0.27, rel=0.05)
    with pytest.raises(DomainError):
        thorium_coefficient([0, 0], [1, 1], [1, 1])


def test_site_totals():
    fnal, rows = total_budget(builtin_sources("fnal"))
    assert fnal.rate == pytest.approx(41.7e-3, abs=0.05e-3)
    assert fnal.error == pytest.approx(3.0e-3, abs=0.05e-3)
    assert [round(r.rate * 1e3, 1) for r in rows] == [31.0, 8.0, 2.7]
    lngs, rows = total_budget(builtin_sources("lngs"))
    assert lngs.rate == pytest.approx(4.0e-3, abs=0.05e-3)
    assert lngs.error == pytest.approx(0.6e-3, abs=0.05e-3)
    assert rows[1].upper_limit


def test_quadrature_option():
    fnal, rows = total_budget(builtin_sources("fnal"), combine="quadrature")
    assert fnal.error == pytest.approx(math.sqrt(sum(r.error ** 2 for r in rows)))
    assert fnal.error < total_budget(builtin_sources("fnal"))[0].error
    with pytest.raises(DomainError):
        total_budget(builtin_sources("fnal"), combine="max")


def test_empty_budget():
    total, rows = total_budget([])
    assert (total.rate, total.error, rows) == (0.0, 0.0, [])


@pytest.mark.parametrize("lam", [0.0, 0.5, 3.0, 17.25])
def test_linearity(lam):
    entries = [e for e in builtin_sources("fnal") if e.kind == "flux"]
    base, rows = total_budget(entries)
    scaled, srows = total_budget(scale_drivers(entries, lam))
    assert scaled.rate == pytest.approx(lam * base.rate, rel=1e-15, abs=0)
    for a, b in zip(rows, srows):
        assert b.rate == pytest.approx(lam * a.rate, rel=1e-15, abs=0)


def test_permutation_invariance():
    entries = builtin_sources("fnal") + [thorium_entry(44.2)]
    ref, _ = total_budget(entries)
    for perm in itertools.permutations(entries):
        t, _ = total_budget(perm)
        assert (t.rate, t.error) == (ref.rate, ref.error)


def test_parse_sources():
    text = """
    # comment
    gamma  flux      0.02   0.001  1.5  0.2   # trailing
    src    activity  2.7e-3 1e-4   44.2 0
    mu     fixed     <1e-5  0      1    0
    """
    es = parse_sources(text)
    assert [e.name for e in es] == ["gamma", "src", "mu"]
    assert es[2].upper_limit and es[2].coefficient == 1e-5
    assert es[1].driver == 44.2
    for bad in ("a flux 1 2 3", "a volume 1 0 1 0", "a flux x 0 1 0", "a flux -1 0 1 0"):
        with pytest.raises(ConfigError):
            parse_sources(bad)
    with pytest.raises(ConfigError):
        builtin_sources("moon")


def test_budget_csv():
    total, rows = total_budget(builtin_sources("lngs"))
    lines = budget_csv(total, rows).strip().splitlines()
    assert lines[0] == "source,rate,rate_err,upper_limit"
    assert lines[-1].startswith("total,")
    assert lines[2].endswith(",1")
