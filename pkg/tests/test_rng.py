import numpy as np
import pytest

from qpburst import rng


def test_stream_keys_distinct_and_stable():
    keys = {int(rng.stream_key(s, t, p)) for s in range(5) for t in range(20) for p in range(2)}
    assert len(keys) == 200
    assert rng.stream_key(3, 7) == rng.stream_key(3, 7)


def test_scalar_matches_array():
    key = rng.stream_key(11, 2)
    counters = np.arange(0, 5000, 7, dtype=np.uint64)
    for slot in (rng.SLOT_DECAY, rng.SLOT_READOUT, rng.SLOT_NOISE_B):
        arr = rng.uniform_array(key, counters, slot)
        scal = np.array([rng.uniform(key, int(c), slot) for c in counters])
        assert np.array_equal(arr, scal)


def test_uniform_moments():
    u = rng.uniform_array(rng.stream_key(1, 0), np.arange(1_000_000, dtype=np.uint64), 0)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert u.mean() == pytest.approx(0.5, abs=2e-3)
    assert u.var() == pytest.approx(1 / 12, abs=1e-3)


def test_slots_uncorrelated():
    key = rng.stream_key(5, 5)
    c = np.arange(200_000, dtype=np.uint64)
    a = rng.uniform_array(key, c, rng.SLOT_DECAY)
    b = rng.uniform_array(key, c, rng.SLOT_READOUT)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_normal_pairs():
    za, zb = rng.normal_pairs(rng.stream_key(2, 3), 0, 200_000)
    for z in (za, zb):
        assert z.mean() == pytest.approx(0, abs=0.01)
        assert z.std() == pytest.approx(1, abs=0.01)
    # a window is the same values regardless of where generation starts
    wa, _ = rng.normal_pairs(rng.stream_key(2, 3), 1000, 10)
    assert np.array_equal(wa, za[1000:1010])
