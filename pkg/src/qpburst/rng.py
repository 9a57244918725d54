"""Counter-based random streams.

Every draw is a pure function of ``(key, counter, slot)``: a SplitMix64
finaliser applied to the key plus a Weyl-sequence offset. Traces therefore
own independent substreams keyed by ``(seed, trace_index)``, and generation
order or parallelism cannot change any value. The scalar and vectorised
versions use only integer arithmetic, so they agree bit for bit.
"""
import numpy as np

from ._accel import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# per-cycle draw slots
N_SLOTS = 8
SLOT_DECAY = 0
SLOT_READOUT = 1
SLOT_RESET = 2
SLOT_LEAK = 3
SLOT_NOISE_A = 4
SLOT_NOISE_B = 5


@njit
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit
def uniform(key, counter, slot):
    """Uniform double in [0, 1) with 53 random bits."""
    c = np.uint64(counter) * np.uint64(N_SLOTS) + np.uint64(slot)
    h = mix64(key + (c + np.uint64(1)) * GOLDEN)
    return float(h >> _S11) * _INV53


def uniform_array(key, counters, slot):
    """Vectorised :func:`uniform` over an array of counters."""
    key = np.uint64(key)
    c = np.asarray(counters, dtype=np.uint64) * np.uint64(N_SLOTS) + np.uint64(slot)
    z = key + (c + np.uint64(1)) * GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    z = z ^ (z >> _S31)
    return (z >> _S11).astype(np.float64) * _INV53


def stream_key(seed, trace_index, purpose=0):
    """Derive the 64-bit key of one substream."""
    with np.errstate(over="ignore"):
        k = mix64_py(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        k = mix64_py(k ^ np.uint64(trace_index) * GOLDEN)
        k = mix64_py(k + np.uint64(purpose) * _M1)
    return k


def mix64_py(z):
    z = np.uint64(z)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def generator(seed, trace_index, purpose):
    """numpy Philox generator for the sparse, per-trace draws (impacts)."""
    key = int(stream_key(seed, trace_index, purpose))
    return np.random.Generator(np.random.Philox(key=key))


def normal_pairs(key, start, n):
    """Two independent standard-normal arrays (Box-Muller over two slots)."""
    counters = np.arange(start, start + n, dtype=np.uint64)
    u1 = uniform_array(key, counters, SLOT_NOISE_A)
    u2 = uniform_array(key, counters, SLOT_NOISE_B)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    return r * np.cos(theta), r * np.sin(theta)
