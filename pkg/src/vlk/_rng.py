"""Counter-based uniform draws: every value is a pure function of its keys."""

import numpy as np

_M64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)


def _mix(x):
    # splitmix64 finalizer, on uint64 arrays (wrapping arithmetic)
    x = x ^ (x >> np.uint64(30))
    x = x * _C1
    x = x ^ (x >> np.uint64(27))
    x = x * _C2
    return x ^ (x >> np.uint64(31))


def hash64(*keys):
    """Hash a tuple of non-negative integer keys (scalars or broadcastable arrays)."""
    with np.errstate(over="ignore"):
        h = np.zeros((), dtype=np.uint64)
        for k in keys:
            k = np.asarray(k)
            if k.dtype != np.uint64:
                k = (k.astype(object) & _M64).astype(np.uint64) if k.dtype == object else k.astype(np.uint64)
            h = _mix(h + _GOLDEN + k)
        return h


def uniform(*keys):
    """Uniform in [0, 1) with 53 random bits."""
    return (hash64(*keys) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
