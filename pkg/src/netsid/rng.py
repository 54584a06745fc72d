"""Deterministic random-stream derivation.

Every stochastic component draws from a stream keyed by (seed, *tags), so
per-agent / per-round / per-time draws are reproducible regardless of
evaluation order.  Tags are small non-negative integers or short strings.
"""

import numpy as np

_TAG_CODES = {}


def _encode(tag):
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"stream tags must be non-negative, got {tag}")
        return int(tag)
    code = _TAG_CODES.get(tag)
    if code is None:
        # stable string hash, independent of PYTHONHASHSEED
        code = int.from_bytes(str(tag).encode("utf8"), "little") % (2**63)
        _TAG_CODES[tag] = code
    return code


def stream(seed, *tags):
    """Return a Generator for the stream keyed by (seed, *tags)."""
    entropy = [int(seed)] + [_encode(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn_seed(seed, *tags):
    """Derive a child integer seed from (seed, *tags)."""
    entropy = [int(seed)] + [_encode(t) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] % (2**63))
