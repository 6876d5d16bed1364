"""Backend selection for the sampled-attention hot loop.

The compiled extension is used when importable; set ``GNA_BACKEND=numpy`` to
force the pure-Python fallback.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"numpy": _pykernels}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels


def _pick() -> str:
    want = os.environ.get("GNA_BACKEND", "").strip().lower()
    if want in BACKENDS:
        return want
    return "compiled" if "compiled" in BACKENDS else "numpy"


BACKEND = _pick()


def get_backend(name: str | None = None):
    return BACKENDS[name or BACKEND]


def _prep(q, k, v, idx, valid):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if valid is not None:
        valid = np.ascontiguousarray(valid, dtype=np.uint8)
    return q, k, v, idx, valid


def sampled_attention_forward(q, k, v, idx, valid=None, scale=1.0, backend=None):
    """Return ``(out, weights)``; ``out[i] = mean_g sum_s w[i,g,s] v[idx[i,g,s]]``."""
    q, k, v, idx, valid = _prep(q, k, v, idx, valid)
    return get_backend(backend).sampled_attention_forward(q, k, v, idx, valid, float(scale))


def sampled_attention_backward(gout, q, k, v, idx, weights, scale=1.0, backend=None):
    q, k, v, idx, _ = _prep(q, k, v, idx, None)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    return get_backend(backend).sampled_attention_backward(gout, q, k, v, idx, weights,
                                                           float(scale))
