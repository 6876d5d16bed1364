"""Pure numpy implementations of the sampled-attention kernels.

Used whenever the compiled extension is unavailable, and as the reference the
compiled path is tested against.
"""

import numpy as np


def sampled_attention_forward(q, k, v, idx, valid, scale):
    G = idx.shape[1]
    kg = k[idx]
    logits = np.einsum("qd,qgsd->qgs", q, kg) * scale
    if valid is not None:
        logits = np.where(valid.astype(bool), logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.einsum("qgs,qgsd->qd", w, v[idx]) / G
    return out, w


def sampled_attention_backward(gout, q, k, v, idx, w, scale):
    G = idx.shape[1]
    vg = v[idx]
    dw = np.einsum("qd,qgsd->qgs", gout, vg) / G
    dlog = w * (dw - (w * dw).sum(axis=-1, keepdims=True)) * scale
    gq = np.einsum("qgs,qgsd->qd", dlog, k[idx])
    flat = idx.reshape(-1)
    gk = np.zeros_like(k)
    np.add.at(gk, flat, (dlog[..., None] * q[:, None, None, :]).reshape(flat.size, -1))
    gv = np.zeros_like(v)
    np.add.at(gv, flat, ((w / G)[..., None] * gout[:, None, None, :]).reshape(flat.size, -1))
    return gq, gk, gv
