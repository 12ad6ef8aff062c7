"""Bi-directional GRU over the bin sequence."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import tensor as T

GATES = ("z", "r", "n")


def init_gru(rng: np.random.Generator, prefix: str, d_in: int, hidden: int) -> Dict[str, np.ndarray]:
    p = {}
    for g in GATES:
        p[f"{prefix}.W{g}"] = T.glorot_uniform(rng, (d_in, hidden), d_in, hidden)
        p[f"{prefix}.U{g}"] = T.glorot_uniform(rng, (hidden, hidden), hidden, hidden)
        p[f"{prefix}.b{g}"] = np.zeros(hidden)
    return p


def _unpack(params, prefix):
    return {k: params[f"{prefix}.{k}"] for g in GATES for k in (f"W{g}", f"U{g}", f"b{g}")}


def gru_cell(x: np.ndarray, h_prev: np.ndarray, params, prefix: str = "gru") -> np.ndarray:
    """One GRU step; works on single vectors or ``(B, d)`` batches."""
    return _cell_forward(x, h_prev, _unpack(params, prefix))[0]


def _cell_forward(x, h, p):
    z = T.sigmoid(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
    r = T.sigmoid(x @ p["Wr"] + h @ p["Ur"] + p["br"])
    rh = r * h
    n = np.tanh(x @ p["Wn"] + rh @ p["Un"] + p["bn"])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n)


def _cell_backward(dh_new, cache, p, g):
    x, h, z, r, rh, n = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    da_n = dn * (1.0 - n * n)
    drh = da_n @ p["Un"].T
    dr = drh * h
    dh += drh * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    dx = da_z @ p["Wz"].T + da_r @ p["Wr"].T + da_n @ p["Wn"].T
    dh += da_z @ p["Uz"].T + da_r @ p["Ur"].T
    g["Wz"] += x.T @ da_z
    g["Wr"] += x.T @ da_r
    g["Wn"] += x.T @ da_n
    g["Uz"] += h.T @ da_z
    g["Ur"] += h.T @ da_r
    g["Un"] += rh.T @ da_n
    g["bz"] += da_z.sum(0)
    g["br"] += da_r.sum(0)
    g["bn"] += da_n.sum(0)
    return dx, dh


def gru_sequence_forward(xs: np.ndarray, params, prefix: str, reverse: bool = False):
    """Run a GRU over ``xs[B, L, d]`` from a zero state; returns ``(B, L, H)``."""
    p = _unpack(params, prefix)
    b, length, _ = xs.shape
    hidden = p["Uz"].shape[0]
    h = np.zeros((b, hidden))
    out = np.empty((b, length, hidden))
    caches = []
    order = range(length - 1, -1, -1) if reverse else range(length)
    for t in order:
        h, c = _cell_forward(xs[:, t], h, p)
        out[:, t] = h
        caches.append((t, c))
    return out, (prefix, caches, xs.shape)


def gru_sequence_backward(dout: np.ndarray, cache, params):
    prefix, caches, xshape = cache
    p = _unpack(params, prefix)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dxs = np.zeros(xshape)
    dh = np.zeros((xshape[0], p["Uz"].shape[0]))
    for t, c in reversed(caches):
        dx, dh = _cell_backward(dh + dout[:, t], c, p, g)
        dxs[:, t] = dx
    return dxs, {f"{prefix}.{k}": v for k, v in g.items()}


def gru_unidirectional(bins: np.ndarray, params, prefix: str = "rnn.fwd") -> np.ndarray:
    """Forward-only GRU over one bin sequence ``(31, d)`` -> ``(31, H)``."""
    return gru_sequence_forward(bins[None], params, prefix)[0][0]


def bgru_forward_batch(xs: np.ndarray, params, dropout: float = 0.25, training: bool = False,
                       rng: Optional[np.random.Generator] = None):
    """Bi-directional GRU: ``xs[B, L, d] -> (B, L, 2H)``, forward ++ backward state."""
    fwd, cf = gru_sequence_forward(xs, params, "rnn.fwd")
    bwd, cb = gru_sequence_forward(xs, params, "rnn.bwd", reverse=True)
    cat = np.concatenate([fwd, bwd], axis=-1)
    out, mask = T.dropout_forward(cat, dropout, training, rng)
    return out, (cf, cb, mask, fwd.shape[-1])


def bgru_backward_batch(dout, cache, params):
    cf, cb, mask, hidden = cache
    d = T.dropout_backward(dout, mask)
    dx_f, gf = gru_sequence_backward(np.ascontiguousarray(d[..., :hidden]), cf, params)
    dx_b, gb = gru_sequence_backward(np.ascontiguousarray(d[..., hidden:]), cb, params)
    gf.update(gb)
    return dx_f + dx_b, gf


def bgru_forward(bins: np.ndarray, params, dropout_rate: float = 0.25, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Single bin sequence ``(31, d)`` -> ``(31, 2H)``."""
    return bgru_forward_batch(np.asarray(bins, dtype=float)[None], params, dropout_rate,
                              training, rng)[0][0]


def uni_gru_forward_batch(xs, params, dropout: float = 0.25, training: bool = False, rng=None):
    out, cf = gru_sequence_forward(xs, params, "rnn.fwd")
    out, mask = T.dropout_forward(out, dropout, training, rng)
    return out, (cf, mask)


def uni_gru_backward_batch(dout, cache, params):
    cf, mask = cache
    return gru_sequence_backward(T.dropout_backward(dout, mask), cf, params)
