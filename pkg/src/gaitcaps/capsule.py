"""Capsule block: primary capsules, prediction transforms and dynamic routing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

SQUASH_EPS = 1e-12


@dataclass
class RoutingState:
    logits: np.ndarray     # b, (..., C, J)
    couplings: np.ndarray  # c = softmax_J(b)
    iterations: int


# ---------------------------------------------------------------------------
# squash
# ---------------------------------------------------------------------------

def squash_forward(s: np.ndarray):
    """Rescale vectors along the last axis to length ``|s|^2 / (1 + |s|^2)``."""
    q = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(q + SQUASH_EPS)
    scale = q / ((1.0 + q) * n)
    return s * scale, (s, q, n, scale)


def squash_backward(dv: np.ndarray, cache) -> np.ndarray:
    s, q, n, scale = cache
    denom = (1.0 + q) * n
    # d scale / d q, written without the 1/q singularity at s = 0
    dscale = (n - q * (1.0 + q) / (2.0 * n)) / (denom * denom)
    return scale * dv + 2.0 * dscale * (s * dv).sum(axis=-1, keepdims=True) * s


def squash(s: np.ndarray) -> np.ndarray:
    return squash_forward(np.asarray(s, dtype=float))[0]


# ---------------------------------------------------------------------------
# primary capsules
# ---------------------------------------------------------------------------

def primary_caps_forward(context: np.ndarray, W: np.ndarray, b: np.ndarray, n_caps: int, caps_dim: int):
    """Flatten ``context[B, ...]``, project to ``n_caps * caps_dim``, reshape, squash."""
    bsz = context.shape[0]
    flat = context.reshape(bsz, -1)
    proj, c_lin = T.linear_forward(flat, W, b)
    caps, c_sq = squash_forward(proj.reshape(bsz, n_caps, caps_dim))
    return caps, (c_lin, c_sq, context.shape)


def primary_caps_backward(dcaps, cache, need_input_grad: bool = True):
    c_lin, c_sq, shape = cache
    dproj = squash_backward(dcaps, c_sq).reshape(shape[0], -1)
    dflat, dW, db = T.linear_backward(dproj, c_lin, need_input_grad)
    dctx = dflat.reshape(shape) if need_input_grad else None
    return dctx, dW, db


def primary_caps(context: np.ndarray, W: np.ndarray, b: np.ndarray,
                 n_caps: int = 6, caps_dim: int = 128) -> np.ndarray:
    return primary_caps_forward(np.asarray(context, dtype=float)[None], W, b, n_caps, caps_dim)[0][0]


def conv_caps_forward(context: np.ndarray, kernel: np.ndarray, W: np.ndarray, b: np.ndarray,
                      n_caps: int, caps_dim: int, slope: float = 0.01):
    """Primary capsules with a conv layer in front.

    Each 256-d bin context becomes a 16x16 map; the bins are stacked as
    channels, convolved (valid, stride 1), flattened, projected and squashed.
    """
    bsz, nbins, dim = context.shape
    side = int(round(np.sqrt(dim)))
    if side * side != dim:
        raise ValueError(f"context dimension {dim} is not a square")
    maps = context.reshape(bsz, nbins, side, side)
    conv, c_conv = T.conv2d_forward(maps, kernel, 1, 0)
    act, c_act = T.leaky_relu_forward(conv, slope)
    caps, c_pc = primary_caps_forward(act, W, b, n_caps, caps_dim)
    return caps, (c_conv, c_act, c_pc, context.shape)


def conv_caps_backward(dcaps, cache):
    c_conv, c_act, c_pc, shape = cache
    dact, dW, db = primary_caps_backward(dcaps, c_pc)
    dconv = T.leaky_relu_backward(dact, c_act)
    dmaps, dk = T.conv2d_backward(dconv, c_conv)
    return dmaps.reshape(shape), dk, dW, db


def primary_caps_conv_variant(context, kernel, W, b, n_caps: int = 6, caps_dim: int = 128,
                              slope: float = 0.01) -> np.ndarray:
    return conv_caps_forward(np.asarray(context, dtype=float)[None], kernel, W, b,
                             n_caps, caps_dim, slope)[0][0]


# ---------------------------------------------------------------------------
# predictions and routing
# ---------------------------------------------------------------------------

def predictions_forward(u: np.ndarray, W: np.ndarray):
    """``u_hat[..., i, j, :] = u[..., i, :] @ W[i, j]`` for ``W[C, J, D1, D2]``."""
    if u.shape[-2] != W.shape[0] or u.shape[-1] != W.shape[2]:
        raise ValueError(f"capsules {u.shape} do not match transform {W.shape}")
    return np.einsum("...id,ijde->...ije", u, W), (u, W)


def predictions_backward(du_hat, cache):
    u, W = cache
    du = np.einsum("...ije,ijde->...id", du_hat, W)
    c, d = u.shape[-2:]
    dW = np.einsum("bid,bije->ijde", u.reshape(-1, c, d),
                   du_hat.reshape((-1,) + du_hat.shape[-3:]))
    return du, dW


def predictions(u: np.ndarray, W: np.ndarray) -> np.ndarray:
    return predictions_forward(np.asarray(u, dtype=float), W)[0]


def dynamic_routing_forward(u_hat: np.ndarray, iterations: int = 3):
    """Routing-by-agreement over ``u_hat[..., C, J, D2]``.

    Logits start at zero. Each iteration takes couplings as a softmax over
    output capsules, forms the coupled sum, squashes it and adds the
    agreement ``u_hat . v`` to the logits. The returned state holds the final
    logits and their softmax; the last update does not affect ``v``.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    b = np.zeros(u_hat.shape[:-1])
    steps = []
    for _ in range(iterations):
        c = T.softmax(b, axis=-1)
        s = np.einsum("...ij,...ije->...je", c, u_hat)
        v, c_sq = squash_forward(s)
        steps.append((c, c_sq, v))
        b = b + np.einsum("...ije,...je->...ij", u_hat, v)
    state = RoutingState(b, T.softmax(b, axis=-1), iterations)
    return v, state, (u_hat, steps)


def dynamic_routing_backward(dv: np.ndarray, cache) -> np.ndarray:
    u_hat, steps = cache
    du_hat = np.zeros_like(u_hat)
    db = None  # gradient w.r.t. the logits entering the current iteration
    for it in range(len(steps) - 1, -1, -1):
        c, c_sq, v = steps[it]
        if it == len(steps) - 1:
            dv_it = dv
        else:
            # b_next = b + u_hat . v
            du_hat += db[..., None] * v[..., None, :, :]
            dv_it = np.einsum("...ij,...ije->...je", db, u_hat)
        ds = squash_backward(dv_it, c_sq)
        du_hat += c[..., None] * ds[..., None, :, :]
        dc = np.einsum("...je,...ije->...ij", ds, u_hat)
        db_c = T.softmax_backward(dc, c, axis=-1)
        db = db_c if db is None else db + db_c
    return du_hat


def dynamic_routing(u_hat: np.ndarray, iterations: int = 3):
    v, state, _ = dynamic_routing_forward(np.asarray(u_hat, dtype=float), iterations)
    return v, state
