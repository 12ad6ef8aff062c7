"""Partial feature extraction: per-frame convs, set pooling, horizontal
pyramid bins and per-bin mapping, plus the batch-all triplet loss used to
pretrain it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .config import parse_conv_spec

SCALES = (1, 2, 4, 8, 16)
N_BINS = sum(SCALES)


@dataclass
class BinFeatureSet:
    bins: np.ndarray  # (31, d)

    @property
    def scale_tags(self) -> List[int]:
        return [s for s in SCALES for _ in range(s)]

    def __post_init__(self):
        if self.bins.shape[0] != N_BINS:
            raise ValueError(f"expected {N_BINS} bins, got {self.bins.shape[0]}")


def init_pfe(rng: np.random.Generator, conv_spec: str, bin_dim: int,
             in_channels: int = 1) -> Dict[str, np.ndarray]:
    params = {}
    c = in_channels
    for i, layer in enumerate(parse_conv_spec(conv_spec)):
        if layer[0] != "conv":
            continue
        _, out_ch, ks, _ = layer
        params[f"pfe.conv{i}.w"] = T.glorot_uniform(
            rng, (out_ch, c, ks, ks), c * ks * ks, out_ch * ks * ks)
        c = out_ch
    params["pfe.bins.w"] = T.glorot_uniform(rng, (N_BINS, 2 * c, bin_dim), 2 * c, bin_dim)
    params["pfe.bins.b"] = np.zeros((N_BINS, bin_dim))
    return params


# ---------------------------------------------------------------------------
# conv stack
# ---------------------------------------------------------------------------

def conv_stack_forward(frames, params, conv_spec: str, slope: float):
    """Channels-last conv stack: ``frames[N, H, W, 1] -> maps[N, H', W', C]``."""
    x = frames
    caches = []
    for i, layer in enumerate(parse_conv_spec(conv_spec)):
        if layer[0] == "pool":
            x, c = T.max_pool2d_nhwc_forward(x, 2)
            caches.append(("pool", c))
        else:
            _, _, _, pad = layer
            kernel = params[f"pfe.conv{i}.w"].transpose(2, 3, 1, 0)
            x, c1 = T.conv2d_nhwc_forward(x, kernel, 1, pad)
            x, c2 = T.leaky_relu_forward(x, slope)
            caches.append(("conv", i, c1, c2))
    return x, caches


def conv_stack_backward(dx, caches, grads):
    for j in range(len(caches) - 1, -1, -1):
        entry = caches[j]
        if entry[0] == "pool":
            dx = T.max_pool2d_nhwc_backward(dx, entry[1])
        else:
            _, i, c1, c2 = entry
            dx = T.leaky_relu_backward(dx, c2)
            dx, dk = T.conv2d_nhwc_backward(dx, c1, need_input_grad=j > 0)
            grads[f"pfe.conv{i}.w"] = np.ascontiguousarray(dk.transpose(3, 2, 0, 1))
    return grads


# ---------------------------------------------------------------------------
# set pooling
# ---------------------------------------------------------------------------

def set_pool(maps: np.ndarray) -> np.ndarray:
    """Elementwise max over the frame axis of ``maps[T, C, H, W]``."""
    if maps.shape[0] < 1:
        raise ValueError("set pooling needs at least one frame")
    return maps.max(axis=0)


def set_pool_forward(maps: np.ndarray, lengths: Sequence[int]):
    """Set-pool consecutive segments of a stacked frame axis.

    ``maps`` holds the frames of several sequences back to back; ``lengths``
    gives how many frames belong to each.
    """
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
    out = np.maximum.reduceat(maps, offsets, axis=0)
    return out, (maps.shape, offsets, np.asarray(lengths), maps)


def set_pool_backward(dout, cache):
    shape, offsets, lengths, maps = cache
    dmaps = np.zeros(shape, dtype=dout.dtype)
    for b, (o, n) in enumerate(zip(offsets, lengths)):
        seg = maps[o:o + n]
        arg = seg.argmax(axis=0)  # first frame wins ties
        np.put_along_axis(dmaps[o:o + n], arg[None], dout[b][None], axis=0)
    return dmaps


# ---------------------------------------------------------------------------
# horizontal pyramid
# ---------------------------------------------------------------------------

def hpm_forward(fmap: np.ndarray, scales: Sequence[int] = SCALES):
    """Split channels-last ``fmap[B, H, W, C]`` into horizontal strips.

    Returns raw bins ``(B, sum(scales), 2C)`` ordered scale-major, top to
    bottom: per-channel strip max followed by strip mean. Heights not
    divisible by the finest scale are zero-padded at the bottom.
    """
    b, h, w, c = fmap.shape
    top = max(scales)
    hp = -(-h // top) * top
    if hp != h:
        padded = np.zeros((b, hp, w, c), dtype=fmap.dtype)
        padded[:, :h] = fmap
        fmap = padded
    out = []
    args = []
    for s in scales:
        strips = fmap.reshape(b, s, (hp // s) * w, c)
        arg = strips.argmax(axis=2)
        mx = np.take_along_axis(strips, arg[:, :, None, :], axis=2)[:, :, 0]
        out.append(np.concatenate([mx, strips.mean(axis=2)], axis=-1))
        args.append(arg)
    return np.concatenate(out, axis=1), ((b, h, w, c), hp, tuple(scales), args)


def hpm_backward(dbins: np.ndarray, cache) -> np.ndarray:
    (b, h, w, c), hp, scales, args = cache
    dmap = np.zeros((b, hp, w, c), dtype=dbins.dtype)
    start = 0
    for s, arg in zip(scales, args):
        d = dbins[:, start:start + s]  # (B, s, 2C)
        start += s
        n = (hp // s) * w
        dstrips = np.empty((b, s, n, c), dtype=dbins.dtype)
        dstrips[:] = (d[:, :, c:] / n)[:, :, None, :]
        idx = arg[:, :, None, :]
        np.put_along_axis(dstrips, idx,
                          np.take_along_axis(dstrips, idx, axis=2) + d[:, :, None, :c], axis=2)
        dmap += dstrips.reshape(b, hp, w, c)
    return dmap[:, :h]


def hpm_split(fmap: np.ndarray, scales: Sequence[int] = SCALES) -> np.ndarray:
    """Single map ``fmap[C, H, W]`` -> raw bins ``(31, 2C)``."""
    return hpm_forward(np.asarray(fmap, dtype=float).transpose(1, 2, 0)[None], scales)[0][0]


# ---------------------------------------------------------------------------
# per-bin mapping
# ---------------------------------------------------------------------------

def bin_map_forward(raw: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Independent linear map per bin: ``raw[B, n, 2C] -> (B, n, d)``."""
    if raw.shape[-2] != W.shape[0] or raw.shape[-1] != W.shape[1]:
        raise ValueError(f"bin_map: raw bins {raw.shape} do not fit weights {W.shape}")
    return np.einsum("bnc,ncd->bnd", raw, W) + b, raw


def bin_map_backward(dout, raw, W):
    dW = np.einsum("bnc,bnd->ncd", raw, dout)
    db = dout.sum(axis=0)
    draw = np.einsum("bnd,ncd->bnc", dout, W)
    return draw, dW, db


def bin_map(raw: np.ndarray, W: np.ndarray, b: np.ndarray) -> BinFeatureSet:
    return BinFeatureSet(bin_map_forward(raw[None], W, b)[0][0])


# ---------------------------------------------------------------------------
# whole block
# ---------------------------------------------------------------------------

def pfe_forward_batch(frames: np.ndarray, lengths: Sequence[int], params, conv_spec: str,
                      slope: float = 0.01):
    """Run the extractor over several sequences stacked along the frame axis.

    ``frames`` is channels-last ``(sum(lengths), H, W, 1)``; the result is
    ``(B, 31, d)``.
    """
    maps, c_conv = conv_stack_forward(frames, params, conv_spec, slope)
    pooled, c_pool = set_pool_forward(maps, lengths)
    raw, c_hpm = hpm_forward(pooled)
    out, c_bin = bin_map_forward(raw, params["pfe.bins.w"], params["pfe.bins.b"])
    return out, (c_conv, c_pool, c_hpm, c_bin)


def pfe_backward_batch(dout, cache, params) -> Dict[str, np.ndarray]:
    c_conv, c_pool, c_hpm, c_bin = cache
    grads: Dict[str, np.ndarray] = {}
    draw, grads["pfe.bins.w"], grads["pfe.bins.b"] = bin_map_backward(dout, c_bin, params["pfe.bins.w"])
    dpooled = hpm_backward(draw, c_hpm)
    dmaps = set_pool_backward(dpooled, c_pool)
    conv_stack_backward(dmaps, c_conv, grads)
    return grads


def pfe_forward(frames: np.ndarray, params, conv_spec: str, slope: float = 0.01) -> BinFeatureSet:
    """Bins for one sequence ``frames[T, 1, H, W]``."""
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("pfe_forward expects frames shaped (T, 1, H, W) with T >= 1")
    nhwc = T.as_tensor(frames).transpose(0, 2, 3, 1)
    out, _ = pfe_forward_batch(nhwc, [frames.shape[0]], params, conv_spec, slope)
    return BinFeatureSet(out[0])


# ---------------------------------------------------------------------------
# batch-all triplet loss
# ---------------------------------------------------------------------------

DIST_FLOOR = 1e-12


def triplet_loss_ba_forward(feats: np.ndarray, labels, margin: float = 0.2):
    """Batch-all triplet loss averaged over triplets with positive loss.

    ``feats`` is ``(B, n_bins, d)``. Distances are Euclidean per bin and every
    (anchor, positive, negative, bin) combination counts as one triplet.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    neg_mask = ~same
    trip_mask = pos_mask[:, :, None] & neg_mask[:, None, :]  # (a, p, n)
    if not trip_mask.any():
        raise ValueError("degenerate batch: no (anchor, positive, negative) triplet")
    x = feats.transpose(1, 0, 2)  # (bins, B, d)
    diff = x[:, :, None, :] - x[:, None, :, :]
    sq = (diff ** 2).sum(-1)
    dist = np.sqrt(np.maximum(sq, DIST_FLOOR))  # (bins, B, B)
    gap = dist[:, :, :, None] - dist[:, :, None, :]  # d(a,p) - d(a,n), (bins, a, p, n)
    active = (margin + gap > 0) & trip_mask[None]
    count = int(active.sum())
    # margin + mean(gap) rather than mean(margin + gap): exact when all gaps vanish
    loss = float(margin + gap[active].sum() / count) if count else 0.0
    return loss, (diff, sq, dist, active, count)


def triplet_loss_ba_backward(cache) -> np.ndarray:
    diff, sq, dist, active, count = cache
    nb, b = dist.shape[:2]
    if count == 0:
        return np.zeros((b, nb, diff.shape[-1]))
    w = active / count
    ddist = w.sum(axis=3) - w.sum(axis=2)  # d(a,p) enters +, d(a,n) enters -
    ddist = np.where(sq > DIST_FLOOR, ddist / dist, 0.0)
    # dist[a, q] depends on x[a] - x[q]
    g = ddist[..., None] * diff
    dx = g.sum(axis=2) - g.sum(axis=1)
    return dx.transpose(1, 0, 2)


def triplet_loss_ba(feats, labels, margin: float = 0.2) -> float:
    return triplet_loss_ba_forward(np.asarray(feats, dtype=float), labels, margin)[0]
