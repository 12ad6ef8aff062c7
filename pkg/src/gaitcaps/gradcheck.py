"""Central-difference checks of every backward pass, block by block."""
from __future__ import annotations

import hashlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import capsule, data, model, pfe, recurrent
from . import tensor as T
from .config import TrainConfig

THRESHOLD = 1e-4


def _weighted(out: np.ndarray, w: np.ndarray) -> float:
    return float((out * w).sum())


def check_conv(rng) -> float:
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    w = rng.normal(size=conv_out_shape(x.shape, k.shape, 2, 1))

    def f():
        out, cache = T.conv2d_forward(x, k, 2, 1)
        dx, dk = T.conv2d_backward(w, cache)
        return _weighted(out, w), {"x": dx, "k": dk}
    return T.finite_diff_check(f, {"x": x, "k": k})


def conv_out_shape(xs, ks, stride, pad):
    return (xs[0], ks[0], (xs[2] + 2 * pad - ks[2]) // stride + 1,
            (xs[3] + 2 * pad - ks[3]) // stride + 1)


def check_pool(rng) -> float:
    # a random permutation keeps every window maximum strict
    x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) / 10.0
    w = rng.normal(size=(2, 3, 3, 3))

    def f():
        out, cache = T.max_pool2d_forward(x, 2)
        return _weighted(out, w), {"x": T.max_pool2d_backward(w, cache)}
    return T.finite_diff_check(f, {"x": x})


def check_linear(rng) -> float:
    x, W, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
    w = rng.normal(size=(3, 4))

    def f():
        out, cache = T.linear_forward(x, W, b)
        dx, dW, db = T.linear_backward(w, cache)
        return _weighted(out, w), {"x": dx, "W": dW, "b": db}
    return T.finite_diff_check(f, {"x": x, "W": W, "b": b})


def check_softmax_ce(rng) -> float:
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)

    def f():
        p = T.softmax(logits)
        dl = T.softmax_backward(T.cross_entropy_backward(p, labels), p)
        return T.cross_entropy(p, labels), {"logits": dl}
    return T.finite_diff_check(f, {"logits": logits})


def _gru_params(rng, d, h, prefixes):
    p = {}
    for pre in prefixes:
        p.update(recurrent.init_gru(rng, pre, d, h))
    for k in p:
        p[k] = p[k] + 0.3 * rng.normal(size=p[k].shape)
    return p


def check_gru_cell(rng) -> float:
    p = _gru_params(rng, 5, 4, ["gru"])
    x = rng.normal(size=(3, 5))
    h = rng.normal(size=(3, 4)) * 0.5
    w = rng.normal(size=(3, 4))
    pp = {k[len("gru."):]: v for k, v in p.items()}

    def f():
        out, cache = recurrent._cell_forward(x, h, pp)
        g = {k: np.zeros_like(v) for k, v in pp.items()}
        dx, dh = recurrent._cell_backward(w, cache, pp, g)
        g.update(x=dx, h=dh)
        return _weighted(out, w), g
    return T.finite_diff_check(f, dict(pp, x=x, h=h))


def check_bgru(rng) -> float:
    p = _gru_params(rng, 5, 4, ["rnn.fwd", "rnn.bwd"])
    xs = rng.normal(size=(2, pfe.N_BINS, 5))
    w = rng.normal(size=(2, pfe.N_BINS, 8))

    def f():
        out, cache = recurrent.bgru_forward_batch(xs, p, dropout=0.0)
        dx, g = recurrent.bgru_backward_batch(w, cache, p)
        g["xs"] = dx
        return _weighted(out, w), g
    return T.finite_diff_check(f, dict(p, xs=xs))


def check_squash(rng) -> float:
    s = rng.normal(size=(5, 6))
    w = rng.normal(size=(5, 6))

    def f():
        v, cache = capsule.squash_forward(s)
        return _weighted(v, w), {"s": capsule.squash_backward(w, cache)}
    return T.finite_diff_check(f, {"s": s})


def check_predictions(rng) -> float:
    u = rng.normal(size=(2, 3, 4))
    W = rng.normal(size=(3, 2, 4, 5))
    w = rng.normal(size=(2, 3, 2, 5))

    def f():
        out, cache = capsule.predictions_forward(u, W)
        du, dW = capsule.predictions_backward(w, cache)
        return _weighted(out, w), {"u": du, "W": dW}
    return T.finite_diff_check(f, {"u": u, "W": W})


def check_routing(rng, iterations: int = 3) -> float:
    u_hat = rng.normal(size=(2, 4, 3, 4))
    w = rng.normal(size=(2, 3, 4))

    def f():
        v, _, cache = capsule.dynamic_routing_forward(u_hat, iterations)
        return _weighted(v, w), {"u_hat": capsule.dynamic_routing_backward(w, cache)}
    return T.finite_diff_check(f, {"u_hat": u_hat})


def check_triplet(rng) -> float:
    feats = rng.normal(size=(6, pfe.N_BINS, 4))
    labels = [0, 0, 1, 1, 2, 2]

    def f():
        loss, cache = pfe.triplet_loss_ba_forward(feats, labels, 1.0)
        return loss, {"feats": pfe.triplet_loss_ba_backward(cache)}
    return T.finite_diff_check(f, {"feats": feats})


def kink_signature(pfe_cache) -> bytes:
    """Digest of every discrete choice the extractor made on its last pass."""
    c_conv, c_pool, c_hpm, _ = pfe_cache
    h = hashlib.sha1()
    for entry in c_conv:
        if entry[0] == "pool":
            x, window, stride, out = entry[1]
            ho, wo = out.shape[1:3]
            for _, sl in T._pool_views(x, window, stride, ho, wo):
                h.update(np.packbits(x[sl] == out).tobytes())
        else:
            h.update(np.packbits(entry[3][0]).tobytes())
    _, offsets, lengths, maps = c_pool
    for o, n in zip(offsets, lengths):
        h.update(maps[o:o + n].argmax(axis=0).tobytes())
    for arg in c_hpm[3]:
        h.update(arg.tobytes())
    return h.digest()


def silhouette_batch(rng, n_frames: int = 3) -> np.ndarray:
    """Two short rendered walking sequences, channels-last."""
    frames = []
    for view in (0, 90):
        shape = data.walker_shape(rng)
        phase = rng.uniform(0, 2 * np.pi)
        for t in range(n_frames):
            raw = data.render_walker(shape, 2.0 * t, view, "NM", phase, 0.0)
            frames.append(data.preprocess_frame(raw))
    return np.stack(frames).astype(np.float64)[..., None]


def check_full_model(rng, cfg: TrainConfig, n_frames: int = 3, max_entries: int = 12,
                     weight_scale: float = 3.0, report: Dict[str, float] = None) -> float:
    """Whole network on a 2-sequence batch; large tensors are spot-checked.

    The check point is a scaled-up initialisation: at the plain init the
    deepest gradients (e.g. GRU reset-gate weights, around 1e-8) sit close to
    the roundoff floor of the central differences.
    """
    cfg = cfg.replace(dropout=0.0)
    params = {k: v * weight_scale if v.ndim > 1 else v
              for k, v in model.init_params(cfg, 3, rng).items()}
    frames = silhouette_batch(rng, n_frames)
    lengths = [n_frames, n_frames]
    labels = np.array([0, 2])
    last = {}

    def f():
        probs, _, cache = model.forward(params, cfg, frames, lengths)
        last["pfe"] = cache["pfe"]
        loss = T.cross_entropy(probs, labels)
        grads = model.backward(params, cfg, T.cross_entropy_backward(probs, labels), cache)
        return loss, grads
    return T.finite_diff_check(f, params, max_entries=max_entries, rng=rng, report=report,
                               signature=lambda: kink_signature(last["pfe"]))


def run_all(scale: str = "desk", seed: int = 42,
            only: Optional[Sequence[str]] = None) -> List[Tuple[str, float]]:
    """Max relative error per block; ``only`` restricts the run to named blocks."""
    rng = np.random.default_rng(seed)
    blocks: List[Tuple[str, Callable[[], float]]] = [
        ("conv2d", lambda: check_conv(rng)),
        ("max_pool2d", lambda: check_pool(rng)),
        ("linear", lambda: check_linear(rng)),
        ("softmax+cross_entropy", lambda: check_softmax_ce(rng)),
        ("gru_cell", lambda: check_gru_cell(rng)),
        ("bgru_unrolled", lambda: check_bgru(rng)),
        ("squash", lambda: check_squash(rng)),
        ("predictions", lambda: check_predictions(rng)),
        ("routing_3iter", lambda: check_routing(rng, 3)),
        ("triplet_ba", lambda: check_triplet(rng)),
        ("full_model", lambda: check_full_model(rng, TrainConfig(scale=scale))),
    ]
    if only is not None:
        unknown = sorted(set(only) - {name for name, _ in blocks})
        if unknown:
            raise ValueError(f"unknown gradcheck block(s): {', '.join(unknown)}")
        blocks = [b for b in blocks if b[0] in only]
    return [(name, fn()) for name, fn in blocks]
