"""Composition of extractor, recurrent block, capsule block and classifier.

Parameters live in a flat ``{path: array}`` dict. Which blocks exist depends
on ``TrainConfig.variant``:

* ``full``      -- BGRU, projected primary capsules, routing, classifier
* ``uni_gru``   -- forward-only GRU in place of the BGRU
* ``no_rnn``    -- extractor bins go straight into the capsule block
* ``no_caps``   -- flattened BGRU output goes straight to the classifier
* ``conv_caps`` -- conv layer in front of the primary capsules
"""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from . import capsule, pfe, recurrent
from . import tensor as T
from .config import TrainConfig, parse_conv_spec

Params = Dict[str, np.ndarray]


def _last_channels(cfg: TrainConfig) -> int:
    convs = [l for l in parse_conv_spec(cfg.conv_spec) if l[0] == "conv"]
    return convs[-1][1]


def context_dim(cfg: TrainConfig) -> int:
    """Per-bin width of what the capsule block (or classifier) receives."""
    if cfg.variant == "no_rnn":
        return cfg.bin_dim
    if cfg.variant == "uni_gru":
        return cfg.hidden
    return 2 * cfg.hidden


def embedding_dim(cfg: TrainConfig) -> int:
    if cfg.variant == "no_caps":
        return pfe.N_BINS * context_dim(cfg)
    return cfg.n_digit * cfg.digit_dim


def init_params(cfg: TrainConfig, n_classes: int, rng: np.random.Generator) -> Params:
    if n_classes < 2:
        raise ValueError("classifier needs at least 2 classes")
    params = pfe.init_pfe(rng, cfg.conv_spec, cfg.bin_dim)
    if cfg.variant != "no_rnn":
        params.update(recurrent.init_gru(rng, "rnn.fwd", cfg.bin_dim, cfg.hidden))
    if cfg.variant not in ("no_rnn", "uni_gru"):
        params.update(recurrent.init_gru(rng, "rnn.bwd", cfg.bin_dim, cfg.hidden))
    ctx = context_dim(cfg)
    if cfg.variant != "no_caps":
        if cfg.variant == "conv_caps":
            side = int(round(np.sqrt(ctx)))
            kk = cfg.conv_caps_kernels
            params["caps.conv.w"] = T.glorot_uniform(rng, (kk, pfe.N_BINS, 3, 3),
                                                     pfe.N_BINS * 9, kk * 9)
            proj_in = kk * (side - 2) ** 2
        else:
            proj_in = pfe.N_BINS * ctx
        proj_out = cfg.n_caps * cfg.caps_dim
        params["caps.proj.w"] = T.glorot_uniform(rng, (proj_in, proj_out), proj_in, proj_out)
        params["caps.proj.b"] = np.zeros(proj_out)
        params["caps.W"] = T.glorot_uniform(
            rng, (cfg.n_caps, cfg.n_digit, cfg.caps_dim, cfg.digit_dim),
            cfg.caps_dim, cfg.digit_dim)
    emb = embedding_dim(cfg)
    params["cls.w"] = T.glorot_uniform(rng, (emb, n_classes), emb, n_classes)
    params["cls.b"] = np.zeros(n_classes)
    return params


def classify(digit_caps: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Flatten digit capsules ``(..., J, D2)``, apply a linear map and softmax."""
    lead = digit_caps.shape[:-2]
    flat = digit_caps.reshape(lead + (-1,))
    return T.softmax(T.linear(flat, W, b), axis=-1)


def forward(params: Params, cfg: TrainConfig, frames: np.ndarray, lengths: Sequence[int],
            training: bool = False, rng: Optional[np.random.Generator] = None,
            with_classifier: bool = True):
    """Returns ``(probs, embeddings, cache)``; ``probs`` is None without classifier."""
    cache: Dict[str, object] = {}
    bins, cache["pfe"] = pfe.pfe_forward_batch(frames, lengths, params, cfg.conv_spec,
                                               cfg.leaky_slope)
    v = cfg.variant
    if v == "no_rnn":
        ctx = bins
    elif v == "uni_gru":
        ctx, cache["rnn"] = recurrent.uni_gru_forward_batch(bins, params, cfg.dropout, training, rng)
    else:
        ctx, cache["rnn"] = recurrent.bgru_forward_batch(bins, params, cfg.dropout, training, rng)

    if v == "no_caps":
        emb = ctx.reshape(ctx.shape[0], -1)
    else:
        if v == "conv_caps":
            u, cache["primary"] = capsule.conv_caps_forward(
                ctx, params["caps.conv.w"], params["caps.proj.w"], params["caps.proj.b"],
                cfg.n_caps, cfg.caps_dim, cfg.leaky_slope)
        else:
            u, cache["primary"] = capsule.primary_caps_forward(
                ctx, params["caps.proj.w"], params["caps.proj.b"], cfg.n_caps, cfg.caps_dim)
        u_hat, cache["pred"] = capsule.predictions_forward(u, params["caps.W"])
        digit, _, cache["route"] = capsule.dynamic_routing_forward(u_hat, cfg.routings)
        emb = digit.reshape(digit.shape[0], -1)
    if not with_classifier:
        return None, emb, cache
    logits, cache["cls"] = T.linear_forward(emb, params["cls.w"], params["cls.b"])
    probs = T.softmax(logits, axis=-1)
    cache["probs"] = probs
    cache["ctx_shape"] = ctx.shape
    return probs, emb, cache


def backward(params: Params, cfg: TrainConfig, dprobs: np.ndarray, cache,
             freeze_pfe: bool = False) -> Params:
    grads: Params = {}
    dlogits = T.softmax_backward(dprobs, cache["probs"], axis=-1)
    demb, grads["cls.w"], grads["cls.b"] = T.linear_backward(dlogits, cache["cls"])
    v = cfg.variant
    if v == "no_caps":
        dctx = demb.reshape(cache["ctx_shape"])
    else:
        ddigit = demb.reshape(demb.shape[0], cfg.n_digit, cfg.digit_dim)
        du_hat = capsule.dynamic_routing_backward(ddigit, cache["route"])
        du, grads["caps.W"] = capsule.predictions_backward(du_hat, cache["pred"])
        if v == "conv_caps":
            dctx, grads["caps.conv.w"], grads["caps.proj.w"], grads["caps.proj.b"] = \
                capsule.conv_caps_backward(du, cache["primary"])
        else:
            need = not (v == "no_rnn" and freeze_pfe)
            dctx, grads["caps.proj.w"], grads["caps.proj.b"] = \
                capsule.primary_caps_backward(du, cache["primary"], need_input_grad=need)
    if v == "no_rnn":
        dbins = dctx
    elif v == "uni_gru":
        dbins, g = recurrent.uni_gru_backward_batch(dctx, cache["rnn"], params)
        grads.update(g)
    else:
        dbins, g = recurrent.bgru_backward_batch(dctx, cache["rnn"], params)
        grads.update(g)
    if not freeze_pfe:
        grads.update(pfe.pfe_backward_batch(dbins, cache["pfe"], params))
    return grads


def loss_and_grads(params: Params, cfg: TrainConfig, frames, lengths, labels,
                   training: bool = False, rng=None, freeze_pfe: bool = False):
    probs, _, cache = forward(params, cfg, frames, lengths, training, rng)
    loss = T.cross_entropy(probs, labels)
    grads = backward(params, cfg, T.cross_entropy_backward(probs, labels), cache, freeze_pfe)
    return loss, probs, grads


def embed_frames(params: Params, cfg: TrainConfig, frames: np.ndarray) -> np.ndarray:
    """Embedding of one sequence ``frames[T, 64, 64]`` (all frames, dropout off)."""
    _, emb, _ = forward(params, cfg, T.as_tensor(frames)[..., None], [frames.shape[0]],
                        training=False, with_classifier=False)
    return emb[0]
