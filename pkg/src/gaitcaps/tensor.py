"""Dense tensor math with explicit forward/backward passes.

Tensors are plain float64 numpy arrays. Every differentiable op comes as a
``*_forward`` function returning ``(output, cache)`` and a matching
``*_backward`` that maps an upstream gradient (plus the cache) to gradients
of the inputs. Convenience wrappers without the cache are provided for
inference code and tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray
DTYPE = np.float64


@dataclass
class GradRecord:
    path: str
    value: Tensor
    gradient: Tensor

    def __post_init__(self):
        if self.value.shape != self.gradient.shape:
            raise ValueError(
                f"gradient shape {self.gradient.shape} != value shape "
                f"{self.value.shape} for {self.path!r}")


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# convolution
#
# The workhorse kernels are channels-last (NHWC, kernels as [kh, kw, C, K]):
# patch extraction and the col2im scatter then touch contiguous channel runs.
# The public ``conv2d``/``max_pool2d`` take the usual NCHW layout.
# ---------------------------------------------------------------------------

def conv2d_nhwc_forward(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0):
    n, h, w, c = x.shape
    kernel = np.ascontiguousarray(kernel)
    kh, kw, kc, k = kernel.shape
    if kc != c:
        raise ValueError(f"input has {c} channels but kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if padding:
        xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = (cols @ kernel.reshape(kh * kw * c, k)).reshape(n, ho, wo, k)
    return out, (cols, kernel, x.shape, stride, padding)


def conv2d_nhwc_backward(dout: Tensor, cache, need_input_grad: bool = True):
    cols, kernel, (n, h, w, c), stride, padding = cache
    kh, kw, _, k = kernel.shape
    ho, wo = dout.shape[1:3]
    dmat = dout.reshape(-1, k)
    dkernel = (cols.T @ dmat).reshape(kernel.shape)
    if not need_input_grad:
        return None, dkernel
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dout.dtype)
    kernel_t = np.ascontiguousarray(kernel.transpose(0, 1, 3, 2))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                (dmat @ kernel_t[i, j]).reshape(n, ho, wo, c)
    dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
    return dx, dkernel


def conv2d_forward(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[K,C,kh,kw]`` (no flip)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    out, cache = conv2d_nhwc_forward(x.transpose(0, 2, 3, 1), kernel.transpose(2, 3, 1, 0),
                                     stride, padding)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d_backward(dout: Tensor, cache, need_input_grad: bool = True):
    dx, dk = conv2d_nhwc_backward(np.ascontiguousarray(dout.transpose(0, 2, 3, 1)), cache,
                                  need_input_grad)
    dk = np.ascontiguousarray(dk.transpose(3, 2, 0, 1))
    if dx is not None:
        dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    return dx, dk


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d_forward(x, kernel, stride, padding)[0]


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def _pool_views(x, window, stride, ho, wo):
    for pos in range(window * window):
        di, dj = divmod(pos, window)
        yield pos, (slice(None), slice(di, di + stride * (ho - 1) + 1, stride),
                    slice(dj, dj + stride * (wo - 1) + 1, stride))


def max_pool2d_nhwc_forward(x: Tensor, window: int, stride: Optional[int] = None):
    """Max over ``window x window`` patches of ``x[N, H, W, C]``."""
    stride = window if stride is None else stride
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = None
    for _, sl in _pool_views(x, window, stride, ho, wo):
        out = x[sl].copy() if out is None else np.maximum(out, x[sl], out=out)
    return out, (x, window, stride, out)


def max_pool2d_nhwc_backward(dout: Tensor, cache) -> Tensor:
    # window offsets are visited in row-major order and each output cell's
    # gradient goes to the first offset attaining the max
    x, window, stride, out = cache
    ho, wo = out.shape[1:3]
    dx = np.zeros(x.shape, dtype=dout.dtype)
    pending = np.ones(out.shape, dtype=bool)
    for _, sl in _pool_views(x, window, stride, ho, wo):
        hit = (x[sl] == out) & pending
        dx[sl] += np.where(hit, dout, 0.0)
        pending &= ~hit
    return dx


def max_pool2d_forward(x: Tensor, window: int, stride: Optional[int] = None):
    """NCHW max pooling; ties go to the first index in row-major order."""
    out, cache = max_pool2d_nhwc_forward(x.transpose(0, 2, 3, 1), window, stride)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def max_pool2d_backward(dout: Tensor, cache) -> Tensor:
    dx = max_pool2d_nhwc_backward(dout.transpose(0, 2, 3, 1), cache)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    return max_pool2d_forward(x, window, stride)[0]


# ---------------------------------------------------------------------------
# dense layers and activations
# ---------------------------------------------------------------------------

def linear_forward(x: Tensor, W: Tensor, b: Tensor):
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
    return x @ W + b, (x, W)


def linear_backward(dout: Tensor, cache, need_input_grad: bool = True):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = x2.T @ d2
    db = d2.sum(axis=0)
    dx = dout @ W.T if need_input_grad else None
    return dx, dW, db


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return linear_forward(x, W, b)[0]


def leaky_relu_forward(x: Tensor, slope: float = 0.01):
    mask = x > 0
    out = x * slope
    np.copyto(out, x, where=mask)
    return out, (mask, slope)


def leaky_relu_backward(dout: Tensor, cache) -> Tensor:
    mask, slope = cache
    dx = dout * slope
    np.copyto(dx, dout, where=mask)
    return dx


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: Tensor, probs: Tensor, axis: int = -1) -> Tensor:
    return probs * (dout - (dout * probs).sum(axis=axis, keepdims=True))


LOG_CLAMP = 1e-12


def cross_entropy(probs: Tensor, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under row-stochastic ``probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label index out of range [0, {k})")
    p = probs[np.arange(b), labels]
    return float(-np.log(np.maximum(p, LOG_CLAMP)).mean())


def cross_entropy_backward(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    b = probs.shape[0]
    p = probs[np.arange(b), labels]
    dprobs = np.zeros_like(probs)
    dprobs[np.arange(b), labels] = np.where(p > LOG_CLAMP, -1.0 / (b * np.maximum(p, LOG_CLAMP)), 0.0)
    return dprobs


def dropout_forward(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]):
    """Inverted dropout: surviving units are scaled by ``1/(1-rate)``."""
    if not training or rate <= 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: Tensor, mask) -> Tensor:
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# initialisation and optimisation
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class AdamState:
    m: Dict[str, Tensor]
    v: Dict[str, Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, Tensor], grads: Mapping[str, Tensor], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Only keys present in ``grads`` are touched; this is how frozen parameter
    groups are kept fixed.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {key}")
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while perturbing index {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """``|a - n| / max(|a|, |n|, 1e-8)`` with Euclidean norms over the tensor."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if a.size == 0:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def finite_diff_check(loss_and_grads: Callable[[], tuple], point: Dict[str, Tensor],
                      epsilon: float = 1e-5, max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      report: Optional[Dict[str, float]] = None,
                      signature: Optional[Callable[[], bytes]] = None) -> float:
    """Max over tensors of the relative error between analytic and
    central-difference gradients.

    ``loss_and_grads()`` evaluates the op at the current contents of ``point``
    and returns ``(loss, {name: grad})``. Entries of ``point`` are perturbed in
    place and restored. With ``max_entries`` set, only a random subset of that
    many coordinates per tensor is probed. Per-tensor errors are written to
    ``report`` when given.

    ``signature()``, when given, summarises the discrete choices (ReLU signs,
    max winners) made by the most recent ``loss_and_grads`` call. A probe whose
    perturbations change the signature straddles a kink, where central
    differences are meaningless; it is discarded and another coordinate drawn.
    """
    loss, analytic = loss_and_grads()
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at check point")
    base_sig = signature() if signature else None
    rng = rng or np.random.default_rng(0)
    worst = 0.0

    def probe(name, x, idx):
        old = x[idx]
        x[idx] = old + epsilon
        fp = loss_and_grads()[0]
        kinked = signature is not None and signature() != base_sig
        x[idx] = old - epsilon
        fm = loss_and_grads()[0]
        kinked = kinked or (signature is not None and signature() != base_sig)
        x[idx] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while perturbing {name}{idx}")
        return None if kinked else (fp - fm) / (2.0 * epsilon)

    for name, x in point.items():
        a = analytic[name]
        if signature is None and (max_entries is None or x.size <= max_entries):
            err = relative_error(a, numerical_gradient(lambda: loss_and_grads()[0], x, epsilon))
        else:
            want = x.size if max_entries is None else min(max_entries, x.size)
            picks, num = [], []
            for fi in rng.permutation(x.size):
                if len(picks) == want:
                    break
                d = probe(name, x, np.unravel_index(fi, x.shape))
                if d is not None:
                    picks.append(fi)
                    num.append(d)
            if not picks:
                raise RuntimeError(f"every probe of {name} straddles a kink")
            err = relative_error(a.ravel()[picks], np.array(num))
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst


def params_to_records(params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> list:
    return [GradRecord(k, params[k], grads[k]) for k in sorted(grads)]


def tree_shapes(params: Mapping[str, Tensor]) -> Dict[str, Sequence[int]]:
    return {k: tuple(v.shape) for k, v in params.items()}
