"""Photometric transformer: a learned, per-image, piecewise-linear intensity map.

A small CNN (the slope predictor) looks at a downsampled copy of the image
and emits K+2 slopes.  The slopes define ``h``: the window ``[u, v)`` is cut
into K equal segments, each mapped linearly with its own slope, and the two
half-lines outside the window continue with the first and last slopes.
``h`` is applied to every pixel at full resolution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class IntensityWindow:
    u: float
    v: float
    K: int

    def __post_init__(self):
        if not self.u < self.v:
            raise ValueError(f"window needs u < v, got u={self.u}, v={self.v}")
        if self.K < 1:
            raise ValueError(f"window needs K >= 1, got {self.K}")

    @property
    def t(self):
        return (self.v - self.u) / self.K

    def boundaries(self):
        """Interior and outer segment boundaries ``u + t*k`` for k = 0..K."""
        return [self.u + self.t * k for k in range(self.K + 1)]


@dataclass
class PtnConfig:
    K: int = 10
    conv_layers: int = 6
    channels: tuple = (8, 8, 16, 16, 16, 16)
    strides: tuple = (1, 2, 1, 2, 1, 2)
    downsample_factor: int = 3
    epsilon: float = 1e-2
    lam: float = 1.0
    slope_floor: float = 1e-3
    printed_hinge: bool = False
    rescale_output: bool = True
    input_stats: bool = True
    stats_center: tuple = (0.5, 0.25)
    stats_scale: float = 0.1
    window_u: float = 0.0
    window_v: float = 1.0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.strides = tuple(self.strides)
        self.stats_center = tuple(self.stats_center)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if len(self.channels) != self.conv_layers or len(self.strides) != self.conv_layers:
            raise ValueError("channels and strides need one entry per conv layer")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be a positive integer")

    @property
    def n_slopes(self):
        return self.K + 2

    def default_window(self):
        return IntensityWindow(self.window_u, self.window_v, self.K)


# ---------------------------------------------------------------------------
# the intensity map h


def _check_slopes(slopes, K):
    if slopes.shape[-1] != K + 2:
        raise ValueError(f"expected {K + 2} slopes for K={K}, got {slopes.shape[-1]}")


def _segments(x, u, v, K):
    """Segment index per pixel (0 below the window, 1..K inside, K+1 at/above v) and its start."""
    t = (v - u) / K
    inside = np.clip(np.floor((x - u) / t), 0, K - 1).astype(np.int64) + 1
    idx = np.where(x < u, 0, np.where(x >= v, K + 1, inside))
    start = np.where(idx == 0, u, u + t * (idx - 1))
    return idx, start, t


def _h_batch(x, slopes, u, v, K):
    """Evaluate h for a batch.  x: (N, ...), slopes: (N, K+2), u, v: (N,).

    Written as ``x + correction`` where the correction is built from
    ``slope - 1`` terms, so unit slopes return ``x`` bit-for-bit.
    """
    n = x.shape[0]
    shape = (n,) + (1,) * (x.ndim - 1)
    u = np.asarray(u, dtype=float).reshape(shape)
    v = np.asarray(v, dtype=float).reshape(shape)
    idx, start, t = _segments(x, u, v, K)
    d = slopes - 1.0
    # completed[:, k] = sum_{l=1}^{k} (s_l - 1) for k = 0..K
    completed = np.concatenate([np.zeros((n, 1)), np.cumsum(d[:, 1:K + 1], axis=1)], axis=1)
    rows = np.arange(n).reshape(shape)
    prior = np.where(idx == 0, 0.0, completed[rows, np.maximum(idx - 1, 0)])
    return x + t * prior + d[rows, idx] * (x - start), idx, start, t


def apply_h(x, S, window: IntensityWindow):
    """Map every pixel of ``x`` through h with slopes ``S`` over ``window``."""
    x = np.asarray(x, dtype=float)
    S = np.asarray(S, dtype=float)
    _check_slopes(S, window.K)
    out, *_ = _h_batch(x[None], S[None], [window.u], [window.v], window.K)
    return out[0]


def _h_grads(g, x, slopes, idx, start, t, K):
    n = x.shape[0]
    g2 = g.reshape(n, -1)
    idx2 = idx.reshape(n, -1)
    xs = (x - start).reshape(n, -1)
    offs = idx2 + (K + 2) * np.arange(n)[:, None]
    size = n * (K + 2)
    # own-segment term: dh/ds_idx = x - start
    gs = np.bincount(offs.ravel(), weights=(g2 * xs).ravel(), minlength=size).reshape(n, K + 2)
    # completed-segment term: dh/ds_l = t for every 1 <= l < idx
    per_seg = np.bincount(offs.ravel(), weights=g2.ravel(), minlength=size).reshape(n, K + 2)
    tail = np.cumsum(per_seg[:, ::-1], axis=1)[:, ::-1]
    gs[:, 1:K + 1] += tail[:, 2:K + 2] * np.asarray(t).reshape(n, 1)
    rows = np.arange(n).reshape((n,) + (1,) * (x.ndim - 1))
    gx = g * slopes[rows, idx]
    return gs, gx


def h_backward(upstream, x, S, window: IntensityWindow):
    """Gradients of ``sum(upstream * h(x, S))`` with respect to S and x."""
    x = np.asarray(x, dtype=float)
    S = np.asarray(S, dtype=float)
    _check_slopes(S, window.K)
    _, idx, start, t = _h_batch(x[None], S[None], [window.u], [window.v], window.K)
    gs, gx = _h_grads(np.asarray(upstream, dtype=float)[None], x[None], S[None], idx, start,
                      np.array([t]).ravel(), window.K)
    return gs[0], gx[0]


def h_op(x, slopes, u, v, K) -> ad.Tensor:
    """Graph node applying a per-image h.  x: (N, H, W), slopes: (N, K+2), u, v: (N,)."""
    x, slopes = ad.as_tensor(x), ad.as_tensor(slopes)
    _check_slopes(slopes.data, K)
    out, idx, start, t = _h_batch(x.data, slopes.data, u, v, K)

    def backward(g):
        gs, gx = _h_grads(g, x.data, slopes.data, idx, start, np.asarray(t).reshape(-1), K)
        return gx, gs

    return ad.make_node(out, (x, slopes), backward, "photometric_h")


# ---------------------------------------------------------------------------
# monotonicity regularizer


def hinge_regularizer(S, epsilon, lam, printed=False):
    """Penalty pushing every slope above ``epsilon``; returns ``(penalty, grad)``.

    ``printed=True`` evaluates ``min(-s, -eps) + eps`` as typeset in the
    source formula, which is never positive and so rewards large slopes
    rather than penalizing small ones; it exists only for comparison.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    S = np.asarray(S, dtype=float)
    if printed:
        terms = np.minimum(-S, -epsilon) + epsilon
        grad = np.where(-S < -epsilon, -lam, 0.0)
    else:
        terms = np.maximum(epsilon - S, 0.0)
        grad = np.where(S < epsilon, -lam, 0.0)
    return lam * float(terms.sum()), grad


def hinge_op(slopes, epsilon, lam, printed=False) -> ad.Tensor:
    """Batch-mean of the per-image hinge penalty as a graph node."""
    slopes = ad.as_tensor(slopes)
    n = slopes.shape[0]
    terms, grads = zip(*(hinge_regularizer(s, epsilon, lam, printed) for s in slopes.data))
    grad = np.stack(grads) / n
    return ad.make_node(np.mean(terms), (slopes,), lambda g: (g * grad,), "hinge")


# ---------------------------------------------------------------------------
# slope predictor g


def instance_norm(x, gain=1.0, bias=0.0, eps=1e-5):
    """Normalize one channel to zero mean and unit variance, then scale and shift."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("instance_norm needs a channel with at least 2 elements")
    flat = x.reshape(1, -1, 1, 1)
    out = ad.instance_norm(flat, np.array([gain], dtype=float), np.array([bias], dtype=float), eps)
    return out.data.reshape(x.shape)


def _uniform_fan_in(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_ptn_params(params: ad.ParameterStore, config: PtnConfig, rng) -> ad.ParameterStore:
    c_in = 1
    for i, (c_out, _) in enumerate(zip(config.channels, config.strides)):
        params.add(f"ptn.conv{i}.w", _uniform_fan_in(rng, (c_out, c_in, 3, 3), c_in * 9))
        params.add(f"ptn.conv{i}.b", np.zeros(c_out))
        params.add(f"ptn.norm{i}.gain", np.ones(c_out))
        params.add(f"ptn.norm{i}.bias", np.zeros(c_out))
        c_in = c_out
    # zero head weights and softplus(bias) + floor == 1: g starts as the identity map
    params.add("ptn.head.w", np.zeros((config.n_slopes, c_in)))
    params.add("ptn.head.b", np.full(config.n_slopes, _softplus_inverse(1.0 - config.slope_floor)))
    if config.input_stats:
        params.add("ptn.stats.w", np.zeros((2, config.n_slopes)))
    return params


def _softplus_inverse(y):
    return float(y + np.log(-np.expm1(-y)))


def ptn_layer_names(config: PtnConfig):
    """Parameter names grouped per conv layer, in depth order."""
    return [[f"ptn.conv{i}.w", f"ptn.conv{i}.b", f"ptn.norm{i}.gain", f"ptn.norm{i}.bias"]
            for i in range(config.conv_layers)]


def input_statistics(x):
    """Per-image mean and std of an (N, H, W, 1) batch, fed to the head as constants.

    Instance normalization strips global brightness and contrast from the
    conv features, so without these the head cannot tell images apart by
    exposure.  ``slope_graph`` standardizes them with fixed reference values
    so their weights learn at a rate comparable to the conv features.
    """
    flat = np.asarray(x, dtype=float).reshape(len(x), -1)
    return np.stack([flat.mean(axis=1), flat.std(axis=1)], axis=1)


def slope_graph(x, params: ad.ParameterStore, config: PtnConfig) -> ad.Tensor:
    """Slopes (N, K+2) from an (N, H, W, 1) intensity batch."""
    h = ad.avg_pool(x, config.downsample_factor) if config.downsample_factor > 1 else ad.as_tensor(x)
    stats = None
    if config.input_stats:
        stats = (input_statistics(h.data) - np.asarray(config.stats_center)) / config.stats_scale
    for i, s in enumerate(config.strides):
        if h.shape[1] < 2 or h.shape[2] < 2:
            raise ValueError(f"image too small for the slope predictor at layer {i}: {h.shape[1:3]}")
        h = ad.conv2d(h, params[f"ptn.conv{i}.w"], params[f"ptn.conv{i}.b"], stride=s, padding=1)
        if h.shape[1] * h.shape[2] < 2:
            raise ValueError(f"image too small for the slope predictor at layer {i}")
        h = ad.instance_norm(h, params[f"ptn.norm{i}.gain"], params[f"ptn.norm{i}.bias"])
        h = ad.relu(h)
    h = ad.global_avg_pool(h)
    raw = ad.linear(h, params["ptn.head.w"], params["ptn.head.b"])
    if stats is not None:
        raw = ad.add(raw, ad.matmul(stats, params["ptn.stats.w"]))
    return ad.add(ad.softplus(raw), config.slope_floor)


def predict_slopes(x, params: ad.ParameterStore, config: PtnConfig, window: IntensityWindow | None = None):
    """SlopeSet for one (H, W) image or a batch (N, H, W); returns a plain array."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    batch = x[None] if single else x
    window = window or config.default_window()
    scaled = (batch - window.u) / (window.v - window.u)
    out = slope_graph(scaled[..., None], params, config).data
    return out[0] if single else out


def normalization_spread(images, windows, slopes, rescale=False):
    """Std across images of the per-image mean intensity, before and after h.

    Means are taken over the breast region (pixels above zero raw intensity)
    in window-normalized units, so both numbers are on the scale the
    classifier sees.  ``slopes`` holds one SlopeSet per image.  With
    ``rescale`` the mapped image is divided by the mean inner slope, matching
    a model built with ``rescale_output``.
    """
    if len(images) == 0:
        raise ValueError("normalization_spread needs at least one image")
    before, after = [], []
    for x, w, s in zip(images, windows, slopes, strict=True):
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=float)
        mask = x > 0
        if not mask.any():
            mask = np.ones_like(x, dtype=bool)
        scale = w.v - w.u
        span = scale * (s[1:w.K + 1].sum() / w.K) if rescale else scale
        before.append(((x[mask] - w.u) / scale).mean())
        after.append(((apply_h(x, s, w)[mask] - w.u) / span).mean())
    return float(np.std(before)), float(np.std(after))


def dump_slopes_csv(path, image_ids, slopes):
    slopes = np.asarray(slopes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id"] + [f"s_{i}" for i in range(slopes.shape[1])])
        for iid, row in zip(image_ids, slopes, strict=True):
            w.writerow([iid] + [repr(float(v)) for v in row])
