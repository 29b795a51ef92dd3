"""Density classifier, the composed normalize-then-classify model, and its training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ptn import PtnConfig, h_op, hinge_op, init_ptn_params, ptn_layer_names, slope_graph

logger = logging.getLogger(__name__)

N_GRADES = 4


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch, batch, cause):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class ClassifierConfig:
    stem_width: int = 8
    stem_stride: int = 2
    widths: tuple = (8, 16, 32)
    strides: tuple = (2, 2, 2)
    input_size: int = 64
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    lr_decay_at: float = 2 / 3
    lr_decay: float = 0.1

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides need one entry per residual block")
        if self.input_size % self.total_stride:
            raise ValueError(f"input size {self.input_size} not divisible by total stride {self.total_stride}")

    @property
    def total_stride(self):
        return self.stem_stride * math.prod(self.strides)


def validate_distribution(probs, atol=1e-9):
    """Raise unless every row of ``probs`` is a distribution over the 4 grades."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape[-1] != N_GRADES:
        raise ValueError(f"label distributions need {N_GRADES} entries, got shape {probs.shape}")
    if np.any(probs < -atol) or np.any(probs > 1 + atol):
        raise ValueError("label probabilities must lie in [0, 1]")
    if not np.allclose(probs.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise ValueError("label distributions must sum to 1")
    return probs


def _uniform_fan_in(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_classifier_params(params: ad.ParameterStore, config: ClassifierConfig, rng):
    params.add("cls.stem.w", _uniform_fan_in(rng, (config.stem_width, 1, 3, 3), 9))
    params.add("cls.stem.b", np.zeros(config.stem_width))
    c_in = config.stem_width
    for i, (c, s) in enumerate(zip(config.widths, config.strides)):
        params.add(f"cls.block{i}.conv1.w", _uniform_fan_in(rng, (c, c_in, 3, 3), 9 * c_in))
        params.add(f"cls.block{i}.conv1.b", np.zeros(c))
        params.add(f"cls.block{i}.conv2.w", _uniform_fan_in(rng, (c, c, 3, 3), 9 * c))
        params.add(f"cls.block{i}.conv2.b", np.zeros(c))
        if s != 1 or c != c_in:
            params.add(f"cls.block{i}.proj.w", _uniform_fan_in(rng, (c, c_in, 1, 1), c_in))
            params.add(f"cls.block{i}.proj.b", np.zeros(c))
        c_in = c
    params.add("cls.head.w", _uniform_fan_in(rng, (N_GRADES, c_in), c_in))
    params.add("cls.head.b", np.zeros(N_GRADES))
    return params


def classifier_graph(x, params: ad.ParameterStore, config: ClassifierConfig) -> ad.Tensor:
    """Logits (N, 4) from a normalized (N, H, W, 1) batch."""
    h = ad.relu(ad.conv2d(x, params["cls.stem.w"], params["cls.stem.b"], config.stem_stride, 1))
    for i, s in enumerate(config.strides):
        p = f"cls.block{i}"
        r = ad.relu(ad.conv2d(h, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"], s, 1))
        r = ad.conv2d(r, params[f"{p}.conv2.w"], params[f"{p}.conv2.b"], 1, 1)
        skip = ad.conv2d(h, params[f"{p}.proj.w"], params[f"{p}.proj.b"], s, 0) if f"{p}.proj.w" in params else h
        h = ad.relu(ad.add(r, skip))
    return ad.linear(ad.global_avg_pool(h), params["cls.head.w"], params["cls.head.b"])


def classifier_layer_names(params, config: ClassifierConfig):
    names = [["cls.stem.w", "cls.stem.b"]]
    for i in range(len(config.widths)):
        p = f"cls.block{i}"
        names.append([f"{p}.conv1.w", f"{p}.conv1.b"])
        names.append([n for n in (f"{p}.conv2.w", f"{p}.conv2.b", f"{p}.proj.w", f"{p}.proj.b") if n in params])
    return names


def _windows(windows, n, ptn):
    if windows is None:
        u, v = (ptn.window_u, ptn.window_v) if ptn else (0.0, 1.0)
        return np.full(n, u, dtype=float), np.full(n, v, dtype=float)
    windows = np.asarray(windows, dtype=float).reshape(n, 2)
    if np.any(windows[:, 1] <= windows[:, 0]):
        raise ValueError("every window needs u < v")
    return windows[:, 0], windows[:, 1]


class DensityModel:
    """Photometric normalizer (optional) followed by the density classifier.

    ``params`` holds both parameter groups; the normalizer's names start
    with ``ptn.`` and the classifier's with ``cls.``.
    """

    def __init__(self, config: ClassifierConfig | None = None, ptn: PtnConfig | None = None,
                 params: ad.ParameterStore | None = None, seed=0):
        self.config = config or ClassifierConfig()
        self.ptn = ptn
        if params is None:
            rng = np.random.default_rng([seed, 0x1417])
            params = ad.ParameterStore()
            if ptn is not None:
                init_ptn_params(params, ptn, rng)
            init_classifier_params(params, self.config, rng)
        self.params = params

    def layer_names(self):
        """Parameter names per conv layer in depth order (normalizer first)."""
        groups = ptn_layer_names(self.ptn) if self.ptn is not None else []
        return groups + classifier_layer_names(self.params, self.config)

    def freeze_layers(self, depth):
        for group in self.layer_names()[:depth]:
            self.params.freeze(group)

    def unfreeze_all(self):
        self.params.freeze(list(self.params), frozen=False)

    def _check_input(self, images):
        images = np.asarray(images, dtype=float)
        if images.ndim == 2:
            images = images[None]
        s = self.config.input_size
        if images.ndim != 3 or images.shape[1:] != (s, s):
            raise ValueError(f"expected images of shape (N, {s}, {s}), got {images.shape}")
        return images

    def graph(self, images, windows=None, slopes=None):
        """Build the forward graph; returns ``(logits, slopes)`` (slopes is None without a normalizer)."""
        images = self._check_input(images)
        u, v = _windows(windows, len(images), self.ptn)
        scale = (v - u)[:, None, None]
        if self.ptn is None:
            x = (images - u[:, None, None]) / scale
            return classifier_graph(x[..., None], self.params, self.config), None
        if slopes is None:
            g_in = (images - u[:, None, None]) / scale
            slopes = slope_graph(g_in[..., None], self.params, self.ptn)
        normed = h_op(images, slopes, u, v, self.ptn.K)
        if self.ptn.rescale_output:
            # divide by h(v) - u instead of v - u: a common factor on the slopes then cancels
            inner = np.zeros((self.ptn.n_slopes, 1))
            inner[1:self.ptn.K + 1] = 1.0
            mean_slope = ad.div(ad.matmul(slopes, inner), float(self.ptn.K))
            span = ad.mul(ad.reshape(mean_slope, (len(images), 1, 1)), scale)
            x = ad.div(ad.sub(normed, u[:, None, None]), span)
        else:
            x = ad.mul(ad.sub(normed, u[:, None, None]), 1.0 / scale)
        x = ad.reshape(x, x.shape + (1,))
        return classifier_graph(x, self.params, self.config), slopes

    def predict_proba(self, images, windows=None, batch_size=64):
        images = self._check_input(images)
        windows = None if windows is None else np.asarray(windows, dtype=float)
        out = []
        for i in range(0, len(images), batch_size):
            w = None if windows is None else windows[i:i + batch_size]
            logits, _ = self.graph(images[i:i + batch_size], w)
            out.append(ad.softmax(logits.data))
        return np.concatenate(out) if out else np.zeros((0, N_GRADES))

    def predict_slopes(self, images, windows=None, batch_size=64):
        if self.ptn is None:
            raise ValueError("model has no photometric normalizer")
        images = self._check_input(images)
        u, v = _windows(windows, len(images), self.ptn)
        g_in = (images - u[:, None, None]) / (v - u)[:, None, None]
        return np.concatenate([slope_graph(g_in[i:i + batch_size, ..., None], self.params, self.ptn).data
                               for i in range(0, len(images), batch_size)])

    def copy(self):
        return DensityModel(self.config, self.ptn, self.params.copy())


def forward(x, params, ptn: PtnConfig | None = None, config: ClassifierConfig | None = None, window=None):
    """Grade distribution for one image, normalized first when ``ptn`` is given."""
    model = DensityModel(config, ptn, params)
    w = None if window is None else [[window[0], window[1]]]
    return model.predict_proba(np.asarray(x, dtype=float)[None], w)[0]


def training_loss(model: DensityModel, images, windows, targets):
    logits, slopes = model.graph(images, windows)
    loss = ad.cross_entropy_loss(logits, targets)
    if slopes is not None and model.ptn.lam > 0:
        loss = ad.add(loss, hinge_op(slopes, model.ptn.epsilon, model.ptn.lam, model.ptn.printed_hinge))
    return loss


def train(model: DensityModel, images, targets, windows=None, config: ClassifierConfig | None = None,
          seed=0, epochs=None, learning_rate=None):
    """Mini-batch SGD on mean cross entropy (+ hinge penalty when normalizing).

    ``targets`` are (N, 4) label distributions.  The learning rate drops by
    ``lr_decay`` once ``lr_decay_at`` of the epochs have run.  Returns the
    per-epoch mean loss; ``model.params`` is updated in place.
    """
    config = config or model.config
    epochs = config.epochs if epochs is None else epochs
    lr0 = config.learning_rate if learning_rate is None else learning_rate
    images = np.asarray(images, dtype=float)
    targets = validate_distribution(targets)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(targets) != len(images):
        raise ValueError("images and targets differ in length")
    windows = None if windows is None else np.asarray(windows, dtype=float)
    rng = np.random.default_rng([seed, 0x7A1])
    decay_epoch = int(round(config.lr_decay_at * epochs))
    curve = []
    model.params.zero_grad()
    for epoch in range(epochs):
        lr = lr0 * (config.lr_decay if epoch >= decay_epoch else 1.0)
        order = rng.permutation(len(images))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                loss = training_loss(model, images[idx], None if windows is None else windows[idx], targets[idx])
                loss.backward()
                ad.sgd_step(model.params, lr)
            except ad.NonFiniteError as exc:
                raise TrainingDivergence(epoch, b, exc) from exc
            total += float(loss.data) * len(idx)
            seen += len(idx)
        curve.append(total / seen)
        logger.debug("epoch %d lr %.4g loss %.5f", epoch, lr, curve[-1])
    return curve


def case_average(views):
    """Mean of per-view grade distributions for one case."""
    views = np.asarray(views, dtype=float)
    if views.size == 0:
        raise ValueError("case_average needs at least one view")
    return validate_distribution(views.reshape(-1, N_GRADES)).mean(axis=0)


def aggregate_cases(case_ids, probs):
    """Group view predictions by case; returns ``(sorted case ids, (C, 4) case distributions)``."""
    case_ids = np.asarray(case_ids)
    cases = np.unique(case_ids)
    return cases, np.stack([case_average(probs[case_ids == c]) for c in cases])


def write_predictions(path, case_ids, view_ids, probs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "view_id", "p_a", "p_b", "p_c", "p_d", "grade"])
        for c, v, p in zip(case_ids, view_ids, probs, strict=True):
            w.writerow([int(c), int(v)] + [repr(float(q)) for q in p] + ["abcd"[int(np.argmax(p))]])


def read_predictions(path):
    case_ids, view_ids, probs = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            case_ids.append(int(row["case_id"]))
            view_ids.append(int(row["view_id"]))
            probs.append([float(row[k]) for k in ("p_a", "p_b", "p_c", "p_d")])
    return np.array(case_ids), np.array(view_ids), np.array(probs)
