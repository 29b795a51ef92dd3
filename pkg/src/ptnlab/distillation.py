"""Label distillation: propagate a gold reader's grading into noisy multi-reader labels.

Each round fine-tunes on the gold-labeled subset, scores every noisy case
by the KL divergence between its current label and the model prediction,
blends the prediction into the most divergent fraction of labels, and
retrains on the union.  Labels are per case; a case's views share one label
and are scored by their averaged prediction.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .classifier import DensityModel, aggregate_cases, train, validate_distribution

logger = logging.getLogger(__name__)

KLD_FLOOR = 1e-12


@dataclass
class DistillConfig:
    alpha: float = 0.5
    gamma: float = 0.25
    finetune_lr: float = 0.01
    frozen_depth: int = 2
    max_rounds: int = 3
    tolerance: float = 0.002
    finetune_epochs: int = 4
    retrain_epochs: int = 4
    mode: str = "soft"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"mode must be 'soft' or 'hard', got {self.mode!r}")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be non-negative")


@dataclass
class DistillState:
    round: int = 0
    case_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    val_metrics: list = field(default_factory=list)
    selections: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    stopped: str = ""


def kld(y, yhat):
    """KL(y || yhat) with 0 log 0 = 0 and yhat clamped away from zero."""
    y = np.asarray(y, dtype=float)
    yhat = np.maximum(np.asarray(yhat, dtype=float), KLD_FLOOR)
    pos = y > 0
    terms = np.zeros(np.broadcast_shapes(y.shape, yhat.shape))
    terms = np.where(pos, y * (np.log(np.where(pos, y, 1.0)) - np.log(yhat)), 0.0)
    return terms.sum(axis=-1)


def select_top(scores, gamma):
    """Ids of the ceil(gamma * N) largest scores; equal scores go to the smaller id first."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    items = list(scores.items()) if isinstance(scores, dict) else list(scores)
    if not items:
        raise ValueError("select_top needs at least one score")
    k = math.ceil(gamma * len(items) - 1e-9)
    ranked = sorted(items, key=lambda it: (-it[1], it[0]))
    return [i for i, _ in ranked[:k]]


def blend(y, yhat, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if alpha == 1.0:
        return y.copy()
    if alpha == 0.0:
        return yhat.copy()
    out = alpha * y + (1.0 - alpha) * yhat
    s = out.sum(axis=-1, keepdims=True)
    if np.any(np.abs(s - 1.0) > 1e-12):
        out = out / s
    return out


def hard_label(yhat):
    """One-hot of the argmax; ties go to the lowest grade."""
    yhat = np.asarray(yhat, dtype=float)
    out = np.zeros_like(yhat)
    np.put_along_axis(out, np.argmax(yhat, axis=-1)[..., None], 1.0, axis=-1)
    return out


def evaluate(model: DensityModel, data):
    """Case-level metrics against gold grades."""
    probs = model.predict_proba(data.images, data.windows)
    cases, case_probs = aggregate_cases(data.case_ids, probs)
    gold = np.array([data.gold[data.case_ids == c][0] for c in cases])
    if np.any(gold < 0):
        raise ValueError("evaluation split lacks gold grades")
    recs = metrics.make_records(cases, gold, case_probs)
    return {"accuracy": metrics.accuracy(recs), "dauc": metrics.dauc(recs)}


def _case_labels(data):
    cases = np.unique(data.case_ids)
    return cases, np.stack([data.labels[data.case_ids == c][0] for c in cases])


def _finetune_config(model, config: DistillConfig):
    return replace(model.config, learning_rate=config.finetune_lr, lr_decay=1.0)


def run_distillation(model: DensityModel, d_s, d_r, val, config: DistillConfig | None = None,
                     pretrain=False, seed=0):
    """Run the distillation loop in place on ``model``; returns the final DistillState.

    ``d_s``, ``d_r`` and ``val`` are :class:`~ptnlab.synthdata.SplitData`.
    ``d_s`` is never modified; the evolving ``d_r`` labels live in the state.
    """
    config = config or DistillConfig()
    if len(d_s) == 0:
        raise ValueError("distillation needs a non-empty gold subset D_s")
    if set(np.unique(d_s.case_ids)) & set(np.unique(d_r.case_ids)):
        raise ValueError("D_s and D_r must be disjoint")
    if pretrain:
        images = np.concatenate([d_s.images, d_r.images])
        labels = np.concatenate([d_s.labels, d_r.labels])
        windows = np.concatenate([d_s.windows, d_r.windows])
        train(model, images, labels, windows, seed=seed)

    cases, labels = _case_labels(d_r)
    state = DistillState(case_ids=cases, labels=validate_distribution(labels.copy()))
    state.val_metrics.append(evaluate(model, val))
    if config.max_rounds == 0:
        state.stopped = "max_rounds"
        return state

    ft = _finetune_config(model, config)
    model.freeze_layers(config.frozen_depth)
    union_images = np.concatenate([d_s.images, d_r.images])
    union_windows = np.concatenate([d_s.windows, d_r.windows])
    row_of_case = {c: i for i, c in enumerate(cases)}
    dr_rows = np.array([row_of_case[c] for c in d_r.case_ids])
    try:
        for rnd in range(1, config.max_rounds + 1):
            state.round = rnd
            train(model, d_s.images, d_s.labels, d_s.windows, config=ft,
                  epochs=config.finetune_epochs, seed=seed * 1000 + 2 * rnd)

            probs = model.predict_proba(d_r.images, d_r.windows)
            _, case_probs = aggregate_cases(d_r.case_ids, probs)
            scores = kld(state.labels, case_probs)
            chosen = select_top(list(zip(cases.tolist(), scores.tolist())), config.gamma)
            state.selections.append(chosen)
            pending = []
            for c in chosen:
                i = row_of_case[c]
                old = state.labels[i].copy()
                new = hard_label(case_probs[i]) if config.mode == "hard" else blend(old, case_probs[i], config.alpha)
                state.labels[i] = new
                pending.append({"round": rnd, "case_id": int(c), "kld": float(scores[i]),
                                "old_label": old.tolist(), "prediction": case_probs[i].tolist(),
                                "new_label": new.tolist()})

            union_labels = np.concatenate([d_s.labels, state.labels[dr_rows]])
            train(model, union_images, union_labels, union_windows, config=ft,
                  epochs=config.retrain_epochs, seed=seed * 1000 + 2 * rnd + 1)
            vm = evaluate(model, val)
            state.val_metrics.append(vm)
            for entry in pending:
                entry["val_accuracy"] = vm["accuracy"]
                entry["val_dauc"] = vm["dauc"]
            state.audit.extend(pending)
            logger.info("round %d: val accuracy %.4f dAUC %.4f", rnd, vm["accuracy"], vm["dauc"])
            if vm["accuracy"] - state.val_metrics[-2]["accuracy"] < config.tolerance:
                state.stopped = "converged"
                break
        else:
            state.stopped = "max_rounds"
    finally:
        model.unfreeze_all()
    return state


def run_hard_label(model, d_s, d_r, val, config: DistillConfig | None = None, pretrain=False, seed=0):
    """Same loop, but selected labels become the one-hot argmax of the prediction."""
    config = replace(config or DistillConfig(), mode="hard")
    return run_distillation(model, d_s, d_r, val, config, pretrain=pretrain, seed=seed)


def write_audit(state: DistillState, path):
    with open(path, "w") as fh:
        for entry in state.audit:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
