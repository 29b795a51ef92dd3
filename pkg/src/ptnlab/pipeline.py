"""Run configuration and the train / distill / eval / reproduce stages behind the CLI."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics
from .classifier import ClassifierConfig, DensityModel, aggregate_cases, train, write_predictions
from .distillation import DistillConfig, run_distillation, write_audit
from .ptn import IntensityWindow, PtnConfig, dump_slopes_csv, normalization_spread
from .synthdata import EXPOSURE_JITTER, SplitCounts, build_dataset, load_split, read_manifest, summary_table

logger = logging.getLogger(__name__)

METHODS = ("baseline", "ptn", "ptn_hard", "ptn_distill")
METHOD_TITLES = {
    "baseline": "Baseline",
    "ptn": "PTN",
    "ptn_hard": "PTN + hard labeling",
    "ptn_distill": "PTN + label distillation",
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    counts: dict = field(default_factory=lambda: SplitCounts().as_dict())
    size: int = 64
    exposure_jitter: float = EXPOSURE_JITTER
    site_windows: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    ptn: PtnConfig = field(default_factory=PtnConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def data_path(self):
        return Path(self.data_dir) if self.data_dir else self.out_dir / "data"

    def to_dict(self):
        d = asdict(self)
        for sec in ("ptn", "classifier"):
            for k, v in d[sec].items():
                if isinstance(v, tuple):
                    d[sec][k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d or {})
        sections = {"dataset": DatasetConfig, "ptn": PtnConfig, "classifier": ClassifierConfig,
                    "distill": DistillConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
            if key in sections:
                allowed = {f.name for f in fields(sections[key])}
                bad = set(value) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
                try:
                    kwargs[key] = sections[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid '{key}' section: {exc}") from exc
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def with_overrides(self, **sections):
        """Copy with per-section field overrides, e.g. ``distill={"max_rounds": 0}``."""
        d = self.to_dict()
        for sec, vals in sections.items():
            if isinstance(vals, dict):
                d[sec].update(vals)
            else:
                d[sec] = vals
        return RunConfig.from_dict(d)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def snapshot(config: RunConfig, command, directory=None):
    write_json(Path(directory or config.out_dir) / f"config.{command}.json", config.to_dict())


# ---------------------------------------------------------------------------
# stages


def generate(config: RunConfig):
    counts = config.dataset.counts
    for name in ("D_r", "D_s", "val", "test"):
        if int(counts.get(name, 0)) < 1:
            raise ConfigError(f"split '{name}' needs at least one case, got {counts.get(name, 0)}")
    manifest = build_dataset(config.data_path, counts, seed=config.seed, size=config.dataset.size,
                             exposure_jitter=config.dataset.exposure_jitter,
                             site_windows=config.dataset.site_windows)
    return manifest


def _manifest(config: RunConfig):
    path = config.data_path / "manifest.csv"
    if not path.exists():
        raise ConfigError(f"no dataset at {config.data_path} (run 'generate' first)")
    return read_manifest(path)


def _model_meta(model: DensityModel, **extra):
    meta = {"classifier": asdict(model.config), "ptn": asdict(model.ptn) if model.ptn else None}
    meta.update(extra)
    return json.loads(json.dumps(meta))


def save_model(model: DensityModel, path, **extra):
    ad.save_checkpoint(model.params, path, _model_meta(model, **extra))


def load_model(path) -> DensityModel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    params, meta = ad.load_checkpoint(path)
    ptn = PtnConfig(**meta["ptn"]) if meta.get("ptn") else None
    return DensityModel(ClassifierConfig(**meta["classifier"]), ptn, params)


def gold_targets(split_data, name):
    """Gold grades for evaluation; falls back to recorded grades where the split has no gold reader."""
    if np.all(split_data.gold >= 0):
        return split_data.gold
    recorded = np.argmax(split_data.labels, axis=1)
    if split_data.labels.shape[1] != 4 or not np.all(np.isfinite(recorded)):
        raise ConfigError(f"split '{name}' has no grade column")
    return recorded


def evaluate_split(model: DensityModel, manifest, split, pred_path=None, metrics_path=None):
    data = load_split(manifest, split)
    probs = model.predict_proba(data.images, data.windows)
    if pred_path:
        Path(pred_path).parent.mkdir(parents=True, exist_ok=True)
        write_predictions(pred_path, data.case_ids, data.view_ids, probs)
    cases, case_probs = aggregate_cases(data.case_ids, probs)
    grades = gold_targets(data, split)
    case_grades = np.array([grades[data.case_ids == c][0] for c in cases])
    recs = metrics.make_records(cases, case_grades, case_probs)
    summary = metrics.report(recs, metrics_path) if metrics_path else metrics.summarize(recs)
    return summary


def train_stage(config: RunConfig, use_ptn: bool, name=None):
    """Train on D_r and D_s with their recorded labels; writes checkpoint, loss curve, val metrics."""
    manifest = _manifest(config)
    name = name or ("ptn" if use_ptn else "baseline")
    out = config.out_dir
    data = load_split(manifest, ["D_r", "D_s"])
    model = DensityModel(config.classifier, config.ptn if use_ptn else None, seed=config.seed)
    curve = train(model, data.images, data.labels, data.windows, seed=config.seed)
    save_model(model, out / "checkpoints" / f"{name}.ckpt", name=name)
    (out / "metrics").mkdir(parents=True, exist_ok=True)
    with open(out / "metrics" / f"{name}_loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v!r}\n")
    summary = evaluate_split(model, manifest, "val", out / "predictions" / f"{name}_val.csv",
                             out / "metrics" / f"{name}_val.json")
    if use_ptn:
        val = load_split(manifest, "val")
        slopes = model.predict_slopes(val.images, val.windows)
        ids = [f"{c}_{v}" for c, v in zip(val.case_ids, val.view_ids)]
        dump_slopes_csv(out / "predictions" / f"{name}_slopes_val.csv", ids, slopes)
    return model, curve, summary


def spread_stage(model: DensityModel, manifest, split="val"):
    data = load_split(manifest, split)
    slopes = model.predict_slopes(data.images, data.windows)
    windows = [IntensityWindow(u, v, model.ptn.K) for u, v in data.windows]
    return normalization_spread(list(data.images), windows, slopes,
                                rescale=model.ptn.rescale_output)


def distill_stage(config: RunConfig, mode="soft", checkpoint=None, rounds=None, name=None):
    manifest = _manifest(config)
    out = config.out_dir
    checkpoint = Path(checkpoint) if checkpoint else out / "checkpoints" / "ptn.ckpt"
    model = load_model(checkpoint)
    dcfg = copy.deepcopy(config.distill)
    dcfg.mode = mode
    if rounds is not None:
        dcfg.max_rounds = rounds
    d_s, d_r, val = (load_split(manifest, s) for s in ("D_s", "D_r", "val"))
    ds_before = d_s.labels.copy()
    state = run_distillation(model, d_s, d_r, val, dcfg, seed=config.seed)
    name = name or f"distill_{mode}"
    save_model(model, out / "checkpoints" / f"{name}.ckpt", name=name)
    (out / "audit").mkdir(parents=True, exist_ok=True)
    write_audit(state, out / "audit" / f"{name}.jsonl")
    rounds_info = {
        "mode": mode,
        "rounds_run": state.round,
        "stopped": state.stopped,
        "val_metrics": state.val_metrics,
        "selections": [[int(c) for c in sel] for sel in state.selections],
        "ds_labels_unchanged": bool(np.array_equal(ds_before, d_s.labels)),
    }
    write_json(out / "metrics" / f"{name}_rounds.json", rounds_info)
    return model, state, rounds_info


# ---------------------------------------------------------------------------
# reproduction suite


def _fmt(mean, std):
    return f"{mean:.4f} ({std:.4f})"


def reproduce(config: RunConfig, seeds, timings=None):
    """Generate, train baseline and PTN, distill soft and hard, evaluate; one pass per seed.

    ``timings``, if given, is filled with wall-clock seconds per (seed, stage);
    they stay out of the report so that it is byte-reproducible.
    """
    root = config.out_dir
    clock = time.perf_counter
    per_seed = {}
    failures = []
    for seed in seeds:
        cfg = RunConfig.from_dict({**config.to_dict(), "seed": int(seed),
                                   "out": str(root / f"seed{seed}"), "data_dir": None})
        entry = {}
        stage = "generate"
        started = clock()

        def mark(next_stage):
            nonlocal stage, started
            now = clock()
            if timings is not None:
                timings[(int(seed), stage)] = now - started
            stage, started = next_stage, now

        try:
            manifest = generate(cfg)
            snapshot(cfg, "reproduce")
            mark("train_baseline")
            baseline, _, _ = train_stage(cfg, False)
            mark("train_ptn")
            ptn_model, _, _ = train_stage(cfg, True)
            mark("spread")
            entry["spread_val"] = list(spread_stage(ptn_model, manifest))
            models = {"baseline": baseline, "ptn": ptn_model}
            for mode, key in (("soft", "ptn_distill"), ("hard", "ptn_hard")):
                mark(f"distill_{mode}")
                m, _, info = distill_stage(cfg, mode)
                models[key] = m
                entry[f"{key}_ds_labels_unchanged"] = info["ds_labels_unchanged"]
                entry[f"{key}_rounds"] = info["rounds_run"]
            mark("eval")
            for key, m in models.items():
                res = {}
                for split in ("val", "test"):
                    s = evaluate_split(m, manifest, split, cfg.out_dir / "predictions" / f"{key}_{split}.csv",
                                       cfg.out_dir / "metrics" / f"{key}_{split}.json")
                    res[f"{split}_accuracy"] = s["accuracy"]
                    res[f"{split}_dauc"] = s["dauc"]
                entry[key] = res
            mark("done")
        except Exception as exc:  # a failed stage is reported, other seeds continue
            logger.exception("seed %s failed at %s", seed, stage)
            failures.append({"seed": int(seed), "stage": stage, "error": f"{type(exc).__name__}: {exc}"})
        per_seed[str(seed)] = entry

    summary = {}
    for key in METHODS:
        cols = {}
        for metric in ("val_accuracy", "val_dauc", "test_accuracy", "test_dauc"):
            vals = [per_seed[str(s)][key][metric] for s in seeds if key in per_seed[str(s)]]
            vals = [v for v in vals if v is not None]  # dAUC is undefined on a single-grade split
            if vals:
                cols[metric] = [float(np.mean(vals)), float(np.std(vals))]
        summary[key] = cols
    result = {"seeds": [int(s) for s in seeds], "per_seed": per_seed, "summary": summary,
              "failures": failures}
    write_json(root / "report.json", result)
    (root / "report.md").write_text(render_report(result))
    return result


def render_report(result):
    n = len(result["seeds"])
    lines = [f"# Density estimation, mean (std) over {n} seed(s): {result['seeds']}", "",
             "| Method | Val accuracy | Val dAUC | Test accuracy | Test dAUC |",
             "|---|---|---|---|---|"]
    for key in METHODS:
        cols = result["summary"].get(key, {})
        cells = [_fmt(*cols[m]) if m in cols else "failed"
                 for m in ("val_accuracy", "val_dauc", "test_accuracy", "test_dauc")]
        lines.append(f"| {METHOD_TITLES[key]} | " + " | ".join(cells) + " |")
    lines += ["", "## Normalization spread (std of per-image means, val)", "",
              "| Seed | Raw | PTN |", "|---|---|---|"]
    for s in result["seeds"]:
        sp = result["per_seed"][str(s)].get("spread_val")
        lines.append(f"| {s} | " + (f"{sp[0]:.4f} | {sp[1]:.4f}" if sp else "failed | failed") + " |")
    if result["failures"]:
        lines += ["", "## Failed stages", ""]
        lines += [f"- seed {f['seed']}: {f['stage']} ({f['error']})" for f in result["failures"]]
    return "\n".join(lines) + "\n"


def summarize_dataset(manifest):
    return summary_table(manifest)
