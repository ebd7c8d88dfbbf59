"""Experiment configuration, the generate/poison/train/evaluate pipeline and parameter sweeps.

A run is a pure function of its ``ExperimentConfig``: every random draw is
seeded from the config's global seed, so the same config reproduces the same
manifests, weights and metrics bit for bit.
"""

from __future__ import annotations

import copy
import dataclasses
import functools
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .detector import (Assignment, DetectorParams, FeatureExtractor, LossKind, LossName, TrainConfig,
                       TrainResult, corner_views, predict_many, train)
from .metrics import (IOU_SWEEP, DetectedPredicate, MetricsReport, asr_oda, asr_rma, map_range, poison_map,
                      report_row, tdr)
from .penalty import HeadMode, PenaltyConfig
from .poisoning import (TARGETED, AttackKind, AttackStrategy, DatasetManifest, Placement, TriggerSpec,
                        apply_attack, generate_dataset, make_eval_instances, make_triggered_set)


class ConfigError(ValueError):
    """Invalid or incomplete configuration (exit code 2 at the command line)."""


# ------------------------------------------------------------------- sections


def _strict(cls, doc: Any, where: str):
    """Build dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _to_doc(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _to_doc(v)
        elif isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[f.name] = v
    return out


@dataclass(frozen=True)
class DatasetSection:
    n_train: int = 500
    n_test: int = 150
    n_classes: int = 3
    objects_per_scene: tuple[int, int] = (1, 4)
    image_size: tuple[int, ...] = (144, 240, 336)
    grid: tuple[int, int] = (3, 3)
    fill: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "objects_per_scene", tuple(self.objects_per_scene))
        sizes = (self.image_size,) if isinstance(self.image_size, int) else tuple(self.image_size)
        object.__setattr__(self, "image_size", sizes)
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")

    def generate(self, split: str, seed: int) -> DatasetManifest:
        n = self.n_train if split == "train" else self.n_test
        return generate_dataset(n, self.n_classes, self.objects_per_scene, self.image_size, seed, split,
                                self.grid, self.fill)


@dataclass(frozen=True)
class AttackSection:
    strategy: str = "baddet+oda"
    target: Optional[int] = None  # RMA strategies default to class 1
    ratio: float = 0.5
    placement: str = "center"
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    align_count: int = 4
    align_size_px: int = 12
    align_size_range: tuple[int, int] = (4, 24)

    def __post_init__(self):
        kind = AttackKind(self.strategy)
        object.__setattr__(self, "strategy", kind.value)
        Placement(self.placement)
        if isinstance(self.trigger, dict):
            object.__setattr__(self, "trigger", _strict(TriggerSpec, self.trigger, "attack.trigger"))
        object.__setattr__(self, "align_size_range", tuple(self.align_size_range))
        if not 0 <= self.ratio <= 1:
            raise ValueError("ratio must lie in [0, 1]")

    @property
    def kind(self) -> AttackKind:
        return AttackKind(self.strategy)

    @property
    def effective_target(self) -> Optional[int]:
        if self.kind in TARGETED:
            return 1 if self.target is None else self.target
        return self.target

    def attack_strategy(self) -> AttackStrategy:
        return AttackStrategy(self.kind, self.effective_target, self.align_count, self.align_size_px,
                              self.align_size_range)


VIEW_PRESETS = {"cell": ((1.0, 0.0, 0.0),), "corners": corner_views()}


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 0.2
    epochs: int = 100
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: Optional[float] = 1.0
    loss: str = "ce"
    focal_gamma: float = 2.0
    focal_alpha: Optional[float] = 0.25
    normalize: Optional[str] = None  # loss divisor; see LossKind.normalizer
    head: Optional[str] = None  # penalty form; defaults to the one matching the loss
    tau: float = 0.0
    rho: float = 0.5
    lam: float = 1.0
    assignment: str = "multi"
    pos_iou: float = 0.5
    head_depth: int = 2
    hidden: int = 32
    views: Any = "corners"
    bins: int = 4
    power: float = 0.5

    def __post_init__(self):
        LossName(self.loss)
        Assignment(self.assignment)
        if self.head is not None:
            HeadMode(self.head)
        if isinstance(self.views, str) and self.views not in VIEW_PRESETS:
            raise ValueError(f"views must be one of {sorted(VIEW_PRESETS)} or a list of [scale, dx, dy]")

    def extractor(self) -> FeatureExtractor:
        views = VIEW_PRESETS[self.views] if isinstance(self.views, str) else tuple(map(tuple, self.views))
        return FeatureExtractor(self.bins, views, self.power)

    def train_config(self, seed: int, grid) -> TrainConfig:
        loss = LossKind(LossName(self.loss), self.focal_gamma, self.focal_alpha, self.normalize)
        mode = HeadMode(self.head) if self.head is not None else loss.head_mode
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
                           seed=seed, loss_kind=loss,
                           penalty_cfg=PenaltyConfig(self.tau, self.rho, self.lam, mode),
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           assignment=Assignment(self.assignment), pos_iou=self.pos_iou,
                           head_depth=self.head_depth, hidden=self.hidden, extractor=self.extractor(),
                           grid=tuple(grid), clip_norm=self.clip_norm)


@dataclass(frozen=True)
class EvalSection:
    iou_thr: float = 0.5
    score_min: float = 0.5
    tau_sweep: bool = True
    sensitivity: tuple[float, ...] = (0.3,)
    placement: Optional[str] = None  # defaults to the attack placement
    trigger_fixed_px: Optional[int] = None  # evaluate with a fixed trigger side instead of the scaled rule
    score_threshold: float = 0.05
    nms_iou: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "sensitivity", tuple(self.sensitivity))
        DetectedPredicate(self.iou_thr, self.score_min)
        if self.placement is not None:
            Placement(self.placement)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    attack: AttackSection = field(default_factory=AttackSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "out"

    def to_doc(self) -> dict:
        doc = _to_doc(self)
        doc["training"]["lambda"] = doc["training"].pop("lam")
        return doc

    def train_config(self) -> TrainConfig:
        """Trainer settings; the penalty is switched off for strategies that do not use it."""
        tc = self.training.train_config(self.seed, self.dataset.grid)
        if not self.attack.attack_strategy().penalized:
            tc = dataclasses.replace(tc, penalty_cfg=dataclasses.replace(tc.penalty_cfg, lam=0.0))
        return tc

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


SECTIONS = {"dataset": DatasetSection, "attack": AttackSection, "training": TrainingSection,
            "eval": EvalSection}
TOP_LEVEL = {"seed", "out"} | set(SECTIONS)


def config_from_doc(doc: dict, required: Sequence[str] = ()) -> ExperimentConfig:
    """Strictly parse a JSON config document; ``required`` sections must be present."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    missing = [s for s in required if s not in doc]
    if missing:
        raise ConfigError(f"config is missing section(s): {', '.join(missing)}")
    unknown = sorted(set(doc) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        sec = doc.get(name)
        if name == "training" and isinstance(sec, dict) and "lambda" in sec:
            sec = dict(sec)
            sec["lam"] = sec.pop("lambda")
        parts[name] = _strict(cls, sec, name)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(seed=seed, out=str(doc.get("out", "out")), **parts)


def merge_docs(base: dict, override: dict) -> dict:
    """Recursive dict merge; values in ``override`` win."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_docs(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = {
    # poisoning ratio 0.5, lambda 1, blue trigger, rho 0.5, tau 0
    "paper-default": {"attack": {"ratio": 0.5, "trigger": {"color": [0, 0, 255]}},
                      "training": {"lambda": 1.0, "rho": 0.5, "tau": 0.0}},
}


# ------------------------------------------------------------------- pipeline


@functools.lru_cache(maxsize=8)
def _clean_manifest(dataset: DatasetSection, split: str, seed: int) -> DatasetManifest:
    return dataset.generate(split, seed)


def clean_manifests(cfg: ExperimentConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """``(train, test)`` clean manifests; cached because sweeps reuse them."""
    return (_clean_manifest(cfg.dataset, "train", cfg.seed), _clean_manifest(cfg.dataset, "test", cfg.seed))


def poison_train(cfg: ExperimentConfig, train_manifest: DatasetManifest) -> DatasetManifest:
    a = cfg.attack
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return apply_attack(train_manifest, a.attack_strategy(), a.ratio, a.trigger, Placement(a.placement),
                            cfg.seed)


def eval_trigger(cfg: ExperimentConfig) -> TriggerSpec:
    trig = cfg.attack.trigger
    if cfg.eval.trigger_fixed_px is not None:
        trig = dataclasses.replace(trig, fixed_px=cfg.eval.trigger_fixed_px)
    return trig


def eval_placement(cfg: ExperimentConfig) -> Placement:
    return Placement(cfg.eval.placement or cfg.attack.placement)


def _rates(instances, outputs, kind: AttackKind, target, predicate):
    if kind in TARGETED:
        return (asr_rma(instances, outputs, target, predicate), tdr(instances, outputs, predicate, target))
    return asr_oda(instances, outputs, predicate), tdr(instances, outputs, predicate)


def evaluate(params: DetectorParams, test: DatasetManifest, cfg: ExperimentConfig,
             placement: Optional[Placement] = None, trigger: Optional[TriggerSpec] = None,
             with_outputs: bool = False):
    """Metrics for a trained model: clean mAP, ASR/TDR over the IoU sweep, poison-mAP.

    For targeted strategies ASR is the RMA rate towards the target class and
    TDR skips focal objects that already belong to the target class.
    """
    if params.n_classes != test.n_classes:
        raise ValueError(f"checkpoint has {params.n_classes} classes, test manifest has {test.n_classes}")
    ev = cfg.eval
    placement = eval_placement(cfg) if placement is None else Placement(placement)
    trigger = eval_trigger(cfg) if trigger is None else trigger
    kind, target = cfg.attack.kind, cfg.attack.effective_target

    def run(images):
        return predict_many(params, images, ev.score_threshold, ev.nms_iou)

    clean_out = run([s.image for s in test.scenes])
    gts = [s.objects for s in test.scenes]
    map_clean = map_range(clean_out, gts)
    instances, skipped = make_eval_instances(test, trigger, placement, cfg.seed)
    outputs = run([i.image for i in instances])
    thresholds = IOU_SWEEP if ev.tau_sweep else (ev.iou_thr,)
    asr, rates_tdr = {}, {}
    for t in thresholds:
        asr[t], rates_tdr[t] = _rates(instances, outputs, kind, target, DetectedPredicate(t, ev.score_min))
    sens = {}
    for s in sorted(set(ev.sensitivity) | {ev.score_min}):
        sens[s] = _rates(instances, outputs, kind, target, DetectedPredicate(ev.iou_thr, s))
    triggered = make_triggered_set(test, trigger, placement, cfg.seed)
    trig_out = run([s.image for s in triggered])
    pmap = poison_map([s.objects for s in triggered], trig_out)
    report = MetricsReport(map_clean, asr, rates_tdr, pmap, len(instances), skipped, ev.score_min, sens)
    if with_outputs:
        return report, {"clean": clean_out, "instances": outputs, "triggered": trig_out}
    return report


@dataclass
class RunResult:
    config: ExperimentConfig
    train: TrainResult
    report: MetricsReport
    realized_ratio: float

    @property
    def params(self) -> DetectorParams:
        return self.train.params


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    train_clean, test = clean_manifests(cfg)
    poisoned = poison_train(cfg, train_clean)
    result = train(poisoned, cfg.train_config())
    report = evaluate(result.params, test, cfg)
    return RunResult(cfg, result, report, float(poisoned.poison.get("realized_ratio", 0.0)))


def clean_baseline_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same data, schedule and seed, no attack and no penalty."""
    return cfg.replace(attack=dataclasses.replace(cfg.attack, strategy="clean", ratio=0.0),
                       training=dataclasses.replace(cfg.training, lam=0.0))


def result_row(cfg: ExperimentConfig, report: MetricsReport, run_id: str = "", **extra) -> dict:
    meta = {"run_id": run_id or f"{cfg.attack.strategy}-s{cfg.seed}", "method": cfg.attack.strategy,
            "model": f"{cfg.training.loss}-d{cfg.training.head_depth}", "lambda": cfg.training.lam,
            "poison_ratio": cfg.attack.ratio, "placement": eval_placement(cfg).value, "seed": cfg.seed}
    meta.update(extra)
    return report_row(report, **meta)


# ---------------------------------------------------------------------- sweeps

SWEEP_AXES = ("lambda", "poison_ratio", "placement", "loss_kind", "trigger_color")
LAMBDA_DECADES = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repeats: int = 1

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {', '.join(SWEEP_AXES)}")
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def parse_axis_value(axis: str, raw: str):
    if axis in ("lambda", "poison_ratio"):
        return float(raw)
    if axis == "trigger_color":
        parts = [int(p) for p in raw.replace(";", ",").replace("/", ",").split(",")]
        if len(parts) != 3:
            raise ValueError(f"trigger colour needs three components, got {raw!r}")
        return tuple(parts)
    return raw


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lambda":
        return cfg.replace(training=dataclasses.replace(cfg.training, lam=float(value)))
    if axis == "poison_ratio":
        return cfg.replace(attack=dataclasses.replace(cfg.attack, ratio=float(value)))
    if axis == "placement":
        return cfg.replace(attack=dataclasses.replace(cfg.attack, placement=Placement(value).value))
    if axis == "loss_kind":
        return cfg.replace(training=dataclasses.replace(cfg.training, loss=LossName(value).value))
    if axis == "trigger_color":
        trig = dataclasses.replace(cfg.attack.trigger, color=tuple(value))
        return cfg.replace(attack=dataclasses.replace(cfg.attack, trigger=trig))
    raise ValueError(f"unknown axis {axis!r}")


def _axis_text(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _run_point(job):
    """Worker entry: one (value, repeat) point, never raising."""
    cfg, axis, value, repeat = job
    try:
        res = run_experiment(cfg)
        return {"ok": True, "report": res.report, "cfg": cfg, "axis": axis, "value": value, "repeat": repeat}
    except Exception as exc:  # a failed point is recorded and the sweep continues
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "cfg": cfg, "axis": axis,
                "value": value, "repeat": repeat}


def _baseline_map(cfg: ExperimentConfig) -> float:
    return run_experiment(clean_baseline_config(cfg)).report.map_clean


def sweep_jobs(cfg: ExperimentConfig, spec: SweepSpec) -> list:
    return [(apply_axis(cfg.replace(seed=cfg.seed + r), spec.axis, v), spec.axis, v, r)
            for v in spec.values for r in range(spec.repeats)]


def run_sweep(cfg: ExperimentConfig, spec: SweepSpec, workers: Optional[int] = None) -> list[dict]:
    """One results row per (value, repeat), in that order, with the mAP ratio to a clean baseline.

    The baseline for repeat ``r`` is the clean model trained with the same
    data and schedule under seed ``seed + r`` (and the point's loss for the
    loss axis).
    """
    jobs = sweep_jobs(cfg, spec)
    base_keys = sorted({_baseline_key(job[0]) for job in jobs})
    workers = workers or os.cpu_count() or 1
    base_jobs = [(_baseline_cfg_from_key(cfg, k), "baseline", None, 0) for k in base_keys]
    all_jobs = base_jobs + jobs
    if workers > 1 and len(all_jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, all_jobs))
    else:
        results = [_run_point(j) for j in all_jobs]
    baselines = {}
    for key, res in zip(base_keys, results[:len(base_jobs)]):
        baselines[key] = res["report"].map_clean if res["ok"] else float("nan")
    rows = []
    for res in results[len(base_jobs):]:
        c = res["cfg"]
        meta = {"axis": res["axis"], "axis_value": _axis_text(res["value"]), "repeat": res["repeat"]}
        if res["ok"]:
            base = baselines[_baseline_key(c)]
            ratio = res["report"].map_clean / base if base and np.isfinite(base) else float("nan")
            rows.append(result_row(c, res["report"], run_id=f"{spec.axis}={meta['axis_value']}/r{res['repeat']}",
                                   status="ok", map_ratio=ratio, **meta))
        else:
            row = {"run_id": f"{spec.axis}={meta['axis_value']}/r{res['repeat']}", "method": c.attack.strategy,
                   "seed": c.seed, "status": f"failed: {res['error']}", **meta}
            rows.append(row)
    return rows


def _baseline_key(cfg: ExperimentConfig) -> tuple:
    return (cfg.seed, cfg.training.loss)


def _baseline_cfg_from_key(cfg: ExperimentConfig, key: tuple) -> ExperimentConfig:
    seed, loss = key
    base = cfg.replace(seed=seed, training=dataclasses.replace(cfg.training, loss=loss))
    return clean_baseline_config(base)


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_doc(), indent=1, sort_keys=True)
