"""Config-driven ablation runner: data, training, calibration, evaluation, tables.

Artifacts for one (arm, seed) live in ``<outputs>/<arm>/seed<k>/`` and hold
everything needed to re-evaluate without retraining: a config snapshot, the
checkpoint, the training log, per-slot reports and reliability data.
Wall-clock timings are kept apart in ``timing.json`` so that every other
artifact is reproducible byte for byte.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .auction import constant_scorer, default_campaigns, model_scorer, oracle_scorer, simulate
from .calibration import calibrate_model, ece, write_reliability_csv
from .datagen import SLOTS, VIDEO_SLOTS, AdSlot, Dataset, GeneratorConfig, downsample_majority, generate, split
from .losses import LOSS_KINDS, LossConfig, train
from .metrics import ObjectivePoint, SlotReport, evaluate, pareto_front, pct_change, sign_test
from .model import (EXPERT_KINDS, GROUPING_KINDS, CamoeModel, ModelConfig, TaskGrouping, build, example_scores,
                    load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

TABLE_KINDS = ("ablation", "masks")
TABLE_METRICS = ("auc_pr", "ece")


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ArmSpec:
    name: str
    grouping: str
    model: ModelConfig
    loss: LossConfig
    downsample: float | None = None
    mask_eval: bool = False

    @property
    def expert_kind(self) -> str:
        return self.model.expert_kind

    def to_dict(self) -> dict:
        return {"name": self.name, "grouping": self.grouping,
                "model": dataclasses.asdict(self.model), "loss": dataclasses.asdict(self.loss),
                "downsample": self.downsample, "mask_eval": self.mask_eval}


@dataclass(frozen=True)
class TableSpec:
    name: str
    kind: str = "ablation"
    rows: tuple[str, ...] = ()
    metrics: tuple[str, ...] = ("auc_pr",)
    slots: tuple[str, ...] = ()
    baseline: str | None = None
    arm: str | None = None


@dataclass(frozen=True)
class SimulationSpec:
    steps: int = 100_000
    arms: tuple[str, ...] = ()
    oracle: bool = True
    constant: bool = True
    event_log: bool = False
    pod_size: int = 1
    campaigns_per_modality: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    data: GeneratorConfig
    arms: tuple[ArmSpec, ...]
    seeds: tuple[int, ...] = (0,)
    outputs: str = "runs"
    baseline: str | None = None
    test_fraction: float = 0.2
    validation_fraction: float = 0.125
    ece_scheme: str = "equal-mass"
    ece_bins: int = 15
    reliability_bins: int = 20
    pareto_axes: tuple[str, ...] = ("StreamAudio", "StreamVideo")
    tables: tuple[TableSpec, ...] = ()
    simulation: SimulationSpec | None = None

    def arm(self, name: str) -> ArmSpec:
        for a in self.arms:
            if a.name == name:
                return a
        raise ConfigError(f"no arm named {name!r}; arms are {[a.name for a in self.arms]}")

    def with_overrides(self, seed: int | None = None, outputs: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(seed,))
        if outputs is not None:
            cfg = dataclasses.replace(cfg, outputs=outputs)
        return cfg

    def validate(self) -> None:
        if not self.arms:
            raise ConfigError("at least one [arm:NAME] section is required")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"arm names must be unique, got {names}")
        clash = set(names) & {"data", "simulation"}
        if clash:
            raise ConfigError(f"arm names {sorted(clash)} collide with output directories")
        for n in names:
            if not n or "/" in n or n.startswith("."):
                raise ConfigError(f"arm name {n!r} is not a usable directory name")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.baseline is not None and self.baseline not in names:
            raise ConfigError(f"baseline {self.baseline!r} is not an arm")
        if not 0.0 < self.test_fraction < 1.0 or not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("test_fraction and validation_fraction must lie in (0, 1)")
        for axis in self.pareto_axes:
            if axis not in AdSlot.__members__:
                raise ConfigError(f"pareto axis {axis!r} is not a slot")
        for t in self.tables:
            if t.kind == "masks":
                if t.arm is None or t.arm not in names:
                    raise ConfigError(f"table {t.name}: masks table needs an existing arm")
                if not self.arm(t.arm).mask_eval:
                    raise ConfigError(f"table {t.name}: arm {t.arm!r} does not set mask_eval")
                continue
            base = t.baseline or self.baseline
            if base is None:
                raise ConfigError(f"table {t.name}: no baseline arm")
            for r in (*t.rows, base):
                if r not in names:
                    raise ConfigError(f"table {t.name}: unknown arm {r!r}")
        if self.simulation is not None:
            for a in self.simulation.arms:
                if a not in names:
                    raise ConfigError(f"[simulation] arms: unknown arm {a!r}")
        try:
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(f"[data]: {exc}") from None
        for a in self.arms:
            try:
                a.model.validate()
                a.loss.validate()
            except ValueError as exc:
                raise ConfigError(f"[arm:{a.name}]: {exc}") from None


_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def _coerce(hint, raw: str, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(args[0], raw, where)
    if origin is tuple:
        elem = typing.get_args(hint)[0]
        return tuple(_coerce(elem, tok, where) for tok in raw.replace(",", " ").split())
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {hint.__name__}") from None
    return raw.strip()


def _fields(cls) -> dict:
    return typing.get_type_hints(cls)


def _apply(cls, base, items: dict[str, str], where: str):
    hints = _fields(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kw[key] = _coerce(hints[key], raw, f"{where} {key}")
    return dataclasses.replace(base, **kw) if base is not None else cls(**kw)


def _data_config(items: dict[str, str]) -> GeneratorConfig:
    mix, base, plain = {}, {}, {}
    for key, raw in items.items():
        prefix, _, slot = key.partition(".")
        if prefix in ("slot_mix", "base_ctr") and slot:
            if slot not in AdSlot.__members__:
                raise ConfigError(f"[data] {key}: unknown slot {slot!r}")
            try:
                (mix if prefix == "slot_mix" else base)[AdSlot[slot]] = float(raw)
            except ValueError:
                raise ConfigError(f"[data] {key}: cannot read {raw!r} as float") from None
        else:
            plain[key] = raw
    cfg = _apply(GeneratorConfig, GeneratorConfig(), plain, "[data]")
    if mix:
        full = dict(cfg.slot_mix)
        full.update(mix)
        cfg = dataclasses.replace(cfg, slot_mix=full)
    if base:
        full = dict(cfg.base_ctr)
        full.update(base)
        cfg = dataclasses.replace(cfg, base_ctr=full)
    return cfg


_EXPERIMENT_KEYS = {"seeds", "outputs", "baseline", "test_fraction", "validation_fraction",
                    "ece_scheme", "ece_bins", "reliability_bins", "pareto_axes"}
_LOSS_KEYS = {f.name for f in dataclasses.fields(LossConfig)} - {"kind", "seed"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"expert_kind"}


def _arm(name: str, items: dict[str, str], model: ModelConfig, loss: LossConfig) -> ArmSpec:
    where = f"[arm:{name}]"
    items = dict(items)
    grouping = items.pop("grouping", "modality")
    if grouping not in GROUPING_KINDS:
        raise ConfigError(f"{where} grouping must be one of {GROUPING_KINDS}, got {grouping!r}")
    experts = items.pop("experts", model.expert_kind)
    if experts not in EXPERT_KINDS:
        raise ConfigError(f"{where} experts must be one of {EXPERT_KINDS}, got {experts!r}")
    kind = items.pop("loss", loss.kind)
    if kind not in LOSS_KINDS:
        raise ConfigError(f"{where} loss must be one of {LOSS_KINDS}, got {kind!r}")
    downsample = _coerce(float | None, items.pop("downsample", "none"), f"{where} downsample")
    mask_eval = _coerce(bool, items.pop("mask_eval", "no"), f"{where} mask_eval")
    model_items = {k: v for k, v in items.items() if k in _MODEL_KEYS}
    loss_items = {k: v for k, v in items.items() if k in _LOSS_KEYS}
    unknown = set(items) - set(model_items) - set(loss_items)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    model = _apply(ModelConfig, dataclasses.replace(model, expert_kind=experts), model_items, where)
    loss = _apply(LossConfig, dataclasses.replace(loss, kind=kind), loss_items, where)
    return ArmSpec(name, grouping, model, loss, downsample, mask_eval)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {"experiment", "data", "model", "training", "simulation"}
    for section in parser.sections():
        if section not in known and not section.startswith(("arm:", "table:")):
            raise ConfigError(f"{source}: unknown section [{section}]")

    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    unknown = set(exp) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"{source} [experiment]: unknown keys {sorted(unknown)}")
    data = _data_config(dict(parser["data"]) if parser.has_section("data") else {})
    model = _apply(ModelConfig, ModelConfig(),
                   dict(parser["model"]) if parser.has_section("model") else {}, "[model]")
    loss = _apply(LossConfig, LossConfig(),
                  dict(parser["training"]) if parser.has_section("training") else {}, "[training]")

    arms = tuple(_arm(s.partition(":")[2], dict(parser[s]), model, loss)
                 for s in parser.sections() if s.startswith("arm:"))
    tables = []
    for s in parser.sections():
        if not s.startswith("table:"):
            continue
        name = s.partition(":")[2]
        items = dict(parser[s])
        kind = items.get("kind", "ablation")
        if kind not in TABLE_KINDS:
            raise ConfigError(f"[{s}] kind must be one of {TABLE_KINDS}")
        spec = _apply(TableSpec, TableSpec(name), items, f"[{s}]")
        for metric in spec.metrics:
            if metric not in TABLE_METRICS:
                raise ConfigError(f"[{s}] metric must be one of {TABLE_METRICS}, got {metric!r}")
        for slot in spec.slots:
            if slot not in AdSlot.__members__:
                raise ConfigError(f"[{s}] unknown slot {slot!r}")
        tables.append(spec)
    sim = None
    if parser.has_section("simulation"):
        sim = _apply(SimulationSpec, SimulationSpec(), dict(parser["simulation"]), "[simulation]")
    top = _apply(ExperimentConfig, ExperimentConfig(data, arms), exp, "[experiment]")
    cfg = dataclasses.replace(top, tables=tuple(tables), simulation=sim)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
    return parse_config(text, str(p))


# --------------------------------------------------------------------------
# data and per-arm steps


@dataclass(frozen=True)
class Splits:
    train: Dataset
    validation: Dataset
    test: Dataset


def make_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    """Seeded data shared by every arm: generation, then a stratified three-way split."""
    full = generate(cfg.data.with_seed(seed))
    rest, test = split(full, 1.0 - cfg.test_fraction, seed)
    train_part, val = split(rest, 1.0 - cfg.validation_fraction, seed + 1)
    return Splits(train_part, val, test)


def arm_dir(cfg: ExperimentConfig, arm: str, seed: int) -> Path:
    return Path(cfg.outputs) / arm / f"seed{seed}"


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def train_arm(cfg: ExperimentConfig, arm: ArmSpec, seed: int, splits: Splits) -> tuple[CamoeModel, float]:
    out = arm_dir(cfg, arm.name, seed)
    out.mkdir(parents=True, exist_ok=True)
    data = splits.train
    if arm.downsample is not None:
        data = downsample_majority(data, arm.downsample, seed)
    model = build(TaskGrouping.of_kind(arm.grouping), arm.model, data.feature_dim, seed)
    report = train(model, data, dataclasses.replace(arm.loss, seed=seed), validation=splits.validation)
    write_json(out / "config.json", {
        "arm": arm.to_dict(), "seed": seed, "data": _data_dict(cfg.data),
        "test_fraction": cfg.test_fraction, "validation_fraction": cfg.validation_fraction,
        "train_rows": len(data), "best_epoch": report.best_epoch,
        "epochs_run": len(report.epochs), "stopped_early": report.stopped_early,
    })
    (out / "train_log.jsonl").write_text(report.to_jsonl())
    save_checkpoint(model, out / "checkpoint.json")
    return model, report.wall_time


def calibrate_arm(cfg: ExperimentConfig, arm: ArmSpec, seed: int, splits: Splits,
                  model: CamoeModel | None = None) -> CamoeModel:
    out = arm_dir(cfg, arm.name, seed)
    model = model or load_arm_model(out)
    # a rare slot can lack validation clicks; that head keeps T = 1 and is flagged
    heads = calibrate_model(model, splits.validation, single_class="skip")
    write_json(out / "calibration.json", {h.task: {
        "temperature": h.T, "fitted": h.fitted, "iterations": h.iterations,
        "nll": h.objective if h.fitted else None,
        "bracket": list(h.bracket) if h.fitted else None} for h in heads})
    save_checkpoint(model, out / "checkpoint.json")
    return model


def evaluate_arm(cfg: ExperimentConfig, arm: ArmSpec, seed: int, splits: Splits,
                 model: CamoeModel | None = None) -> tuple[SlotReport, list[MaskRow] | None]:
    out = arm_dir(cfg, arm.name, seed)
    model = model or load_arm_model(out)
    test = splits.test
    scores = example_scores(model, test)
    report = evaluate(scores, test, ece_scheme=cfg.ece_scheme, ece_bins=cfg.ece_bins)
    write_json(out / "report.json", report.to_dict())
    tasks = model.grouping.example_tasks(test)
    for t, name in enumerate(model.grouping.names):
        rows = tasks == t
        if rows.any():
            _, bins = ece(scores[rows], test.labels[rows], "equal-mass", cfg.reliability_bins)
            write_reliability_csv(bins, out / f"reliability_{name}.csv")
    for slot in SLOTS:
        rows = test.slot_mask(slot)
        if rows.any():
            _, bins = ece(scores[rows], test.labels[rows], "equal-mass", cfg.reliability_bins)
            write_reliability_csv(bins, out / f"reliability_slot_{slot.name}.csv")
    rows = None
    if arm.mask_eval:
        rows = masked_eval(model, test, default_masks(model.config.n_experts),
                           cfg.ece_scheme, cfg.ece_bins)
        write_json(out / "masks.json", [r.to_dict() for r in rows])
    return report, rows


def load_arm_model(out: Path) -> CamoeModel:
    path = out / "checkpoint.json"
    if not path.exists():
        raise RunError(f"no checkpoint at {path}; run `train` first")
    return load_checkpoint(path)


def _data_dict(data: GeneratorConfig) -> dict:
    d = dataclasses.asdict(data)
    d["slot_mix"] = {s.name: data.slot_mix.get(s, 0.0) for s in SLOTS}
    d["base_ctr"] = {s.name: data.base_ctr[s] for s in SLOTS}
    return d


# --------------------------------------------------------------------------
# inference-time expert masks


def default_masks(n_experts: int) -> list[tuple[str, tuple[int, ...]]]:
    """No mask plus each single expert switched off; two experts read as left and right."""
    names = ["left", "right"] if n_experts == 2 else [f"expert{k}" for k in range(n_experts)]
    masks = [("none", (1,) * n_experts)]
    for k in range(n_experts):
        masks.append((names[k], tuple(0 if j == k else 1 for j in range(n_experts))))
    return masks


@dataclass
class MaskRow:
    name: str
    mask: tuple[int, ...]
    report: SlotReport
    deltas: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"mask": self.name, "vector": list(self.mask), "auc_pr_change": self.deltas,
                "report": self.report.to_dict()}


def masked_eval(model: CamoeModel, dataset: Dataset, masks: Sequence[tuple[str, Sequence[int]]],
                ece_scheme: str = "equal-mass", ece_bins: int = 15) -> list[MaskRow]:
    """Per-mask slot reports, with video-slot AUC-PR deltas against the unmasked model."""
    K = model.config.n_experts
    for name, m in masks:
        if len(m) != K:
            raise ValueError(f"mask {name!r} has {len(m)} entries, model has {K} experts")
    reference = evaluate(example_scores(model, dataset), dataset,
                         ece_scheme=ece_scheme, ece_bins=ece_bins)
    rows = []
    for name, m in masks:
        mask = tuple(int(v) for v in m)
        rep = evaluate(example_scores(model, dataset, mask=list(mask)), dataset,
                       ece_scheme=ece_scheme, ece_bins=ece_bins)
        deltas = {s.name: pct_change(rep.slots[s.name].auc_pr, reference.slots[s.name].auc_pr)
                  for s in SLOTS if s in VIDEO_SLOTS and s.name in rep.slots}
        rows.append(MaskRow(name, mask, rep, deltas))
    return rows


# --------------------------------------------------------------------------
# tables


@dataclass
class AblationTable:
    """Mean %-change of a metric versus a baseline arm, per slot, over seeds."""
    name: str
    metric: str
    baseline: str
    rows: list[str]
    columns: list[str]
    per_seed: dict[str, dict[str, list[float | None]]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    def mean(self, row: str, col: str) -> float | None:
        vals = [v for v in self.per_seed[row][col] if v is not None]
        return math.fsum(vals) / len(vals) if vals else None

    def p_value(self, row: str, col: str) -> float | None:
        vals = [v for v in self.per_seed[row][col] if v is not None]
        return sign_test(vals) if vals else None

    def to_dict(self) -> dict:
        return {"name": self.name, "metric": self.metric, "baseline": self.baseline,
                "seeds": self.seeds, "columns": self.columns,
                "rows": {r: {c: {"mean": self.mean(r, c), "per_seed": self.per_seed[r][c],
                                 "sign_test_p": self.p_value(r, c)}
                             for c in self.columns} for r in self.rows}}


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def tables_to_csv(tables: Sequence[AblationTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "row", *tables[0].columns])
    for t in tables:
        for r in t.rows:
            w.writerow([t.metric, r, *(_fmt(t.mean(r, c)) for c in t.columns)])
    return buf.getvalue()


def ablation_table(name: str, metric: str, rows: Sequence[str], baseline: str,
                   reports: dict[str, dict[int, SlotReport]], seeds: Sequence[int],
                   columns: Sequence[str] = ()) -> AblationTable:
    columns = list(columns) or [s.name for s in SLOTS]
    table = AblationTable(name, metric, baseline, [baseline] + [r for r in rows if r != baseline],
                          columns, seeds=list(seeds))
    for r in table.rows:
        table.per_seed[r] = {c: [] for c in columns}
        for seed in seeds:
            rep, base = reports.get(r, {}).get(seed), reports.get(baseline, {}).get(seed)
            for c in columns:
                if rep is None or base is None or c not in rep.slots or c not in base.slots:
                    table.per_seed[r][c].append(None)
                else:
                    table.per_seed[r][c].append(pct_change(rep.metric(c, metric), base.metric(c, metric)))
    return table


def mask_table(name: str, arm: str, masks: dict[int, list[MaskRow]], seeds: Sequence[int]) -> AblationTable:
    seeds = [s for s in seeds if s in masks]
    first = masks[seeds[0]] if seeds else []
    columns = [s.name for s in SLOTS if s in VIDEO_SLOTS]
    table = AblationTable(name, "auc_pr", f"{arm}:none", [r.name for r in first], columns,
                          seeds=list(seeds))
    for i, r in enumerate(table.rows):
        table.per_seed[r] = {c: [masks[s][i].deltas.get(c) for s in seeds] for c in columns}
    return table


# --------------------------------------------------------------------------
# Pareto report


def pareto_report(reports: dict[str, dict[int, SlotReport]], baseline: str,
                  axes: Sequence[str]) -> dict:
    """Arms placed by mean AUC-PR %-change on each axis slot; the front is flagged."""
    seeds = sorted(reports.get(baseline, {}))
    table = ablation_table("pareto", "auc_pr", sorted(reports), baseline, reports, seeds, axes)
    points = []
    for arm in table.rows:
        coords = {a: table.mean(arm, a) for a in axes}
        if all(v is not None for v in coords.values()):
            points.append(ObjectivePoint(arm, coords))
    result = pareto_front(points)
    on_front = set(result.front)
    return {"axes": list(axes), "baseline": baseline, "metric": "auc_pr_pct_change",
            "points": [{"label": p.label, "coordinates": p.coordinates,
                        "on_front": p.label in on_front} for p in points],
            "front": result.front, "dominated_by": result.dominated_by}


def read_reports(root) -> dict[str, dict[int, SlotReport]]:
    """Every ``<arm>/seed<k>/report.json`` under ``root``."""
    out: dict[str, dict[int, SlotReport]] = {}
    for path in sorted(Path(root).glob("*/seed*/report.json")):
        seed_text = path.parent.name[len("seed"):]
        payload = json.loads(path.read_text())
        # simulation/seed<k>/report.json shares the layout but not the schema
        if not seed_text.isdigit() or "slots" not in payload:
            continue
        out.setdefault(path.parent.parent.name, {})[int(seed_text)] = SlotReport.from_dict(payload)
    return out


# --------------------------------------------------------------------------
# simulation


def simulate_seed(cfg: ExperimentConfig, seed: int, models: dict[str, CamoeModel],
                  splits: Splits | None = None) -> dict:
    spec = cfg.simulation
    arms = {}
    if spec.oracle:
        arms["oracle"] = oracle_scorer
    if spec.constant:
        rate = float(splits.train.labels.mean()) if splits is not None else \
            float(np.mean([cfg.data.base_ctr[s] for s in SLOTS]))
        arms["constant"] = constant_scorer(rate)
    for name in spec.arms:
        arms[name] = model_scorer(models[name])
    out = Path(cfg.outputs) / "simulation" / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    campaigns = default_campaigns(cfg.data, spec.campaigns_per_modality, seed)
    traffic = cfg.data.with_seed(seed)
    if spec.event_log:
        with open(out / "events.jsonl", "w") as fh:
            report = simulate(arms, traffic, spec.steps, seed, campaigns, spec.pod_size, event_log=fh)
    else:
        report = simulate(arms, traffic, spec.steps, seed, campaigns, spec.pod_size)
    (out / "report.json").write_text(report.to_json())
    return report.to_dict()


# --------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    tables: dict[str, list[AblationTable]]
    reports: dict[str, dict[int, SlotReport]]
    failures: list[dict]
    pareto: dict | None
    timings: dict[str, float]

    @property
    def ok(self) -> bool:
        return not self.failures


def run(cfg: ExperimentConfig) -> RunResult:
    """Every arm on every seed, then the tables, the Pareto report and the simulation."""
    cfg.validate()
    root = Path(cfg.outputs)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "experiment.json", {
        "seeds": list(cfg.seeds), "baseline": cfg.baseline, "arms": [a.to_dict() for a in cfg.arms],
        "data": _data_dict(cfg.data), "test_fraction": cfg.test_fraction,
        "validation_fraction": cfg.validation_fraction, "ece_scheme": cfg.ece_scheme,
        "ece_bins": cfg.ece_bins, "pareto_axes": list(cfg.pareto_axes)})
    reports: dict[str, dict[int, SlotReport]] = {}
    masks: dict[str, dict[int, list[MaskRow]]] = {}
    failures: list[dict] = []
    timings: dict[str, float] = {}
    sims: dict[int, dict] = {}
    for seed in cfg.seeds:
        started = time.perf_counter()
        splits = make_splits(cfg, seed)
        timings[f"data/seed{seed}"] = time.perf_counter() - started
        models: dict[str, CamoeModel] = {}
        for arm in cfg.arms:
            started = time.perf_counter()
            try:
                model, _ = train_arm(cfg, arm, seed, splits)
                calibrate_arm(cfg, arm, seed, splits, model)
                report, mask_rows = evaluate_arm(cfg, arm, seed, splits, model)
                reports.setdefault(arm.name, {})[seed] = report
                if mask_rows is not None:
                    masks.setdefault(arm.name, {})[seed] = mask_rows
                models[arm.name] = model
                log.info("arm %s seed %d done in %.1fs", arm.name, seed, time.perf_counter() - started)
            except Exception as exc:  # noqa: BLE001 - one arm failing must not stop the others
                log.error("arm %s seed %d failed: %s", arm.name, seed, exc)
                failures.append({"arm": arm.name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            timings[f"{arm.name}/seed{seed}"] = time.perf_counter() - started
        if cfg.simulation is not None:
            started = time.perf_counter()
            missing = [a for a in cfg.simulation.arms if a not in models]
            if missing:
                failures.append({"arm": "simulation", "seed": seed,
                                 "error": f"untrained arms {missing}"})
            else:
                sims[seed] = simulate_seed(cfg, seed, models, splits)
            timings[f"simulation/seed{seed}"] = time.perf_counter() - started

    tables: dict[str, list[AblationTable]] = {}
    for spec in cfg.tables:
        if spec.kind == "masks":
            t = [mask_table(spec.name, spec.arm, masks.get(spec.arm, {}), cfg.seeds)]
        else:
            base = spec.baseline or cfg.baseline
            t = [ablation_table(spec.name, m, spec.rows, base, reports, cfg.seeds, spec.slots)
                 for m in spec.metrics]
        tables[spec.name] = t
        (root / f"{spec.name}.csv").write_text(tables_to_csv(t))
        write_json(root / f"{spec.name}.json", [x.to_dict() for x in t])

    pareto = None
    if cfg.baseline is not None and cfg.baseline in reports:
        pareto = pareto_report(reports, cfg.baseline, cfg.pareto_axes)
        write_json(root / "pareto.json", pareto)
    if sims:
        write_json(root / "simulation.json", _simulation_summary(sims))
    write_json(root / "failures.json", failures)
    write_json(root / "timing.json", timings)
    return RunResult(tables, reports, failures, pareto, timings)


def _simulation_summary(sims: dict[int, dict]) -> dict:
    """Per arm and modality: CTR and eCPC for each seed plus their means."""
    out: dict = {}
    for seed, rep in sorted(sims.items()):
        for arm, per in rep["arms"].items():
            for modality, st in per.items():
                cell = out.setdefault(arm, {}).setdefault(modality, {"ctr": [], "ecpc": []})
                cell["ctr"].append(st["ctr"])
                cell["ecpc"].append(st["ecpc"])
    for per in out.values():
        for cell in per.values():
            for key in ("ctr", "ecpc"):
                vals = [v for v in cell[key] if v is not None]
                cell[f"mean_{key}"] = math.fsum(vals) / len(vals) if vals else None
    return {"seeds": sorted(sims), "arms": out}
