"""Run configuration, continual runs, baselines, the ablation matrix, and report files."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .backbone import Backbone, BackboneConfig, PretrainReport, pretrain_backbone
from .baselines import run_joint, run_naive
from .data import Dataset, DatasetSpec, TaskSplit, load_dataset, random_rotate, resize
from .engine import (
    ContinualModel,
    RehearsalMemory,
    RoundConfig,
    RoundReport,
    TaskRecord,
    Toggles,
    evaluate_round,
    run_round,
    save_model,
)
from .optim import OptimizerConfig
from .training import derive_rng


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending key path."""


def _adam(lr: float) -> OptimizerConfig:
    return OptimizerConfig("adam", lr)


@dataclass
class SplitConfig:
    num_base: int = 4
    num_rounds: int = 5
    classes_per_round: int = 2

    def build(self) -> TaskSplit:
        return TaskSplit.sequential(self.num_base, self.num_rounds, self.classes_per_round)


@dataclass
class PretrainConfig:
    epochs: int = 15
    optimizer: OptimizerConfig = field(default_factory=lambda: _adam(0.003))
    batch_size: int = 32
    min_accuracy: float | None = 0.9


def _desk_engine() -> RoundConfig:
    return RoundConfig(
        adapter_optimizer=OptimizerConfig(
            "sgd_momentum", 0.03, weight_decay=5e-4, momentum=0.9, schedule=[(21, 0.1), (30, 0.1), (39, 0.1)]
        ),
        adapter_epochs=60,
        finetune_optimizer=OptimizerConfig("adam", 0.01, schedule=[(17, 0.1), (24, 0.1)]),
        finetune_epochs=30,
    )


@dataclass
class BaselineConfig:
    """Training budget for the naive and joint reference networks."""

    epochs: int = 30
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            "sgd_momentum", 0.03, weight_decay=5e-4, momentum=0.9, schedule=[(15, 0.1), (23, 0.1)]
        )
    )


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(input_size=16, channels=[8, 16, 32]))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    engine: RoundConfig = field(default_factory=_desk_engine)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    memory_budget: int = 100
    debug: bool = False

    def round_config(self, toggles: Toggles | None = None) -> RoundConfig:
        cfg = copy.deepcopy(self.engine)
        cfg.seed = self.seed
        if toggles is not None:
            cfg.toggles = toggles
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


# parsing -----------------------------------------------------------------


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
            return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        item = args[0] if args else Any
        out = [_convert(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(f"{where}: {value!r} is not one of {list(args)}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: Mapping, where: str = "config"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys by path."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def apply_override(data: dict, dotted: str, value: Any) -> None:
    """Set ``data[a][b][c] = value`` for ``dotted = "a.b.c"``, creating objects on the way."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config.{dotted}: {k!r} is not an object")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(source: str | Path | Mapping | None = None, overrides: Iterable[tuple[str, Any]] = ()) -> RunConfig:
    if source is None:
        data: dict = {}
    elif isinstance(source, Mapping):
        data = copy.deepcopy(dict(source))
    else:
        try:
            data = json.loads(Path(source).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {source} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {source}: line {exc.lineno}: {exc.msg}") from exc
    for key, value in overrides:
        apply_override(data, key, value)
    return from_dict(RunConfig, data)


# runs --------------------------------------------------------------------


@dataclass
class Prepared:
    data: Dataset
    split: TaskSplit
    backbone: Backbone
    pretrain: PretrainReport | None


def load_run_data(config: RunConfig) -> Dataset:
    """Generate or read the dataset, rotate training images if configured, resize to the backbone input."""
    spec = config.dataset
    data = load_dataset(spec, config.seed)
    if spec.rotation_degrees:
        rng = derive_rng(config.seed, 0xA06)
        data = Dataset(random_rotate(data.x_train, spec.rotation_degrees, rng), data.y_train, data.x_test, data.y_test)
    size = config.backbone.input_size
    if data.x_train.shape[-1] != size:
        data = Dataset(resize(data.x_train, size), data.y_train, resize(data.x_test, size), data.y_test)
    return data


def prepare(config: RunConfig, backbone: Backbone | None = None) -> Prepared:
    """Load the data and pretrain the backbone on the base classes (unless one is given)."""
    data = load_run_data(config)
    split = config.split.build()
    missing = set(split.base_classes + [c for g in split.rounds for c in g]) - set(data.classes)
    if missing:
        raise ConfigError(f"config.split: classes {sorted(missing)} are absent from the dataset")
    report = None
    if backbone is None:
        base = data.subset(split.base_classes)
        remap = {c: i for i, c in enumerate(split.base_classes)}
        backbone = Backbone(config.backbone, seed=config.seed)
        p = config.pretrain
        report = pretrain_backbone(
            backbone,
            base.x_train,
            np.array([remap[int(c)] for c in base.y_train]),
            base.x_test,
            np.array([remap[int(c)] for c in base.y_test]),
            p.epochs,
            p.optimizer,
            p.batch_size,
            p.min_accuracy,
            seed=config.seed,
        )
    return Prepared(data, split, backbone, report)


class RunLog:
    """Append-only JSON-lines log; every line is a complete object."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Mapping) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_continual(
    config: RunConfig,
    prepared: Prepared | None = None,
    toggles: Toggles | None = None,
    name: str = "acl",
    log: RunLog | None = None,
    checkpoint_dir: str | Path | None = None,
    unfinetuned_name: str | None = None,
) -> list[RoundReport] | tuple[list[RoundReport], list[RoundReport]]:
    """Run every round of the split and return one report per round.

    With ``unfinetuned_name`` set (fine-tuning on), the run also scores a
    shadow model that keeps each head exactly as learn_task left it.  That
    is the same model an independent run with fine-tuning off would build,
    since fine-tuning touches nothing that later rounds read; both report
    lists are returned.
    """
    prepared = prepared or prepare(config)
    cfg = config.round_config(toggles)
    model = ContinualModel(
        prepared.backbone.copy().freeze(), RehearsalMemory(config.memory_budget, config.seed), cfg.toggles
    )
    shadow = None
    if unfinetuned_name is not None:
        if not (cfg.toggles.finetune and cfg.toggles.task_specific_heads):
            raise ConfigError("a shadow run needs task-specific heads with fine-tuning on")
        shadow = ContinualModel(model.backbone, model.memory, dataclasses.replace(cfg.toggles, finetune=False))
    pending: list = []

    def snapshot(m: ContinualModel, learn) -> None:
        rec = m.records[-1]
        shadow.records.append(TaskRecord(rec.task_id, rec.class_list, rec.head.copy(), rec.adapters, rec.adapter_checksum))
        pending.append(learn)

    reports, shadow_reports = [], []
    for r, group in enumerate(prepared.split.rounds, start=1):
        cur = prepared.data.subset(group)
        seen = prepared.data.subset([c for g in prepared.split.rounds[:r] for c in g])
        rep = run_round(
            model, cur.x_train, cur.y_train, cfg, seen.x_test, seen.y_test, config.debug, snapshot if shadow else None
        )
        rep.run = name
        reports.append(rep)
        if log:
            log.write(asdict(rep))
        if shadow is not None:
            start = time.perf_counter()
            learn = pending.pop()
            shadow.verify_frozen()
            srep = RoundReport(
                round=rep.round,
                task_id=rep.task_id,
                new_classes=rep.new_classes,
                learned_classes=shadow.learned_classes,
                memory_counts=rep.memory_counts,
                learn_loss=learn.final_loss,
                learn_accuracy=learn.train_accuracy,
                finetune_loss=None,
                finetune_samples=0,
                seed=config.seed,
                wall_clock_s=time.perf_counter() - start,
                run=unfinetuned_name,
                **evaluate_round(shadow, seen.x_test, seen.y_test, config.debug),
            )
            shadow_reports.append(srep)
            if log:
                log.write(asdict(srep))
        if checkpoint_dir:
            save_model(model, Path(checkpoint_dir) / f"{name}_round{r}.aclt")
    return (reports, shadow_reports) if shadow is not None else reports


def run_baseline(
    kind: str, config: RunConfig, prepared: Prepared | None = None, log: RunLog | None = None, every_round: bool = True
) -> list[RoundReport]:
    prepared = prepared or prepare(config)
    cfg = dataclasses.replace(
        config.round_config(), adapter_epochs=config.baseline.epochs, adapter_optimizer=config.baseline.optimizer
    )
    if kind == "naive":
        reports = run_naive(prepared.backbone, prepared.data, prepared.split, cfg)
    elif kind == "joint":
        reports = run_joint(prepared.backbone, prepared.data, prepared.split, cfg, every_round)
    else:
        raise ConfigError(f"baseline kind {kind!r}: expected 'naive' or 'joint'")
    if log:
        for rep in reports:
            log.write(asdict(rep))
    return reports


# rows of the ablation table, cumulative left to right; "unified" replaces
# the per-task heads with one head over concatenated task features
ABLATION_MATRIX: dict[str, Toggles] = {
    "tsh": Toggles(task_specific_heads=True, adapters=False, others_neuron=False, finetune=False),
    "tsh+adapter": Toggles(task_specific_heads=True, adapters=True, others_neuron=False, finetune=False),
    "tsh+adapter+others": Toggles(task_specific_heads=True, adapters=True, others_neuron=True, finetune=False),
    "full": Toggles(task_specific_heads=True, adapters=True, others_neuron=True, finetune=True),
    "unified": Toggles(task_specific_heads=False, adapters=True, others_neuron=False, finetune=True),
}


def run_ablation(
    config: RunConfig,
    matrix: Mapping[str, Toggles] | Iterable[str] | None = None,
    prepared: Prepared | None = None,
    log: RunLog | None = None,
    share: bool = True,
) -> dict[str, list[RoundReport]]:
    """Run each row of ``matrix`` on the same pretrained backbone.

    With ``share`` on, a row that differs from another row only by having
    fine-tuning off is scored from the fine-tuned row's run (see
    ``run_continual``) instead of being trained again.
    """
    if matrix is None:
        matrix = ABLATION_MATRIX
    elif not isinstance(matrix, Mapping):
        names = list(matrix)
        bad = [n for n in names if n not in ABLATION_MATRIX]
        if bad:
            raise ConfigError(f"ablation row {bad[0]!r}: expected one of {list(ABLATION_MATRIX)}")
        matrix = {n: ABLATION_MATRIX[n] for n in names}
    prepared = prepared or prepare(config)
    partner: dict[str, str] = {}
    if share:
        for name, tog in matrix.items():
            if tog.finetune and tog.task_specific_heads:
                twin = dataclasses.replace(tog, finetune=False)
                for other, otog in matrix.items():
                    if otog == twin and other not in partner.values():
                        partner[name] = other
                        break
    results: dict[str, list[RoundReport]] = {}
    for name, toggles in matrix.items():
        if name in partner.values():
            continue  # filled in by its fine-tuned partner's run
        if name in partner:
            results[name], results[partner[name]] = run_continual(
                config, prepared, toggles, name, log, unfinetuned_name=partner[name]
            )
        else:
            results[name] = run_continual(config, prepared, toggles, name, log)
    return {name: results[name] for name in matrix}


# report files ------------------------------------------------------------


def write_metrics_csv(path: str | Path, reports: list[RoundReport]) -> None:
    """One row per round: round, mcr, one recall column per class, head_selection_acc."""
    classes = sorted({int(c) for rep in reports for c in rep.per_class_recall}, key=int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "round", "mcr"] + [f"recall_{c}" for c in classes] + ["head_selection_acc"])
        for rep in reports:
            recalls = [rep.per_class_recall.get(str(c), "") for c in classes]
            hsa = "" if rep.head_selection_acc is None else rep.head_selection_acc
            w.writerow([rep.run, rep.round, rep.mcr] + recalls + [hsa])


def read_run_log(path: str | Path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{i}: not a JSON object ({exc.msg})") from exc
    return out


def summarize(records: Iterable[Mapping]) -> list[dict]:
    """Mean and std of MCR per (run, round) across seeds."""
    groups: dict[tuple[str, int], list[float]] = {}
    seeds: dict[tuple[str, int], set] = {}
    for rec in records:
        if rec.get("mcr") is None:
            continue
        key = (rec.get("run", "acl"), int(rec["round"]))
        groups.setdefault(key, []).append(float(rec["mcr"]))
        seeds.setdefault(key, set()).add(rec.get("seed"))
    rows = []
    for (run, rnd), vals in sorted(groups.items()):
        rows.append(
            {
                "run": run,
                "round": rnd,
                "n": len(vals),
                "mcr_mean": float(np.mean(vals)),
                "mcr_std": float(np.std(vals)),
                "seeds": sorted(s for s in seeds[(run, rnd)] if s is not None),
            }
        )
    return rows


def strip_wall_clock(line: str) -> str:
    rec = json.loads(line)
    rec.pop("wall_clock_s", None)
    return json.dumps(rec, sort_keys=True)
