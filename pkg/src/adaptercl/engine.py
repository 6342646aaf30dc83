"""Per-round continual learning: adapters + head, rehearsal memory, balanced head fine-tuning."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .adapter import AdapterSet
from .backbone import Backbone, BackboneConfig
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .heads import TaskHead, UnifiedHead, map_labels, select_predictions
from .metrics import class_recalls, tally_recalls
from .optim import Optimizer, OptimizerConfig
from .tensor import Parameter, Tensor, checksum, no_grad
from .training import derive_rng, iterate_minibatches

log = logging.getLogger(__name__)

EVAL_BATCH = 256


class FreezeViolation(AssertionError):
    """A parameter that must stay fixed was modified."""


class MemoryBudgetError(ValueError):
    pass


def _sgd_default() -> OptimizerConfig:
    return OptimizerConfig("sgd_momentum", 0.01, weight_decay=5e-4, momentum=0.9, schedule=[(21, 0.1), (30, 0.1), (39, 0.1)])


def _adam_default() -> OptimizerConfig:
    return OptimizerConfig("adam", 0.001, schedule=[(17, 0.1), (24, 0.1)])


@dataclass
class Toggles:
    task_specific_heads: bool = True
    adapters: bool = True
    others_neuron: bool = True
    finetune: bool = True


@dataclass
class RoundConfig:
    """Training settings for one round.

    The defaults are the desk-scale budget (60 adapter epochs, 30 fine-tune
    epochs, milestones at the same fractions as the full schedule);
    ``RoundConfig.long_schedule()`` gives the full 200/100-epoch schedule.
    """

    adapter_optimizer: OptimizerConfig = field(default_factory=_sgd_default)
    adapter_epochs: int = 60
    finetune_optimizer: OptimizerConfig = field(default_factory=_adam_default)
    finetune_epochs: int = 30
    batch_size: int = 32
    toggles: Toggles = field(default_factory=Toggles)
    adapter_reduction: int = 4
    adapter_gaps: list[int] | None = None
    head_init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.adapter_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def long_schedule(cls, **overrides) -> "RoundConfig":
        base = dict(
            adapter_optimizer=OptimizerConfig(
                "sgd_momentum", 0.01, weight_decay=5e-4, momentum=0.9, schedule=[(70, 0.1), (100, 0.1), (130, 0.1)]
            ),
            adapter_epochs=200,
            finetune_optimizer=OptimizerConfig("adam", 0.001, schedule=[(55, 0.1), (80, 0.1)]),
            finetune_epochs=100,
        )
        base.update(overrides)
        return cls(**base)


class RehearsalMemory:
    """Class-balanced exemplar store with a fixed total budget.

    Exemplars are drawn uniformly at random per class (seeded by class id),
    kept in selection order, and truncated from the end when quotas shrink.
    """

    def __init__(self, budget: int, selection_seed: int = 0):
        if budget < 0:
            raise ValueError("memory budget must be nonnegative")
        self.budget = budget
        self.selection_seed = selection_seed
        self.store: dict[int, np.ndarray] = {}

    def quotas(self, classes: Sequence[int]) -> dict[int, int]:
        classes = sorted(int(c) for c in classes)
        if not classes:
            return {}
        base, extra = divmod(self.budget, len(classes))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    def quota(self, classes: Sequence[int]) -> int:
        """Per-class count every class can supply: floor(M / #classes)."""
        return self.budget // max(1, len(classes))

    def update(self, x_new: np.ndarray, y_new: np.ndarray, learned: Sequence[int]) -> "RehearsalMemory":
        quotas = self.quotas(learned)
        starved = [c for c, q in quotas.items() if q == 0]
        if starved:
            warnings.warn(f"memory budget {self.budget} gives zero exemplars to classes {starved}")
            raise MemoryBudgetError(
                f"budget {self.budget} cannot hold one exemplar for each of {len(quotas)} classes"
            )
        for c in sorted(set(int(v) for v in y_new)):
            if c in self.store:
                continue
            idx = np.nonzero(y_new == c)[0]
            rng = np.random.default_rng([self.selection_seed, 0x3E3, c])
            pick = idx[rng.permutation(idx.size)][: quotas[c]]
            self.store[c] = x_new[pick].copy()
        for c in list(self.store):
            if c not in quotas:
                del self.store[c]
            else:
                self.store[c] = self.store[c][: quotas[c]]
        return self

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in sorted(self.store.items())}

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.store.values())

    def arrays(self, classes: Sequence[int] | None = None, per_class: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        keys = sorted(self.store) if classes is None else sorted(classes)
        xs = [self.store[c][:per_class] for c in keys]
        ys = [np.full(len(x), c, dtype=np.int64) for x, c in zip(xs, keys)]
        if not xs or sum(len(x) for x in xs) == 0:
            return np.empty((0,)), np.empty((0,), dtype=np.int64)
        return np.concatenate(xs), np.concatenate(ys)


def update_memory(memory: RehearsalMemory, x_new: np.ndarray, y_new: np.ndarray, learned: Sequence[int]) -> RehearsalMemory:
    return memory.update(x_new, y_new, learned)


@dataclass
class TaskRecord:
    task_id: int
    class_list: list[int]
    head: TaskHead
    adapters: AdapterSet | None
    adapter_checksum: str | None = None


class ContinualModel:
    """Frozen backbone + ordered task records + rehearsal memory."""

    def __init__(self, backbone: Backbone, memory: RehearsalMemory, toggles: Toggles | None = None):
        if not backbone.frozen:
            raise ValueError("the continual model requires a frozen backbone")
        self.backbone = backbone
        self.backbone_checksum = backbone.checksum()
        self.memory = memory
        self.toggles = toggles or Toggles()
        self.records: list[TaskRecord] = []
        self.unified: UnifiedHead | None = None

    @property
    def learned_classes(self) -> list[int]:
        return sorted(c for r in self.records for c in r.class_list)

    def record(self, task_id: int) -> TaskRecord:
        for r in self.records:
            if r.task_id == task_id:
                return r
        raise KeyError(f"unknown task id {task_id}")

    def frozen_checksums(self) -> dict[str, str]:
        out = {"backbone": self.backbone.checksum()}
        for r in self.records:
            if r.adapters is not None:
                out[f"adapters.{r.task_id}"] = r.adapters.checksum()
        return out

    def verify_frozen(self) -> None:
        if self.backbone.checksum() != self.backbone_checksum:
            raise FreezeViolation("backbone parameters changed after freezing")
        for r in self.records:
            if r.adapters is not None and r.adapters.checksum() != r.adapter_checksum:
                raise FreezeViolation(f"adapters of task {r.task_id} changed after their round")

    # feature extraction -------------------------------------------------

    def stage1(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.backbone.stage(1, Tensor(x)).data

    def task_features(self, task_id: int, x: np.ndarray, z1: np.ndarray | None = None) -> np.ndarray:
        """Feature vectors of ``x`` with task ``task_id``'s adapters inserted."""
        rec = self.record(task_id)
        z1 = self.stage1(x) if z1 is None else z1
        taps = rec.adapters.taps if rec.adapters is not None else None
        with no_grad():
            return self.backbone.forward_stages(Tensor(z1), taps, from_stage=2)[1].data

    def all_task_features(self, x: np.ndarray) -> dict[int, np.ndarray]:
        """One feature-extraction pass per task (shared stage 1), batched."""
        out: dict[int, list[np.ndarray]] = {r.task_id: [] for r in self.records}
        for start in range(0, len(x), EVAL_BATCH):
            chunk = x[start : start + EVAL_BATCH]
            z1 = self.stage1(chunk)
            plain = None
            for r in self.records:
                if r.adapters is None:
                    if plain is None:
                        plain = self.task_features(r.task_id, chunk, z1)
                    out[r.task_id].append(plain)
                else:
                    out[r.task_id].append(self.task_features(r.task_id, chunk, z1))
        return {t: np.concatenate(v) for t, v in out.items()}

    # inference ----------------------------------------------------------

    def prob_tables(self, feats: dict[int, np.ndarray]) -> list[np.ndarray]:
        with no_grad():
            return [ops.softmax(r.head.logits(Tensor(feats[r.task_id])).data) for r in self.records]

    def predict_with_heads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (global class ids, selected task ids)."""
        if not self.records:
            raise RuntimeError("no learned tasks")
        feats = self.all_task_features(x)
        task_ids = np.array([r.task_id for r in self.records])
        if not self.toggles.task_specific_heads:
            if self.unified is None:
                raise RuntimeError("unified head has not been trained")
            cat = np.concatenate([feats[r.task_id] for r in self.records], axis=1)
            with no_grad():
                logits = self.unified.logits(Tensor(cat)).data
            pred = np.asarray(self.unified.class_list)[logits.argmax(axis=1)]
            owner = {c: r.task_id for r in self.records for c in r.class_list}
            return pred, np.array([owner[int(p)] for p in pred])
        tables = self.prob_tables(feats)
        pred, chosen = select_predictions(tables, [r.class_list for r in self.records], self.toggles.others_neuron)
        return pred, task_ids[chosen]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_with_heads(x)[0]

    # persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.backbone.state_dict())
        for r in self.records:
            if r.adapters is not None:
                state.update(r.adapters.state_dict())
            state.update(r.head.state_dict())
        if self.unified is not None:
            state.update(self.unified.state_dict())
        for c, xs in sorted(self.memory.store.items()):
            state[f"memory.class.{c}"] = xs
        return state

    def manifest(self) -> dict:
        return {
            "format": "ACLT",
            "backbone": json.loads(self.backbone.config.to_json()),
            "toggles": asdict(self.toggles),
            "memory": {"budget": self.memory.budget, "selection_seed": self.memory.selection_seed},
            "tasks": [
                {
                    "task_id": r.task_id,
                    "class_list": r.class_list,
                    "gaps": sorted(r.adapters.adapters) if r.adapters is not None else [],
                    "reduction": (
                        r.adapters.adapters[min(r.adapters.adapters)].channels
                        // r.adapters.adapters[min(r.adapters.adapters)].hidden
                        if r.adapters is not None and r.adapters.adapters
                        else None
                    ),
                    "others": r.head.has_others,
                }
                for r in self.records
            ],
            "unified_classes": self.unified.class_list if self.unified is not None else None,
        }


def save_model(model: ContinualModel, path: str | Path) -> Path:
    """Write ``path`` (tensors) and ``path`` + ".json" (manifest)."""
    path = Path(path)
    save_tensors(path, model.state_dict())
    manifest_path = path.with_name(path.name + ".json")
    manifest_path.write_text(json.dumps(model.manifest(), indent=2, sort_keys=True))
    return manifest_path


def load_model(path: str | Path) -> ContinualModel:
    path = Path(path)
    state = load_tensors(path)
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    backbone = Backbone(BackboneConfig(**manifest["backbone"]))
    backbone.load_state_dict(state)
    backbone.freeze()
    mem = RehearsalMemory(manifest["memory"]["budget"], manifest["memory"]["selection_seed"])
    for name, arr in state.items():
        if name.startswith("memory.class."):
            mem.store[int(name.rsplit(".", 1)[1])] = arr.copy()
    model = ContinualModel(backbone, mem, Toggles(**manifest["toggles"]))
    for task in manifest["tasks"]:
        t = task["task_id"]
        stored = state.get(f"task.{t}.head.class_list")
        if stored is None or [int(c) for c in stored] != task["class_list"]:
            raise CheckpointError(f"class list of task {t} disagrees with the manifest")
        head = TaskHead(t, task["class_list"], backbone.feature_dim, others=task["others"])
        head.weight.data[...] = state[head.weight.name]
        head.bias.data[...] = state[head.bias.name]
        adapters = None
        if task["gaps"]:
            adapters = AdapterSet.create(t, backbone, 0, task["gaps"], task["reduction"] or 4)
            adapters.load_state_dict(state)
            adapters.freeze()
        model.records.append(TaskRecord(t, task["class_list"], head, adapters, adapters.checksum() if adapters else None))
    if manifest.get("unified_classes"):
        classes = manifest["unified_classes"]
        w = state["unified.head.weight"]
        model.unified = UnifiedHead(classes, w.shape[1], np.random.default_rng(0))
        model.unified.weight.data[...] = w
        model.unified.bias.data[...] = state["unified.head.bias"]
    return model


def extract_task_feature(model: ContinualModel, task_id: int, x: np.ndarray) -> np.ndarray:
    return model.task_features(task_id, x)


# training stages --------------------------------------------------------


@dataclass
class LearnReport:
    task_id: int
    epochs: int
    final_loss: float
    train_accuracy: float
    num_others: int


def learn_task(model: ContinualModel, x_new: np.ndarray, y_new: np.ndarray, config: RoundConfig) -> LearnReport:
    """Train a new adapter set and head on the new classes plus memory-as-others.

    Appends the resulting TaskRecord with its adapters frozen.
    """
    if len(x_new) == 0:
        raise ValueError("new task has no training data")
    new_classes = class_ids(y_new)
    overlap = set(new_classes) & set(model.learned_classes)
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} were already learned")
    toggles = model.toggles
    t = (max(r.task_id for r in model.records) + 1) if model.records else 1
    rng_init = derive_rng(config.seed, 0xEAD, t)
    adapters = (
        AdapterSet.create(t, model.backbone, config.seed, config.adapter_gaps, config.adapter_reduction)
        if toggles.adapters
        else None
    )
    head = TaskHead(t, new_classes, model.backbone.feature_dim, rng_init, toggles.others_neuron, config.head_init_std)

    x_train, targets = x_new, map_labels(head, y_new)
    num_others = 0
    if toggles.others_neuron and model.memory.total:
        x_mem, _ = model.memory.arrays()
        num_others = len(x_mem)
        x_train = np.concatenate([x_new, x_mem])
        targets = np.concatenate([targets, np.full(num_others, head.others_index)])

    if adapters is None:
        cache = _plain_features(model, x_train)
    else:
        cache = model.stage1(x_train)

    params: list[Parameter] = head.parameters() + (adapters.parameters() if adapters else [])
    opt = Optimizer(params, config.adapter_optimizer)
    rng = derive_rng(config.seed, 0x7A, t)
    taps = adapters.taps if adapters else None
    loss_val, acc = float("nan"), 0.0
    for epoch in range(config.adapter_epochs):
        opt.set_epoch(epoch)
        total, correct = 0.0, 0
        for idx in iterate_minibatches(len(x_train), config.batch_size, rng):
            opt.zero_grad()
            if adapters is None:
                feat = Tensor(cache[idx])
            else:
                feat = model.backbone.forward_stages(Tensor(cache[idx]), taps, from_stage=2)[1]
            loss, probs = ops.softmax_cross_entropy(head.logits(feat), targets[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((probs.argmax(axis=1) == targets[idx]).sum())
        loss_val, acc = total / len(x_train), correct / len(x_train)
        if model.backbone.checksum() != model.backbone_checksum:
            raise FreezeViolation(f"backbone changed during epoch {epoch} of task {t}")

    if adapters is not None:
        adapters.freeze()
    model.records.append(TaskRecord(t, new_classes, head, adapters, adapters.checksum() if adapters else None))
    log.info("task %d: loss %.4f acc %.3f (%d others samples)", t, loss_val, acc, num_others)
    return LearnReport(t, config.adapter_epochs, loss_val, acc, num_others)


def _plain_features(model: ContinualModel, x: np.ndarray) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(x), EVAL_BATCH):
            out.append(model.backbone.features(Tensor(x[start : start + EVAL_BATCH])).data)
    return np.concatenate(out)


def build_finetune_set(
    model: ContinualModel,
    x_cur: np.ndarray,
    y_cur: np.ndarray,
    memory: RehearsalMemory,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Equal-count set over every learned class.

    Each class contributes q = min(floor(M / #classes), smallest available
    count) samples: current-task classes are subsampled at random, older
    classes take their first q memory exemplars.
    """
    learned = model.learned_classes
    current = set(int(c) for c in y_cur)
    avail = {}
    for c in learned:
        avail[c] = int((y_cur == c).sum()) if c in current else len(memory.store.get(c, ()))
        if avail[c] == 0:
            raise ValueError(f"class {c} has no samples available for fine-tuning")
    q = min([memory.quota(learned)] + list(avail.values()))
    if q == 0:
        raise ValueError("memory budget leaves no room for fine-tuning samples")
    rng = derive_rng(seed, 0xF5, len(learned))
    xs, ys = [], []
    for c in learned:
        if c in current:
            idx = np.nonzero(y_cur == c)[0]
            pick = np.sort(idx[rng.permutation(idx.size)][:q])
            xs.append(x_cur[pick])
        else:
            xs.append(memory.store[c][:q])
        ys.append(np.full(q, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def multi_head_loss(
    heads: Sequence[TaskHead],
    feats: Sequence[Tensor],
    labels: np.ndarray,
    known: Sequence[int] | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Mean over heads of each head's cross-entropy against its own label map.

    Heads without an `others` output only see the rows of their own classes.
    """
    per_head = []
    for head, feat in zip(heads, feats):
        if head.has_others:
            per_head.append(ops.softmax_cross_entropy(head.logits(feat), map_labels(head, labels, known))[0])
        else:
            rows = np.nonzero(np.isin(labels, head.class_list))[0]
            if rows.size:
                sub = ops.take_rows(feat, rows)
                per_head.append(ops.softmax_cross_entropy(head.logits(sub), map_labels(head, labels[rows]))[0])
    if not per_head:
        raise ValueError("no head has samples in this batch")
    return ops.mean_of(per_head), per_head


@dataclass
class FinetuneReport:
    epochs: int
    num_samples: int
    final_loss: float


def finetune_heads(model: ContinualModel, x_bal: np.ndarray, y_bal: np.ndarray, config: RoundConfig) -> FinetuneReport:
    """Jointly fine-tune all task heads on a balanced set; adapters and backbone stay fixed."""
    if not model.records:
        raise RuntimeError("no task heads to fine-tune")
    before = model.frozen_checksums()
    feats = model.all_task_features(x_bal)
    heads = [r.head for r in model.records]
    stacked = [feats[r.task_id] for r in model.records]
    known = model.learned_classes
    params = [p for h in heads for p in h.parameters()]
    opt = Optimizer(params, config.finetune_optimizer)
    rng = derive_rng(config.seed, 0xF1, len(model.records))
    loss_val = float("nan")
    for epoch in range(config.finetune_epochs):
        opt.set_epoch(epoch)
        total = 0.0
        for idx in iterate_minibatches(len(x_bal), config.batch_size, rng):
            opt.zero_grad()
            loss, _ = multi_head_loss(heads, [Tensor(f[idx]) for f in stacked], y_bal[idx], known)
            loss.backward()
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            total += loss.item() * len(idx)
        loss_val = total / len(x_bal)
    if model.frozen_checksums() != before:
        raise FreezeViolation("fine-tuning modified adapter or backbone parameters")
    return FinetuneReport(config.finetune_epochs, len(x_bal), loss_val)


def train_unified_head(model: ContinualModel, x: np.ndarray, y: np.ndarray, config: RoundConfig) -> FinetuneReport:
    """Ablation: one classifier over concatenated task features, retrained from scratch."""
    before = model.frozen_checksums()
    feats = model.all_task_features(x)
    cat = np.concatenate([feats[r.task_id] for r in model.records], axis=1)
    rng_init = derive_rng(config.seed, 0x0F1, len(model.records))
    model.unified = UnifiedHead(model.learned_classes, cat.shape[1], rng_init, config.head_init_std)
    targets = model.unified.targets(y)
    opt = Optimizer(model.unified.parameters(), config.finetune_optimizer)
    rng = derive_rng(config.seed, 0xF2, len(model.records))
    loss_val = float("nan")
    for epoch in range(config.finetune_epochs):
        opt.set_epoch(epoch)
        total = 0.0
        for idx in iterate_minibatches(len(x), config.batch_size, rng):
            opt.zero_grad()
            loss, _ = ops.softmax_cross_entropy(model.unified.logits(Tensor(cat[idx])), targets[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        loss_val = total / len(x)
    if model.frozen_checksums() != before:
        raise FreezeViolation("unified-head training modified adapter or backbone parameters")
    return FinetuneReport(config.finetune_epochs, len(x), loss_val)


# rounds -----------------------------------------------------------------


@dataclass
class RoundReport:
    round: int
    task_id: int
    new_classes: list[int]
    learned_classes: list[int]
    mcr: float | None
    per_class_recall: dict[str, float]
    per_task_accuracy: dict[str, float]
    head_selection_acc: float | None
    memory_counts: dict[str, int]
    learn_loss: float
    learn_accuracy: float
    finetune_loss: float | None
    finetune_samples: int
    seed: int
    wall_clock_s: float = 0.0
    run: str = "acl"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate_round(model: ContinualModel, x_test: np.ndarray, y_test: np.ndarray, debug: bool = False) -> dict:
    """MCR, per-class recall, per-task accuracy and head-selection accuracy on learned classes."""
    learned = model.learned_classes
    mask = np.isin(y_test, learned)
    x, y = x_test[mask], y_test[mask]
    pred, chosen = model.predict_with_heads(x)
    res = class_recalls(y, pred, learned)
    if debug and tally_recalls(y, pred) != res.per_class:
        raise AssertionError("vectorized recall disagrees with the tally")
    owner = {c: r.task_id for r in model.records for c in r.class_list}
    true_task = np.array([owner[int(c)] for c in y])
    per_task = {}
    for r in model.records:
        m = true_task == r.task_id
        per_task[str(r.task_id)] = float((pred[m] == y[m]).mean())
    return {
        "mcr": res.mcr,
        "per_class_recall": {str(c): v for c, v in res.per_class.items()},
        "per_task_accuracy": per_task,
        "head_selection_acc": float((chosen == true_task).mean()),
    }


def run_round(
    model: ContinualModel,
    x_new: np.ndarray,
    y_new: np.ndarray,
    config: RoundConfig,
    x_test: np.ndarray | None = None,
    y_test: np.ndarray | None = None,
    debug: bool = False,
    after_learn: Callable[[ContinualModel, LearnReport], None] | None = None,
) -> RoundReport:
    """learn_task -> update_memory -> build_finetune_set -> finetune_heads, then evaluate.

    ``after_learn`` is called once the memory is updated and before any head
    fine-tuning, which lets a caller snapshot the freshly learned head.
    """
    start = time.perf_counter()
    toggles = model.toggles
    learn = learn_task(model, x_new, y_new, config)
    if model.memory.budget:
        update_memory(model.memory, x_new, y_new, model.learned_classes)
    if after_learn is not None:
        after_learn(model, learn)

    ft_loss, ft_n = None, 0
    if toggles.task_specific_heads:
        if toggles.finetune and len(model.records) >= 2:
            xb, yb = build_finetune_set(model, x_new, y_new, model.memory, config.seed)
            rep = finetune_heads(model, xb, yb, config)
            ft_loss, ft_n = rep.final_loss, rep.num_samples
    else:
        if toggles.finetune:
            xb, yb = build_finetune_set(model, x_new, y_new, model.memory, config.seed)
        else:
            xm, ym = model.memory.arrays([c for c in model.memory.store if c not in set(class_ids(y_new))])
            xb = np.concatenate([x_new, xm]) if len(xm) else x_new
            yb = np.concatenate([y_new, ym]) if len(ym) else y_new
        rep = train_unified_head(model, xb, yb, config)
        ft_loss, ft_n = rep.final_loss, rep.num_samples

    model.verify_frozen()
    metrics = {"mcr": None, "per_class_recall": {}, "per_task_accuracy": {}, "head_selection_acc": None}
    if x_test is not None and y_test is not None:
        metrics = evaluate_round(model, x_test, y_test, debug)
    return RoundReport(
        round=len(model.records),
        task_id=learn.task_id,
        new_classes=class_ids(y_new),
        learned_classes=model.learned_classes,
        memory_counts={str(c): n for c, n in model.memory.counts().items()},
        learn_loss=learn.final_loss,
        learn_accuracy=learn.train_accuracy,
        finetune_loss=ft_loss,
        finetune_samples=ft_n,
        seed=config.seed,
        wall_clock_s=time.perf_counter() - start,
        **metrics,
    )


def class_ids(y: np.ndarray) -> list[int]:
    return sorted(set(int(c) for c in y))
