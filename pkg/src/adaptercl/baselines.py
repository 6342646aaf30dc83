"""Reference points: naive sequential fine-tuning and the joint-training upper bound."""

from __future__ import annotations

import time

import numpy as np

from . import ops
from .backbone import Backbone
from .data import Dataset, TaskSplit
from .engine import RoundConfig, RoundReport
from .metrics import class_recalls
from .optim import Optimizer
from .tensor import Parameter, Tensor, no_grad
from .training import derive_rng, iterate_minibatches


class _Classifier:
    """Trainable backbone copy plus one linear head whose output list can grow."""

    def __init__(self, backbone: Backbone, rng: np.random.Generator, init_std: float):
        self.net = backbone.copy().unfreeze()
        self.classes: list[int] = []
        self.rng = rng
        self.init_std = init_std
        self.weight: Parameter | None = None
        self.bias: Parameter | None = None

    def add_classes(self, classes) -> None:
        new = [c for c in classes if c not in self.classes]
        d = self.net.feature_dim
        w_new = self.rng.standard_normal((len(new), d)) * self.init_std
        if self.weight is None:
            w, b = w_new, np.zeros(len(new))
        else:
            w = np.concatenate([self.weight.data, w_new])
            b = np.concatenate([self.bias.data, np.zeros(len(new))])
        self.classes += new
        self.weight = Parameter(w, "baseline.head.weight")
        self.bias = Parameter(b, "baseline.head.bias")

    def fit(self, x: np.ndarray, y: np.ndarray, config: RoundConfig, rng: np.random.Generator) -> float:
        local = {c: i for i, c in enumerate(self.classes)}
        targets = np.array([local[int(c)] for c in y])
        opt = Optimizer(self.net.parameters() + [self.weight, self.bias], config.adapter_optimizer)
        loss_val = float("nan")
        for epoch in range(config.adapter_epochs):
            opt.set_epoch(epoch)
            total = 0.0
            for idx in iterate_minibatches(len(x), config.batch_size, rng):
                opt.zero_grad()
                feat = self.net.features(Tensor(x[idx]))
                loss, _ = ops.softmax_cross_entropy(ops.linear(feat, self.weight, self.bias), targets[idx])
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            loss_val = total / len(x)
        return loss_val

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(x), 256):
                feat = self.net.features(Tensor(x[start : start + 256]))
                out.append(ops.linear(feat, self.weight, self.bias).data.argmax(axis=1))
        return np.asarray(self.classes)[np.concatenate(out)]


def _report(run: str, r: int, new: list[int], learned: list[int], pred, y_test, loss: float, seed: int, t0: float) -> RoundReport:
    res = class_recalls(y_test, pred, learned)
    return RoundReport(
        round=r,
        task_id=r,
        new_classes=new,
        learned_classes=learned,
        mcr=res.mcr,
        per_class_recall={str(c): v for c, v in res.per_class.items()},
        per_task_accuracy={},
        head_selection_acc=None,
        memory_counts={},
        learn_loss=loss,
        learn_accuracy=float("nan"),
        finetune_loss=None,
        finetune_samples=0,
        seed=seed,
        wall_clock_s=time.perf_counter() - t0,
        run=run,
    )


def run_naive(backbone: Backbone, data: Dataset, split: TaskSplit, config: RoundConfig) -> list[RoundReport]:
    """One growing head, whole network trained on each round's new data only."""
    clf = _Classifier(backbone, derive_rng(config.seed, 0x1A1), config.head_init_std)
    rng = derive_rng(config.seed, 0x1A2)
    reports = []
    for r, group in enumerate(split.rounds, start=1):
        t0 = time.perf_counter()
        clf.add_classes(group)
        cur = data.subset(group)
        loss = clf.fit(cur.x_train, cur.y_train, config, rng)
        learned = sorted(c for g in split.rounds[:r] for c in g)
        test = data.subset(learned)
        reports.append(_report("naive", r, sorted(group), learned, clf.predict(test.x_test), test.y_test, loss, config.seed, t0))
    return reports


def run_joint(
    backbone: Backbone,
    data: Dataset,
    split: TaskSplit,
    config: RoundConfig,
    every_round: bool = True,
) -> list[RoundReport]:
    """Fresh network trained on all training data of the classes learned so far.

    With ``every_round=False`` only the final round is trained and reported.
    """
    reports = []
    rounds = range(1, len(split.rounds) + 1) if every_round else [len(split.rounds)]
    for r in rounds:
        t0 = time.perf_counter()
        learned = sorted(c for g in split.rounds[:r] for c in g)
        clf = _Classifier(backbone, derive_rng(config.seed, 0x101, r), config.head_init_std)
        clf.add_classes(learned)
        cur = data.subset(learned)
        loss = clf.fit(cur.x_train, cur.y_train, config, derive_rng(config.seed, 0x102, r))
        reports.append(
            _report("joint", r, sorted(split.rounds[r - 1]), learned, clf.predict(cur.x_test), cur.y_test, loss, config.seed, t0)
        )
    return reports
