"""Per-task classifier heads with an `others` output and the head-selection rule."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class UnknownClassError(KeyError):
    pass


class TaskHead:
    """Linear layer over a task feature with outputs [class_list..., others].

    With ``others=False`` the head has only the C_t in-task outputs; that form
    exists for ablation runs.
    """

    def __init__(
        self,
        task_id: int,
        class_list: Sequence[int],
        dim: int,
        rng: np.random.Generator | None = None,
        others: bool = True,
        init_std: float = 0.01,
    ):
        if len(set(class_list)) != len(class_list) or not class_list:
            raise ValueError(f"class_list must be non-empty and unique, got {class_list}")
        self.task_id = task_id
        self.class_list = [int(c) for c in class_list]
        self.has_others = others
        self.dim = dim
        n_out = len(self.class_list) + (1 if others else 0)
        rng = rng if rng is not None else np.random.default_rng([0xEAD, task_id])
        self.weight = Parameter(rng.standard_normal((n_out, dim)) * init_std, f"task.{task_id}.head.weight")
        self.bias = Parameter(np.zeros(n_out), f"task.{task_id}.head.bias")
        self._local = {c: i for i, c in enumerate(self.class_list)}

    @property
    def num_outputs(self) -> int:
        return self.weight.shape[0]

    @property
    def others_index(self) -> int:
        if not self.has_others:
            raise AttributeError("head was built without an others output")
        return len(self.class_list)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def copy(self) -> "TaskHead":
        other = TaskHead(self.task_id, self.class_list, self.dim, np.random.default_rng(0), self.has_others)
        other.weight.data[...] = self.weight.data
        other.bias.data[...] = self.bias.data
        return other

    def logits(self, feature: Tensor) -> Tensor:
        return ops.linear(feature, self.weight, self.bias)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            self.weight.name: self.weight.data,
            self.bias.name: self.bias.data,
            f"task.{self.task_id}.head.class_list": np.asarray(self.class_list, dtype=np.float64),
        }


def head_forward(head: TaskHead, feature: Tensor) -> np.ndarray:
    """Softmax probabilities, shape (N, num_outputs)."""
    return ops.softmax(head.logits(feature).data)


def map_labels(head: TaskHead, labels: Iterable[int], known: Iterable[int] | None = None) -> np.ndarray:
    """Global class ids -> local targets; ids outside the head go to `others`.

    ``known`` is the set of classes learned so far; labels outside it are
    rejected.  Without it, any id not in the head is treated as `others`.
    """
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels, dtype=np.int64)
    known_set = None if known is None else set(int(k) for k in known)
    out = np.empty(labels.shape, dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        if known_set is not None and lab not in known_set:
            raise UnknownClassError(f"class id {lab} has not been learned")
        local = head._local.get(lab)
        if local is None:
            if not head.has_others:
                raise UnknownClassError(f"class id {lab} is outside head {head.task_id} and the head has no others output")
            local = head.others_index
        out[i] = local
    return out


def select_predictions(
    prob_tables: Sequence[np.ndarray],
    class_lists: Sequence[Sequence[int]],
    others: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the multi-head decision rule to per-head probability tables.

    ``prob_tables[s]`` has shape (N, C_s + 1) with `others` last when
    ``others`` is true, else (N, C_s).  Heads must be ordered by task id.
    With `others`: pick the head with the smallest `others` probability
    (first on ties) and return its most probable in-task class.  Without:
    pick the head whose top in-task probability is largest.

    Returns (global class ids, selected head positions).
    """
    if not prob_tables:
        raise ValueError("no learned tasks to predict with")
    if others:
        score = np.stack([p[:, -1] for p in prob_tables], axis=1)
        chosen = score.argmin(axis=1)
        in_task = [p[:, :-1] for p in prob_tables]
    else:
        in_task = list(prob_tables)
        score = np.stack([p.max(axis=1) for p in in_task], axis=1)
        chosen = score.argmax(axis=1)
    n = prob_tables[0].shape[0]
    out = np.empty(n, dtype=np.int64)
    for s, (probs, classes) in enumerate(zip(in_task, class_lists)):
        rows = np.nonzero(chosen == s)[0]
        if rows.size:
            out[rows] = np.asarray(classes, dtype=np.int64)[probs[rows].argmax(axis=1)]
    return out, chosen


class UnifiedHead:
    """Single classifier over the concatenation of every task's feature.

    Only used by the ablation that drops task-specific heads.
    """

    def __init__(self, class_list: Sequence[int], dim: int, rng: np.random.Generator, init_std: float = 0.01):
        self.class_list = [int(c) for c in class_list]
        self.weight = Parameter(rng.standard_normal((len(self.class_list), dim)) * init_std, "unified.head.weight")
        self.bias = Parameter(np.zeros(len(self.class_list)), "unified.head.bias")
        self._local = {c: i for i, c in enumerate(self.class_list)}

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def logits(self, feature: Tensor) -> Tensor:
        return ops.linear(feature, self.weight, self.bias)

    def targets(self, labels: np.ndarray) -> np.ndarray:
        try:
            return np.array([self._local[int(l)] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise UnknownClassError(f"class id {exc.args[0]} not in unified head") from None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            self.weight.name: self.weight.data,
            self.bias.name: self.bias.data,
            "unified.head.class_list": np.asarray(self.class_list, dtype=np.float64),
        }


def heads_by_task(heads: Mapping[int, TaskHead]) -> list[TaskHead]:
    return [heads[t] for t in sorted(heads)]
