import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptercl.engine import MemoryBudgetError, RehearsalMemory, build_finetune_set
from adaptercl.heads import select_predictions


class _Stub:
    def __init__(self, learned):
        self.learned_classes = learned


def _round_data(classes, per_class):
    x = np.arange(len(classes) * per_class, dtype=float).reshape(-1, 1, 1, 1)
    y = np.repeat(np.asarray(classes), per_class)
    return x, y


rounds_strategy = st.lists(st.integers(1, 5), min_size=1, max_size=6)


@pytest.mark.filterwarnings("ignore:memory budget")
@settings(max_examples=250, deadline=None)
@given(budget=st.integers(1, 120), sizes=rounds_strategy, seed=st.integers(0, 2**16))
def test_memory_within_budget_and_balanced(budget, sizes, seed):
    mem = RehearsalMemory(budget, seed)
    learned = []
    for n in sizes:
        new = list(range(len(learned), len(learned) + n))
        learned += new
        x, y = _round_data(new, budget + 1)
        if budget < len(learned):
            try:
                mem.update(x, y, learned)
            except MemoryBudgetError:
                return
            raise AssertionError("an undersized budget must be rejected")
        mem.update(x, y, learned)
        counts = mem.counts()
        assert sorted(counts) == learned
        assert mem.total <= budget
        assert max(counts.values()) - min(counts.values()) <= 1
        assert sum(mem.quotas(learned).values()) == budget


@settings(max_examples=250, deadline=None)
@given(budget=st.integers(2, 120), sizes=rounds_strategy, avail=st.integers(1, 40), seed=st.integers(0, 2**16))
def test_finetune_set_histogram_is_uniform(budget, sizes, avail, seed):
    mem = RehearsalMemory(budget, seed)
    learned = []
    x = y = None
    for n in sizes:
        new = list(range(len(learned), len(learned) + n))
        if budget < len(learned) + n:
            return
        learned += new
        x, y = _round_data(new, avail)
        mem.update(x, y, learned)
    xb, yb = build_finetune_set(_Stub(learned), x, y, mem, seed)
    hist = np.bincount(yb, minlength=len(learned))
    assert len(set(hist.tolist())) == 1
    assert hist[0] == min(budget // len(learned), avail)
    assert len(xb) == len(yb)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_prediction_is_a_learned_class(data):
    t = data.draw(st.integers(1, 4))
    sizes = [data.draw(st.integers(1, 3)) for _ in range(t)]
    n = data.draw(st.integers(1, 5))
    lists, start = [], 0
    for c in sizes:
        lists.append(list(range(start, start + c)))
        start += c
    rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
    tables = [rng.dirichlet(np.ones(c + 1), size=n) for c in sizes]
    pred, chosen = select_predictions(tables, lists)
    for i in range(n):
        assert pred[i] in lists[chosen[i]]
