"""One test per acceptance criterion; each records a PASS/FAIL line.

The lines are printed as they happen and again in the terminal summary.
Criterion 8 is the slow one (several minutes on one CPU core).
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from adaptercl import ops
from adaptercl.adapter import Adapter, AdapterSet
from adaptercl.backbone import Backbone, BackboneConfig
from adaptercl.engine import ContinualModel, RehearsalMemory, multi_head_loss, run_round
from adaptercl.gradcheck import finite_difference_check
from adaptercl.heads import TaskHead, map_labels, select_predictions
from adaptercl.metrics import class_recalls
from adaptercl.runner import load_config, prepare, run_ablation, run_baseline, strip_wall_clock
from adaptercl.tensor import Tensor

from conftest import TINY, record_acceptance, tiny_config
from test_heads import rule_oracle
from test_metrics import confusion_oracle
from test_properties import (
    test_finetune_set_histogram_is_uniform,
    test_memory_within_budget_and_balanced,
)


def _proj_sum(y):
    proj = np.random.default_rng(7).standard_normal((1, int(np.prod(y.shape))))
    return ops.reshape(ops.linear(ops.reshape(y, (1, -1)), Tensor(proj), Tensor(np.zeros(1))), ())


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(0)

    def t(*shape, shift=0.0):
        return Tensor(rng.standard_normal(shape) + shift, requires_grad=True)

    x4, w, b = t(2, 2, 6, 6), t(3, 2, 3, 3), t(3)
    a, c = t(3, 4), t(3, 4)
    alpha = t(1)
    lx, lw, lb = t(4, 5), t(3, 5), t(3)
    away = Tensor(np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0) * (0.5 + rng.random((3, 4))), requires_grad=True)
    z = t(5, 4)
    targets = np.array([0, 3, 1, 1, 2])
    ad = Adapter(1, 1, 4, rng, reduction=2)
    ad.alpha.data[:] = 0.7
    za, hw, hb = t(2, 4, 4, 4), t(3, 4), t(3)

    checks = {
        "linear": (lambda: _proj_sum(ops.linear(lx, lw, lb)), [lx, lw, lb]),
        "conv s1 p1": (lambda: _proj_sum(ops.conv2d(x4, w, b, 1, 1)), [x4, w, b]),
        "conv s2 p1": (lambda: _proj_sum(ops.conv2d(x4, w, b, 2, 1)), [x4, w, b]),
        "add/mul": (lambda: _proj_sum(ops.mul(ops.add(a, c), a)), [a, c]),
        "scale": (lambda: _proj_sum(ops.scale(a, alpha)), [a, alpha]),
        "relu": (lambda: _proj_sum(ops.relu(away)), [away]),
        "max_pool": (lambda: _proj_sum(ops.max_pool2d(x4, 2)), [x4]),
        "avg_pool": (lambda: _proj_sum(ops.global_avg_pool(x4)), [x4]),
        "upsample": (lambda: _proj_sum(ops.upsample_nearest2x(x4)), [x4]),
        "concat": (lambda: _proj_sum(ops.concat([a, c], axis=1)), [a, c]),
        "take_rows": (lambda: _proj_sum(ops.take_rows(a, np.array([0, 2, 2]))), [a]),
        "cross_entropy": (lambda: ops.softmax_cross_entropy(z, targets)[0], [z]),
        "mean_of": (lambda: ops.mean_of([ops.softmax_cross_entropy(z, targets)[0], _proj_sum(a)]), [z, a]),
        "adapter+head": (
            lambda: ops.softmax_cross_entropy(ops.linear(ops.global_avg_pool(ad(za)), hw, hb), np.array([0, 2]))[0],
            [za, hw, hb] + ad.parameters(),
        ),
    }
    start = time.perf_counter()
    errors = {name: finite_difference_check(fn, ts, eps=1e-5) for name, (fn, ts) in checks.items()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 5.0
    record_acceptance(1, ok, f"max rel err {errors[worst]:.2e} ({worst}) over {len(errors)} checks in {elapsed:.2f}s")
    assert ok


def test_criterion_2_freezing_invariants():
    cfg = load_config(
        None,
        [("pretrain.epochs", 3), ("pretrain.min_accuracy", None), ("engine.adapter_epochs", 3), ("engine.finetune_epochs", 3), ("seed", 0)],
    )
    prep = prepare(cfg)
    pre = prep.backbone.checksum()
    model = ContinualModel(prep.backbone.copy().freeze(), RehearsalMemory(cfg.memory_budget, cfg.seed))
    rc = cfg.round_config()
    own: dict[int, str] = {}
    problems = []
    snap = {}

    def after_learn(m, _):
        snap["frozen"] = m.frozen_checksums()
        snap["heads"] = {r.task_id: (r.head.weight.data.copy(), r.head.bias.data.copy()) for r in m.records}

    for group in prep.split.rounds:
        cur = prep.data.subset(group)
        run_round(model, cur.x_train, cur.y_train, rc, after_learn=after_learn)
        t = model.records[-1].task_id
        own[t] = model.records[-1].adapters.checksum()
        if model.backbone.checksum() != pre:
            problems.append(f"backbone changed in round {t}")
        for r in model.records:
            if r.adapters.checksum() != own[r.task_id]:
                problems.append(f"adapters of task {r.task_id} changed in round {t}")
        if model.frozen_checksums() != snap["frozen"]:
            problems.append(f"fine-tune of round {t} touched non-head parameters")
        if t >= 2 and all(
            np.array_equal(r.head.weight.data, snap["heads"][r.task_id][0]) for r in model.records
        ):
            problems.append(f"fine-tune of round {t} changed no head")
    ok = not problems and len(model.records) == 5
    record_acceptance(2, ok, "backbone and all prior adapter checksums bit-identical over 5 rounds" if ok else "; ".join(problems))
    assert ok


def test_criterion_3_zero_alpha_identity():
    rng = np.random.default_rng(3)
    bb = Backbone(BackboneConfig(input_size=16, channels=[8, 16, 32]), seed=2)
    worst = 0.0
    for task in range(1, 4):
        aset = AdapterSet.create(task, bb, seed=task)
        x = Tensor(rng.standard_normal((6, 1, 16, 16)))
        worst = max(worst, float(np.abs(bb.features(x, aset.taps).data - bb.features(x).data).max()))
    ok = worst <= 1e-12
    record_acceptance(3, ok, f"max |adapted - plain| = {worst:.1e} with alpha = 0")
    assert ok


def test_criterion_4_multi_head_loss():
    rng = np.random.default_rng(4)
    worst = 0.0
    for t in range(1, 6):
        heads = [TaskHead(s + 1, [2 * s, 2 * s + 1], 6, rng, init_std=1.0) for s in range(t)]
        feats = [Tensor(rng.standard_normal((10, 6))) for _ in range(t)]
        labels = rng.integers(0, 2 * t, size=10)
        loss, _ = multi_head_loss(heads, feats, labels)
        per = [ops.softmax_cross_entropy(h.logits(f), map_labels(h, labels))[0].item() for h, f in zip(heads, feats)]
        worst = max(worst, abs(loss.item() - sum(per) / t))
        if t == 1:
            exact_single = loss.item() == per[0]
    ok = worst < 1e-12 and exact_single
    record_acceptance(4, ok, f"|L - mean per-head CE| <= {worst:.1e}; t=1 exact: {exact_single}")
    assert ok


def test_criterion_5_inference_rule():
    rng = np.random.default_rng(5)
    hand = [
        ([np.array([[0.1, 0.2, 0.7]]), np.array([[0.6, 0.3, 0.1]])], [[0, 1], [2, 3]], 2),
        ([np.array([[0.2, 0.3, 0.5]]), np.array([[0.3, 0.2, 0.5]])], [[0, 1], [2, 3]], 1),
        ([np.array([[0.5, 0.1, 0.4]]), np.array([[0.1, 0.1, 0.8]]), np.array([[0.2, 0.7, 0.1]])], [[0, 1], [2, 3], [4, 5]], 5),
    ]
    agree = total = 0
    others_returned = False
    for tables, lists, want in hand:
        pred, _ = select_predictions(tables, lists)
        agree += int(pred[0] == want)
        total += 1
    for _ in range(1200):
        t = int(rng.integers(1, 6))
        sizes = rng.integers(1, 4, size=t)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        lists = [list(range(int(s), int(s + n))) for s, n in zip(starts, sizes)]
        tables = [rng.integers(0, 4, size=(2, c + 1)).astype(float) + 1e-3 for c in sizes]
        tables = [tb / tb.sum(axis=1, keepdims=True) for tb in tables]
        pred, _ = select_predictions(tables, lists)
        want = rule_oracle(tables, lists)
        agree += int(pred.tolist() == want)
        total += 1
        others_returned |= not set(pred.tolist()) <= {c for l in lists for c in l}
    ok = agree == total and not others_returned
    record_acceptance(5, ok, f"{agree}/{total} instances match the rule oracle; others returned: {others_returned}")
    assert ok


def test_criterion_6_mcr_oracle():
    rng = np.random.default_rng(6)
    exact = 0
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        y_true = np.concatenate([np.arange(k), rng.integers(0, k, size=int(rng.integers(0, 40)))])
        y_pred = rng.integers(0, k, size=y_true.size)
        exact += int(class_recalls(y_true, y_pred, list(range(k))).mcr == confusion_oracle(y_true, y_pred, list(range(k))))
    worst = 0.0
    for _ in range(100):
        k, n = int(rng.integers(2, 8)), int(rng.integers(1, 30))
        y_true = np.repeat(np.arange(k), n)
        y_pred = rng.integers(0, k, size=y_true.size)
        worst = max(worst, abs(class_recalls(y_true, y_pred).mcr - float(np.mean(y_true == y_pred))))
    ok = exact == 1000 and worst <= 1e-12
    record_acceptance(6, ok, f"{exact}/1000 exact oracle matches; balanced |MCR - acc| <= {worst:.1e}")
    assert ok


@pytest.mark.filterwarnings("ignore:memory budget")
def test_criterion_7_balance_and_memory_contracts():
    failures = []
    for prop in (test_memory_within_budget_and_balanced, test_finetune_set_histogram_is_uniform):
        try:
            prop()
        except Exception as exc:  # noqa: BLE001 - reported below, then re-raised via assert
            failures.append(f"{prop.__name__}: {exc}")
    ok = not failures
    record_acceptance(7, ok, "memory and balance properties hold on 250 + 250 generated cases" if ok else "; ".join(failures))
    assert ok


TREND_ROWS = ["tsh", "tsh+adapter", "tsh+adapter+others", "full"]


@pytest.mark.slow
def test_criterion_8_desk_scale_trend():
    start = time.perf_counter()
    last: dict[str, list[float]] = {}
    for seed in (0, 1, 2):
        cfg = load_config(None, [("seed", seed)])
        prep = prepare(cfg)
        for name, reps in run_ablation(cfg, TREND_ROWS, prep).items():
            last.setdefault(name, []).append(reps[-1].mcr)
        last.setdefault("naive", []).append(run_baseline("naive", cfg, prep)[-1].mcr)
        last.setdefault("joint", []).append(run_baseline("joint", cfg, prep, every_round=False)[-1].mcr)
    elapsed = time.perf_counter() - start
    mean = {k: float(np.mean(v)) for k, v in last.items()}
    a = mean["full"] - mean["tsh+adapter+others"] >= 0.10
    b = all(mean[x] <= mean[y] for x, y in zip(TREND_ROWS, TREND_ROWS[1:]))
    c = mean["full"] - mean["naive"] >= 0.15
    d = all(j >= f for j, f in zip(last["joint"], last["full"]))
    fast = elapsed < 900
    summary = " ".join(f"{k}={v:.3f}" for k, v in mean.items())
    ok = a and b and c and d and fast
    record_acceptance(
        8, ok, f"(a) {a} (b) {b} (c) {c} (d) {d} runtime {elapsed:.0f}s<900s {fast}; mean last-round MCR: {summary}"
    )
    print(json.dumps({"per_seed_last_round_mcr": last}), flush=True)
    assert ok


def _cli_run(tmp, name):
    out = tmp / name
    cmd = [sys.executable, "-m", "adaptercl.cli", "run", "--seed", "5", "--no-checkpoints", "--out", str(out)]
    for k, v in TINY:
        cmd += ["--set", f"{k}={json.dumps(v)}"]
    subprocess.run(cmd, check=True, capture_output=True)
    return (out / "run_log.jsonl").read_text().splitlines()


def test_criterion_9_determinism(tmp_path):
    first = [strip_wall_clock(line).encode() for line in _cli_run(tmp_path, "a")]
    second = [strip_wall_clock(line).encode() for line in _cli_run(tmp_path, "b")]
    ok = first == second and len(first) == tiny_config().split.num_rounds
    record_acceptance(9, ok, f"two separate processes, {len(first)} run-log lines byte-identical without wall-clock")
    assert ok
