import numpy as np
import pytest

from adaptercl.runner import load_config, prepare

TINY = [
    ("dataset.num_classes", 8),
    ("dataset.train_per_class", 24),
    ("dataset.test_per_class", 8),
    ("dataset.image_shape", [1, 8, 8]),
    ("backbone.input_size", 8),
    ("backbone.channels", [4, 8, 8]),
    ("split.num_base", 2),
    ("split.num_rounds", 3),
    ("split.classes_per_round", 2),
    ("pretrain.epochs", 2),
    ("pretrain.min_accuracy", None),
    ("engine.adapter_epochs", 2),
    ("engine.finetune_epochs", 2),
    ("baseline.epochs", 1),
    ("memory_budget", 12),
]


def tiny_config(seed=0, **extra):
    overrides = list(TINY) + [(k.replace("__", "."), v) for k, v in extra.items()] + [("seed", seed)]
    return load_config(None, overrides)


@pytest.fixture(scope="session")
def tiny():
    cfg = tiny_config()
    return cfg, prepare(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def base4():
    """A 4-class synthetic instance and a small CNN pretrained on it."""
    from adaptercl.backbone import Backbone, BackboneConfig, pretrain_backbone
    from adaptercl.data import DatasetSpec, generate_synthetic
    from adaptercl.optim import OptimizerConfig

    spec = DatasetSpec(num_classes=4, train_per_class=100, test_per_class=50, image_shape=(1, 16, 16))
    ds = generate_synthetic(spec, 0)
    bb = Backbone(BackboneConfig(input_size=16, channels=[8, 16, 32]), seed=0)
    report = pretrain_backbone(bb, ds.x_train, ds.y_train, ds.x_test, ds.y_test, 15, OptimizerConfig("adam", 0.003))
    return ds, bb, report


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
