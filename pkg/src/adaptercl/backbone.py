"""Staged CNN feature extractor, base-task pretraining and freezing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import ops
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .optim import Optimizer, OptimizerConfig
from .tensor import Parameter, Tensor, checksum, he_normal, no_grad
from .training import iterate_minibatches

Tap = Callable[[Tensor], Tensor]


class PretrainingError(RuntimeError):
    def __init__(self, message: str, report: "PretrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class BackboneConfig:
    in_channels: int = 1
    input_size: int = 32
    channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    convs_per_stage: int = 2
    pool: int = 2

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("a backbone needs at least 2 stages")
        if self.convs_per_stage < 1 or self.in_channels < 1 or min(self.channels) < 1:
            raise ValueError("channel and layer counts must be positive")
        if self.input_size % (self.pool ** len(self.channels)):
            raise ValueError(
                f"input_size {self.input_size} must be divisible by pool**K = {self.pool ** len(self.channels)}"
            )

    @classmethod
    def from_json(cls, path: str | Path) -> "BackboneConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class StageSpec:
    stage_index: int
    layers: tuple[tuple, ...]
    in_channels: int
    out_channels: int
    spatial_downsample: int


def stage_specs(cfg: BackboneConfig) -> list[StageSpec]:
    specs = []
    c_in = cfg.in_channels
    for k, c_out in enumerate(cfg.channels, start=1):
        layers: list[tuple] = []
        c = c_in
        for _ in range(cfg.convs_per_stage):
            layers.append(("conv", c, c_out, 3, 1, 1))
            layers.append(("relu",))
            c = c_out
        layers.append(("maxpool", cfg.pool))
        specs.append(StageSpec(k, tuple(layers), c_in, c_out, cfg.pool))
        c_in = c_out
    return specs


class Backbone:
    """K-stage conv net. Each stage is (conv-relu) x n followed by max pooling.

    ``forward_stages`` exposes the stage outputs z_1..z_{K-1} and lets a
    caller splice a transform between stage k and k+1.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.specs = stage_specs(config)
        rng = np.random.default_rng([seed, 0xB0])
        self.params: dict[str, Parameter] = {}
        for spec in self.specs:
            j = 0
            for layer in spec.layers:
                if layer[0] != "conv":
                    continue
                _, ci, co, k, _, _ = layer
                base = f"backbone.stage{spec.stage_index}.conv{j}"
                self.params[base + ".weight"] = Parameter(he_normal(rng, (co, ci, k, k), ci * k * k), base + ".weight")
                self.params[base + ".bias"] = Parameter(np.zeros(co), base + ".bias")
                j += 1

    @property
    def K(self) -> int:
        return len(self.specs)

    @property
    def feature_dim(self) -> int:
        return self.config.channels[-1]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params.values())

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def checksum(self) -> str:
        return checksum(self.parameters())

    def stage_shape(self, k: int, input_size: int | None = None) -> tuple[int, int, int]:
        """(C, H, W) of z_k for a square input of ``input_size``."""
        size = self.config.input_size if input_size is None else input_size
        for spec in self.specs[:k]:
            size //= spec.spatial_downsample
        return (self.specs[k - 1].out_channels, size, size)

    def stage(self, k: int, h: Tensor) -> Tensor:
        spec = self.specs[k - 1]
        if h.ndim != 4 or h.shape[1] != spec.in_channels:
            raise ops.DimensionError(
                f"stage {k}: expected input with {spec.in_channels} channels on axis 1, got shape {h.shape}"
            )
        j = 0
        for layer in spec.layers:
            if layer[0] == "conv":
                base = f"backbone.stage{k}.conv{j}"
                h = ops.conv2d(h, self.params[base + ".weight"], self.params[base + ".bias"], layer[4], layer[5])
                j += 1
            elif layer[0] == "relu":
                h = ops.relu(h)
            else:
                h = ops.max_pool2d(h, layer[1])
        return h

    def forward_stages(
        self,
        x: Tensor,
        taps: Mapping[int, Tap] | None = None,
        from_stage: int = 1,
    ) -> tuple[dict[int, Tensor], Tensor]:
        """Run stages ``from_stage``..K and return ({k: z_k}, feature).

        With ``from_stage > 1``, ``x`` is taken to be the raw output of stage
        ``from_stage - 1`` (so its tap, if any, is applied first).  A tap at
        gap k maps z_k to the tensor fed into stage k+1.
        """
        taps = taps or {}
        zs: dict[int, Tensor] = {}
        h = x
        if from_stage > 1:
            zs[from_stage - 1] = h
            if from_stage - 1 in taps:
                h = taps[from_stage - 1](h)
        for k in range(from_stage, self.K + 1):
            h = self.stage(k, h)
            if k < self.K:
                zs[k] = h
                if k in taps:
                    h = taps[k](h)
        return zs, ops.global_avg_pool(h)

    def features(self, x: Tensor, taps: Mapping[int, Tap] | None = None) -> Tensor:
        return self.forward_stages(x, taps)[1]

    def freeze(self) -> "Backbone":
        for p in self.params.values():
            p.frozen = True
        return self

    def unfreeze(self) -> "Backbone":
        for p in self.params.values():
            p.frozen = False
        return self

    def copy(self) -> "Backbone":
        other = Backbone.__new__(Backbone)
        other.config = self.config
        other.specs = self.specs
        other.params = {k: Parameter(p.data, k, p.frozen) for k, p in self.params.items()}
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise CheckpointError(f"missing tensor {k!r}")
            if state[k].shape != p.shape:
                raise CheckpointError(f"tensor {k!r} has shape {state[k].shape}, expected {p.shape}")
        for k, p in self.params.items():
            p.data[...] = state[k]


def save_backbone(backbone: Backbone, path: str | Path) -> None:
    save_tensors(path, backbone.state_dict())


def load_backbone(path: str | Path, config: BackboneConfig) -> Backbone:
    """Load a frozen backbone; any parse error leaves no half-built object behind."""
    state = load_tensors(path)
    backbone = Backbone(config)
    backbone.load_state_dict(state)
    return backbone.freeze()


def calibrate_stage_scales(backbone: Backbone, x: np.ndarray) -> list[float]:
    """Rescale parameters so every stage output has unit RMS on ``x``.

    Stage k's last conv is divided by the RMS r_k of z_k, and every later
    bias by r_k as well.  ReLU and max pooling commute with positive
    scaling, so each stage output changes only by a positive factor and the
    class decision of any linear head is unchanged up to its bias.
    """
    factors = []
    with no_grad():
        for k in range(1, backbone.K + 1):
            z = Tensor(x)
            for j in range(1, k + 1):
                z = backbone.stage(j, z)
            r = float(np.sqrt(np.mean(z.data**2)))
            if not r > 0:
                raise PretrainingError(f"stage {k} output is identically zero", None)
            last = f"backbone.stage{k}.conv{backbone.config.convs_per_stage - 1}"
            backbone.params[last + ".weight"].data /= r
            backbone.params[last + ".bias"].data /= r
            for name, p in backbone.params.items():
                stage_no = int(name.split(".")[1][len("stage"):])
                if stage_no > k and name.endswith(".bias"):
                    p.data /= r
            factors.append(r)
    return factors


@dataclass
class PretrainReport:
    epochs: int
    train_loss: list[float]
    heldout_accuracy: float
    min_accuracy: float | None
    stage_scales: list[float] = field(default_factory=list)


def pretrain_backbone(
    backbone: Backbone,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    epochs: int,
    optimizer: OptimizerConfig,
    batch_size: int = 32,
    min_accuracy: float | None = None,
    seed: int = 0,
    calibrate: bool = True,
) -> PretrainReport:
    """Train backbone plus a throwaway linear head on the base classes, then freeze.

    Labels must be 0..B-1.  After training, stage outputs are rescaled to
    unit RMS on the base training data (see ``calibrate_stage_scales``).
    Raises ``PretrainingError`` (after freezing) when held-out accuracy ends
    below ``min_accuracy``.
    """
    classes = int(max(y_train.max(), y_val.max())) + 1
    rng = np.random.default_rng([seed, 0xBA5E])
    head_w = Parameter(rng.standard_normal((classes, backbone.feature_dim)) * 0.01, "base_head.weight")
    head_b = Parameter(np.zeros(classes), "base_head.bias")
    backbone.unfreeze()
    opt = Optimizer(backbone.parameters() + [head_w, head_b], optimizer)
    losses = []
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        total = 0.0
        for idx in iterate_minibatches(len(x_train), batch_size, rng):
            opt.zero_grad()
            feat = backbone.features(Tensor(x_train[idx]))
            loss, _ = ops.softmax_cross_entropy(ops.linear(feat, head_w, head_b), y_train[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(x_train))

    correct = 0
    with no_grad():
        for start in range(0, len(x_val), 256):
            feat = backbone.features(Tensor(x_val[start : start + 256]))
            logits = ops.linear(feat, head_w, head_b).data
            correct += int((logits.argmax(axis=1) == y_val[start : start + 256]).sum())
    scales = calibrate_stage_scales(backbone, x_train[:512]) if calibrate and epochs > 0 else []
    backbone.freeze()
    report = PretrainReport(epochs, losses, correct / len(x_val), min_accuracy, scales)
    if min_accuracy is not None and report.heldout_accuracy < min_accuracy:
        raise PretrainingError(
            f"pretraining reached {report.heldout_accuracy:.3f} held-out accuracy, below {min_accuracy}", report
        )
    return report
