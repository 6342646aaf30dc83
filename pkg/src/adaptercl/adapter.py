"""Task-specific residual conv adapters inserted between backbone stages."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from . import ops
from .backbone import Backbone
from .tensor import Parameter, Tensor, checksum, he_normal


class Adapter:
    """ẑ = alpha * conv_up(upsample2x(relu(conv_down(z)))) + z.

    conv_down is 3x3 / stride 2 mapping C -> C // reduction; conv_up is 3x3 /
    stride 1 mapping back to C.  ``alpha`` starts at 0, so a fresh adapter
    is the identity.
    """

    def __init__(
        self,
        task_id: int,
        gap_index: int,
        channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
        kernel: int = 3,
    ):
        self.task_id = task_id
        self.gap_index = gap_index
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.hidden = hidden
        self.kernel = kernel
        pre = f"task.{task_id}.adapter.{gap_index}"
        self.down_w = Parameter(he_normal(rng, (hidden, channels, kernel, kernel), channels * kernel * kernel), pre + ".down.weight")
        self.down_b = Parameter(np.zeros(hidden), pre + ".down.bias")
        self.up_w = Parameter(he_normal(rng, (channels, hidden, kernel, kernel), hidden * kernel * kernel), pre + ".up.weight")
        self.up_b = Parameter(np.zeros(channels), pre + ".up.bias")
        self.alpha = Parameter(np.zeros(1), pre + ".alpha")

    def parameters(self) -> list[Parameter]:
        return [self.down_w, self.down_b, self.up_w, self.up_b, self.alpha]

    def __call__(self, z: Tensor) -> Tensor:
        return adapter_forward(self, z)


def adapter_forward(adapter: Adapter, z: Tensor) -> Tensor:
    if z.ndim != 4 or z.shape[1] != adapter.channels:
        raise ops.DimensionError(
            f"adapter gap {adapter.gap_index}: expected {adapter.channels} channels on axis 1, got shape {z.shape}"
        )
    _, _, h, w = z.shape
    if h % 2:
        raise ops.DimensionError(f"adapter gap {adapter.gap_index}: height axis (2) size {h} is odd")
    if w % 2:
        raise ops.DimensionError(f"adapter gap {adapter.gap_index}: width axis (3) size {w} is odd")
    pad = adapter.kernel // 2
    d = ops.relu(ops.conv2d(z, adapter.down_w, adapter.down_b, stride=2, padding=pad))
    u = ops.conv2d(ops.upsample_nearest2x(d), adapter.up_w, adapter.up_b, stride=1, padding=pad)
    return ops.add(ops.scale(u, adapter.alpha), z)


class AdapterSet:
    """One adapter per enabled gap for a single task."""

    def __init__(self, task_id: int, adapters: Mapping[int, Adapter]):
        self.task_id = task_id
        self.adapters = dict(sorted(adapters.items()))

    @classmethod
    def create(
        cls,
        task_id: int,
        backbone: Backbone,
        seed: int,
        gaps: Iterable[int] | None = None,
        reduction: int = 4,
    ) -> "AdapterSet":
        gaps = range(1, backbone.K) if gaps is None else gaps
        adapters = {}
        for k in gaps:
            if not 1 <= k < backbone.K:
                raise ValueError(f"gap index {k} outside 1..{backbone.K - 1}")
            rng = np.random.default_rng([seed, 0xADA, task_id, k])
            adapters[k] = Adapter(task_id, k, backbone.stage_shape(k)[0], rng, reduction)
        return cls(task_id, adapters)

    @property
    def taps(self) -> dict[int, Adapter]:
        return self.adapters

    def parameters(self) -> list[Parameter]:
        return [p for a in self.adapters.values() for p in a.parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def checksum(self) -> str:
        return checksum(self.parameters())

    def freeze(self) -> "AdapterSet":
        for p in self.parameters():
            p.frozen = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = state[p.name]
