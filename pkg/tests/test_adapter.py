import numpy as np
import pytest

from adaptercl import ops
from adaptercl.adapter import Adapter, AdapterSet, adapter_forward
from adaptercl.backbone import Backbone, BackboneConfig
from adaptercl.tensor import Tensor


def test_fresh_adapter_is_identity(rng):
    ad = Adapter(1, 1, 8, rng)
    z = Tensor(rng.standard_normal((2, 8, 4, 4)))
    assert np.array_equal(adapter_forward(ad, z).data, z.data)


def test_hand_computed_one_by_one_kernels():
    # 1x1 kernels: down keeps the top-left pixel of each 2x2 block, scaled by 2
    # and shifted by -1; relu; upsample copies it back over the block; up
    # multiplies by 3; alpha = 0.5; plus the input.
    rng = np.random.default_rng(0)
    ad = Adapter(1, 1, 1, rng, reduction=1, kernel=1)
    ad.down_w.data[...] = 2.0
    ad.down_b.data[...] = -1.0
    ad.up_w.data[...] = 3.0
    ad.up_b.data[...] = 0.0
    ad.alpha.data[...] = 0.5
    z = np.array([[1.0, 9.0], [9.0, 9.0]]).reshape(1, 1, 2, 2)
    out = adapter_forward(ad, Tensor(z)).data
    branch = 0.5 * 3.0 * max(0.0, 2.0 * 1.0 - 1.0)
    assert np.array_equal(out, z + branch)


def test_odd_spatial_size_rejected(rng):
    with pytest.raises(ops.DimensionError, match="odd"):
        Adapter(1, 1, 4, rng)(Tensor(np.zeros((1, 4, 3, 4))))


def test_channel_mismatch_rejected(rng):
    with pytest.raises(ops.DimensionError, match="axis 1"):
        Adapter(1, 1, 4, rng)(Tensor(np.zeros((1, 5, 4, 4))))


def test_adapter_set_is_light(rng):
    bb = Backbone(BackboneConfig(input_size=16, channels=[8, 16, 32]))
    aset = AdapterSet.create(1, bb, seed=0)
    assert sorted(aset.adapters) == [1, 2]
    assert aset.num_parameters() < 0.1 * bb.num_parameters()
    big = Backbone(BackboneConfig())
    assert AdapterSet.create(1, big, seed=0).num_parameters() < 0.1 * big.num_parameters()


def test_adapter_set_gap_mask_and_names(rng):
    bb = Backbone(BackboneConfig(input_size=16, channels=[8, 16, 32]))
    aset = AdapterSet.create(3, bb, seed=0, gaps=[2])
    assert list(aset.adapters) == [2]
    assert {p.name for p in aset.parameters()} == {
        "task.3.adapter.2.down.weight",
        "task.3.adapter.2.down.bias",
        "task.3.adapter.2.up.weight",
        "task.3.adapter.2.up.bias",
        "task.3.adapter.2.alpha",
    }
    with pytest.raises(ValueError, match="gap"):
        AdapterSet.create(1, bb, seed=0, gaps=[3])


def test_zero_alpha_features_equal_plain_features(rng):
    bb = Backbone(BackboneConfig(input_size=16, channels=[8, 16, 32]), seed=1)
    aset = AdapterSet.create(1, bb, seed=5)
    x = Tensor(rng.standard_normal((4, 1, 16, 16)))
    plain = bb.features(x).data
    tapped = bb.features(x, aset.taps).data
    assert np.abs(plain - tapped).max() <= 1e-12


def test_state_round_trip_and_freeze(rng):
    bb = Backbone(BackboneConfig(input_size=16, channels=[8, 16, 32]))
    a = AdapterSet.create(1, bb, seed=0)
    b = AdapterSet.create(1, bb, seed=9)
    assert a.checksum() != b.checksum()
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()
    assert all(p.frozen for p in a.freeze().parameters())
