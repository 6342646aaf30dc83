import numpy as np
import pytest

from adaptercl import ops
from adaptercl.backbone import (
    Backbone,
    BackboneConfig,
    PretrainingError,
    calibrate_stage_scales,
    load_backbone,
    pretrain_backbone,
    save_backbone,
)
from adaptercl.checkpoint import CheckpointError
from adaptercl.data import DatasetSpec, generate_synthetic
from adaptercl.optim import OptimizerConfig
from adaptercl.tensor import Tensor, no_grad


def small():
    return Backbone(BackboneConfig(input_size=8, channels=[4, 8, 8]), seed=3)


def test_stage_shapes_and_forward(rng):
    bb = small()
    assert [bb.stage_shape(k) for k in (1, 2, 3)] == [(4, 4, 4), (8, 2, 2), (8, 1, 1)]
    zs, feat = bb.forward_stages(Tensor(rng.standard_normal((2, 1, 8, 8))))
    assert sorted(zs) == [1, 2]
    assert zs[1].shape == (2, 4, 4, 4)
    assert feat.shape == (2, bb.feature_dim)


def test_forward_from_later_stage_matches_full_pass(rng):
    bb = small()
    x = Tensor(rng.standard_normal((3, 1, 8, 8)))
    zs, feat = bb.forward_stages(x)
    _, feat2 = bb.forward_stages(zs[1], from_stage=2)
    assert np.array_equal(feat.data, feat2.data)


def test_tap_is_applied_between_stages(rng):
    bb = small()
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    zero = lambda z: Tensor(np.zeros(z.shape))
    _, feat = bb.forward_stages(x, {1: zero})
    _, ref = bb.forward_stages(Tensor(np.zeros((2, 4, 4, 4))), from_stage=2)
    assert np.array_equal(feat.data, ref.data)


def test_wrong_channel_count_names_axis():
    with pytest.raises(ops.DimensionError, match="axis 1"):
        small().features(Tensor(np.zeros((1, 3, 8, 8))))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        BackboneConfig(input_size=12, channels=[4, 4, 4])
    with pytest.raises(ValueError):
        BackboneConfig(channels=[8])


def test_calibration_gives_unit_rms_and_positive_rescaling(rng):
    bb = small()
    x = rng.standard_normal((16, 1, 8, 8))
    with no_grad():
        before, _ = bb.forward_stages(Tensor(x))
    calibrate_stage_scales(bb, x)
    with no_grad():
        after, _ = bb.forward_stages(Tensor(x))
    for k in (1, 2):
        assert np.sqrt(np.mean(after[k].data ** 2)) == pytest.approx(1.0, rel=1e-9)
        mask = np.abs(before[k].data) > 1e-9
        ratio = after[k].data[mask] / before[k].data[mask]
        assert ratio.min() > 0
        assert np.ptp(ratio) < 1e-9 * ratio.max()


def test_checkpoint_round_trip(tmp_path):
    bb = small().freeze()
    save_backbone(bb, tmp_path / "bb.aclt")
    back = load_backbone(tmp_path / "bb.aclt", bb.config)
    assert back.frozen
    assert back.checksum() == bb.checksum()


def test_checkpoint_shape_mismatch(tmp_path):
    save_backbone(small(), tmp_path / "bb.aclt")
    with pytest.raises(CheckpointError, match="shape"):
        load_backbone(tmp_path / "bb.aclt", BackboneConfig(input_size=8, channels=[4, 8, 16]))


def _base_data(seed=0):
    spec = DatasetSpec(num_classes=4, train_per_class=100, test_per_class=50, image_shape=(1, 16, 16))
    return generate_synthetic(spec, seed)


def test_pretraining_reaches_ninety_percent_in_thirty_epochs(base4):
    _, bb, report = base4
    assert report.epochs <= 30
    assert report.heldout_accuracy >= 0.9
    assert bb.frozen
    assert len(report.stage_scales) == 3


def test_pretraining_below_threshold_raises():
    ds = _base_data()
    bb = Backbone(BackboneConfig(input_size=16, channels=[2, 2, 2]), seed=0)
    with pytest.raises(PretrainingError) as err:
        pretrain_backbone(bb, ds.x_train, ds.y_train, ds.x_test, ds.y_test, 1, OptimizerConfig("adam", 1e-5), min_accuracy=0.99)
    assert err.value.report.heldout_accuracy < 0.99
    assert bb.frozen
