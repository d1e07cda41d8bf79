import numpy as np
import pytest
import torch
import torch.nn as nn

from treenet.autoencoders import (KIND_INPUT, KIND_LABEL, AutoencoderSpec,
                                  TrainedAutoencoder, build_autoencoder)
from treenet.backbones import (BackboneSpec, BridgeTrainingSet, build_backbone,
                               materialize_bridge_set, train_bridge)
from treenet.data import generate_synthetic, resize_bilinear
from treenet.errors import ShapeMismatchError, SpecError, StaleArtifactError
from treenet.layer_graph import count_params, model_param_count
from treenet.shapes import ShapeSpec
from treenet.trainer import TrainConfig


class TestBuildBackbone:
    def test_unet_shape_contract(self):
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=3,
                            in_size=96, out_size=96, depth=4, base_width=32)
        model = build_backbone(spec)
        out = model(torch.rand(2, 3, 96, 96))
        assert tuple(out.shape) == (2, 3, 96, 96)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_unetpp_shape_contract(self):
        spec = BackboneSpec(name="unetpp", in_channels=3, out_channels=3,
                            in_size=48, out_size=48, depth=3, base_width=8)
        model = build_backbone(spec)
        assert tuple(model(torch.rand(1, 3, 48, 48)).shape) == (1, 3, 48, 48)

    def test_pvt_stub_contract(self):
        spec = BackboneSpec(name="pvt_stub", in_channels=3, out_channels=16,
                            in_size=88, out_size=24, base_width=32)
        model = build_backbone(spec)
        assert tuple(model(torch.rand(1, 3, 88, 88)).shape) == (1, 16, 24, 24)

    def test_depth_collapse_error(self):
        spec = BackboneSpec(name="unet", in_size=96, out_size=96, depth=8, base_width=8)
        with pytest.raises(SpecError, match="below 1px"):
            build_backbone(spec)

    def test_indivisible_size_error(self):
        spec = BackboneSpec(name="unet", in_size=48, out_size=48, depth=5, base_width=8)
        with pytest.raises(SpecError, match="divisible"):
            build_backbone(spec)

    def test_param_target_check(self):
        ok = BackboneSpec(name="unet", in_size=96, out_size=96, depth=4,
                          base_width=32, param_target=7_850_000)
        build_backbone(ok)
        bad = BackboneSpec(name="unet", in_size=96, out_size=96, depth=4,
                           base_width=32, param_target=20_000_000)
        with pytest.raises(SpecError, match="target"):
            build_backbone(bad)

    def test_traced_graph_matches_model_params(self):
        for spec in (
            BackboneSpec(name="unet", in_size=32, out_size=32, depth=2, base_width=8),
            BackboneSpec(name="unetpp", in_size=32, out_size=32, depth=2, base_width=8),
            BackboneSpec(name="pvt_stub", out_channels=16, in_size=32, out_size=8,
                         base_width=8),
        ):
            model = build_backbone(spec)
            assert count_params(model.graph) == model_param_count(model)

    def test_custom_backbone_factory(self):
        def factory(spec):
            return nn.Sequential(
                nn.Conv2d(spec.in_channels, spec.out_channels, 3, padding=1),
                nn.Sigmoid(),
            )
        spec = BackboneSpec(name="custom", in_channels=3, out_channels=3,
                            in_size=32, out_size=32, factory=factory)
        model = build_backbone(spec)
        assert tuple(model(torch.rand(1, 3, 32, 32)).shape) == (1, 3, 32, 32)

    def test_custom_without_factory_rejected(self):
        with pytest.raises(SpecError):
            BackboneSpec(name="custom")

    def test_output_contract_violation_detected(self):
        def factory(spec):
            return nn.Sequential(nn.Conv2d(spec.in_channels, 5, 3, padding=1), nn.Sigmoid())
        spec = BackboneSpec(name="custom", in_channels=3, out_channels=3,
                            in_size=32, out_size=32, factory=factory)
        with pytest.raises(SpecError, match="contract"):
            build_backbone(spec)


def _tiny_trained_pair(size=64):
    shape = ShapeSpec(input_size=size, input_reduction=2, label_reduction=2)
    enc = build_autoencoder(AutoencoderSpec(kind=KIND_INPUT, shape=shape))
    dec = build_autoencoder(AutoencoderSpec(kind=KIND_LABEL, shape=shape))
    return (TrainedAutoencoder(spec=enc.spec, model=enc),
            TrainedAutoencoder(spec=dec.spec, model=dec))


class TestMaterializeBridgeSet:
    def test_shapes_and_pairing(self):
        enc, dec = _tiny_trained_pair()
        records = generate_synthetic(6, 64, seed=0)
        made = materialize_bridge_set(enc, dec, records)
        assert made.inputs.shape == (6, 3, 32, 32)
        assert made.targets.shape == (6, 3, 32, 32)
        assert made.ids == [r.id for r in records]

    def test_empty_dataset(self):
        enc, dec = _tiny_trained_pair()
        made = materialize_bridge_set(enc, dec, [])
        assert len(made) == 0
        assert made.inputs.shape == (0, 3, 32, 32)

    def test_cache_round_trip_is_byte_identical(self, tmp_path):
        enc, dec = _tiny_trained_pair()
        records = generate_synthetic(4, 64, seed=1)
        cache = tmp_path / "pairs"
        first = materialize_bridge_set(enc, dec, records, cache_path=cache)
        second = materialize_bridge_set(enc, dec, records, cache_path=cache)
        assert np.array_equal(first.inputs, second.inputs)
        assert np.array_equal(first.targets, second.targets)
        assert first.provenance == second.provenance

    def test_stale_cache_error(self, tmp_path):
        enc, dec = _tiny_trained_pair()
        records = generate_synthetic(4, 64, seed=2)
        cache = tmp_path / "pairs"
        materialize_bridge_set(enc, dec, records, cache_path=cache)
        # new weights -> provenance hash changes
        enc2, _ = _tiny_trained_pair()
        with torch.no_grad():
            for p in enc2.model.parameters():
                p.add_(0.1)
        with pytest.raises(StaleArtifactError):
            materialize_bridge_set(enc2, dec, records, cache_path=cache)
        rebuilt = materialize_bridge_set(enc2, dec, records, cache_path=cache,
                                         on_stale="rebuild")
        assert rebuilt.provenance["encoder_weights"] == enc2.weights_hash

    def test_targets_bounded(self):
        enc, dec = _tiny_trained_pair()
        records = generate_synthetic(4, 64, seed=3)
        made = materialize_bridge_set(enc, dec, records)
        assert made.targets.min() >= 0.0 and made.targets.max() <= 1.0


def _raw_pair_set(n=64, size=32, seed=11):
    records = generate_synthetic(n, 96, seed=seed)
    inputs = np.stack([resize_bilinear(r.image, size) for r in records])
    targets = np.stack([resize_bilinear(r.mask, size, mask=True) for r in records])
    return BridgeTrainingSet(inputs=inputs, targets=targets,
                             ids=[r.id for r in records], provenance={})


class TestTrainBridge:
    def test_loss_halves_in_30_epochs(self):
        train_set = _raw_pair_set()
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=1,
                            in_size=32, out_size=32, depth=2, base_width=8)
        torch.manual_seed(2)
        model = build_backbone(spec)
        trained = train_bridge(model, train_set,
                               TrainConfig(lr=1e-3, epochs=30, batch_size=8, seed=2))
        log = trained.training_log
        assert log[-1]["train_loss"] <= 0.5 * log[0]["train_loss"]
        assert all("weighted_iou" in e and "weighted_bce" in e for e in log)

    def test_deterministic_under_fixed_seed(self):
        train_set = _raw_pair_set(n=16)
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=1,
                            in_size=32, out_size=32, depth=2, base_width=8)
        losses = []
        for _ in range(2):
            torch.manual_seed(5)  # weight init under the same seed as training
            model = build_backbone(spec)
            trained = train_bridge(model, train_set,
                                   TrainConfig(lr=1e-3, epochs=3, batch_size=8, seed=5))
            losses.append(trained.training_log[-1]["train_loss"])
        assert losses[0] == losses[1]

    def test_batch_sizes_one_and_eight(self):
        train_set = _raw_pair_set(n=9)
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=1,
                            in_size=32, out_size=32, depth=2, base_width=8)
        for batch in (1, 8):
            model = build_backbone(spec)
            train_bridge(model, train_set,
                         TrainConfig(lr=1e-3, epochs=1, batch_size=batch, seed=6))

    def test_out_of_range_targets_rejected(self):
        train_set = _raw_pair_set(n=4)
        train_set.targets[0, 0, 0, 0] = 1.5
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=1,
                            in_size=32, out_size=32, depth=2, base_width=8)
        model = build_backbone(spec)
        with pytest.raises(ShapeMismatchError, match="outside"):
            train_bridge(model, train_set, TrainConfig(epochs=1))

    def test_shape_contract_mismatch_rejected(self):
        train_set = _raw_pair_set(n=4, size=32)
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=1,
                            in_size=64, out_size=64, depth=2, base_width=8)
        model = build_backbone(spec)
        with pytest.raises(ShapeMismatchError):
            train_bridge(model, train_set, TrainConfig(epochs=1))

    def test_best_validation_checkpoint_retained(self):
        train_set = _raw_pair_set(n=16)
        val_set = _raw_pair_set(n=8, seed=12)
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=1,
                            in_size=32, out_size=32, depth=2, base_width=8)
        model = build_backbone(spec)
        trained = train_bridge(model, train_set,
                               TrainConfig(lr=1e-3, epochs=5, batch_size=8, seed=7),
                               val_set=val_set)
        assert all("val_loss" in e for e in trained.training_log)
