import pytest
import torch
import torch.nn as nn

from treenet.autoencoders import KIND_INPUT, AutoencoderSpec, build_autoencoder
from treenet.backbones import BackboneSpec, build_backbone
from treenet.errors import GraphError
from treenet.layer_graph import (LayerGraph, count_flops, count_params,
                                 model_param_count, total_flops, trace_layer_graph)


class TestCountFlops:
    def test_single_conv_closed_form(self):
        model = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1))
        graph = trace_layer_graph(model, (3, 96, 96))
        assert count_flops(graph, batch=1) * 1e9 == pytest.approx(2 * 9 * 3 * 8 * 96 * 96)

    def test_dense_closed_form(self):
        model = nn.Sequential(nn.Linear(10, 5))
        graph = trace_layer_graph(model, (10,))
        assert count_flops(graph) * 1e9 == pytest.approx(2 * 10 * 5)

    def test_empty_graph_is_zero(self):
        assert count_flops(LayerGraph(input_shape=(3, 4, 4))) == 0.0

    def test_batch_linearity(self):
        model = build_backbone(BackboneSpec(name="unet", in_size=32, out_size=32,
                                            depth=2, base_width=8))
        assert count_flops(model.graph, 8) == pytest.approx(8 * count_flops(model.graph, 1))

    def test_composition_additivity(self):
        a = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU())
        b = nn.Sequential(nn.Conv2d(4, 2, 3, padding=1), nn.Sigmoid())
        ga = trace_layer_graph(a, (3, 16, 16))
        gb = trace_layer_graph(b, (4, 16, 16))
        composed = trace_layer_graph(nn.Sequential(a, b), (3, 16, 16))
        assert count_flops(composed) == pytest.approx(count_flops(ga) + count_flops(gb))
        assert total_flops([ga, gb]) == pytest.approx(count_flops(composed))

    def test_nonlinearity_costs_one_op_per_element(self):
        graph = trace_layer_graph(nn.Sequential(nn.ReLU()), (4, 10, 10))
        assert count_flops(graph) * 1e9 == pytest.approx(400)

    def test_spatial_quadratic_scaling(self):
        """Same-padded conv stack costs scale with input area: 4x side = 16x cost."""
        def stack():
            return nn.Sequential(
                nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(),
                nn.Conv2d(8, 8, 3, padding=1), nn.ReLU(),
            )
        small = trace_layer_graph(stack(), (3, 96, 96))
        large = trace_layer_graph(stack(), (3, 384, 384))
        ratio = count_flops(large) / count_flops(small)
        assert abs(ratio - 16.0) <= 0.02 * 16.0


class TestCountParams:
    def test_conv_closed_form(self):
        graph = trace_layer_graph(nn.Sequential(nn.Conv2d(3, 8, 3, padding=1)), (3, 16, 16))
        assert count_params(graph) == 224

    def test_dense_closed_form(self):
        graph = trace_layer_graph(nn.Sequential(nn.Linear(10, 5)), (10,))
        assert count_params(graph) == 55

    def test_parameterless_graph(self):
        model = nn.Sequential(nn.MaxPool2d(2), nn.ReLU())
        graph = trace_layer_graph(model, (3, 8, 8))
        assert count_params(graph) == 0

    def test_matches_model_for_all_shipped_architectures(self):
        models = [
            build_backbone(BackboneSpec(name="unet", in_size=32, out_size=32,
                                        depth=2, base_width=8)),
            build_backbone(BackboneSpec(name="unetpp", in_size=32, out_size=32,
                                        depth=2, base_width=8)),
            build_backbone(BackboneSpec(name="pvt_stub", out_channels=16,
                                        in_size=32, out_size=8, base_width=8)),
        ]
        for model in models:
            assert count_params(model.graph) == model_param_count(model)
        from treenet.shapes import ShapeSpec
        ae = build_autoencoder(AutoencoderSpec(
            kind=KIND_INPUT, shape=ShapeSpec(input_size=64, input_reduction=2,
                                             label_reduction=2)))
        graph = trace_layer_graph(ae, (3, 64, 64))
        assert count_params(graph) == model_param_count(ae)

    def test_shared_module_params_counted_once(self):
        class Twice(nn.Module):
            def __init__(self):
                super().__init__()
                self.conv = nn.Conv2d(4, 4, 3, padding=1)

            def forward(self, x):
                return self.conv(self.conv(x))

        model = Twice()
        graph = trace_layer_graph(model, (4, 8, 8))
        assert len(graph.nodes) == 2  # two calls traced
        assert count_params(graph) == model_param_count(model)  # params once
        single = trace_layer_graph(nn.Sequential(nn.Conv2d(4, 4, 3, padding=1)), (4, 8, 8))
        assert count_flops(graph) == pytest.approx(2 * count_flops(single))


class TestTraceValidation:
    def test_unknown_module_rejected(self):
        model = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Flatten())
        with pytest.raises(GraphError, match="Flatten"):
            trace_layer_graph(model, (3, 8, 8))

    def test_tampered_shape_detected(self):
        graph = trace_layer_graph(nn.Sequential(nn.Conv2d(3, 4, 3, padding=1)), (3, 8, 8))
        graph.nodes[0].out_shape = (4, 9, 9)
        with pytest.raises(GraphError, match="inferred"):
            graph.validate()

    def test_unknown_kind_rejected_in_flops(self):
        graph = trace_layer_graph(nn.Sequential(nn.ReLU()), (3, 8, 8))
        graph.nodes[0].kind = "mystery"
        with pytest.raises(GraphError):
            count_flops(graph)

    def test_transposed_conv_shapes(self):
        model = nn.Sequential(nn.ConvTranspose2d(4, 2, 2, stride=2))
        graph = trace_layer_graph(model, (4, 8, 8))
        assert graph.nodes[0].out_shape == (2, 16, 16)
        # input-grid accounting: 2 * k^2 * C_in * C_out * H_in * W_in
        assert count_flops(graph) * 1e9 == pytest.approx(2 * 4 * 4 * 2 * 8 * 8)

    def test_stride_two_conv_shapes(self):
        model = nn.Sequential(nn.Conv2d(3, 4, 3, stride=2, padding=1))
        graph = trace_layer_graph(model, (3, 9, 9))
        assert graph.nodes[0].out_shape == (4, 5, 5)
