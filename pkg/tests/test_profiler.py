import pytest
import torch.nn as nn

from treenet.autoencoders import KIND_INPUT, KIND_LABEL, AutoencoderSpec
from treenet.backbones import BackboneSpec
from treenet.profiler import (MEMORY_METHOD_SAMPLED, build_comparison_entries,
                              compare, flop_ratios, full_resolution_spec,
                              measure_payload_peak_memory, measure_peak_memory)
from treenet.shapes import ShapeSpec


def published_reference_rows():
    """GFLOP figures from the published comparison, used as ratio inputs."""
    return [
        {"family": "unet", "variant": "original", "batch": 1, "flops_g": 31.73},
        {"family": "unet", "variant": "treenet", "batch": 1, "flops_g": 2.85},
        {"family": "unetpp", "variant": "original", "batch": 1, "flops_g": 78.53},
        {"family": "unetpp", "variant": "treenet", "batch": 1, "flops_g": 5.77},
        {"family": "pvt", "variant": "original", "batch": 1, "flops_g": 11.92},
        {"family": "pvt", "variant": "treenet", "batch": 1, "flops_g": 2.54},
    ]


class TestFlopRatios:
    def test_published_reference_ratios(self):
        ratios = flop_ratios(published_reference_rows())
        assert ratios["unet"] == pytest.approx(31.73 / 2.85)
        assert ratios["unet"] == pytest.approx(11.13, abs=0.01)
        assert ratios["unetpp"] == pytest.approx(13.61, abs=0.01)
        assert ratios["pvt"] == pytest.approx(4.69, abs=0.01)

    def test_family_without_both_variants_skipped(self):
        rows = [{"family": "solo", "variant": "treenet", "batch": 1, "flops_g": 1.0}]
        assert flop_ratios(rows) == {}


def _default_specs(n=384):
    shape = ShapeSpec(input_size=n, input_reduction=4, label_reduction=4)
    return (shape,
            AutoencoderSpec(kind=KIND_INPUT, shape=shape),
            AutoencoderSpec(kind=KIND_LABEL, shape=shape))


class TestCompare:
    def test_rows_and_ratio_structure(self):
        shape, enc, dec = _default_specs(n=192)
        backbone = BackboneSpec(name="unet", in_channels=3, out_channels=3,
                                in_size=48, out_size=48, depth=4, base_width=16)
        table = compare(build_comparison_entries(shape, backbone, enc, dec),
                        batches=(1, 8))
        assert len(table.rows) == 4
        by_key = {(r.variant, r.batch): r for r in table.rows}
        # FLOPs scale linearly with batch; parameters do not change.
        for variant in ("treenet", "original"):
            assert by_key[(variant, 8)].flops_g == pytest.approx(
                8 * by_key[(variant, 1)].flops_g)
            assert by_key[(variant, 8)].params_m == by_key[(variant, 1)].params_m
        assert by_key[("treenet", 1)].peak_mem_gb is None  # memory not requested
        assert "unet" in table.ratios

    def test_reduction_factor_window_for_conv_backbones(self):
        """With 4x reductions both conv families land in the published [4, 16] window."""
        shape, enc, dec = _default_specs(n=384)
        for name, depth, width in (("unet", 4, 32), ("unetpp", 4, 32)):
            backbone = BackboneSpec(name=name, in_channels=3, out_channels=3,
                                    in_size=96, out_size=96, depth=depth, base_width=width)
            table = compare(build_comparison_entries(shape, backbone, enc, dec),
                            batches=(1,))
            assert 4.0 <= table.ratios[name] <= 16.0

    def test_parameter_parity_is_exact(self):
        shape, enc, dec = _default_specs(n=192)
        backbone = BackboneSpec(name="unet", in_channels=3, out_channels=3,
                                in_size=48, out_size=48, depth=3, base_width=16)
        entries = build_comparison_entries(shape, backbone, enc, dec)
        by_variant = {e.variant: e for e in entries}
        from treenet.layer_graph import count_params
        treenet_params = sum(count_params(g) for g in by_variant["treenet"].graphs)
        original_params = sum(count_params(g) for g in by_variant["original"].graphs)
        enc_graph, _, dec_graph = by_variant["treenet"].graphs
        halves = count_params(enc_graph) + count_params(dec_graph)
        assert treenet_params - original_params == halves
        assert halves < 0.01 * original_params

    def test_full_resolution_spec_keeps_architecture(self):
        backbone = BackboneSpec(name="unet", in_channels=3, out_channels=3,
                                in_size=48, out_size=48, depth=3, base_width=16)
        full = full_resolution_spec(backbone, 192)
        assert full.in_size == full.out_size == 192
        assert (full.depth, full.base_width, full.out_channels) == (3, 16, 3)


class TestPeakMemory:
    @pytest.fixture(scope="class")
    def small_payload(self):
        spec = BackboneSpec(name="unet", in_channels=3, out_channels=3,
                            in_size=128, out_size=128, depth=3, base_width=16)
        return {"kind": "backbone", "spec": spec.to_dict()}

    def test_monotone_in_batch(self, small_payload):
        m1 = measure_payload_peak_memory(small_payload, 1)
        m8 = measure_payload_peak_memory(small_payload, 8)
        assert m1 is not None and m8 is not None
        assert m8.gigabytes >= m1.gigabytes

    def test_repeatability_within_ten_percent(self, small_payload):
        values = [measure_payload_peak_memory(small_payload, 4).gigabytes
                  for _ in range(5)]
        mean = sum(values) / len(values)
        assert all(abs(v - mean) / mean < 0.10 for v in values)

    def test_unavailable_backend_reports_none(self):
        assert measure_payload_peak_memory({"kind": "bogus"}, 1) is None

    def test_compare_marks_memory_unavailable_not_zero(self):
        shape, enc, dec = _default_specs(n=192)
        backbone = BackboneSpec(name="unet", in_channels=3, out_channels=3,
                                in_size=48, out_size=48, depth=3, base_width=16)
        entries = build_comparison_entries(shape, backbone, enc, dec)
        entries[0].memory_payload = {"kind": "bogus"}
        table = compare(entries[:1], batches=(1,), include_memory=True)
        assert table.rows[0].peak_mem_gb is None

    def test_in_process_fallback_for_unknown_models(self):
        model = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU())
        measured = measure_peak_memory(model, input_shape=(3, 64, 64), batch=2)
        assert measured is None or measured.methodology == MEMORY_METHOD_SAMPLED
        if measured is not None:
            assert measured.gigabytes >= 0.0
