"""Analytical FLOP/parameter accounting and runtime peak-memory measurement.

FLOPs and parameter counts come from traced layer graphs and cost nothing to
evaluate. Peak memory is measured, not modeled: the default path rebuilds
the model from its spec inside a fresh subprocess and reads the process
peak-RSS high-water mark after one forward pass, which keeps measurements
independent of allocator state in the calling process. Reported numbers are
comparable only within one methodology, which every row records.
"""

from __future__ import annotations

import copy
import json
import os
import resource
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .autoencoders import Autoencoder, AutoencoderSpec, build_autoencoder
from .backbones import BackboneSpec, build_backbone
from .layer_graph import (LayerGraph, count_flops, count_params, model_param_count,
                          total_flops, trace_layer_graph)
from .shapes import ShapeSpec

MEMORY_METHOD_SUBPROCESS = "subprocess-rss-high-water"
MEMORY_METHOD_SAMPLED = "in-process-rss-sampling"
MEMORY_WORKER_TIMEOUT_S = 600.0


@dataclass
class MemoryMeasurement:
    gigabytes: float
    methodology: str


@dataclass
class EfficiencyRow:
    """One line of the efficiency comparison table."""

    family: str
    variant: str          # "treenet" | "original"
    batch: int
    flops_g: float
    params_m: float
    peak_mem_gb: float | None = None
    memory_methodology: str | None = None

    def to_record(self) -> dict:
        return {
            "family": self.family,
            "variant": self.variant,
            "batch": self.batch,
            "flops_g": self.flops_g,
            "params_m": self.params_m,
            "peak_mem_gb": self.peak_mem_gb,
            "memory_methodology": self.memory_methodology,
        }


@dataclass
class EfficiencyTable:
    rows: list[EfficiencyRow] = field(default_factory=list)

    @property
    def ratios(self) -> dict[str, float]:
        return flop_ratios([r.to_record() for r in self.rows])

    def to_records(self) -> list[dict]:
        return [r.to_record() for r in self.rows]


def flop_ratios(rows: list[dict]) -> dict[str, float]:
    """Per-family FLOP reduction factor original/treenet at matching batch."""
    ratios: dict[str, float] = {}
    families = {r["family"] for r in rows}
    for family in sorted(families):
        fam = [r for r in rows if r["family"] == family]
        originals = {r["batch"]: r["flops_g"] for r in fam if r["variant"] == "original"}
        treenets = {r["batch"]: r["flops_g"] for r in fam if r["variant"] == "treenet"}
        common = sorted(set(originals) & set(treenets))
        if common:
            b = common[0]
            ratios[family] = originals[b] / treenets[b]
    return ratios


@dataclass
class ProfileEntry:
    """One model variant to be costed: its graphs plus a rebuild recipe."""

    family: str
    variant: str
    graphs: list[LayerGraph]
    memory_payload: dict | None = None


def treenet_component_graphs(enc_model: Autoencoder, bridge_model: nn.Module,
                             dec_model: Autoencoder) -> list[LayerGraph]:
    """Graphs of the three retained parts; their costs sum to the whole."""
    g_enc = trace_layer_graph(enc_model.encoder, enc_model.spec.input_shape)
    g_bridge = getattr(bridge_model, "graph", None) or trace_layer_graph(
        bridge_model, bridge_model.spec.input_shape)
    g_dec = trace_layer_graph(dec_model.decoder, dec_model.spec.bottleneck_shape)
    return [g_enc, g_bridge, g_dec]


def full_resolution_spec(backbone: BackboneSpec, input_size: int) -> BackboneSpec:
    """The same backbone architecture run on uncompressed inputs.

    Channel configuration is kept identical so the parameter-parity identity
    is exact; only the spatial size changes.
    """
    out_size = input_size if backbone.scales_output else backbone.out_size
    return replace(backbone, in_channels=3, in_size=input_size, out_size=out_size)


def build_comparison_entries(shape: ShapeSpec, backbone: BackboneSpec,
                             enc_spec: AutoencoderSpec,
                             dec_spec: AutoencoderSpec) -> list[ProfileEntry]:
    """Original-vs-treenet profile entries for one backbone family."""
    enc_model = build_autoencoder(enc_spec)
    dec_model = build_autoencoder(dec_spec)
    bridge = build_backbone(backbone)
    original_spec = full_resolution_spec(backbone, shape.input_size)
    original = build_backbone(original_spec)
    treenet_payload = {
        "kind": "treenet",
        "encoder_spec": enc_spec.to_dict(),
        "decoder_spec": dec_spec.to_dict(),
        "backbone_spec": backbone.to_dict(),
    }
    original_payload = {"kind": "backbone", "spec": original_spec.to_dict()}
    return [
        ProfileEntry(family=backbone.name, variant="treenet",
                     graphs=treenet_component_graphs(enc_model, bridge, dec_model),
                     memory_payload=treenet_payload),
        ProfileEntry(family=backbone.name, variant="original",
                     graphs=[original.graph], memory_payload=original_payload),
    ]


def compare(entries: list[ProfileEntry], batches: tuple[int, ...] = (1, 8),
            include_memory: bool = False, backward: bool = False) -> EfficiencyTable:
    """Cost every entry at every batch size; add memory when requested."""
    table = EfficiencyTable()
    for entry in entries:
        params_m = sum(count_params(g) for g in entry.graphs) / 1e6
        for batch in batches:
            mem = None
            method = None
            if include_memory and entry.memory_payload is not None:
                measured = measure_payload_peak_memory(entry.memory_payload, batch,
                                                       backward=backward)
                if measured is not None:
                    mem = measured.gigabytes
                    method = measured.methodology
            table.rows.append(EfficiencyRow(
                family=entry.family,
                variant=entry.variant,
                batch=batch,
                flops_g=total_flops(entry.graphs, batch),
                params_m=params_m,
                peak_mem_gb=mem,
                memory_methodology=method,
            ))
    return table


def _payload_input_shape(payload: dict) -> tuple[int, ...]:
    if payload["kind"] == "backbone":
        spec = BackboneSpec.from_dict(payload["spec"])
        return spec.input_shape
    if payload["kind"] == "treenet":
        enc = AutoencoderSpec.from_dict(payload["encoder_spec"])
        return enc.input_shape
    if payload["kind"] == "autoencoder":
        return AutoencoderSpec.from_dict(payload["spec"]).input_shape
    raise ValueError(f"unknown payload kind {payload['kind']!r}")


def _build_payload_model(payload: dict) -> nn.Module:
    torch.manual_seed(0)
    if payload["kind"] == "backbone":
        return build_backbone(BackboneSpec.from_dict(payload["spec"]))
    if payload["kind"] == "autoencoder":
        return build_autoencoder(AutoencoderSpec.from_dict(payload["spec"]))
    if payload["kind"] == "treenet":
        enc = build_autoencoder(AutoencoderSpec.from_dict(payload["encoder_spec"]))
        dec = build_autoencoder(AutoencoderSpec.from_dict(payload["decoder_spec"]))
        bridge = build_backbone(BackboneSpec.from_dict(payload["backbone_spec"]))
        return nn.Sequential(enc.encoder, bridge, dec.decoder)
    raise ValueError(f"unknown payload kind {payload['kind']!r}")


def _memory_worker(payload_path: str) -> None:
    """Subprocess entry: build the payload model, run it, report peak bytes."""
    import gc

    import psutil

    # Few threads keep per-thread allocator arenas (and thus the RSS
    # high-water mark) stable across repeated measurements.
    torch.set_num_threads(2)
    payload = json.loads(Path(payload_path).read_text())
    model = _build_payload_model(payload)
    model.eval()
    gc.collect()
    rss_before = psutil.Process().memory_info().rss
    batch = payload["batch"]
    shape = _payload_input_shape(payload)
    if payload.get("backward"):
        x = torch.zeros((batch, *shape), requires_grad=True)
        model(x).sum().backward()
    else:
        with torch.no_grad():
            model(torch.zeros((batch, *shape)))
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    print(json.dumps({"rss_before": rss_before, "peak_after": int(peak)}))


def measure_payload_peak_memory(payload: dict, batch: int,
                                backward: bool = False) -> MemoryMeasurement | None:
    """Measure one pass in a fresh subprocess; None when the backend fails."""
    payload = dict(payload, batch=batch, backward=backward)
    try:
        with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as tmp:
            tmp.write(json.dumps(payload))
            tmp_path = tmp.name
        # Forcing sizable allocations through mmap makes the child's RSS
        # high-water mark track live memory, so repeats are reproducible.
        env = dict(os.environ, MALLOC_MMAP_THRESHOLD_="65536", MALLOC_ARENA_MAX="2")
        proc = subprocess.run(
            [sys.executable, "-m", "treenet.profiler", tmp_path],
            capture_output=True, text=True, timeout=MEMORY_WORKER_TIMEOUT_S, env=env,
        )
        Path(tmp_path).unlink(missing_ok=True)
        if proc.returncode != 0:
            return None
        stats = json.loads(proc.stdout.strip().splitlines()[-1])
        delta = max(stats["peak_after"] - stats["rss_before"], 0)
        return MemoryMeasurement(gigabytes=delta / 2 ** 30,
                                 methodology=MEMORY_METHOD_SUBPROCESS)
    except Exception:
        return None


def _payload_for_model(model: nn.Module) -> dict | None:
    spec = getattr(model, "spec", None)
    if isinstance(spec, BackboneSpec) and spec.name != "custom":
        return {"kind": "backbone", "spec": spec.to_dict()}
    if isinstance(spec, AutoencoderSpec):
        return {"kind": "autoencoder", "spec": spec.to_dict()}
    provenance = getattr(model, "provenance", None)
    if provenance is not None and hasattr(model, "bridge"):
        bridge_spec = getattr(model.bridge, "spec", None)
        enc_spec = getattr(model, "encoder_spec", None)
        dec_spec = getattr(model, "decoder_spec", None)
        if (isinstance(bridge_spec, BackboneSpec) and bridge_spec.name != "custom"
                and enc_spec is not None and dec_spec is not None):
            return {
                "kind": "treenet",
                "encoder_spec": enc_spec.to_dict(),
                "decoder_spec": dec_spec.to_dict(),
                "backbone_spec": bridge_spec.to_dict(),
            }
    return None


def _measure_in_process(model: nn.Module, input_shape, batch: int,
                        backward: bool) -> MemoryMeasurement | None:
    """Fallback: sample this process's RSS while the pass runs."""
    try:
        import psutil
    except ImportError:
        return None
    proc = psutil.Process()
    samples: list[int] = []
    stop = threading.Event()

    def sampler():
        while not stop.is_set():
            samples.append(proc.memory_info().rss)
            time.sleep(0.001)

    model = copy.deepcopy(model).eval()
    rss_before = proc.memory_info().rss
    thread = threading.Thread(target=sampler, daemon=True)
    thread.start()
    try:
        if backward:
            x = torch.zeros((batch, *input_shape), requires_grad=True)
            model(x).sum().backward()
        else:
            with torch.no_grad():
                model(torch.zeros((batch, *input_shape)))
    finally:
        stop.set()
        thread.join(timeout=1.0)
    if not samples:
        return None
    delta = max(max(samples) - rss_before, 0)
    return MemoryMeasurement(gigabytes=delta / 2 ** 30,
                             methodology=MEMORY_METHOD_SAMPLED)


def measure_peak_memory(model: nn.Module, input_shape=None, batch: int = 1,
                        backward: bool = False) -> MemoryMeasurement | None:
    """Peak memory of one pass through the model at the given batch size.

    Models whose spec is known are rebuilt and measured in an isolated
    subprocess; anything else falls back to in-process RSS sampling. Returns
    None (never zero) when no measurement backend is available.
    """
    payload = _payload_for_model(model)
    if payload is not None:
        measured = measure_payload_peak_memory(payload, batch, backward=backward)
        if measured is not None:
            return measured
    if input_shape is None:
        spec = getattr(model, "spec", None)
        if spec is None or not hasattr(spec, "input_shape"):
            return None
        input_shape = spec.input_shape
    return _measure_in_process(model, input_shape, batch, backward)


if __name__ == "__main__":
    _memory_worker(sys.argv[1])
