"""End-to-end assembly of the trained components and test-split evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .autoencoders import TrainedAutoencoder
from .backbones import TrainedBridge
from .errors import DataError, ShapeMismatchError
from .metrics import accuracy, confusion, dice, iou
from .shapes import ShapeSpec


class AssembledTreeNet(nn.Module):
    """Encoder half -> bridge -> decoder half as one inference model.

    The training-only halves (input-net decoder, label-net encoder) are not
    referenced, so the assembled parameter count is exactly the sum of the
    three retained parts.
    """

    def __init__(self, encoder_half: nn.Module, bridge: nn.Module,
                 decoder_half: nn.Module, shapes: ShapeSpec, provenance: dict):
        super().__init__()
        self.encoder_half = encoder_half
        self.bridge = bridge
        self.decoder_half = decoder_half
        self.shapes = shapes
        self.provenance = provenance

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder_half(self.bridge(self.encoder_half(x)))


def assemble(enc: TrainedAutoencoder, bridge: TrainedBridge,
             dec: TrainedAutoencoder) -> AssembledTreeNet:
    """Wire the three trained parts together, checking both junctions."""
    enc_out = enc.spec.bottleneck_shape
    bridge_in = bridge.spec.input_shape
    bridge_out = bridge.spec.output_shape
    dec_in = dec.spec.bottleneck_shape
    if enc_out != bridge_in:
        raise ShapeMismatchError(
            f"junction encoder->bridge: encoder bottleneck {enc_out} != bridge input {bridge_in}"
        )
    if bridge_out != dec_in:
        raise ShapeMismatchError(
            f"junction bridge->decoder: bridge output {bridge_out} != decoder bottleneck {dec_in}"
        )
    if enc.spec.shape.input_size != dec.spec.shape.input_size:
        raise ShapeMismatchError(
            f"encoder trained at {enc.spec.shape.input_size}px but decoder at "
            f"{dec.spec.shape.input_size}px"
        )
    model = AssembledTreeNet(
        encoder_half=enc.encoder_half,
        bridge=bridge.model,
        decoder_half=dec.decoder_half,
        shapes=enc.spec.shape,
        provenance={
            "encoder_weights": enc.weights_hash,
            "bridge_weights": bridge.weights_hash,
            "decoder_weights": dec.weights_hash,
        },
    )
    # Component specs ride along so the profiler can rebuild the model in an
    # isolated measurement process.
    model.encoder_spec = enc.spec
    model.decoder_spec = dec.spec
    model.eval()
    return model


def predict(model: AssembledTreeNet, image: np.ndarray) -> np.ndarray:
    """Continuous (1, N, N) mask in [0, 1] for a (3, N, N) image or a batch.

    Inputs must already be at the model's native size; resizing belongs to
    the data pipeline, not inference.
    """
    arr = np.asarray(image, dtype=np.float32)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    n = model.shapes.input_size
    if tuple(arr.shape[1:]) != (3, n, n):
        raise ShapeMismatchError(
            f"expected input (3, {n}, {n}), got {tuple(arr.shape[1:])}; resize upstream"
        )
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(arr)).numpy()
    return out if batched else out[0]


@dataclass
class MetricsReport:
    """Per-image scores plus their means for one (model, dataset) evaluation."""

    model_name: str
    dataset_name: str
    threshold: float
    rows: list[dict] = field(default_factory=list)

    @property
    def means(self) -> dict[str, float]:
        return {
            key: float(np.mean([r[key] for r in self.rows]))
            for key in ("dice", "iou", "acc")
        }

    def summary_row(self) -> dict:
        row = {"model": self.model_name, "dataset": self.dataset_name,
               "n_images": len(self.rows), "threshold": self.threshold}
        row.update(self.means)
        return row


def evaluate(model: AssembledTreeNet, records: Sequence, threshold: float = 0.5,
             model_name: str = "treenet", dataset_name: str = "test",
             batch_size: int = 8) -> MetricsReport:
    """Score the model on every record; one row per image, means on top."""
    records = list(records)
    if not records:
        raise DataError("cannot evaluate on an empty split")
    report = MetricsReport(model_name=model_name, dataset_name=dataset_name,
                           threshold=threshold)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        preds = predict(model, np.stack([r.image for r in chunk]))
        for rec, pred in zip(chunk, preds):
            gt = (rec.mask >= 0.5).astype(np.float32)
            c = confusion(pred, gt, threshold)
            report.rows.append({
                "id": rec.id,
                "dice": dice(c),
                "iou": iou(c),
                "acc": accuracy(c),
            })
    return report
