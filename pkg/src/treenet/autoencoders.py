"""Convolutional autoencoders that compress inputs and labels.

Two variants share one recipe: the input encoder (3-channel images) and the
label decoder (1-channel masks). Each halves the spatial size once per
stride-2 stage, widens briefly at the compressed resolution, and squeezes
into a sigmoid-bounded bottleneck so downstream consumers always see values
in [0, 1]. After training, only the encoder half of the input net and the
decoder half of the label net survive into the assembled model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeMismatchError, SpecError
from .losses import euclidean_loss
from .shapes import ShapeSpec
from .trainer import (TrainConfig, batch_index_stream, trailing_window_improved,
                      training_loop, weights_hash)

KIND_INPUT = "input_encoder"
KIND_LABEL = "label_decoder"

# Channel widths per stride-2 stage, keyed by stage count, chosen so the
# default nets land near the 50k-parameter budget.
DEFAULT_STAGE_WIDTHS = {1: (24,), 2: (8, 32), 3: (8, 16, 32), 4: (6, 12, 24, 32)}
DEFAULT_HEAD_WIDTHS = {1: 64, 2: 64, 3: 64, 4: 48}
DEFAULT_PARAMETER_BUDGET = 50_000


@dataclass
class AutoencoderSpec:
    """Architecture contract for one autoencoder."""

    kind: str
    shape: ShapeSpec
    stage_widths: tuple[int, ...] | None = None
    head_width: int | None = None
    parameter_budget: int = DEFAULT_PARAMETER_BUDGET
    enforce_budget: bool = True

    def __post_init__(self):
        if self.kind not in (KIND_INPUT, KIND_LABEL):
            raise SpecError(f"unknown autoencoder kind {self.kind!r}")
        n_stages = self.num_stages
        if self.stage_widths is None:
            if n_stages not in DEFAULT_STAGE_WIDTHS:
                raise SpecError(
                    f"no default widths for reduction {self.reduction}; pass stage_widths"
                )
            self.stage_widths = DEFAULT_STAGE_WIDTHS[n_stages]
        else:
            self.stage_widths = tuple(self.stage_widths)
        if len(self.stage_widths) != n_stages:
            raise SpecError(
                f"stage_widths has {len(self.stage_widths)} entries but reduction "
                f"{self.reduction} needs {n_stages} stride-2 stages"
            )
        if self.head_width is None:
            self.head_width = DEFAULT_HEAD_WIDTHS.get(n_stages, 64)

    @property
    def reduction(self) -> int:
        return (self.shape.input_reduction if self.kind == KIND_INPUT
                else self.shape.label_reduction)

    @property
    def num_stages(self) -> int:
        return int(round(math.log2(self.reduction)))

    @property
    def data_channels(self) -> int:
        return 3 if self.kind == KIND_INPUT else 1

    @property
    def bottleneck_channels(self) -> int:
        return (self.shape.input_bottleneck_channels if self.kind == KIND_INPUT
                else self.shape.label_bottleneck_channels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.data_channels, self.shape.input_size, self.shape.input_size)

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        s = self.shape.input_size // self.reduction
        return (self.bottleneck_channels, s, s)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "shape": self.shape.to_dict(),
            "stage_widths": list(self.stage_widths),
            "head_width": self.head_width,
            "parameter_budget": self.parameter_budget,
            "enforce_budget": self.enforce_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderSpec":
        d = dict(d)
        d["shape"] = ShapeSpec.from_dict(d["shape"])
        if d.get("stage_widths") is not None:
            d["stage_widths"] = tuple(d["stage_widths"])
        return cls(**d)


class Autoencoder(nn.Module):
    """Encoder and decoder halves split exactly at the bottleneck."""

    def __init__(self, spec: AutoencoderSpec):
        super().__init__()
        self.spec = spec
        widths = spec.stage_widths
        head = spec.head_width
        enc: list[nn.Module] = []
        prev = spec.data_channels
        for w in widths:
            enc += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = w
        enc += [nn.Conv2d(prev, head, 3, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(head, spec.bottleneck_channels, 3, padding=1), nn.Sigmoid()]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [
            nn.Conv2d(spec.bottleneck_channels, head, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(head, widths[-1], 3, padding=1), nn.ReLU(inplace=True),
        ]
        for i in range(len(widths) - 1, -1, -1):
            nxt = widths[i - 1] if i > 0 else widths[0]
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(widths[i], nxt, 3, padding=1),
                    nn.ReLU(inplace=True)]
        dec += [nn.Conv2d(widths[0], spec.data_channels, 3, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def build_autoencoder(spec: AutoencoderSpec) -> Autoencoder:
    """Construct and shape-check an autoencoder from its spec."""
    model = Autoencoder(spec)
    probe = torch.zeros((1, *spec.input_shape))
    with torch.no_grad():
        bottleneck = model.encoder(probe)
        if tuple(bottleneck.shape[1:]) != spec.bottleneck_shape:
            raise SpecError(
                f"encoder half produces {tuple(bottleneck.shape[1:])}, "
                f"expected bottleneck {spec.bottleneck_shape}"
            )
        restored = model.decoder(bottleneck)
        if tuple(restored.shape[1:]) != spec.input_shape:
            raise SpecError(
                f"decoder half produces {tuple(restored.shape[1:])}, "
                f"expected {spec.input_shape}"
            )
    n_params = sum(p.numel() for p in model.parameters())
    lo, hi = spec.parameter_budget * 0.5, spec.parameter_budget * 1.5
    if spec.enforce_budget and not (lo <= n_params <= hi):
        raise SpecError(
            f"{spec.kind} has {n_params} parameters, outside +/-50% of the "
            f"{spec.parameter_budget} budget; adjust stage_widths/head_width"
        )
    return model


@dataclass
class TrainedAutoencoder:
    """A fitted autoencoder plus its provenance."""

    spec: AutoencoderSpec
    model: Autoencoder
    training_log: list[dict] = field(default_factory=list)

    @property
    def encoder_half(self) -> nn.Module:
        return self.model.encoder

    @property
    def decoder_half(self) -> nn.Module:
        return self.model.decoder

    @property
    def weights_hash(self) -> str:
        return weights_hash(self.model)


def _stack(data, expected_shape, what: str) -> torch.Tensor:
    arrs = [np.asarray(a, dtype=np.float32) for a in data]
    for a in arrs:
        if tuple(a.shape) != tuple(expected_shape):
            raise ShapeMismatchError(
                f"{what} sample has shape {tuple(a.shape)}, expected {tuple(expected_shape)}"
            )
    return torch.from_numpy(np.stack(arrs))


def train_autoencoder(model: Autoencoder, data, hp: TrainConfig,
                      val_data=None) -> TrainedAutoencoder:
    """Fit the autoencoder to reconstruct its inputs under squared error."""
    spec = model.spec
    x = _stack(data, spec.input_shape, spec.kind)
    x_val = _stack(val_data, spec.input_shape, spec.kind) if val_data is not None else None

    def make_batches(epoch, rng):
        for idx in batch_index_stream(len(x), hp.batch_size, rng):
            yield x[torch.from_numpy(idx)]

    def compute_loss(m, batch):
        return euclidean_loss(m(batch), batch), {}

    eval_loss = None
    if x_val is not None:
        def eval_loss(m):
            with torch.no_grad():
                return float(euclidean_loss(m(x_val), x_val))

    log = training_loop(model, make_batches, compute_loss, hp, eval_loss)
    if not trailing_window_improved(log):
        import warnings
        warnings.warn(f"{spec.kind}: reconstruction loss regressed over the trailing window")
    return TrainedAutoencoder(spec=spec, model=model, training_log=log)


def _run_half(half: nn.Module, t, expected_shape, what: str) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float32)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if tuple(arr.shape[1:]) != tuple(expected_shape):
        raise ShapeMismatchError(
            f"{what} expects {tuple(expected_shape)}, got {tuple(arr.shape[1:])}"
        )
    half.eval()
    with torch.no_grad():
        out = half(torch.from_numpy(arr)).numpy()
    return out if batched else out[0]


def encode(trained: TrainedAutoencoder, t) -> np.ndarray:
    """Map an input (or batch) through the encoder half to its bottleneck."""
    return _run_half(trained.encoder_half, t, trained.spec.input_shape, "encode")


def decode_half(trained: TrainedAutoencoder, b) -> np.ndarray:
    """Map a bottleneck (or batch) through the decoder half to full size."""
    return _run_half(trained.decoder_half, b, trained.spec.bottleneck_shape, "decode_half")
