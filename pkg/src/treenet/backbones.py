"""Segmentation backbones and the bridge that trains them on bottleneck pairs.

The bridge stage is backbone-agnostic: anything mapping the encoded-input
shape to the encoded-label shape can be plugged in. Shipped backbones are a
parametrized U-Net, a nested U-Net (dense skip pathways), and a small
convolutional stand-in that honors the pyramid-transformer bottleneck
contract (fixed 16-channel low-resolution output) without its pretrained
weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .autoencoders import TrainedAutoencoder, encode
from .errors import ShapeMismatchError, SpecError, StaleArtifactError
from .layer_graph import Concat, LayerGraph, count_params, model_param_count, trace_layer_graph
from .losses import boundary_weights, composite_loss
from .trainer import TrainConfig, batch_index_stream, training_loop, weights_hash

BACKBONE_NAMES = ("unet", "unetpp", "pvt_stub", "custom")
TARGET_RANGE_TOLERANCE = 1e-3


@dataclass
class BackboneSpec:
    """Shape contract plus architecture knobs for one backbone."""

    name: str = "unet"
    in_channels: int = 3
    out_channels: int = 3
    in_size: int = 96
    out_size: int = 96
    depth: int = 4
    base_width: int = 32
    param_target: int | None = None
    factory: Callable[["BackboneSpec"], nn.Module] | None = field(
        default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.name not in BACKBONE_NAMES:
            raise SpecError(f"unknown backbone {self.name!r}")
        if self.name == "custom" and self.factory is None:
            raise SpecError("custom backbone requires a factory")

    @property
    def downsampling_factor(self) -> int:
        """Spatial divisor the input size must satisfy."""
        if self.name in ("unet", "unetpp"):
            return 2 ** self.depth
        if self.name == "pvt_stub":
            return 4
        return 1

    @property
    def scales_output(self) -> bool:
        """Whether the output size follows the input size (vs fixed)."""
        return self.name != "pvt_stub"

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.in_size, self.in_size)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.out_size, self.out_size)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "in_size": self.in_size,
            "out_size": self.out_size,
            "depth": self.depth,
            "base_width": self.base_width,
            "param_target": self.param_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


class ConvBlock(nn.Module):
    """Two 3x3 conv + batch-norm + ReLU layers."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    """Encoder-decoder with skip connections, parametrized depth and width."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        ch = [spec.base_width * 2 ** i for i in range(spec.depth + 1)]
        self.enc_blocks = nn.ModuleList(
            [ConvBlock(spec.in_channels if i == 0 else ch[i - 1], ch[i])
             for i in range(spec.depth)]
        )
        self.pools = nn.ModuleList([nn.MaxPool2d(2) for _ in range(spec.depth)])
        self.bottleneck = ConvBlock(ch[spec.depth - 1], ch[spec.depth])
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2)
             for i in reversed(range(spec.depth))]
        )
        self.concats = nn.ModuleList([Concat() for _ in range(spec.depth)])
        self.dec_blocks = nn.ModuleList(
            [ConvBlock(2 * ch[i], ch[i]) for i in reversed(range(spec.depth))]
        )
        self.head = nn.Conv2d(ch[0], spec.out_channels, 1)
        self.out_act = nn.Sigmoid()

    def forward(self, x):
        skips = []
        for block, pool in zip(self.enc_blocks, self.pools):
            x = block(x)
            skips.append(x)
            x = pool(x)
        x = self.bottleneck(x)
        for up, cat, dec, skip in zip(self.ups, self.concats, self.dec_blocks,
                                      reversed(skips)):
            x = dec(cat(up(x), skip))
        return self.out_act(self.head(x))


class UNetPlusPlus(nn.Module):
    """Nested U-Net: every decoder node fuses all same-level predecessors."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        d = spec.depth
        ch = [spec.base_width * 2 ** i for i in range(d + 1)]
        self.pools = nn.ModuleList([nn.MaxPool2d(2) for _ in range(d)])
        self.blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        self.cats = nn.ModuleDict()
        for i in range(d + 1):
            self.blocks[f"x{i}_0"] = ConvBlock(
                spec.in_channels if i == 0 else ch[i - 1], ch[i])
        for j in range(1, d + 1):
            for i in range(d + 1 - j):
                self.ups[f"u{i}_{j}"] = nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2)
                self.cats[f"c{i}_{j}"] = Concat()
                self.blocks[f"x{i}_{j}"] = ConvBlock((j + 1) * ch[i], ch[i])
        self.head = nn.Conv2d(ch[0], spec.out_channels, 1)
        self.out_act = nn.Sigmoid()

    def forward(self, x):
        d = self.spec.depth
        grid: dict[tuple[int, int], torch.Tensor] = {}
        for i in range(d + 1):
            inp = x if i == 0 else self.pools[i - 1](grid[(i - 1, 0)])
            grid[(i, 0)] = self.blocks[f"x{i}_0"](inp)
        for j in range(1, d + 1):
            for i in range(d + 1 - j):
                up = self.ups[f"u{i}_{j}"](grid[(i + 1, j - 1)])
                prev = [grid[(i, k)] for k in range(j)]
                grid[(i, j)] = self.blocks[f"x{i}_{j}"](
                    self.cats[f"c{i}_{j}"](*prev, up))
        return self.out_act(self.head(grid[(0, d)]))


class PvtStub(nn.Module):
    """Convolutional stand-in honoring a fixed low-resolution bottleneck output."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.body = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 3, stride=2, padding=1),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.BatchNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Upsample(size=(spec.out_size, spec.out_size), mode="bilinear",
                        align_corners=False),
            nn.Conv2d(2 * w, spec.out_channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.body(x)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    """Construct a backbone, verify its shape contract, and attach its graph."""
    if spec.name in ("unet", "unetpp"):
        factor = 2 ** spec.depth
        if spec.in_size // factor < 1:
            raise SpecError(
                f"depth {spec.depth} collapses {spec.in_size}px input below 1px"
            )
        if spec.in_size % factor != 0:
            raise SpecError(
                f"{spec.name} needs input size divisible by {factor}, got {spec.in_size}"
            )
        if spec.in_size != spec.out_size:
            raise SpecError(f"{spec.name} preserves spatial size; in {spec.in_size} != out {spec.out_size}")
        model = UNet(spec) if spec.name == "unet" else UNetPlusPlus(spec)
    elif spec.name == "pvt_stub":
        if spec.in_size < 4:
            raise SpecError(f"pvt_stub input size {spec.in_size} collapses below 1px")
        model = PvtStub(spec)
    else:
        model = spec.factory(spec)
        model.spec = spec

    with torch.no_grad():
        model.eval()
        out = model(torch.zeros((1, *spec.input_shape)))
    if tuple(out.shape[1:]) != spec.output_shape:
        raise SpecError(
            f"{spec.name} produces {tuple(out.shape[1:])}, contract requires {spec.output_shape}"
        )
    graph = trace_layer_graph(model, spec.input_shape)
    if count_params(graph) != model_param_count(model):
        raise SpecError(
            f"{spec.name}: traced graph parameter count {count_params(graph)} "
            f"disagrees with model {model_param_count(model)}"
        )
    model.graph = graph
    if spec.param_target is not None:
        n = model_param_count(model)
        if abs(n - spec.param_target) > 0.2 * spec.param_target:
            raise SpecError(
                f"{spec.name} has {n} parameters, outside +/-20% of target {spec.param_target}"
            )
    return model


@dataclass
class BridgeTrainingSet:
    """Encoded (input, target) pairs with the hashes they derive from."""

    inputs: np.ndarray   # (n, C, h, w) float32
    targets: np.ndarray  # (n, C', h', w') float32
    ids: list[str]
    provenance: dict

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        np.savez(path.with_suffix(".npz"), inputs=self.inputs, targets=self.targets)
        sidecar = {
            "ids": self.ids,
            "input_shape": list(self.inputs.shape),
            "target_shape": list(self.targets.shape),
            "provenance": self.provenance,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "BridgeTrainingSet":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        arrays = np.load(path.with_suffix(".npz"))
        return cls(inputs=arrays["inputs"], targets=arrays["targets"],
                   ids=sidecar["ids"], provenance=sidecar["provenance"])


def _encode_batched(trained: TrainedAutoencoder, arrays: list[np.ndarray],
                    chunk: int = 32) -> np.ndarray:
    if not arrays:
        return np.zeros((0, *trained.spec.bottleneck_shape), dtype=np.float32)
    outs = []
    for i in range(0, len(arrays), chunk):
        outs.append(encode(trained, np.stack(arrays[i : i + chunk])))
    return np.concatenate(outs)


def materialize_bridge_set(enc: TrainedAutoencoder, dec: TrainedAutoencoder,
                           records: Sequence, cache_path: str | Path | None = None,
                           on_stale: str = "error") -> BridgeTrainingSet:
    """Encode every record's image and mask into a persistent training set.

    When a cache file exists its provenance hashes must match the current
    autoencoder weights; a mismatch raises unless `on_stale="rebuild"`.
    """
    provenance = {
        "encoder_weights": enc.weights_hash,
        "decoder_weights": dec.weights_hash,
        "input_shape": list(enc.spec.bottleneck_shape),
        "target_shape": list(dec.spec.bottleneck_shape),
    }
    ids = [r.id for r in records]
    if cache_path is not None and Path(cache_path).with_suffix(".json").exists():
        cached = BridgeTrainingSet.load(cache_path)
        if cached.provenance == provenance and cached.ids == ids:
            return cached
        if on_stale == "error":
            raise StaleArtifactError(
                "persisted bridge training set does not match current autoencoder "
                "weights; retrain or pass on_stale='rebuild'"
            )
    made = BridgeTrainingSet(
        inputs=_encode_batched(enc, [r.image for r in records]),
        targets=_encode_batched(dec, [r.mask for r in records]),
        ids=ids,
        provenance=provenance,
    )
    if cache_path is not None:
        made.save(cache_path)
    return made


@dataclass
class TrainedBridge:
    """A fitted bridge backbone plus its provenance."""

    spec: BackboneSpec
    model: nn.Module
    training_log: list[dict] = field(default_factory=list)

    @property
    def weights_hash(self) -> str:
        return weights_hash(self.model)


def _validate_targets(targets: np.ndarray) -> np.ndarray:
    if len(targets) and (targets.min() < -TARGET_RANGE_TOLERANCE
                         or targets.max() > 1.0 + TARGET_RANGE_TOLERANCE):
        raise ShapeMismatchError(
            f"bridge targets outside [0,1] beyond tolerance: range "
            f"[{targets.min():.4f}, {targets.max():.4f}]"
        )
    return np.clip(targets, 0.0, 1.0)


def train_bridge(model: nn.Module, train_set: BridgeTrainingSet, hp: TrainConfig,
                 val_set: BridgeTrainingSet | None = None,
                 batch_stream: Callable | None = None,
                 weight_kernel: int = 31,
                 weight_amplification: float = 5.0) -> TrainedBridge:
    """Fit a backbone on encoded pairs with the weighted IoU + BCE loss.

    `batch_stream(epoch, rng) -> iterable[(inputs, targets)]` overrides the
    default single-scale batching; the orchestrator uses this hook for its
    multi-scale schedule.
    """
    spec = model.spec
    x = torch.from_numpy(np.ascontiguousarray(train_set.inputs, dtype=np.float32))
    t = torch.from_numpy(_validate_targets(
        np.ascontiguousarray(train_set.targets, dtype=np.float32)))
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatchError(
            f"bridge set inputs {tuple(x.shape[1:])} != backbone input {spec.input_shape}"
        )
    if tuple(t.shape[1:]) != spec.output_shape:
        raise ShapeMismatchError(
            f"bridge set targets {tuple(t.shape[1:])} != backbone output {spec.output_shape}"
        )

    if batch_stream is None:
        def batch_stream(epoch, rng):
            for idx in batch_index_stream(len(x), hp.batch_size, rng):
                sel = torch.from_numpy(idx)
                yield x[sel], t[sel]

    def compute_loss(m, batch):
        bx, bt = batch
        pred = m(bx)
        w = boundary_weights(bt, kernel=weight_kernel, amplification=weight_amplification)
        loss = composite_loss(pred, bt, w)
        return loss.total, {"weighted_iou": float(loss.weighted_iou.detach()),
                            "weighted_bce": float(loss.weighted_bce.detach())}

    eval_loss = None
    if val_set is not None and len(val_set):
        vx = torch.from_numpy(np.ascontiguousarray(val_set.inputs, dtype=np.float32))
        vt = torch.from_numpy(_validate_targets(
            np.ascontiguousarray(val_set.targets, dtype=np.float32)))

        def eval_loss(m):
            with torch.no_grad():
                w = boundary_weights(vt, kernel=weight_kernel,
                                     amplification=weight_amplification)
                return float(composite_loss(m(vx), vt, w).total)

    log = training_loop(model, batch_stream, compute_loss, hp, eval_loss)
    return TrainedBridge(spec=spec, model=model, training_log=log)
