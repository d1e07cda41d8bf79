"""Shape bookkeeping for the three-component network.

A single :class:`ShapeSpec` pins down every tensor size flowing through the
assembled model: the full-resolution input, the two bottlenecks the
autoencoders produce, and the spatial reductions connecting them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import SpecError


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class ShapeSpec:
    """Tensor-size contract between the encoder, bridge and decoder.

    Attributes:
        input_size: spatial side length of the full-resolution input (square).
        input_reduction: spatial shrink factor applied by the input encoder.
        label_reduction: spatial shrink factor applied by the label decoder.
        input_bottleneck_channels: feature depth of the encoded input.
        label_bottleneck_channels: feature depth of the encoded label.
        bridge_bottleneck_channels: feature depth at the bridge's own
            innermost layer (informational, derived from the backbone).
        bridge_bottleneck_size: spatial size at the bridge's innermost layer
            (informational).
    """

    input_size: int
    input_reduction: int = 4
    label_reduction: int = 4
    input_bottleneck_channels: int = 3
    label_bottleneck_channels: int = 3
    bridge_bottleneck_channels: int | None = field(default=None, compare=False)
    bridge_bottleneck_size: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.input_size < 1:
            raise SpecError(f"input_size must be positive, got {self.input_size}")
        for label, ratio in (("input_reduction", self.input_reduction),
                             ("label_reduction", self.label_reduction)):
            if not _is_pow2(ratio) or ratio < 2:
                raise SpecError(f"{label} must be a power of two >= 2, got {ratio}")
            if self.input_size % ratio != 0:
                raise SpecError(
                    f"input_size {self.input_size} is not divisible by {label} {ratio}"
                )
        if self.input_bottleneck_channels < 1 or self.label_bottleneck_channels < 1:
            raise SpecError("bottleneck channel counts must be positive")

    @property
    def encoded_input_size(self) -> int:
        return self.input_size // self.input_reduction

    @property
    def encoded_label_size(self) -> int:
        return self.input_size // self.label_reduction

    @property
    def encoder_bottleneck_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of the encoded input feeding the bridge."""
        s = self.encoded_input_size
        return (self.input_bottleneck_channels, s, s)

    @property
    def decoder_bottleneck_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of the encoded label the bridge is trained against."""
        s = self.encoded_label_size
        return (self.label_bottleneck_channels, s, s)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.input_size, self.input_size)

    @property
    def mask_shape(self) -> tuple[int, int, int]:
        return (1, self.input_size, self.input_size)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "input_reduction": self.input_reduction,
            "label_reduction": self.label_reduction,
            "input_bottleneck_channels": self.input_bottleneck_channels,
            "label_bottleneck_channels": self.label_bottleneck_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(**d)
