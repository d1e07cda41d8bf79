"""Declarative layer graphs for analytical cost accounting.

A :class:`LayerGraph` is an ordered list of typed nodes traced from a live
model. Every arithmetic op in the traced models is expressed as a module
(including concatenation and addition, see :class:`Concat` / :class:`Add`),
so a single forward pass with shape-recording hooks captures the complete
computation. FLOP and parameter counts are then computed from the node
descriptions alone and cross-checked against the model.

Conventions: one multiply-accumulate counts as 2 FLOPs; pooling, upsampling,
nonlinearities and normalizations count 1 op per output element; additions
count 1 op per output element; concatenation moves data without arithmetic
and costs 0. Transposed convolutions are counted from the input grid (each
input position is scattered through the full kernel).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn

from .errors import GraphError

NODE_KINDS = (
    "conv2d", "transposed_conv2d", "dense", "pool", "upsample",
    "nonlinearity", "norm", "add", "concat",
)


class Concat(nn.Module):
    """Channel concatenation as a module so graph tracing can see it."""

    def forward(self, *tensors: torch.Tensor) -> torch.Tensor:
        return torch.cat(tensors, dim=1)


class Add(nn.Module):
    """Elementwise addition as a module so graph tracing can see it."""

    def forward(self, *tensors: torch.Tensor) -> torch.Tensor:
        out = tensors[0]
        for t in tensors[1:]:
            out = out + t
        return out


@dataclass
class LayerNode:
    """One traced operation with enough shape metadata to cost it."""

    kind: str
    name: str
    in_shapes: tuple[tuple[int, ...], ...]   # per input, channel-first, no batch dim
    out_shape: tuple[int, ...]
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None
    dilation: tuple[int, int] | None = None
    output_padding: tuple[int, int] | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    groups: int = 1
    bias: bool = False
    in_features: int | None = None
    out_features: int | None = None
    norm_channels: int | None = None
    affine: bool = False
    # False when this node re-invokes a module whose parameters were already
    # counted by an earlier call.
    owns_params: bool = True


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def _conv_out(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tconv_out(size: int, kernel: int, stride: int, padding: int,
               dilation: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + output_padding + 1


def _infer_out_shape(node: LayerNode) -> tuple[int, ...]:
    """Shape a node must produce given its inputs and parameters."""
    first = node.in_shapes[0]
    if node.kind == "conv2d":
        _, h, w = first
        return (
            node.out_channels,
            _conv_out(h, node.kernel[0], node.stride[0], node.padding[0], node.dilation[0]),
            _conv_out(w, node.kernel[1], node.stride[1], node.padding[1], node.dilation[1]),
        )
    if node.kind == "transposed_conv2d":
        _, h, w = first
        return (
            node.out_channels,
            _tconv_out(h, node.kernel[0], node.stride[0], node.padding[0],
                       node.dilation[0], node.output_padding[0]),
            _tconv_out(w, node.kernel[1], node.stride[1], node.padding[1],
                       node.dilation[1], node.output_padding[1]),
        )
    if node.kind == "dense":
        return first[:-1] + (node.out_features,)
    if node.kind == "pool":
        c, h, w = first
        return (
            c,
            _conv_out(h, node.kernel[0], node.stride[0], node.padding[0], 1),
            _conv_out(w, node.kernel[1], node.stride[1], node.padding[1], 1),
        )
    if node.kind == "upsample":
        return node.out_shape  # target size is the parameter itself
    if node.kind in ("nonlinearity", "norm"):
        return first
    if node.kind == "add":
        return first
    if node.kind == "concat":
        c = sum(s[0] for s in node.in_shapes)
        return (c,) + first[1:]
    raise GraphError(f"unknown node kind {node.kind!r} at {node.name}")


@dataclass
class LayerGraph:
    """Ordered traced nodes plus the input shape they were traced with."""

    input_shape: tuple[int, ...]
    nodes: list[LayerNode] = field(default_factory=list)

    def validate(self) -> "LayerGraph":
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise GraphError(f"unknown node kind {node.kind!r} at {node.name}")
            expected = _infer_out_shape(node)
            if node.kind != "upsample" and tuple(expected) != tuple(node.out_shape):
                raise GraphError(
                    f"node {node.name} ({node.kind}): declared output {node.out_shape} "
                    f"!= inferred {expected}"
                )
        return self

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.nodes[-1].out_shape if self.nodes else self.input_shape


_KIND_FOR_MODULE = {
    nn.Conv2d: "conv2d",
    nn.ConvTranspose2d: "transposed_conv2d",
    nn.Linear: "dense",
    nn.MaxPool2d: "pool",
    nn.AvgPool2d: "pool",
    nn.Upsample: "upsample",
    nn.ReLU: "nonlinearity",
    nn.LeakyReLU: "nonlinearity",
    nn.Sigmoid: "nonlinearity",
    nn.Tanh: "nonlinearity",
    nn.GELU: "nonlinearity",
    nn.BatchNorm2d: "norm",
    nn.GroupNorm: "norm",
    nn.InstanceNorm2d: "norm",
    Concat: "concat",
    Add: "add",
}


def _node_from_module(module: nn.Module, name: str, kind: str,
                      in_shapes, out_shape, owns_params: bool) -> LayerNode:
    node = LayerNode(kind=kind, name=name, in_shapes=in_shapes, out_shape=out_shape,
                     owns_params=owns_params)
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        node.kernel = _pair(module.kernel_size)
        node.stride = _pair(module.stride)
        node.padding = _pair(module.padding)
        node.dilation = _pair(module.dilation)
        node.in_channels = module.in_channels
        node.out_channels = module.out_channels
        node.groups = module.groups
        node.bias = module.bias is not None
        if isinstance(module, nn.ConvTranspose2d):
            node.output_padding = _pair(module.output_padding)
    elif isinstance(module, nn.Linear):
        node.in_features = module.in_features
        node.out_features = module.out_features
        node.bias = module.bias is not None
    elif isinstance(module, (nn.MaxPool2d, nn.AvgPool2d)):
        node.kernel = _pair(module.kernel_size)
        node.stride = _pair(module.stride if module.stride is not None else module.kernel_size)
        node.padding = _pair(module.padding)
    elif isinstance(module, (nn.BatchNorm2d, nn.GroupNorm, nn.InstanceNorm2d)):
        node.norm_channels = in_shapes[0][0]
        node.affine = bool(getattr(module, "affine", False) or
                           getattr(module, "elementwise_affine", False))
    return node


def trace_layer_graph(model: nn.Module, input_shape: Sequence[int]) -> LayerGraph:
    """Run one batch-1 forward pass and record every leaf operation.

    Modules invoked more than once yield one node per call; their parameters
    are attributed to the first call only.
    """
    input_shape = tuple(int(s) for s in input_shape)
    graph = LayerGraph(input_shape=input_shape)
    seen_modules: set[int] = set()
    handles = []

    def make_hook(name: str):
        def hook(module: nn.Module, args, output):
            kind = None
            for klass, k in _KIND_FOR_MODULE.items():
                if type(module) is klass:
                    kind = k
                    break
            if kind is None:
                raise GraphError(
                    f"cannot cost module {name} of type {type(module).__name__}; "
                    "add it to the layer-graph kind table"
                )
            in_shapes = tuple(tuple(t.shape[1:]) for t in args if isinstance(t, torch.Tensor))
            if not in_shapes or not isinstance(output, torch.Tensor):
                raise GraphError(f"module {name} has unsupported inputs/outputs for tracing")
            owns = id(module) not in seen_modules
            seen_modules.add(id(module))
            graph.nodes.append(
                _node_from_module(module, name, kind, in_shapes, tuple(output.shape[1:]), owns)
            )
        return hook

    for name, module in model.named_modules():
        if len(list(module.children())) == 0 and not isinstance(module, nn.Identity):
            handles.append(module.register_forward_hook(make_hook(name or type(module).__name__)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros((1, *input_shape)))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return graph.validate()


def count_flops(graph: LayerGraph, batch: int = 1) -> float:
    """Total forward-pass cost in GFLOPs for the given batch size."""
    if batch < 1:
        raise GraphError(f"batch must be >= 1, got {batch}")
    total = 0
    for node in graph.nodes:
        out_elems = 1
        for s in node.out_shape:
            out_elems *= s
        if node.kind == "conv2d":
            _, h_out, w_out = node.out_shape
            k = node.kernel[0] * node.kernel[1]
            total += 2 * k * (node.in_channels // node.groups) * node.out_channels * h_out * w_out
        elif node.kind == "transposed_conv2d":
            _, h_in, w_in = node.in_shapes[0]
            k = node.kernel[0] * node.kernel[1]
            total += 2 * k * node.in_channels * (node.out_channels // node.groups) * h_in * w_in
        elif node.kind == "dense":
            total += 2 * node.in_features * node.out_features
        elif node.kind in ("pool", "upsample", "nonlinearity", "norm", "add"):
            total += out_elems
        elif node.kind == "concat":
            pass  # data movement only
        else:
            raise GraphError(f"unknown node kind {node.kind!r} at {node.name}")
    return total * batch / 1e9


def count_params(graph: LayerGraph) -> int:
    """Trainable parameter count derived from node descriptions."""
    total = 0
    for node in graph.nodes:
        if not node.owns_params:
            continue
        if node.kind in ("conv2d", "transposed_conv2d"):
            k = node.kernel[0] * node.kernel[1]
            total += k * (node.in_channels // node.groups) * node.out_channels
            if node.bias:
                total += node.out_channels
        elif node.kind == "dense":
            total += node.in_features * node.out_features
            if node.bias:
                total += node.out_features
        elif node.kind == "norm" and node.affine:
            total += 2 * node.norm_channels
        elif node.kind in ("pool", "upsample", "nonlinearity", "add", "concat", "norm"):
            pass
        else:
            raise GraphError(f"unknown node kind {node.kind!r} at {node.name}")
    return total


def total_flops(graphs: Iterable[LayerGraph], batch: int = 1) -> float:
    """Sum of graph costs; composition is additive."""
    return sum(count_flops(g, batch) for g in graphs)


def model_param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
