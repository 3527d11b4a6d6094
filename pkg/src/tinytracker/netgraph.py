"""Network graph, shape inference, the TinyTracker builder and the executor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import nnops
from .nnops import Activation, Padding
from .qtensor import DType, QuantError, QuantParams, Tensor, dequantize, quantize

FLOAT = "float"
QUANTIZED = "quantized"

# node kind -> number of tensor inputs (quantized pointwise nodes add a LUT input)
KINDS = {
    "conv2d": 3,
    "depthwise_conv2d": 3,
    "fully_connected": 3,
    "global_avg_pool": 1,
    "hard_swish": 1,
    "hard_sigmoid": 1,
    "add": 2,
    "mul_channels": 2,
    "quantize": 1,
    "dequantize": 1,
}
WEIGHTED_KINDS = ("conv2d", "depthwise_conv2d", "fully_connected")
LUT_KINDS = ("hard_swish", "hard_sigmoid")


class GraphError(ValueError):
    """Structurally invalid graph or execution inputs."""


class ShapeError(GraphError):
    def __init__(self, node_id: str, message: str):
        super().__init__(f"node {node_id!r}: {message}")
        self.node_id = node_id


@dataclass(frozen=True, eq=False)
class OpNode:
    id: str
    kind: str
    inputs: tuple[str, ...]
    output: str
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"node {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", MappingProxyType(dict(self.attrs)))

    def signature(self) -> tuple:
        return (self.id, self.kind, self.inputs, self.output, tuple(sorted(self.attrs.items())))


def _attr_stride(node: OpNode) -> tuple[int, int]:
    s = node.attrs.get("stride", (1, 1))
    return (s, s) if isinstance(s, int) else (int(s[0]), int(s[1]))


def _attr_padding(node: OpNode) -> Padding:
    return Padding(node.attrs.get("padding", "same"))


def _attr_act(node: OpNode) -> Activation:
    return Activation(node.attrs.get("act", "none"))


# shape inference -------------------------------------------------------------


def _node_shape(node: OpNode, shapes: Mapping[str, tuple], constants: Mapping[str, Tensor]) -> tuple:
    ins = [shapes[n] for n in node.inputs]
    k = node.kind

    def need(cond, msg):
        if not cond:
            raise ShapeError(node.id, msg)

    if k in ("conv2d", "depthwise_conv2d"):
        x, w, b = ins
        need(len(x) == 4 and len(w) == 4, f"expected rank-4 input and weights, got {x} and {w}")
        sh, sw = _attr_stride(node)
        pad = _attr_padding(node)
        if k == "conv2d":
            groups = int(node.attrs.get("groups", 1))
            need(x[3] % groups == 0 and w[0] % groups == 0, f"channels {x[3]}->{w[0]} not divisible by groups {groups}")
            need(w[3] == x[3] // groups, f"weight in-channels {w[3]}, expected {x[3] // groups}")
            cout = w[0]
        else:
            need(w[0] == 1 and w[3] == x[3], f"depthwise weights {w} do not match {x[3]} channels")
            cout = w[3]
        need(b == (cout,), f"bias shape {b}, expected ({cout},)")
        if pad is Padding.VALID:
            need(x[1] >= w[1] and x[2] >= w[2], f"kernel {w[1:3]} larger than input {x[1:3]}")
        oh = nnops.conv_output_size(x[1], w[1], sh, pad)
        ow = nnops.conv_output_size(x[2], w[2], sw, pad)
        return (x[0], oh, ow, cout)
    if k == "fully_connected":
        x, w, b = ins
        feats = math.prod(x[1:])
        need(len(w) == 2 and w[1] == feats, f"weights {w} do not accept {feats} input features")
        need(b == (w[0],), f"bias shape {b}, expected ({w[0]},)")
        return (x[0], w[0])
    if k == "global_avg_pool":
        (x,) = ins[:1]
        need(len(x) == 4, f"expected rank-4 input, got {x}")
        return (x[0], 1, 1, x[3])
    if k in LUT_KINDS or k in ("quantize", "dequantize"):
        return ins[0]
    if k == "add":
        need(ins[0] == ins[1], f"operand shapes differ: {ins[0]} vs {ins[1]}")
        return ins[0]
    if k == "mul_channels":
        a, s = ins
        need(len(a) == 4 and s == (a[0], 1, 1, a[3]), f"channel scale {s} does not broadcast to {a}")
        return a
    raise ShapeError(node.id, f"no shape rule for {k}")


def infer_shapes_of(
    nodes: Sequence[OpNode], constants: Mapping[str, Tensor], input_shapes: Mapping[str, tuple]
) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {n: tuple(s) for n, s in input_shapes.items()}
    for name, t in constants.items():
        shapes[name] = t.shape
    for node in nodes:
        for name in node.inputs:
            if name not in shapes:
                raise ShapeError(node.id, f"input {name!r} is not defined before use")
        if node.output in shapes:
            raise ShapeError(node.id, f"tensor {node.output!r} is produced more than once")
        expected = KINDS[node.kind] + (1 if node.kind in LUT_KINDS and len(node.inputs) == 2 else 0)
        if len(node.inputs) != expected:
            raise ShapeError(node.id, f"{node.kind} takes {expected} inputs, got {len(node.inputs)}")
        shapes[node.output] = _node_shape(node, shapes, constants)
    return shapes


def infer_shapes(graph: "Graph") -> dict[str, tuple]:
    return infer_shapes_of(graph.nodes, graph.constants, graph.input_shapes)


# graph -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable, topologically ordered operator graph.

    ``constants`` holds weights, biases and activation tables. In quantized
    mode ``act_qparams`` carries one per-tensor QuantParams for every int8
    activation tensor.
    """

    nodes: tuple[OpNode, ...]
    constants: Mapping[str, Tensor]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    input_shapes: Mapping[str, tuple]
    mode: str = FLOAT
    act_qparams: Mapping[str, QuantParams] = field(default_factory=dict)
    shapes: Mapping[str, tuple] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "constants", MappingProxyType(dict(self.constants)))
        object.__setattr__(self, "input_shapes", MappingProxyType({k: tuple(v) for k, v in self.input_shapes.items()}))
        object.__setattr__(self, "act_qparams", MappingProxyType(dict(self.act_qparams)))
        if self.mode not in (FLOAT, QUANTIZED):
            raise GraphError(f"unknown graph mode {self.mode!r}")
        if set(self.inputs) != set(self.input_shapes):
            raise GraphError("every graph input needs exactly one declared shape")
        overlap = set(self.inputs) & set(self.constants)
        if overlap:
            raise GraphError(f"tensors {sorted(overlap)} are both inputs and constants")
        for node in self.nodes:
            if node.output in self.constants:
                raise GraphError(f"node {node.id!r} writes constant tensor {node.output!r}")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise GraphError("node ids must be unique")
        shapes = infer_shapes_of(self.nodes, self.constants, self.input_shapes)
        for name in self.outputs:
            if name not in shapes or name in self.constants:
                raise GraphError(f"graph output {name!r} is not an activation tensor")
        object.__setattr__(self, "shapes", MappingProxyType(shapes))
        self._check_dtypes()

    @property
    def activations(self) -> list[str]:
        """Activation tensor names in definition order (inputs first)."""
        return list(self.inputs) + [n.output for n in self.nodes]

    def node(self, node_id: str) -> OpNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer(self, tensor: str) -> Optional[OpNode]:
        for n in self.nodes:
            if n.output == tensor:
                return n
        return None

    def activation_dtype(self, name: str) -> DType:
        if self.mode == FLOAT or name in self.inputs or name in self.outputs:
            return DType.F32
        return DType.I8

    def _check_dtypes(self):
        for name, t in self.constants.items():
            if self.mode == FLOAT and t.dtype is not DType.F32:
                raise GraphError(f"float graph constant {name!r} is {t.dtype.name}")
        if self.mode == FLOAT:
            if self.act_qparams:
                raise GraphError("float graphs carry no activation quantization params")
            return
        for node in self.nodes:
            if node.kind in WEIGHTED_KINDS:
                _, w, b = node.inputs
                if self.constants[w].dtype is not DType.I8 or self.constants[b].dtype is not DType.I32:
                    raise GraphError(f"node {node.id!r}: quantized weights must be I8 with I32 bias")
            if node.kind in LUT_KINDS and len(node.inputs) != 2:
                raise GraphError(f"node {node.id!r}: quantized {node.kind} needs an activation table")
        for name in self.activations:
            if self.activation_dtype(name) is DType.I8 and name not in self.act_qparams:
                raise GraphError(f"activation {name!r} has no quantization params")
            if name in self.act_qparams and not self.act_qparams[name].is_per_tensor:
                raise GraphError(f"activation {name!r} must be quantized per-tensor")

    def with_constants(self, updates: Mapping[str, Tensor]) -> "Graph":
        for name, t in updates.items():
            if name not in self.constants:
                raise GraphError(f"unknown constant {name!r}")
            if t.shape != self.constants[name].shape:
                raise GraphError(f"constant {name!r}: shape {t.shape} != {self.constants[name].shape}")
        merged = dict(self.constants)
        merged.update(updates)
        return replace(self, constants=merged)

    def weight_names(self) -> list[str]:
        """Weight and bias tensors of conv/FC nodes, in node order."""
        names = []
        for node in self.nodes:
            if node.kind in WEIGHTED_KINDS:
                names.extend(node.inputs[1:])
        return names

    def structure(self) -> tuple:
        """Hashable summary: node signatures and tensor shapes."""
        return (
            self.mode,
            tuple(n.signature() for n in self.nodes),
            tuple(sorted(self.shapes.items())),
        )


# executor --------------------------------------------------------------------


def _run_node(node: OpNode, args: list[Tensor], out_qp: Optional[QuantParams]) -> Tensor:
    k = node.kind
    if k == "conv2d":
        return nnops.conv2d(
            *args, stride=_attr_stride(node), padding=_attr_padding(node),
            groups=int(node.attrs.get("groups", 1)), act=_attr_act(node), out_qparams=out_qp,
        )
    if k == "depthwise_conv2d":
        return nnops.depthwise_conv2d(
            *args, stride=_attr_stride(node), padding=_attr_padding(node), act=_attr_act(node), out_qparams=out_qp
        )
    if k == "fully_connected":
        return nnops.fully_connected(*args, act=_attr_act(node), out_qparams=out_qp)
    if k == "global_avg_pool":
        return nnops.global_avg_pool(args[0])
    if k == "hard_swish":
        return nnops.hard_swish(args[0], lut=args[1] if len(args) > 1 else None)
    if k == "hard_sigmoid":
        return nnops.hard_sigmoid(args[0], lut=args[1] if len(args) > 1 else None)
    if k == "add":
        return nnops.elementwise_add(*args, out_qparams=out_qp)
    if k == "mul_channels":
        return nnops.elementwise_mul_broadcast_channels(*args, out_qparams=out_qp)
    if k == "quantize":
        return quantize(args[0], out_qp)
    if k == "dequantize":
        return dequantize(args[0])
    raise GraphError(f"node {node.id!r}: cannot execute {k}")


def _check_inputs(graph: Graph, inputs: Sequence[Tensor]) -> None:
    if len(inputs) != len(graph.inputs):
        raise GraphError(f"graph takes {len(graph.inputs)} inputs, got {len(inputs)}")
    for name, t in zip(graph.inputs, inputs):
        if t.dtype is not DType.F32:
            raise GraphError(f"input {name!r} must be F32, got {t.dtype.name}")
        if t.shape != graph.input_shapes[name]:
            raise GraphError(f"input {name!r}: shape {t.shape} != declared {graph.input_shapes[name]}")


def execute_traced(graph: Graph, inputs: Sequence[Tensor]) -> dict[str, Tensor]:
    """Run the graph and return every activation tensor by name."""
    _check_inputs(graph, inputs)
    env: dict[str, Tensor] = dict(zip(graph.inputs, inputs))
    for node in graph.nodes:
        args = [env[n] if n in env else graph.constants[n] for n in node.inputs]
        out_qp = graph.act_qparams.get(node.output)
        env[node.output] = _run_node(node, args, out_qp)
    return env


def execute(graph: Graph, inputs: Sequence[Tensor]) -> list[Tensor]:
    env = execute_traced(graph, inputs)
    outs = []
    for name in graph.outputs:
        t = env[name]
        if t.dtype is DType.I8:
            t = dequantize(t)
        outs.append(t)
    return outs


# TinyTracker -----------------------------------------------------------------


def make_divisible(v: float, divisor: int = 8, min_value: int = 8) -> int:
    new_v = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass(frozen=True)
class BottleneckSpec:
    kernel: int
    expansion: int  # expanded channel count before width scaling
    out_channels: int
    se: bool
    activation: str  # "relu" | "hswish"
    stride: int


# MobileNetV3-Small bottlenecks, truncated after the ninth (stride-2, 96-channel) stage
DEFAULT_STAGES = (
    BottleneckSpec(3, 16, 16, True, "relu", 2),
    BottleneckSpec(3, 72, 24, False, "relu", 2),
    BottleneckSpec(3, 88, 24, False, "relu", 1),
    BottleneckSpec(5, 96, 40, True, "hswish", 2),
    BottleneckSpec(5, 240, 40, True, "hswish", 1),
    BottleneckSpec(5, 240, 40, True, "hswish", 1),
    BottleneckSpec(5, 120, 48, True, "hswish", 1),
    BottleneckSpec(5, 144, 48, True, "hswish", 1),
    BottleneckSpec(5, 288, 96, True, "hswish", 2),
)


@dataclass(frozen=True)
class TinyTrackerConfig:
    resolution: int = 112
    width_multiplier: float = 1.0
    stem_channels: int = 16
    stages: tuple[BottleneckSpec, ...] = DEFAULT_STAGES
    last_channels: int = 576
    head_channels: int = 160
    fc_hidden: int = 128
    output_dim: int = 2
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.output_dim != 2:
            raise GraphError("output_dim is fixed at 2 (x, y gaze point)")
        if self.input_channels != 3:
            raise GraphError("input is greyscale plus two coordinate channels (3)")
        if self.resolution < 1:
            raise GraphError("resolution must be positive")
        if not (self.width_multiplier > 0 and math.isfinite(self.width_multiplier)):
            raise GraphError("width multiplier must be positive")
        counts = [self.stem_channels, self.last_channels, self.head_channels, self.fc_hidden]
        for s in self.stages:
            counts += [s.expansion, s.out_channels]
            if s.kernel < 1 or s.stride not in (1, 2) or s.activation not in ("relu", "hswish"):
                raise GraphError(f"invalid stage {s}")
        if any(c < 1 for c in counts):
            raise GraphError("configuration produces a layer with zero channels")

    def channels(self, c: int) -> int:
        return make_divisible(c * self.width_multiplier)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TinyTrackerConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise GraphError(f"unknown config fields: {sorted(unknown)}")
        if "stages" in d:
            stages = []
            for s in d["stages"]:
                if isinstance(s, Mapping):
                    stages.append(BottleneckSpec(**s))
                else:
                    stages.append(BottleneckSpec(*s))
            d["stages"] = tuple(stages)
        try:
            return cls(**d)
        except TypeError as exc:
            raise GraphError(str(exc)) from None

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["stages"] = [vars(s).copy() for s in self.stages]
        return d


class _Builder:
    def __init__(self):
        self.nodes: list[OpNode] = []
        self.constants: dict[str, Tensor] = {}
        self.channels: dict[str, int] = {}

    def weighted(self, kind, nid, x, wshape, cout, act="none", **attrs):
        w, b = f"{nid}.weight", f"{nid}.bias"
        self.constants[w] = Tensor.zeros(wshape)
        self.constants[b] = Tensor.zeros((cout,))
        self.nodes.append(OpNode(nid, kind, (x, w, b), nid, dict(attrs, act=act)))
        self.channels[nid] = cout
        return nid

    def conv(self, nid, x, cout, k=1, stride=1, act="none"):
        cin = self.channels[x]
        return self.weighted("conv2d", nid, x, (cout, k, k, cin), cout, act, stride=[stride, stride], padding="same", groups=1)

    def depthwise(self, nid, x, k, stride, act="none"):
        c = self.channels[x]
        return self.weighted("depthwise_conv2d", nid, x, (1, k, k, c), c, act, stride=[stride, stride], padding="same")

    def fc(self, nid, x, cout, output=None, act="none"):
        cin = self.channels[x]
        self.weighted("fully_connected", nid, x, (cout, cin), cout, act)
        if output is not None:
            node = self.nodes.pop()
            self.nodes.append(OpNode(node.id, node.kind, node.inputs, output, node.attrs))
            self.channels[output] = cout
            return output
        return nid

    def unary(self, kind, nid, x):
        self.nodes.append(OpNode(nid, kind, (x,), nid))
        self.channels[nid] = self.channels[x]
        return nid

    def binary(self, kind, nid, a, b):
        self.nodes.append(OpNode(nid, kind, (a, b), nid))
        self.channels[nid] = self.channels[a]
        return nid

    def activate(self, nid, x, act):
        """Conv followed by the stage activation: ReLU is fused, hard-swish is its own node."""
        return self.unary("hard_swish", f"{nid}.hswish", x) if act == "hswish" else x


INPUT_NAME = "image"
OUTPUT_NAME = "gaze"


def build_tinytracker(config: TinyTrackerConfig = TinyTrackerConfig()) -> Graph:
    """Zero-initialised float TinyTracker graph, input ``(1, R, R, 3)``, output ``(1, 2)``."""
    b = _Builder()
    b.channels[INPUT_NAME] = config.input_channels
    x = b.conv("stem", INPUT_NAME, config.channels(config.stem_channels), k=3, stride=2)
    x = b.activate("stem", x, "hswish")
    for i, st in enumerate(config.stages):
        p = f"b{i}"
        cin = b.channels[x]
        exp = config.channels(st.expansion)
        fused = "relu" if st.activation == "relu" else "none"
        block_in = x
        if exp != cin:
            x = b.conv(f"{p}.expand", x, exp, act=fused)
            x = b.activate(f"{p}.expand", x, st.activation)
        x = b.depthwise(f"{p}.dw", x, st.kernel, st.stride, act=fused)
        x = b.activate(f"{p}.dw", x, st.activation)
        if st.se:
            sq = make_divisible(exp / 4)
            s = b.unary("global_avg_pool", f"{p}.se.pool", x)
            s = b.conv(f"{p}.se.reduce", s, sq, act="relu")
            s = b.conv(f"{p}.se.expand", s, exp)
            s = b.unary("hard_sigmoid", f"{p}.se.gate", s)
            x = b.binary("mul_channels", f"{p}.se.mul", x, s)
        x = b.conv(f"{p}.project", x, config.channels(st.out_channels))
        if st.stride == 1 and cin == b.channels[x]:
            x = b.binary("add", f"{p}.add", x, block_in)
    x = b.conv("last", x, config.channels(config.last_channels))
    x = b.activate("last", x, "hswish")
    x = b.conv("head", x, config.head_channels)
    x = b.activate("head", x, "hswish")
    x = b.unary("global_avg_pool", "pool", x)
    x = b.fc("fc1", x, config.fc_hidden)
    x = b.activate("fc1", x, "hswish")
    b.fc("fc2", x, config.output_dim, output=OUTPUT_NAME)
    r = config.resolution
    return Graph(
        nodes=b.nodes,
        constants=b.constants,
        inputs=(INPUT_NAME,),
        outputs=(OUTPUT_NAME,),
        input_shapes={INPUT_NAME: (1, r, r, config.input_channels)},
    )


def init_random_weights(graph: Graph, seed: int, gain: float = 1.0) -> Graph:
    """Fan-in scaled normal weights and small biases, deterministic in ``seed``."""
    if graph.mode != FLOAT:
        raise GraphError("random initialisation applies to float graphs")
    rng = np.random.default_rng(seed)
    updates = {}
    for node in graph.nodes:
        if node.kind not in WEIGHTED_KINDS:
            continue
        _, w, bias = node.inputs
        shape = graph.constants[w].shape
        fan_in = shape[1] * shape[2] if node.kind == "depthwise_conv2d" else math.prod(shape[1:])
        updates[w] = Tensor.f32(rng.normal(0.0, gain / math.sqrt(fan_in), shape))
        updates[bias] = Tensor.f32(rng.normal(0.0, 0.05, graph.constants[bias].shape))
    return graph.with_constants(updates)
