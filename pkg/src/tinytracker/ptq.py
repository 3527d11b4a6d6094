"""Post-training quantization: min/max calibration, graph conversion, error report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import nnops
from .netgraph import (
    FLOAT,
    LUT_KINDS,
    QUANTIZED,
    WEIGHTED_KINDS,
    Graph,
    GraphError,
    OpNode,
    _run_node,
    execute_traced,
)
from .qtensor import (
    QMAX,
    QMIN,
    DType,
    QuantParams,
    Tensor,
    compute_quant_params,
    dequantize,
    quantize_bias,
    quantize_weights,
)

# ops whose int8 output reuses the input params
_PASSTHROUGH = ("global_avg_pool",)


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationStats:
    """Running (min, max) per activation tensor."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    samples: int = 0

    def update(self, name: str, t: Tensor) -> None:
        lo, hi = float(np.min(t.data)), float(np.max(t.data))
        if name in self.ranges:
            plo, phi = self.ranges[name]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[name] = (lo, hi)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = CalibrationStats(dict(self.ranges), self.samples + other.samples)
        for name, (lo, hi) in other.ranges.items():
            if name in out.ranges:
                plo, phi = out.ranges[name]
                lo, hi = min(lo, plo), max(hi, phi)
            out.ranges[name] = (lo, hi)
        return out

    def qparams(self, name: str) -> QuantParams:
        if name not in self.ranges:
            raise CalibrationError(f"no calibration statistics for tensor {name!r}")
        return compute_quant_params(*self.ranges[name])


def calibrate(graph: Graph, samples: Iterable[Sequence[Tensor] | Tensor]) -> CalibrationStats:
    """Execute the float graph on each sample and fold per-tensor min/max.

    A sample is either a single input tensor or a sequence of graph inputs.
    """
    if graph.mode != FLOAT:
        raise CalibrationError("calibration needs a float graph")
    stats = CalibrationStats()
    for sample in samples:
        inputs = [sample] if isinstance(sample, Tensor) else list(sample)
        env = execute_traced(graph, inputs)
        for name in graph.activations:
            stats.update(name, env[name])
        stats.samples += 1
    if stats.samples == 0:
        raise CalibrationError("calibration needs at least one sample")
    return stats


def _q(name: str) -> str:
    return f"{name}:q"


def quantize_graph(graph: Graph, stats: CalibrationStats) -> Graph:
    """Int8 graph: per-channel symmetric weights, int32 biases, per-tensor activations.

    Graph inputs stay F32 and are quantized by a leading ``quantize`` node;
    each graph output is produced as int8 and converted back by a trailing
    ``dequantize`` node, so outputs are F32.
    """
    if graph.mode != FLOAT:
        raise GraphError("quantize_graph expects a float graph")
    for name in graph.activations:
        if name not in stats.ranges:
            raise CalibrationError(f"no calibration statistics for tensor {name!r}")

    act_qp: dict[str, QuantParams] = {}
    rename = {n: _q(n) for n in list(graph.inputs) + list(graph.outputs)}

    def qname(n: str) -> str:
        return rename.get(n, n)

    nodes: list[OpNode] = []
    constants: dict[str, Tensor] = {}
    for name in graph.inputs:
        act_qp[_q(name)] = stats.qparams(name)
        nodes.append(OpNode(f"{name}.quantize", "quantize", (name,), _q(name)))

    for node in graph.nodes:
        ins = [qname(n) if n not in graph.constants else n for n in node.inputs]
        out = qname(node.output)
        if node.kind in _PASSTHROUGH:
            act_qp[out] = act_qp[ins[0]]
        else:
            act_qp[out] = stats.qparams(node.output)
        if node.kind in WEIGHTED_KINDS:
            _, wname, bname = node.inputs
            axis = 3 if node.kind == "depthwise_conv2d" else 0
            wq = quantize_weights(graph.constants[wname], axis)
            constants[wname] = wq
            constants[bname] = quantize_bias(graph.constants[bname], act_qp[ins[0]].scale, wq.qparams)
        elif node.kind in LUT_KINDS:
            lut_name = f"{node.id}.lut"
            constants[lut_name] = nnops.activation_lut(node.kind, act_qp[ins[0]], act_qp[out])
            ins = ins + [lut_name]
        nodes.append(OpNode(node.id, node.kind, tuple(ins), out, node.attrs))

    for name in graph.outputs:
        nodes.append(OpNode(f"{name}.dequantize", "dequantize", (_q(name),), name))

    return Graph(
        nodes=nodes,
        constants=constants,
        inputs=graph.inputs,
        outputs=graph.outputs,
        input_shapes=graph.input_shapes,
        mode=QUANTIZED,
        act_qparams=act_qp,
    )


def quantized_name(qgraph: Graph, name: str) -> str:
    """Name of the int8 counterpart of a float-graph activation."""
    if qgraph.mode == QUANTIZED and (name in qgraph.inputs or name in qgraph.outputs):
        return _q(name)
    return name


# error report ----------------------------------------------------------------


@dataclass(frozen=True)
class LayerError:
    node_id: str
    tensor: str
    max_abs: float  # float vs dequantized int8, full-network propagation
    mean_abs: float
    sqnr_db: float
    local_max_abs: float  # this layer alone: float kernel on the int8 graph's dequantized inputs/constants
    scale: float  # output scale of the int8 tensor (0.0 for float-vs-float)
    clipped: float = 0.0  # fraction of isolated-layer outputs outside the representable int8 range

    @property
    def local_in_scales(self) -> float:
        return self.local_max_abs / self.scale if self.scale else 0.0


@dataclass
class QuantReport:
    layers: list[LayerError]

    def summary(self, limit: Optional[int] = None) -> str:
        rows = [f"{'layer':<22} {'max_abs':>10} {'mean_abs':>10} {'sqnr_db':>8} {'local/s':>8} {'clipped':>8}"]
        for e in self.layers[:limit]:
            rows.append(
                f"{e.node_id:<22} {e.max_abs:>10.5f} {e.mean_abs:>10.5f} {e.sqnr_db:>8.2f} {e.local_in_scales:>8.3f}"
                f" {e.clipped:>8.2%}"
            )
        return "\n".join(rows)


def _as_float(t: Tensor) -> np.ndarray:
    if t.dtype is DType.I8:
        t = dequantize(t)
    return t.data.astype(np.float64)


def sqnr_db(signal_energy: float, noise_energy: float) -> float:
    """Signal-to-noise ratio in dB; zero energies are floored at the smallest normal double."""
    tiny = np.finfo(np.float64).tiny
    return 10.0 * (math.log10(max(signal_energy, tiny)) - math.log10(max(noise_energy, tiny)))


def _float_constant(fgraph: Graph, qgraph: Graph, qenv, node: OpNode, name: str) -> Tensor:
    if name not in fgraph.constants:
        return Tensor.f32(_as_float(qenv[quantized_name(qgraph, name)]))
    if qgraph.mode != QUANTIZED:
        return qgraph.constants[name]
    qt = qgraph.constants[name]
    if qt.dtype is DType.I8:
        return dequantize(qt)
    # int32 bias at scale s_in * s_w[c]
    _, wname, _ = node.inputs
    s_in = qgraph.act_qparams[quantized_name(qgraph, node.inputs[0])].scale
    s_w = np.asarray(qgraph.constants[wname].qparams.scales, dtype=np.float64)
    return Tensor.f32(qt.data.astype(np.float64) * s_in * s_w)


def quantization_error_report(fgraph: Graph, qgraph: Graph, probes: Sequence[Sequence[Tensor] | Tensor]) -> QuantReport:
    """Per-layer float vs int8 activation error over probe inputs, in topological order."""
    if not probes:
        raise CalibrationError("error report needs at least one probe")
    qnodes = {n.id: n for n in qgraph.nodes}
    for node in fgraph.nodes:
        if node.id not in qnodes or qnodes[node.id].kind != node.kind:
            raise GraphError(f"graphs are not structurally parallel at node {node.id!r}")
    acc = {
        n.id: {"max": 0.0, "sum": 0.0, "count": 0, "sig": 0.0, "noise": 0.0, "local": 0.0, "clipped": 0}
        for n in fgraph.nodes
    }
    for probe in probes:
        inputs = [probe] if isinstance(probe, Tensor) else list(probe)
        fenv = execute_traced(fgraph, inputs)
        qenv = execute_traced(qgraph, inputs)
        for node in fgraph.nodes:
            ref = _as_float(fenv[node.output])
            got = _as_float(qenv[quantized_name(qgraph, node.output)])
            diff = np.abs(ref - got)
            a = acc[node.id]
            a["max"] = max(a["max"], float(diff.max()))
            a["sum"] += float(diff.sum())
            a["count"] += diff.size
            a["sig"] += float(np.sum(ref**2))
            a["noise"] += float(np.sum(diff**2))
            # isolated layer: float kernel on the int8 graph's own dequantized inputs and constants
            args = [Tensor.f32(_as_float(qenv[quantized_name(qgraph, n)])) for n in node.inputs[:1]]
            args += [_float_constant(fgraph, qgraph, qenv, node, n) for n in node.inputs[1:]]
            local_ref = _run_node(node, args, None).data.astype(np.float64)
            qp = qgraph.act_qparams.get(quantized_name(qgraph, node.output))
            if qp is not None:
                # saturation at the calibrated range is reported apart from arithmetic error
                lo, hi = qp.scale * (QMIN - qp.zero_point), qp.scale * (QMAX - qp.zero_point)
                a["clipped"] += int(np.count_nonzero((local_ref < lo) | (local_ref > hi)))
                local_ref = np.clip(local_ref, lo, hi)
            a["local"] = max(a["local"], float(np.max(np.abs(local_ref - got))))
    layers = []
    for node in fgraph.nodes:
        a = acc[node.id]
        qp = qgraph.act_qparams.get(quantized_name(qgraph, node.output))
        layers.append(
            LayerError(
                node_id=node.id,
                tensor=node.output,
                max_abs=a["max"],
                mean_abs=a["sum"] / a["count"],
                sqnr_db=sqnr_db(a["sig"], a["noise"]),
                local_max_abs=a["local"],
                scale=qp.scale if qp is not None else 0.0,
                clipped=a["clipped"] / a["count"],
            )
        )
    return QuantReport(layers)
