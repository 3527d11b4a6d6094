"""MAC/parameter counting, hardware efficiency metrics and platform reports.

Platform file (JSON, ``schema_version`` 1)::

    {
      "schema": "tinytracker-platforms",
      "schema_version": 1,
      "reference_macs": 11.8e6,            optional, MACs the rows were measured with
      "platforms": [
        {
          "name": "Spresense",
          "clock_hz": 156000000,            optional
          "capture_latency_ms": ...,        optional, default 0
          "inference_latency_ms": 386.60,   required
          "retrieval_latency_ms": ...,      optional, default 0
          "avg_power_mw": ...,              optional
          "energy_inference_mj": 31.97,     optional
          "energy_total_mj": 234.1,         optional
          "reported": {                     optional, published cells used for cross-checks
            "total_latency_ms": 522.5,
            "mac_per_cycle": 0.20,
            "power_efficiency_uw_per_mhz": 530.13
          }
        }
      ]
    }

Numbers are read as decimals so the printed precision of each value is kept:
a value printed as ``0.20`` is taken to mean anything in [0.195, 0.205).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping, Optional, Sequence

from .netgraph import WEIGHTED_KINDS, Graph

PLATFORM_SCHEMA = "tinytracker-platforms"
FLAG_THRESHOLD = 0.05


class ProfileError(ValueError):
    pass


# cost counting ---------------------------------------------------------------


@dataclass(frozen=True)
class NodeCost:
    node_id: str
    kind: str
    macs: int
    params: int


@dataclass(frozen=True)
class CostBreakdown:
    nodes: tuple[NodeCost, ...]
    model_bytes: Optional[int] = None

    @property
    def total_macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    def summary(self) -> str:
        line = f"params {self.total_params:,}  MACs {self.total_macs:,}"
        if self.model_bytes is not None:
            line += f"  size {self.model_bytes / 1e6:.3f} MB"
        return line


def _node_cost(graph: Graph, node) -> NodeCost:
    if node.kind not in WEIGHTED_KINDS:
        return NodeCost(node.id, node.kind, 0, 0)
    _, wname, bname = node.inputs
    w = graph.constants[wname].shape
    params = math.prod(w) + math.prod(graph.constants[bname].shape)
    out = graph.shapes[node.output]
    if node.kind == "fully_connected":
        macs = w[0] * w[1]
    elif node.kind == "depthwise_conv2d":
        _, h, wd, c = out
        macs = h * wd * c * w[1] * w[2]
    else:
        # OHWI weights already hold C_in / groups on the last axis
        _, h, wd, _ = out
        macs = h * wd * w[0] * w[1] * w[2] * w[3]
    return NodeCost(node.id, node.kind, macs, params)


def cost_breakdown(graph: Graph, model_bytes: Optional[int] = None) -> CostBreakdown:
    """Per-node MACs and parameters (weights plus biases; activation tables excluded)."""
    if not isinstance(graph, Graph):
        raise ProfileError("cost counting needs a Graph with inferred shapes")
    return CostBreakdown(tuple(_node_cost(graph, n) for n in graph.nodes), model_bytes)


def count_macs(graph: Graph) -> CostBreakdown:
    return cost_breakdown(graph)


def count_params(graph: Graph) -> CostBreakdown:
    return cost_breakdown(graph)


# metric formulas (SI units in, stated units out) -----------------------------


def _positive(**kw) -> None:
    for k, v in kw.items():
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ProfileError(f"{k} must be a positive finite number, got {v!r}")


def mac_per_cycle(macs: float, latency_s: float, clock_hz: float) -> float:
    _positive(macs=macs, latency_s=latency_s, clock_hz=clock_hz)
    return macs / (latency_s * clock_hz)


def energy_per_inference(avg_power_w: float, latency_s: float) -> float:
    """Joules."""
    _positive(avg_power_w=avg_power_w, latency_s=latency_s)
    return avg_power_w * latency_s


def power_efficiency(avg_power_w: float, clock_hz: float) -> float:
    """Average power in µW per MHz of clock."""
    _positive(avg_power_w=avg_power_w, clock_hz=clock_hz)
    return (avg_power_w * 1e6) / (clock_hz / 1e6)


# platform specs --------------------------------------------------------------

_INPUT_FIELDS = (
    "clock_hz",
    "capture_latency_ms",
    "inference_latency_ms",
    "retrieval_latency_ms",
    "avg_power_mw",
    "energy_inference_mj",
    "energy_total_mj",
)
REPORTED_FIELDS = ("total_latency_ms", "mac_per_cycle", "power_efficiency_uw_per_mhz")


@dataclass(frozen=True)
class PlatformSpec:
    """One hardware platform; absent optional values are None.

    ``precision`` maps a field name (or ``reported.<name>``) to half a unit in
    its last printed digit, in the field's own unit.
    """

    name: str
    inference_latency_ms: float
    clock_hz: Optional[float] = None
    capture_latency_ms: Optional[float] = None
    retrieval_latency_ms: Optional[float] = None
    avg_power_mw: Optional[float] = None
    energy_inference_mj: Optional[float] = None
    energy_total_mj: Optional[float] = None
    reported: Mapping[str, float] = field(default_factory=dict)
    precision: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ProfileError("platform needs a name")
        for f in _INPUT_FIELDS:
            v = getattr(self, f)
            if v is not None:
                _positive(**{f"{self.name}.{f}": v})
        for k, v in self.reported.items():
            if k not in REPORTED_FIELDS:
                raise ProfileError(f"{self.name}: unknown reported value {k!r}")
            _positive(**{f"{self.name}.reported.{k}": v})
        if self.avg_power_mw is None and self.energy_inference_mj is None:
            raise ProfileError(f"{self.name}: needs avg_power_mw or energy_inference_mj")

    @property
    def avg_power_w(self) -> float:
        """Given directly, or implied by inference energy over inference latency."""
        if self.avg_power_mw is not None:
            return self.avg_power_mw / 1e3
        return self.energy_inference_mj / self.inference_latency_ms

    def half_unit(self, key: str) -> float:
        return self.precision.get(key, 0.0)

    def rel_precision(self, key: str, value: float) -> float:
        return self.half_unit(key) / abs(value)


def _half_unit(d) -> float:
    if isinstance(d, Decimal):
        return float(Decimal(5).scaleb(d.as_tuple().exponent - 1))
    return 0.0


def _number(d, where: str) -> float:
    if isinstance(d, bool) or not isinstance(d, (Decimal, int, float)):
        raise ProfileError(f"{where} must be a number, got {d!r}")
    return float(d)


def platform_from_dict(rec: Mapping) -> PlatformSpec:
    if not isinstance(rec, Mapping):
        raise ProfileError("platform record must be an object")
    unknown = set(rec) - set(_INPUT_FIELDS) - {"name", "reported"}
    if unknown:
        raise ProfileError(f"platform {rec.get('name')!r}: unknown fields {sorted(unknown)}")
    name = rec.get("name")
    if "inference_latency_ms" not in rec:
        raise ProfileError(f"platform {name!r}: inference_latency_ms is required")
    kw, prec = {}, {}
    for f in _INPUT_FIELDS:
        if f in rec and rec[f] is not None:
            kw[f] = _number(rec[f], f"{name}.{f}")
            prec[f] = _half_unit(rec[f])
    reported = {}
    rep = rec.get("reported", {})
    if not isinstance(rep, Mapping):
        raise ProfileError(f"platform {name!r}: 'reported' must be an object")
    for k, v in rep.items():
        reported[k] = _number(v, f"{name}.reported.{k}")
        prec[f"reported.{k}"] = _half_unit(v)
    return PlatformSpec(name=name, reported=reported, precision=prec, **kw)


@dataclass(frozen=True)
class PlatformFile:
    platforms: tuple[PlatformSpec, ...]
    reference_macs: Optional[float] = None
    reference_macs_half_unit: float = 0.0


def parse_platforms(text: str) -> PlatformFile:
    try:
        doc = json.loads(text, parse_float=Decimal, parse_int=Decimal)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"platform file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema") != PLATFORM_SCHEMA:
        raise ProfileError(f"not a {PLATFORM_SCHEMA} document")
    if doc.get("schema_version") != 1:
        raise ProfileError(f"unsupported platform schema version {doc.get('schema_version')!r}")
    recs = doc.get("platforms")
    if not isinstance(recs, list) or not recs:
        raise ProfileError("platform file needs a non-empty 'platforms' list")
    macs = doc.get("reference_macs")
    ref = None
    if macs is not None:
        ref = _number(macs, "reference_macs")
        _positive(reference_macs=ref)
    specs = tuple(platform_from_dict(r) for r in recs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ProfileError("platform names must be unique")
    return PlatformFile(specs, ref, _half_unit(macs))


def load_platforms(path) -> PlatformFile:
    with open(path, encoding="utf-8") as f:
        return parse_platforms(f.read())


def default_platforms_path():
    from importlib.resources import files

    return files("tinytracker") / "data" / "edge_platforms.json"


# derived metrics -------------------------------------------------------------


def total_latency(spec: PlatformSpec) -> float:
    """Capture + inference + retrieval in ms.

    A row without a capture latency but with a published end-to-end latency
    echoes that published value.
    """
    if spec.capture_latency_ms is None and "total_latency_ms" in spec.reported:
        return spec.reported["total_latency_ms"]
    parts = [spec.capture_latency_ms or 0.0, spec.inference_latency_ms, spec.retrieval_latency_ms or 0.0]
    return math.fsum(parts)


def total_energy(spec: PlatformSpec) -> float:
    """End-to-end energy in mJ: given directly, else average power over the total latency."""
    if spec.energy_total_mj is not None:
        return spec.energy_total_mj
    if spec.avg_power_mw is not None:
        return spec.avg_power_mw * total_latency(spec) / 1e3
    raise ProfileError(f"{spec.name}: total energy needs energy_total_mj or avg_power_mw")


def inference_energy(spec: PlatformSpec) -> float:
    if spec.energy_inference_mj is not None:
        return spec.energy_inference_mj
    return energy_per_inference(spec.avg_power_w, spec.inference_latency_ms / 1e3) * 1e3


def _has_total_latency(spec: PlatformSpec) -> bool:
    return spec.capture_latency_ms is not None or "total_latency_ms" in spec.reported


@dataclass(frozen=True)
class Residual:
    """Derived vs published value.

    ``relative`` is the raw |derived - reference| / |reference|; ``allowance``
    is the relative spread explained by the printed precision of every value
    involved; ``excess`` is what remains beyond it, and is what gets flagged.
    """

    platform: str
    quantity: str
    derived: float
    reference: float
    relative: float
    allowance: float
    note: str = ""

    @property
    def excess(self) -> float:
        return max(0.0, self.relative - self.allowance)

    @property
    def flagged(self) -> bool:
        return self.excess > FLAG_THRESHOLD


def _residual(spec, quantity, derived, reference, allowance, note="") -> Residual:
    rel = abs(derived - reference) / abs(reference)
    return Residual(spec.name, quantity, derived, reference, rel, allowance, note)


def consistency_check(spec: PlatformSpec, macs: float, macs_half_unit: float = 0.0) -> list[Residual]:
    """Every cross-check the row's redundant values allow; empty when none apply."""
    out: list[Residual] = []
    rep = spec.reported
    lat_s = spec.inference_latency_ms / 1e3
    p = spec.rel_precision
    rel_lat = p("inference_latency_ms", spec.inference_latency_ms)
    rel_macs = macs_half_unit / macs
    if spec.avg_power_mw is not None:
        rel_power = p("avg_power_mw", spec.avg_power_mw)
    else:
        rel_power = p("energy_inference_mj", spec.energy_inference_mj) + rel_lat
    rel_clock = p("clock_hz", spec.clock_hz) if spec.clock_hz else 0.0

    if spec.clock_hz is not None:
        if "mac_per_cycle" in rep:
            ref = rep["mac_per_cycle"]
            d = mac_per_cycle(macs, lat_s, spec.clock_hz)
            allow = rel_macs + rel_lat + rel_clock + p("reported.mac_per_cycle", ref)
            out.append(_residual(spec, "mac_per_cycle", d, ref, allow))
        if "power_efficiency_uw_per_mhz" in rep:
            ref = rep["power_efficiency_uw_per_mhz"]
            d = power_efficiency(spec.avg_power_w, spec.clock_hz)
            allow = rel_power + rel_clock + p("reported.power_efficiency_uw_per_mhz", ref)
            out.append(_residual(spec, "power_efficiency_uw_per_mhz", d, ref, allow))
    elif "mac_per_cycle" in rep and "power_efficiency_uw_per_mhz" in rep:
        mpc, eff = rep["mac_per_cycle"], rep["power_efficiency_uw_per_mhz"]
        clock_mpc = macs / (mpc * lat_s)
        clock_p = spec.avg_power_w * 1e6 / eff * 1e6
        rel_mpc = p("reported.mac_per_cycle", mpc)
        rel_eff = p("reported.power_efficiency_uw_per_mhz", eff)
        out.append(
            _residual(
                spec, "clock_hz", clock_p, clock_mpc, rel_power + rel_eff + rel_macs + rel_mpc + rel_lat,
                note=f"clock from P {clock_p / 1e6:.1f} MHz vs from MAC/Cycle {clock_mpc / 1e6:.1f} MHz",
            )
        )
        d = power_efficiency(spec.avg_power_w, clock_mpc)
        out.append(
            _residual(
                spec, "power_efficiency_uw_per_mhz", d, eff, rel_power + rel_macs + rel_mpc + rel_lat + rel_eff,
                note="at the clock implied by MAC/Cycle",
            )
        )
    if spec.capture_latency_ms is not None and "total_latency_ms" in rep:
        ref = rep["total_latency_ms"]
        d = total_latency(spec)
        parts = ("capture_latency_ms", "inference_latency_ms", "retrieval_latency_ms")
        spread = sum(spec.half_unit(f) for f in parts) + spec.half_unit("reported.total_latency_ms")
        out.append(_residual(spec, "total_latency_ms", d, ref, spread / ref))
    if spec.energy_inference_mj is not None and spec.avg_power_mw is not None:
        d = energy_per_inference(spec.avg_power_mw / 1e3, lat_s) * 1e3
        ref = spec.energy_inference_mj
        allow = p("avg_power_mw", spec.avg_power_mw) + rel_lat + p("energy_inference_mj", ref)
        out.append(_residual(spec, "energy_inference_mj", d, ref, allow))
    return out


# reports ---------------------------------------------------------------------

# (key, section, label, unit, decimals)
ROWS = (
    ("total_energy_mj", "end_to_end", "E [mJ]", "mJ", 1),
    ("total_latency_ms", "end_to_end", "Latency [ms]", "ms", 1),
    ("mac_per_cycle", "inference", "MAC/Cycle", "MAC/cycle", 2),
    ("inference_latency_ms", "inference", "Latency [ms]", "ms", 2),
    ("power_efficiency_uw_per_mhz", "inference", "P [µW/MHz]", "uW/MHz", 2),
    ("energy_per_inference_mj", "inference", "E [mJ]", "mJ", 2),
)
CSV_COLUMNS = ("section", "platform", "metric", "unit", "value", "source")


@dataclass(frozen=True)
class PlatformMetrics:
    """Metric values (None when underivable) and where each came from.

    Sources: ``computed`` from inputs and MACs, ``input`` echoed from the row,
    ``reported`` transcribed because no clock is available to compute it.
    """

    name: str
    values: Mapping[str, Optional[float]]
    sources: Mapping[str, str]


@dataclass(frozen=True)
class MetricsReport:
    platforms: tuple[PlatformMetrics, ...]
    residuals: tuple[Residual, ...]
    macs: float
    cost: Optional[CostBreakdown] = None

    @property
    def flagged(self) -> list[Residual]:
        return [r for r in self.residuals if r.flagged]


def platform_metrics(spec: PlatformSpec, macs: float) -> PlatformMetrics:
    vals: dict[str, Optional[float]] = {}
    src: dict[str, str] = {}

    def put(key, value, source):
        vals[key], src[key] = value, source

    if _has_total_latency(spec):
        echoed = spec.capture_latency_ms is None
        put("total_latency_ms", total_latency(spec), "input" if echoed else "computed")
    else:
        put("total_latency_ms", None, "absent")
    if spec.energy_total_mj is not None:
        put("total_energy_mj", spec.energy_total_mj, "input")
    elif spec.avg_power_mw is not None and _has_total_latency(spec):
        put("total_energy_mj", total_energy(spec), "computed")
    else:
        put("total_energy_mj", None, "absent")
    put("inference_latency_ms", spec.inference_latency_ms, "input")
    lat_s = spec.inference_latency_ms / 1e3
    for key, fn in (
        ("mac_per_cycle", lambda: mac_per_cycle(macs, lat_s, spec.clock_hz)),
        ("power_efficiency_uw_per_mhz", lambda: power_efficiency(spec.avg_power_w, spec.clock_hz)),
    ):
        if spec.clock_hz is not None:
            put(key, fn(), "computed")
        elif key in spec.reported:
            put(key, spec.reported[key], "reported")
        else:
            put(key, None, "absent")
    if spec.energy_inference_mj is not None:
        put("energy_per_inference_mj", spec.energy_inference_mj, "input")
    else:
        put("energy_per_inference_mj", inference_energy(spec), "computed")
    return PlatformMetrics(spec.name, vals, src)


def build_report(
    specs: Sequence[PlatformSpec],
    macs: float,
    cost: Optional[CostBreakdown] = None,
    macs_half_unit: float = 0.0,
) -> MetricsReport:
    if not specs:
        raise ProfileError("report needs at least one platform")
    _positive(macs=macs)
    metrics = tuple(platform_metrics(s, macs) for s in specs)
    residuals = tuple(r for s in specs for r in consistency_check(s, macs, macs_half_unit))
    return MetricsReport(metrics, residuals, macs, cost)


def _cell(value: Optional[float], decimals: int, source: str) -> str:
    if value is None:
        return "-"
    return f"{value:.{decimals}f}" + ("*" if source == "reported" else "")


def format_text(report: MetricsReport) -> str:
    names = [m.name for m in report.platforms]
    width = max(12, *(len(n) + 2 for n in names))
    lines = [f"{'Platform':<24}" + "".join(f"{n:>{width}}" for n in names)]
    section = None
    for key, sec, label, _unit, dec in ROWS:
        if sec != section:
            section = sec
            lines.append("End-to-End Evaluation" if sec == "end_to_end" else "Inference Evaluation")
        cells = [_cell(m.values[key], dec, m.sources[key]) for m in report.platforms]
        lines.append(f"  {label:<22}" + "".join(f"{c:>{width}}" for c in cells))
    lines.append(f"MACs used for MAC/Cycle: {report.macs:,.0f}")
    if any(s == "reported" for m in report.platforms for s in m.sources.values()):
        lines.append("* transcribed value; no clock given, so it cannot be recomputed")
    if report.cost is not None:
        lines.append(f"Model: {report.cost.summary()}")
    lines.append("")
    lines.append("Consistency residuals")
    if not report.residuals:
        lines.append("  (no redundant values to cross-check)")
    for r in report.residuals:
        flag = "FLAGGED" if r.flagged else "ok"
        lines.append(
            f"  {r.platform:<12} {r.quantity:<28} derived {r.derived:<14.6g} reference {r.reference:<14.6g}"
            f" rel {r.relative * 100:6.2f}%  allow {r.allowance * 100:5.2f}%  {flag}"
            + (f"  ({r.note})" if r.note else "")
        )
    return "\n".join(lines) + "\n"


def format_csv(report: MetricsReport) -> str:
    """Long-format CSV; values are written with full float precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for key, sec, _label, unit, _dec in ROWS:
        for m in report.platforms:
            v = m.values[key]
            w.writerow((sec, m.name, key, unit, "" if v is None else repr(v), m.sources[key]))
    for r in report.residuals:
        w.writerow(("residual", r.platform, r.quantity, "ratio", repr(r.relative), "flagged" if r.flagged else "ok"))
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        row["value"] = None if row["value"] == "" else float(row["value"])
    return rows


def render_report(
    specs: Sequence[PlatformSpec],
    cost: Optional[CostBreakdown],
    macs: Optional[float] = None,
    macs_half_unit: float = 0.0,
) -> tuple[str, str]:
    """Text table plus CSV. MACs default to the cost breakdown's total."""
    if macs is None:
        if cost is None:
            raise ProfileError("report needs a MAC count or a cost breakdown")
        macs = float(cost.total_macs)
    report = build_report(specs, macs, cost, macs_half_unit)
    return format_text(report), format_csv(report)
