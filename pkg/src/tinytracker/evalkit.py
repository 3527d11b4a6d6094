"""Gaze-error evaluation in centimetres, single model or float vs int8.

Dataset manifest: one JSON object per line, blank lines and ``#`` lines skipped::

    {"image": "frames/0001.pgm", "crop": [x0, y0, w, h], "frame": [W, H], "gaze_cm": [x, y]}

Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .faceprep import CropBox, CropError, preprocess
from .modelio import FormatError, load_image
from .netgraph import Graph, execute
from .qtensor import Tensor


class EvalError(ValueError):
    pass


class SampleLoadError(EvalError):
    def __init__(self, path, cause: Exception):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


@dataclass(frozen=True)
class GazeSample:
    image: Path
    crop: CropBox
    gaze_cm: tuple[float, float]

    def __post_init__(self):
        if len(self.gaze_cm) != 2 or not all(math.isfinite(v) for v in self.gaze_cm):
            raise EvalError(f"gaze truth must be two finite numbers, got {self.gaze_cm}")


@dataclass(frozen=True)
class EvalResult:
    count: int
    mean_cm: float
    median_cm: float
    errors: tuple[float, ...]
    paired: Optional["EvalResult"] = None
    delta_cm: Optional[float] = None  # mean of per-sample (paired - this) errors

    def summary(self, label: str = "model") -> str:
        lines = [f"{label}: n={self.count} mean_cm={self.mean_cm:.5f} median_cm={self.median_cm:.5f}"]
        if self.paired is not None:
            p = self.paired
            lines.append(f"paired: n={p.count} mean_cm={p.mean_cm:.5f} median_cm={p.median_cm:.5f}")
            lines.append(f"delta_cm: {self.delta_cm:+.5f}")
        return "\n".join(lines)


def euclidean_error(pred: Sequence[float], truth: Sequence[float]) -> float:
    vals = (*pred, *truth)
    if len(pred) != 2 or len(truth) != 2 or not all(math.isfinite(v) for v in vals):
        raise EvalError(f"euclidean_error needs two finite 2-vectors, got {pred} and {truth}")
    return math.hypot(pred[0] - truth[0], pred[1] - truth[1])


def mean(values: Sequence[float]) -> float:
    if not values:
        raise EvalError("mean of an empty set")
    return math.fsum(values) / len(values)


def median(values: Sequence[float]) -> float:
    """Lower-middle element for even counts."""
    if not values:
        raise EvalError("median of an empty set")
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def summarize(errors: Sequence[float]) -> EvalResult:
    errs = tuple(float(e) for e in errors)
    return EvalResult(len(errs), mean(errs), median(errs), errs)


def _pair_list(v, n: int, what: str, line: int) -> list:
    if not isinstance(v, list) or len(v) != n:
        raise EvalError(f"line {line}: {what!r} must be a list of {n} numbers")
    return v


def parse_manifest(text: str, base: Path = Path(".")) -> list[GazeSample]:
    samples = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EvalError(f"line {lineno}: not valid JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or not isinstance(rec.get("image"), str):
            raise EvalError(f"line {lineno}: record needs a string 'image'")
        crop = _pair_list(rec.get("crop"), 4, "crop", lineno)
        frame = _pair_list(rec.get("frame"), 2, "frame", lineno)
        gaze = _pair_list(rec.get("gaze_cm"), 2, "gaze_cm", lineno)
        try:
            box = CropBox(*crop, *frame)
            if not all(isinstance(g, (int, float)) and not isinstance(g, bool) for g in gaze):
                raise EvalError("gaze_cm must hold numbers")
            samples.append(GazeSample(base / rec["image"], box, (float(gaze[0]), float(gaze[1]))))
        except (CropError, EvalError) as exc:
            raise EvalError(f"line {lineno}: {exc}") from None
    return samples


def load_manifest(path) -> list[GazeSample]:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def network_resolution(graph: Graph) -> int:
    if len(graph.inputs) != 1:
        raise EvalError("evaluation needs a single-input graph")
    shape = graph.input_shapes[graph.inputs[0]]
    if len(shape) != 4 or shape[0] != 1 or shape[1] != shape[2] or shape[3] != 3:
        raise EvalError(f"graph input {shape} is not a (1, R, R, 3) network input")
    return shape[1]


def prepare_inputs(dataset: Sequence[GazeSample], resolution: int) -> list[Tensor]:
    """Preprocess each sample once; aborts on the first unloadable image."""
    out = []
    for s in dataset:
        try:
            frame = load_image(s.image)
            out.append(preprocess(frame, s.crop, resolution))
        except (OSError, FormatError, CropError) as exc:
            raise SampleLoadError(s.image, exc) from None
    return out


def predict(graph: Graph, x: Tensor) -> tuple[float, float]:
    y = execute(graph, [x])[0]
    if y.size != 2:
        raise EvalError(f"model output has {y.size} values, expected 2")
    v = y.data.reshape(-1).astype(np.float64)
    return float(v[0]), float(v[1])


def _errors(graph: Graph, inputs: Sequence[Tensor], dataset: Sequence[GazeSample]) -> list[float]:
    return [euclidean_error(predict(graph, x), s.gaze_cm) for x, s in zip(inputs, dataset)]


def evaluate(graph: Graph, dataset: Sequence[GazeSample]) -> EvalResult:
    if not dataset:
        raise EvalError("evaluation needs at least one sample")
    inputs = prepare_inputs(dataset, network_resolution(graph))
    return summarize(_errors(graph, inputs, dataset))


def compare_float_int8(fgraph: Graph, qgraph: Graph, dataset: Sequence[GazeSample]) -> EvalResult:
    """Both models on the same preprocessed inputs; ``delta_cm`` is int8 minus float."""
    if not dataset:
        raise EvalError("evaluation needs at least one sample")
    res = network_resolution(fgraph)
    if network_resolution(qgraph) != res:
        raise EvalError("models disagree on input resolution")
    inputs = prepare_inputs(dataset, res)
    ef = _errors(fgraph, inputs, dataset)
    eq = _errors(qgraph, inputs, dataset)
    base = summarize(ef)
    delta = math.fsum(b - a for a, b in zip(ef, eq)) / len(ef)
    return EvalResult(base.count, base.mean_cm, base.median_cm, base.errors, summarize(eq), delta)
