"""``tinytracker`` command line.

Exit codes: 0 success, 2 invalid input or arguments, 3 malformed file contents.
Results go to stdout, diagnostics to stderr. Every output file is written to a
temporary name and renamed into place, so a failed command leaves no partial file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import edgeprof, evalkit, faceprep, modelio, netgraph, ptq
from .modelio import FormatError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FORMAT = 3

IMAGE_SUFFIXES = (".pgm", ".ppm")


class UsageError(Exception):
    """Bad arguments or input documents (exit 2)."""


def _read_json(path: Path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _load_model(path) -> netgraph.Graph:
    try:
        return modelio.load_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc.strerror}") from None


def _ints(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.replace(",", " ").split()
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        vals = ()
    if len(vals) != n:
        raise UsageError(f"--{what} needs {n} integers, got {text!r}")
    return vals


def _crop_for(frame, crop_arg, frame_arg) -> faceprep.CropBox:
    _, h, w, _ = frame.shape
    fw, fh = _ints(frame_arg, 2, "frame") if frame_arg else (w, h)
    if (fw, fh) != (w, h):
        raise UsageError(f"--frame {fw},{fh} does not match the image size {w},{h}")
    if crop_arg is None:
        return faceprep.CropBox.full_frame(w, h)
    return faceprep.CropBox(*_ints(crop_arg, 4, "crop"), fw, fh)


def _summary(graph: netgraph.Graph, size: int) -> str:
    cost = edgeprof.cost_breakdown(graph, size)
    return f"{graph.mode} model: {cost.summary()}"


# commands --------------------------------------------------------------------


def cmd_build(args) -> int:
    cfg = netgraph.TinyTrackerConfig()
    if args.config:
        doc = _read_json(args.config, "config")
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        cfg = netgraph.TinyTrackerConfig.from_dict(doc)
    graph = netgraph.build_tinytracker(cfg)
    size = modelio.save_model(graph, args.out)
    print(_summary(graph, size))
    return EXIT_OK


def cmd_import(args) -> int:
    graph = _load_model(args.model)
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest {args.manifest} not found")
    graph = modelio.import_float_weights(graph, args.manifest)
    size = modelio.save_model(graph, args.out)
    print(_summary(graph, size))
    return EXIT_OK


def calibration_inputs(directory, resolution: int) -> list:
    """Preprocessed network inputs for every image in ``directory`` with a crop sidecar."""
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"calibration directory {d} not found")
    images = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise UsageError(f"calibration directory {d} holds no .pgm/.ppm images")
    out = []
    for img in images:
        side = img.with_suffix(".txt")
        if not side.is_file():
            raise UsageError(f"{img.name}: missing crop sidecar {side.name}")
        crop = faceprep.CropBox.parse(side.read_text(encoding="utf-8"))
        try:
            frame = modelio.load_image(img)
        except FormatError as exc:
            raise FormatError(f"{img}: {exc}") from None
        out.append(faceprep.preprocess(frame, crop, resolution))
    return out


def cmd_quantize(args) -> int:
    graph = _load_model(args.model)
    if graph.mode != netgraph.FLOAT:
        raise UsageError("quantize needs a float model")
    inputs = calibration_inputs(args.calib, evalkit.network_resolution(graph))
    qgraph = ptq.quantize_graph(graph, ptq.calibrate(graph, inputs))
    report = ptq.quantization_error_report(graph, qgraph, inputs)
    size = modelio.save_model(qgraph, args.out)
    print(f"calibrated on {len(inputs)} image(s)")
    print(report.summary(args.report_limit))
    print(_summary(qgraph, size))
    return EXIT_OK


def cmd_infer(args) -> int:
    graph = _load_model(args.model)
    try:
        frame = modelio.load_image(args.image)
    except OSError as exc:
        raise UsageError(f"cannot read image {args.image}: {exc.strerror}") from None
    crop = _crop_for(frame, args.crop, args.frame)
    x = faceprep.preprocess(frame, crop, evalkit.network_resolution(graph))
    gx, gy = evalkit.predict(graph, x)
    print(f"gaze_cm: {gx + 0.0:.5f} {gy + 0.0:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    graph = _load_model(args.model)
    try:
        dataset = evalkit.load_manifest(args.dataset)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {args.dataset}: {exc.strerror}") from None
    if args.model2:
        result = evalkit.compare_float_int8(graph, _load_model(args.model2), dataset)
    else:
        result = evalkit.evaluate(graph, dataset)
    print(result.summary(Path(args.model).name))
    return EXIT_OK


def cmd_profile(args) -> int:
    graph = _load_model(args.model)
    cost = edgeprof.cost_breakdown(graph, Path(args.model).stat().st_size)
    print(f"{'node':<22} {'kind':<18} {'MACs':>12} {'params':>9}")
    for n in cost.nodes:
        print(f"{n.node_id:<22} {n.kind:<18} {n.macs:>12,} {n.params:>9,}")
    print(f"total: {cost.summary()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    path = args.platforms or edgeprof.default_platforms_path()
    try:
        pf = edgeprof.load_platforms(path)
    except OSError as exc:
        raise UsageError(f"cannot read platform file {path}: {exc.strerror}") from None
    cost = None
    if args.model:
        graph = _load_model(args.model)
        cost = edgeprof.cost_breakdown(graph, Path(args.model).stat().st_size)
    if args.macs is not None:
        macs, half = args.macs, 0.0
    elif pf.reference_macs is not None:
        macs, half = pf.reference_macs, pf.reference_macs_half_unit
    elif cost is not None:
        macs, half = float(cost.total_macs), 0.0
    else:
        raise UsageError("no MAC count: pass --macs or --model, or set reference_macs in the platform file")
    text, table = edgeprof.render_report(pf.platforms, cost, macs, half)
    modelio.atomic_write_bytes(args.csv, table.encode("utf-8"))
    sys.stdout.write(text)
    print(f"csv: {args.csv}")
    return EXIT_OK


# parser ----------------------------------------------------------------------


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinytracker", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("build", help="build a zero-initialised float model")
    s.add_argument("--config", help="JSON config (TinyTrackerConfig fields; omitted fields take defaults)")
    s.add_argument("--out", required=True, help="output container")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("import", help="replace float weights from a weight manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True, help="manifest.json with raw float32 blobs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import)

    s = sub.add_parser("quantize", help="calibrate on images and write an int8 model")
    s.add_argument("--model", required=True, help="float container")
    s.add_argument("--calib", required=True, help="directory of .pgm/.ppm images with <stem>.txt crop sidecars")
    s.add_argument("--out", required=True)
    s.add_argument("--report-limit", type=int, default=None, help="layers shown in the error report")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("infer", help="predict the gaze point for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True, help=".pgm/.ppm full frame")
    s.add_argument("--crop", help="x0,y0,w,h face crop (default: whole frame)")
    s.add_argument("--frame", help="W,H of the frame (must match the image)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="mean/median gaze error over a dataset manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--model2", help="second model for a paired comparison")
    s.add_argument("--dataset", required=True, help="JSON-lines dataset manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="per-layer MAC and parameter counts")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("bench", help="hardware metrics report with consistency residuals")
    s.add_argument("--platforms", help="platform JSON (default: bundled reference measurements)")
    s.add_argument("--model", help="model whose cost is reported (and used for MACs if nothing else is)")
    s.add_argument("--macs", type=_positive_float, help="MAC count for MAC/Cycle (overrides everything)")
    s.add_argument("--csv", default="bench_report.csv", help="CSV output path")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except evalkit.SampleLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT if isinstance(exc.cause, FormatError) else EXIT_INVALID
    except (UsageError, ValueError, OSError) as exc:
        # QuantError, GraphError, CropError, ProfileError, EvalError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
