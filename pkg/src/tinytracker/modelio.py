"""Model container, float-weight manifests and PGM/PPM images.

Container layout (version 1, all integers little-endian)::

    header, 48 bytes
      0  4s   magic "TTRK"
      4  u32  format version (1)
      8  u32  mode: 0 float, 1 quantized
     12  u32  tensor record count
     16  u32  node record count
     20  u32  graph input count
     24  u32  graph output count
     28  u32  reserved, 0
     32  u64  data section offset (8-aligned)
     40  u64  total file length

    metadata, from byte 48 up to the data section (zero padded)
      tensor records, node records, input names, output names

    data section: raw little-endian tensor payloads, each at an 8-aligned offset

    string       u16 byte length + UTF-8 bytes
    tensor       string name, u8 role (0 constant, 1 activation), u8 dtype
                 (0 f32, 1 i8, 2 i32), u8 rank, u8 has_qparams, u32 dims[rank],
                 [qparams], u64 data offset, u64 data length
                 (activations: offset 0, length 0)
    qparams      u8 scheme (1 per-tensor, 2 per-channel), i8 axis, u8 flags
                 (bit 0: scales f64 instead of f32; bit 1: zero points present),
                 u8 reserved, u32 count, scales[count], i8 zero_points[count]
    node         string id, string kind, u16 input count, string inputs...,
                 string output, u32 attribute length, attributes as compact
                 sorted-key JSON
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from . import nnops
from .netgraph import FLOAT, QUANTIZED, WEIGHTED_KINDS, Graph, GraphError, OpNode
from .qtensor import DType, QuantError, QuantParams, Tensor

MAGIC = b"TTRK"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIIIQQ")
ALIGN = 8

_DTYPE_CODES = {DType.F32: 0, DType.I8: 1, DType.I32: 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_MODE_CODES = {FLOAT: 0, QUANTIZED: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}

# smallest possible encodings, used to bound record counts before allocating
_MIN_TENSOR_RECORD = 2 + 4 + 16
_MIN_NODE_RECORD = 2 + 2 + 2 + 2 + 4


class FormatError(Exception):
    """Malformed file contents."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class OverlappingRegionsError(FormatError):
    pass


class UnsupportedImageError(FormatError):
    pass


class ManifestError(FormatError):
    def __init__(self, message: str, tensor: Optional[str] = None):
        super().__init__(message if tensor is None else f"{tensor}: {message}")
        self.tensor = tensor


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


# container writer ------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {s[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def _pack_qparams(qp: QuantParams, rank: int) -> bytes:
    scales = np.asarray(qp.scales, dtype=np.float64)
    as_f32 = scales.astype(np.float32)
    wide = not np.array_equal(as_f32.astype(np.float64), scales)
    flags = (1 if wide else 0) | (0 if qp.is_symmetric else 2)
    axis = 0 if qp.axis is None else qp.axis % rank
    out = struct.pack("<BbBBI", 1 if qp.axis is None else 2, axis, flags, 0, len(scales))
    out += (scales.astype("<f8") if wide else as_f32.astype("<f4")).tobytes()
    if not qp.is_symmetric:
        out += np.asarray(qp.zero_points, dtype=np.int8).tobytes()
    return out


def _canonical_attrs(attrs: Mapping[str, Any]) -> bytes:
    return json.dumps(dict(attrs), sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_model(graph: Graph) -> bytes:
    records = []  # (tensor name, role, dtype, dims, qparams, payload)
    for name, t in graph.constants.items():
        records.append((name, 0, t.dtype, t.shape, t.qparams, t.data.astype(t.dtype.numpy.newbyteorder("<")).tobytes()))
    for name in graph.activations:
        records.append((name, 1, graph.activation_dtype(name), graph.shapes[name], graph.act_qparams.get(name), b""))

    def table(offsets) -> bytes:
        out = bytearray()
        for (name, role, dtype, dims, qp, payload), off in zip(records, offsets):
            out += _pack_str(name)
            out += struct.pack("<BBBB", role, _DTYPE_CODES[dtype], len(dims), 0 if qp is None else 1)
            out += struct.pack(f"<{len(dims)}I", *dims)
            if qp is not None:
                out += _pack_qparams(qp, len(dims))
            out += struct.pack("<QQ", off, len(payload))
        for node in graph.nodes:
            out += _pack_str(node.id) + _pack_str(node.kind)
            out += struct.pack("<H", len(node.inputs))
            for n in node.inputs:
                out += _pack_str(n)
            out += _pack_str(node.output)
            attrs = _canonical_attrs(node.attrs)
            out += struct.pack("<I", len(attrs)) + attrs
        for n in graph.inputs + graph.outputs:
            out += _pack_str(n)
        return bytes(out)

    meta_len = len(table([0] * len(records)))  # offsets are fixed-width
    data_offset = _align(HEADER.size + meta_len)
    offsets, cursor = [], data_offset
    for rec in records:
        payload = rec[5]
        if payload:
            offsets.append(cursor)
            cursor = _align(cursor + len(payload))
        else:
            offsets.append(0)
    data = bytearray()
    for rec, off in zip(records, offsets):
        if rec[5]:
            data += b"\0" * (off - data_offset - len(data))
            data += rec[5]
    total = data_offset + len(data)
    header = HEADER.pack(
        MAGIC, VERSION, _MODE_CODES[graph.mode], len(records), len(graph.nodes),
        len(graph.inputs), len(graph.outputs), 0, data_offset, total,
    )
    meta = table(offsets)
    return header + meta + b"\0" * (data_offset - HEADER.size - len(meta)) + bytes(data)


def save_model(graph: Graph, path) -> int:
    blob = serialize_model(graph)
    atomic_write_bytes(path, blob)
    return len(blob)


# container reader ------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedFileError(f"metadata ends before a {n}-byte field at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size))

    def string(self) -> str:
        (n,) = self.unpack("H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 name near offset {self.pos}") from None


def _read_qparams(r: _Reader, dims: tuple) -> QuantParams:
    scheme, axis, flags, _reserved, count = r.unpack("BbBBI")
    if scheme not in (1, 2) or flags & ~3:
        raise FormatError(f"bad quantization record (scheme {scheme}, flags {flags})")
    width = 8 if flags & 1 else 4
    if count > (r.end - r.pos) // width:
        raise TruncatedFileError("quantization scales run past the metadata")
    scales = np.frombuffer(r.take(count * width), dtype="<f8" if width == 8 else "<f4").astype(np.float64)
    zps = np.frombuffer(r.take(count), dtype=np.int8) if flags & 2 else np.zeros(count, dtype=np.int8)
    try:
        if scheme == 1:
            return QuantParams(tuple(scales), tuple(int(z) for z in zps), None)
        if not 0 <= axis < len(dims):
            raise FormatError(f"quantization axis {axis} out of range for dims {dims}")
        return QuantParams(tuple(scales), tuple(int(z) for z in zps), axis)
    except QuantError as exc:
        raise FormatError(f"invalid quantization params: {exc}") from None


def deserialize_model(buf: bytes) -> Graph:
    size = len(buf)
    if size < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a TTRK model container (bad magic)")
    if size < HEADER.size:
        raise TruncatedFileError(f"file is {size} bytes, header needs {HEADER.size}")
    _, version, mode, n_tensors, n_nodes, n_in, n_out, reserved, data_offset, total = HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported (expected {VERSION})")
    if total != size:
        raise TruncatedFileError(f"header declares {total} bytes, file has {size}")
    if mode not in _CODE_MODES or reserved != 0:
        raise FormatError(f"bad header fields (mode {mode}, reserved {reserved})")
    if data_offset % ALIGN or not HEADER.size <= data_offset <= size:
        raise FormatError(f"bad data section offset {data_offset}")
    meta_len = data_offset - HEADER.size
    if n_tensors * _MIN_TENSOR_RECORD + n_nodes * _MIN_NODE_RECORD + (n_in + n_out) * 2 > meta_len:
        raise TruncatedFileError("record counts exceed the metadata section")

    r = _Reader(buf, HEADER.size, data_offset)
    constants: dict[str, Tensor] = {}
    shapes: dict[str, tuple] = {}
    act_qp: dict[str, QuantParams] = {}
    act_dtype: dict[str, DType] = {}
    regions = []
    for _ in range(n_tensors):
        name = r.string()
        role, dcode, rank, has_qp = r.unpack("BBBB")
        if role not in (0, 1) or dcode not in _CODE_DTYPES or not 1 <= rank <= 4 or has_qp not in (0, 1):
            raise FormatError(f"tensor {name!r}: bad record header")
        dims = r.unpack(f"{rank}I")
        if any(d < 1 for d in dims):
            raise FormatError(f"tensor {name!r}: zero-sized dim in {dims}")
        qp = _read_qparams(r, dims) if has_qp else None
        off, length = r.unpack("QQ")
        if name in constants or name in shapes:
            raise FormatError(f"tensor {name!r} listed twice")
        dtype = _CODE_DTYPES[dcode]
        if role == 1:
            if length or off:
                raise FormatError(f"activation {name!r} must not carry data")
            shapes[name], act_dtype[name] = tuple(dims), dtype
            if qp is not None:
                act_qp[name] = qp
            continue
        expected = math.prod(dims) * dtype.numpy.itemsize
        if length != expected:
            raise FormatError(f"tensor {name!r}: data length {length}, dims need {expected}")
        if off % ALIGN or off < data_offset or off + length > size:
            raise TruncatedFileError(f"tensor {name!r}: data region [{off}, {off + length}) outside the data section")
        regions.append((off, off + length, name))
        raw = np.frombuffer(buf, dtype=dtype.numpy.newbyteorder("<"), count=math.prod(dims), offset=off)
        try:
            constants[name] = Tensor(raw.reshape(dims).astype(dtype.numpy), dtype, qp)
        except QuantError as exc:
            raise FormatError(f"tensor {name!r}: {exc}") from None
    regions.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(regions, regions[1:]):
        if b0 < a1:
            raise OverlappingRegionsError(f"data of {an!r} and {bn!r} overlap")

    nodes = []
    for _ in range(n_nodes):
        nid, kind = r.string(), r.string()
        (n_args,) = r.unpack("H")
        ins = tuple(r.string() for _ in range(n_args))
        out = r.string()
        (alen,) = r.unpack("I")
        try:
            attrs = json.loads(r.take(alen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError(f"node {nid!r}: attributes are not valid JSON") from None
        if not isinstance(attrs, dict):
            raise FormatError(f"node {nid!r}: attributes must be an object")
        try:
            nodes.append(OpNode(nid, kind, ins, out, attrs))
        except GraphError as exc:
            raise FormatError(str(exc)) from None
    inputs = tuple(r.string() for _ in range(n_in))
    outputs = tuple(r.string() for _ in range(n_out))
    if any(buf[r.pos : data_offset]):
        raise FormatError("non-zero bytes in metadata padding")

    missing = [n for n in inputs if n not in shapes]
    if missing:
        raise FormatError(f"graph inputs {missing} have no declared shape")
    try:
        graph = Graph(
            nodes=nodes,
            constants=constants,
            inputs=inputs,
            outputs=outputs,
            input_shapes={n: shapes[n] for n in inputs},
            mode=_CODE_MODES[mode],
            act_qparams=act_qp,
        )
    except (GraphError, QuantError, ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"container does not describe a valid graph: {exc}") from None
    declared = set(graph.activations)
    if declared != set(shapes):
        raise FormatError("activation table does not match the node list")
    for name in declared:
        if graph.shapes[name] != shapes[name] or graph.activation_dtype(name) is not act_dtype[name]:
            raise FormatError(f"activation {name!r}: recorded shape/dtype disagrees with the graph")
    return graph


def load_model(path) -> Graph:
    with open(path, "rb") as f:
        return deserialize_model(f.read())


# float weight manifest -------------------------------------------------------

MANIFEST_FORMAT = "tinytracker-weights"
BN_FIELDS = ("bn_gamma", "bn_beta", "bn_mean", "bn_var")


def export_float_weights(graph: Graph, directory) -> Path:
    """Write ``manifest.json`` plus one raw little-endian float32 blob per weight tensor."""
    if graph.mode != FLOAT:
        raise ManifestError("only float graphs export float weights")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in graph.weight_names():
        t = graph.constants[name]
        rel = f"{name}.f32"
        atomic_write_bytes(directory / rel, t.data.astype("<f4").tobytes())
        entries.append({"name": name, "dims": list(t.shape), "dtype": "float32", "path": rel})
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "tensors": entries}
    path = directory / "manifest.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    return path


def _manifest_entries(doc) -> list[dict]:
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT or doc.get("version") != 1:
        raise ManifestError(f"not a {MANIFEST_FORMAT} v1 manifest")
    entries = doc.get("tensors")
    if not isinstance(entries, list):
        raise ManifestError("manifest 'tensors' must be a list")
    for e in entries:
        if not isinstance(e, dict) or not isinstance(e.get("name"), str) or not isinstance(e.get("path"), str):
            raise ManifestError("every manifest entry needs string 'name' and 'path'")
        if e.get("dtype", "float32") != "float32":
            raise ManifestError(f"element type {e.get('dtype')!r} not supported", e["name"])
        dims = e.get("dims")
        if not isinstance(dims, list) or not all(isinstance(d, int) and d >= 1 for d in dims):
            raise ManifestError("dims must be a list of positive integers", e["name"])
    return entries


def import_float_weights(graph: Graph, manifest_path) -> Graph:
    """Replace every conv/FC weight and bias from a manifest of raw float32 blobs.

    Optional ``<node>.bn_gamma/bn_beta/bn_mean/bn_var`` entries are folded into
    that node's weights (epsilon from the manifest's ``bn_eps``, default 1e-3).
    """
    if graph.mode != FLOAT:
        raise ManifestError("weights import into float graphs only")
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from None
    entries = _manifest_entries(doc)
    eps = doc.get("bn_eps", 1e-3)
    if not isinstance(eps, (int, float)) or not eps > 0:
        raise ManifestError("bn_eps must be a positive number")

    wanted = set(graph.weight_names())
    owners = {}
    for node in graph.nodes:
        if node.kind in WEIGHTED_KINDS:
            for f in BN_FIELDS:
                owners[f"{node.id}.{f}"] = node
    loaded: dict[str, np.ndarray] = {}
    for e in entries:
        name = e["name"]
        if name in loaded:
            raise ManifestError("listed more than once", name)
        if name not in wanted and name not in owners:
            raise ManifestError("not a weight of this graph", name)
        dims = tuple(e["dims"])
        if name in wanted and dims != graph.constants[name].shape:
            raise ManifestError(f"dims {dims} != graph dims {graph.constants[name].shape}", name)
        blob_path = manifest_path.parent / e["path"]
        try:
            raw = blob_path.read_bytes()
        except OSError as exc:
            raise ManifestError(f"cannot read blob: {exc}", name) from None
        if len(raw) != 4 * math.prod(dims):
            raise ManifestError(f"blob holds {len(raw)} bytes, dims need {4 * math.prod(dims)}", name)
        loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    for name in graph.weight_names():
        if name not in loaded:
            raise ManifestError("missing from manifest", name)

    updates = {n: Tensor.f32(loaded[n]) for n in graph.weight_names()}
    by_node: dict[str, dict] = {}
    for name, node in owners.items():
        if name in loaded:
            by_node.setdefault(node.id, {})[name.rsplit(".", 1)[1]] = loaded[name]
    for nid, parts in by_node.items():
        if set(parts) != set(BN_FIELDS):
            raise ManifestError(f"batch-norm needs all of {BN_FIELDS}, got {sorted(parts)}", nid)
        node = graph.node(nid)
        _, wname, bname = node.inputs
        axis = 3 if node.kind == "depthwise_conv2d" else 0
        try:
            w, b = nnops.fold_batchnorm(
                updates[wname], updates[bname], parts["bn_gamma"], parts["bn_beta"],
                parts["bn_mean"], parts["bn_var"], float(eps), axis=axis,
            )
        except QuantError as exc:
            raise ManifestError(str(exc), nid) from None
        updates[wname], updates[bname] = w, b
    return graph.with_constants(updates)


# images ----------------------------------------------------------------------

MAX_IMAGE_DIM = 1 << 14
_WS = b" \t\n\r\v\f"


def _pnm_header(buf: bytes):
    if len(buf) < 2:
        raise FormatError("file too short for an image header")
    magic = buf[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P7"):
        raise UnsupportedImageError(f"{magic.decode()} images are not supported (binary P5/P6 only)")
    if magic not in (b"P5", b"P6"):
        raise FormatError("not a PGM/PPM image")
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise TruncatedFileError("image header ends early")
        c = buf[pos : pos + 1]
        if c in _WS and c:
            pos += 1
            continue
        if c == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise TruncatedFileError("image header ends inside a comment")
            pos = nl + 1
            continue
        if pos == 2:
            raise FormatError("missing whitespace after magic")
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        token = buf[start:pos]
        if not token or len(token) > 6:
            raise FormatError(f"bad header number {token[:8]!r}")
        if pos < len(buf) and buf[pos : pos + 1] not in _WS and buf[pos : pos + 1] != b"#":
            raise FormatError("header numbers must be separated by whitespace")
        values.append(int(token))
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise TruncatedFileError("missing whitespace before pixel data")
    width, height, maxval = values
    return magic, width, height, maxval, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Binary PGM/PPM -> uint8 array ``(H, W)`` or ``(H, W, 3)``."""
    magic, width, height, maxval, start = _pnm_header(buf)
    if not (1 <= width <= MAX_IMAGE_DIM and 1 <= height <= MAX_IMAGE_DIM):
        raise FormatError(f"image dims {width}x{height} out of range")
    if maxval != 255:
        raise UnsupportedImageError(f"maxval {maxval} not supported (8-bit, 255 only)")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(buf) - start < need:
        raise TruncatedFileError(f"pixel data holds {len(buf) - start} bytes, expected {need}")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return px.reshape((height, width, 3) if channels == 3 else (height, width))


def load_image(path) -> Tensor:
    """Greyscale -> ``(1, H, W, 1)``, colour -> ``(1, H, W, 3)``, values in [0, 1]."""
    with open(path, "rb") as f:
        px = decode_pnm(f.read())
    if px.ndim == 2:
        px = px[:, :, None]
    return Tensor.f32(px[None].astype(np.float32) / np.float32(255.0))


def encode_pnm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise ValueError("pixels must be uint8")
    if px.ndim == 2 or (px.ndim == 3 and px.shape[2] == 1):
        magic = b"P5"
        px = px.reshape(px.shape[0], px.shape[1])
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode pixel array of shape {px.shape}")
    return magic + f"\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes()


def save_image(pixels: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_pnm(pixels))


def save_tensor_raw(t: Tensor, path) -> int:
    """Raw little-endian element buffer in row-major order."""
    raw = t.data.astype(t.dtype.numpy.newbyteorder("<")).tobytes()
    atomic_write_bytes(path, raw)
    return len(raw)
