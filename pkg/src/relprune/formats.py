"""Binary model (NNIX) and dataset (DSET, IDX) serialization.

NNIX layout: 6-byte magic ``NNIX1\\n``, an unsigned 64-bit little-endian
header length, a UTF-8 JSON header describing layers/edges/shapes, then one
contiguous region of little-endian float32 tensor data addressed by the
offsets stated in the header.  Saving is canonical, so saving a loaded model
reproduces the original bytes exactly.

Batch-norm layers may appear in files but never in runtime graphs; they are
folded into the preceding conv/linear during load.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .graph import Graph, Layer, RUNTIME_KINDS

MODEL_MAGIC = b"NNIX1\n"
DATASET_MAGIC = b"DSET1"
FORMAT_VERSION = 1

BATCHNORM_KINDS = frozenset({"batchnorm2d", "batchnorm1d"})


# ---------------------------------------------------------------------------
# NNIX writer
# ---------------------------------------------------------------------------


def write_model_bytes(layer_specs, edges, input_shape, num_classes) -> bytes:
    """Low-level writer over raw layer dicts ``{id, kind, attrs, tensors}``.

    ``tensors`` maps name -> float32 array.  This level accepts batch-norm
    kinds so external converters can emit them; :func:`save_model` is the
    validated entry point for runtime graphs.
    """
    header_layers = []
    blobs = []
    offset = 0
    for spec in layer_specs:
        tensors = []
        for name in sorted(spec["tensors"]):
            arr = np.ascontiguousarray(spec["tensors"][name], dtype="<f4")
            if arr.size == 0:
                raise FormatError(
                    f"refusing to write zero-size tensor {name!r} of layer {spec['id']!r}"
                )
            if not np.isfinite(arr).all():
                raise FormatError(f"non-finite tensor {name!r} of layer {spec['id']!r}")
            tensors.append(
                {"name": name, "shape": list(arr.shape), "offset": offset, "len": arr.nbytes}
            )
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header_layers.append(
            {"id": spec["id"], "kind": spec["kind"], "attrs": dict(spec.get("attrs", {})), "tensors": tensors}
        )
    header = {
        "version": FORMAT_VERSION,
        "layers": header_layers,
        "edges": [[src, dst] for src, dst in edges],
        "input_shape": [int(d) for d in input_shape],
        "num_classes": int(num_classes),
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MODEL_MAGIC + struct.pack("<Q", len(payload)) + payload + b"".join(blobs)


def _jsonable_attrs(attrs) -> dict:
    out = {}
    for key, value in attrs.items():
        if isinstance(value, np.generic):
            value = value.item()
        elif isinstance(value, (list, tuple)):
            value = [v.item() if isinstance(v, np.generic) else v for v in value]
        out[key] = value
    return out


def save_model(graph: Graph) -> bytes:
    """Serialize a validated runtime graph to NNIX bytes."""
    specs = []
    edges = []
    for layer in graph.layers:
        specs.append(
            {
                "id": layer.id,
                "kind": layer.kind,
                "attrs": _jsonable_attrs(layer.attrs),
                "tensors": dict(layer.params),
            }
        )
        edges.extend((src, layer.id) for src in graph.inputs[layer.id])
    return write_model_bytes(specs, edges, graph.input_shape, graph.num_classes)


# ---------------------------------------------------------------------------
# NNIX reader
# ---------------------------------------------------------------------------


def _parse_header(data: bytes):
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("bad magic: not an NNIX model file")
    fixed = len(MODEL_MAGIC) + 8
    if len(data) < fixed:
        raise FormatError("truncated file: header length field missing")
    (header_len,) = struct.unpack_from("<Q", data, len(MODEL_MAGIC))
    if len(data) < fixed + header_len:
        raise FormatError("truncated file: header shorter than stated length")
    try:
        header = json.loads(data[fixed : fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header JSON: {exc}") from exc
    return header, data[fixed + header_len :]


def _read_tensor(region: bytes, meta) -> np.ndarray:
    shape = tuple(int(d) for d in meta["shape"])
    offset, nbytes = int(meta["offset"]), int(meta["len"])
    if nbytes != int(np.prod(shape)) * 4:
        raise FormatError(f"tensor {meta['name']!r}: stated len {nbytes} does not match shape {shape}")
    if offset < 0 or offset + nbytes > len(region):
        raise FormatError(f"tensor {meta['name']!r}: data region too short")
    arr = np.frombuffer(region, dtype="<f4", count=nbytes // 4, offset=offset)
    return arr.reshape(shape).copy()


def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps):
    """Merge a batch-norm's affine transform into the preceding layer.

    Returns (weight', bias') such that the folded layer alone reproduces
    layer-then-batchnorm.
    """
    scale = (gamma / np.sqrt(var + eps)).astype(np.float64)
    w64 = weight.astype(np.float64)
    shaped = scale.reshape((-1,) + (1,) * (w64.ndim - 1))
    b64 = bias.astype(np.float64) if bias is not None else np.zeros(len(scale))
    new_w = (w64 * shaped).astype(np.float32)
    new_b = ((b64 - mean.astype(np.float64)) * scale + beta.astype(np.float64)).astype(np.float32)
    return new_w, new_b


def _fold_graph_batchnorms(layers, inputs):
    """Remove BN layers from a raw (layers, inputs) description by folding."""
    by_id = {l["id"]: l for l in layers}
    for bn in [l for l in layers if l["kind"] in BATCHNORM_KINDS]:
        srcs = inputs[bn["id"]]
        if len(srcs) != 1 or srcs[0] not in by_id:
            raise FormatError(f"batch-norm {bn['id']!r} must follow a single model layer")
        host = by_id[srcs[0]]
        want = "conv2d" if bn["kind"] == "batchnorm2d" else "linear"
        if host["kind"] != want:
            raise FormatError(
                f"cannot fold {bn['kind']} {bn['id']!r} into a {host['kind']} layer"
            )
        consumers = [lid for lid, ins in inputs.items() if host["id"] in ins]
        if consumers != [bn["id"]]:
            raise FormatError(
                f"batch-norm {bn['id']!r}: host layer {host['id']!r} feeds other layers"
            )
        p = bn["params"]
        new_w, new_b = fold_batchnorm(
            host["params"]["weight"],
            host["params"].get("bias"),
            p["weight"],
            p["bias"],
            p["running_mean"],
            p["running_var"],
            float(bn["attrs"].get("eps", 1e-5)),
        )
        host["params"] = dict(host["params"], weight=new_w, bias=new_b)
        layers = [l for l in layers if l["id"] != bn["id"]]
        del inputs[bn["id"]]
        for lid, ins in inputs.items():
            inputs[lid] = [host["id"] if s == bn["id"] else s for s in ins]
        by_id.pop(bn["id"])
    return layers, inputs


def load_model(data: bytes) -> Graph:
    """Parse NNIX bytes into a validated runtime graph (batch-norm folded)."""
    header, region = _parse_header(data)
    raw_layers = []
    inputs: dict[str, list[str]] = {}
    for spec in header.get("layers", []):
        kind = spec["kind"]
        if kind not in RUNTIME_KINDS and kind not in BATCHNORM_KINDS:
            raise FormatError(f"unknown layer kind {kind!r} in model file")
        params = {m["name"]: _read_tensor(region, m) for m in spec["tensors"]}
        raw_layers.append(
            {"id": spec["id"], "kind": kind, "attrs": dict(spec.get("attrs", {})), "params": params}
        )
        inputs[spec["id"]] = []
    for src, dst in header.get("edges", []):
        if dst not in inputs:
            raise FormatError(f"edge destination {dst!r} is not a layer in the file")
        inputs[dst].append(src)
    raw_layers, inputs = _fold_graph_batchnorms(raw_layers, inputs)
    layers = [Layer(l["id"], l["kind"], l["attrs"], l["params"]) for l in raw_layers]
    return Graph(layers, inputs, header["input_shape"], header["num_classes"])


def save_model_file(graph: Graph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(graph))


def load_model_file(path) -> Graph:
    with open(path, "rb") as fh:
        return load_model(fh.read())


# ---------------------------------------------------------------------------
# DSET datasets
# ---------------------------------------------------------------------------


def write_dataset(samples: np.ndarray, labels: np.ndarray) -> bytes:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    labels = np.asarray(labels)
    if samples.ndim < 2:
        raise FormatError("dataset samples must have shape (count, dims...)")
    if len(labels) != len(samples):
        raise FormatError(f"{len(samples)} samples but {len(labels)} labels")
    if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)):
        raise FormatError("labels must be nonnegative integers")
    dims = samples.shape[1:]
    head = struct.pack(f"<5sII{len(dims)}I", DATASET_MAGIC, len(samples), len(dims), *dims)
    return head + samples.tobytes() + labels.astype("<u4").tobytes()


def read_dataset(data: bytes):
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError("bad magic: not a DSET dataset file")
    pos = len(DATASET_MAGIC)
    try:
        count, rank = struct.unpack_from("<II", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
    except struct.error as exc:
        raise FormatError("truncated dataset header") from exc
    per = int(np.prod(dims)) if dims else 1
    need = pos + count * per * 4 + count * 4
    if len(data) < need:
        raise FormatError("truncated dataset: sample/label region too short")
    samples = np.frombuffer(data, dtype="<f4", count=count * per, offset=pos)
    samples = samples.reshape((count,) + dims).copy()
    labels = np.frombuffer(data, dtype="<u4", count=count, offset=pos + count * per * 4)
    return samples, labels.astype(np.int64)


def write_dataset_file(samples, labels, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_dataset(samples, labels))


def read_dataset_file(path):
    with open(path, "rb") as fh:
        return read_dataset(fh.read())


# ---------------------------------------------------------------------------
# IDX (big-endian image/label archives)
# ---------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(data: bytes) -> np.ndarray:
    """Decode one IDX array (0x00000803 images, 0x00000801 labels, etc.)."""
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise FormatError("bad magic: not an IDX file")
    type_code, ndim = data[2], data[3]
    if type_code not in _IDX_DTYPES:
        raise FormatError(f"unsupported IDX element type 0x{type_code:02x}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = np.dtype(_IDX_DTYPES[type_code])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(data) < offset + count * dtype.itemsize:
        raise FormatError("truncated IDX data region")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.reshape(dims).copy()


def dataset_from_idx(image_bytes: bytes, label_bytes: bytes):
    """Pair IDX image/label archives into (float32 [0,1] NCHW, int64 labels)."""
    images = read_idx(image_bytes)
    labels = read_idx(label_bytes)
    if images.ndim != 3:
        raise FormatError(f"expected 3-d IDX image archive, got {images.ndim} dims")
    if labels.ndim != 1 or len(labels) != len(images):
        raise FormatError("IDX label archive does not match image archive")
    samples = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return samples, labels.astype(np.int64)
