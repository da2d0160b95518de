"""Layered computation graphs, prunable components, masks, and output restriction.

A :class:`Graph` is an immutable, topologically ordered list of typed layers
joined by explicit edges.  Residual adds and the two attention products are the
only layers with fan-in 2; everything else is a chain.  Parameters are stored
as float32 numpy arrays and frozen after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, GraphError, ShapeError

INPUT_ID = "@input"

# Layer kinds understood by the runtime.  Batch-norm kinds exist only in model
# files and are folded away at load time (see formats.fold_batchnorm).
RUNTIME_KINDS = frozenset(
    {
        "linear",
        "conv2d",
        "relu",
        "gelu",
        "maxpool2d",
        "avgpool2d",
        "flatten",
        "add",
        "layernorm",
        "softmax",
        "attn_scores",
        "attn_matmul",
    }
)

PARAMETERIZED_KINDS = frozenset({"linear", "conv2d"})

# Fan-in expected per kind; every other kind takes exactly one input.
_FAN_IN_2 = frozenset({"add", "attn_scores", "attn_matmul"})

# Roles a linear layer may carry; projection roles are excluded from
# linear_neuron enumeration because they belong to the attention mechanism.
PROJECTION_ROLES = frozenset({"proj_q", "proj_k", "proj_v", "proj_o"})

COMPONENT_KINDS = ("conv_filter", "linear_neuron", "attention_head")


@dataclass(frozen=True)
class Layer:
    """One node of the computation graph."""

    id: str
    kind: str
    attrs: Mapping = field(default_factory=dict)
    params: Mapping[str, np.ndarray] = field(default_factory=dict)

    def attr(self, name, default=None):
        return self.attrs.get(name, default)

    def param(self, name):
        return self.params[name]


class Graph:
    """Immutable layered DAG with a single input and a single logit output.

    Use :meth:`Graph.create` to build one; it validates wiring and shape
    consistency and freezes all parameter arrays.
    """

    def __init__(self, layers, inputs, input_shape, num_classes, _validated=False):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.inputs: dict[str, tuple[str, ...]] = {k: tuple(v) for k, v in inputs.items()}
        self.input_shape: tuple[int, ...] = tuple(int(d) for d in input_shape)
        self.num_classes: int = int(num_classes)
        self._by_id = {layer.id: layer for layer in self.layers}
        self._order = {layer.id: i for i, layer in enumerate(self.layers)}
        if not _validated:
            self._shapes = validate_graph(self)
        else:
            self._shapes = infer_shapes(self)

    @classmethod
    def create(cls, layers, edges, input_shape, num_classes):
        """Build a graph from layers plus ``(src, dst)`` edge pairs.

        Edge order defines operand order for fan-in-2 layers.
        """
        inputs: dict[str, list[str]] = {layer.id: [] for layer in layers}
        for src, dst in edges:
            if dst not in inputs:
                raise GraphError(f"edge destination {dst!r} is not a layer")
            inputs[dst].append(src)
        return cls(layers, inputs, input_shape, num_classes)

    @classmethod
    def chain(cls, layers, input_shape, num_classes):
        """Build a purely sequential graph."""
        edges = []
        prev = INPUT_ID
        for layer in layers:
            edges.append((prev, layer.id))
            prev = layer.id
        return cls.create(layers, edges, input_shape, num_classes)

    def layer(self, layer_id) -> Layer:
        try:
            return self._by_id[layer_id]
        except KeyError:
            raise GraphError(f"no layer with id {layer_id!r}") from None

    def layer_index(self, layer_id) -> int:
        return self._order[layer_id]

    def output_layer(self) -> Layer:
        return self.layers[-1]

    def output_shape(self, layer_id) -> tuple[int, ...]:
        return self._shapes[layer_id]

    def consumers(self, tensor_id) -> list[str]:
        """Layers that read the output of ``tensor_id`` (or the graph input)."""
        return [l.id for l in self.layers if tensor_id in self.inputs[l.id]]

    def has_attention(self) -> bool:
        return any(l.kind == "attn_matmul" for l in self.layers)

    def replace_layer(self, layer_id, **changes) -> "Graph":
        """Return a new graph with one layer's attrs/params replaced."""
        new_layers = [
            replace(l, **changes) if l.id == layer_id else l for l in self.layers
        ]
        return Graph(new_layers, self.inputs, self.input_shape, self.num_classes)

    def __repr__(self):
        kinds = ",".join(l.kind for l in self.layers)
        return f"Graph({len(self.layers)} layers: {kinds})"


# ---------------------------------------------------------------------------
# Validation and shape inference
# ---------------------------------------------------------------------------


def _conv_out_hw(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv/pool output would be empty for input {(h, w)}")
    return oh, ow


def layer_output_shape(layer: Layer, in_shapes: Sequence[tuple[int, ...]]):
    """Output shape of one layer given its input shapes.  Raises ShapeError."""
    kind = layer.kind
    want = 2 if kind in _FAN_IN_2 else 1
    if len(in_shapes) != want:
        raise ShapeError(f"layer {layer.id!r} ({kind}) expects {want} inputs, got {len(in_shapes)}")
    s = in_shapes[0]

    if kind == "linear":
        w = layer.param("weight")
        if s[-1] != w.shape[1]:
            raise ShapeError(
                f"linear {layer.id!r}: input features {s[-1]} != weight columns {w.shape[1]}"
            )
        return s[:-1] + (w.shape[0],)
    if kind == "conv2d":
        w = layer.param("weight")
        if len(s) != 3 or s[0] != w.shape[1]:
            raise ShapeError(f"conv2d {layer.id!r}: input {s} incompatible with weight {w.shape}")
        oh, ow = _conv_out_hw(s[1], s[2], w.shape[2], w.shape[3], layer.attr("stride", 1), layer.attr("padding", 0))
        return (w.shape[0], oh, ow)
    if kind in ("relu", "gelu", "softmax"):
        return s
    if kind in ("maxpool2d", "avgpool2d"):
        if len(s) != 3:
            raise ShapeError(f"pool {layer.id!r}: expects CHW input, got {s}")
        k = layer.attr("kernel")
        oh, ow = _conv_out_hw(s[1], s[2], k, k, layer.attr("stride", k), 0)
        return (s[0], oh, ow)
    if kind == "flatten":
        return (int(np.prod(s)),)
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"add {layer.id!r}: branch shapes differ {in_shapes}")
        return s
    if kind == "layernorm":
        w = layer.param("weight")
        if s[-1] != w.shape[0]:
            raise ShapeError(f"layernorm {layer.id!r}: feature dim {s[-1]} != weight {w.shape[0]}")
        return s
    if kind == "attn_scores":
        q, k = in_shapes
        heads = layer.attr("num_heads")
        if len(q) != 2 or len(k) != 2 or q[1] != k[1] or q[1] % heads:
            raise ShapeError(f"attn_scores {layer.id!r}: bad Q/K shapes {q}, {k} for {heads} heads")
        return (heads, q[0], k[0])
    if kind == "attn_matmul":
        a, v = in_shapes
        heads = layer.attr("num_heads")
        if len(a) != 3 or a[0] != heads or len(v) != 2 or v[0] != a[2] or v[1] % heads:
            raise ShapeError(f"attn_matmul {layer.id!r}: bad A/V shapes {a}, {v} for {heads} heads")
        return (a[1], v[1])
    raise GraphError(f"unknown layer kind {kind!r} (layer {layer.id!r})")


def infer_shapes(graph: Graph) -> dict[str, tuple[int, ...]]:
    shapes = {INPUT_ID: graph.input_shape}
    for layer in graph.layers:
        in_shapes = [shapes[src] for src in graph.inputs[layer.id]]
        shapes[layer.id] = layer_output_shape(layer, in_shapes)
    out = dict(shapes)
    out.pop(INPUT_ID)
    return out


def validate_graph(graph: Graph) -> dict[str, tuple[int, ...]]:
    """Check structure, freeze parameters, and return per-layer output shapes."""
    ids = [l.id for l in graph.layers]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate layer ids")
    if INPUT_ID in ids:
        raise GraphError(f"layer id {INPUT_ID!r} is reserved")
    if not graph.layers:
        raise GraphError("graph has no layers")

    seen = {INPUT_ID}
    for layer in graph.layers:
        if layer.kind not in RUNTIME_KINDS:
            raise GraphError(f"unknown layer kind {layer.kind!r} (layer {layer.id!r})")
        srcs = graph.inputs.get(layer.id, ())
        for src in srcs:
            if src not in seen:
                raise GraphError(
                    f"layer {layer.id!r} reads {src!r} before it is produced (must be topological)"
                )
        seen.add(layer.id)
        for name, arr in layer.params.items():
            if arr.size == 0:
                raise GraphError(f"zero-size parameter {name!r} in layer {layer.id!r}")
            if not np.isfinite(arr).all():
                raise GraphError(f"non-finite parameter {name!r} in layer {layer.id!r}")
            arr.setflags(write=False)
        mask = layer.attr("out_mask")
        if mask is not None and not all(m in (0, 1) for m in mask):
            raise GraphError(f"out_mask of {layer.id!r} must be 0/1 flags")

    # Single sink, and it is the last layer.
    consumed = {src for srcs in graph.inputs.values() for src in srcs}
    sinks = [l.id for l in graph.layers if l.id not in consumed]
    if sinks != [graph.layers[-1].id]:
        raise GraphError(f"graph must have exactly one sink (the last layer); found {sinks}")

    shapes = infer_shapes(graph)
    out_shape = shapes[graph.layers[-1].id]
    if out_shape != (graph.num_classes,):
        raise ShapeError(
            f"output layer produces {out_shape}, expected ({graph.num_classes},) logits"
        )
    return shapes


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Component:
    """A prunable unit: conv filter, linear neuron, or attention head."""

    id: str
    kind: str
    layer_id: str
    index: int
    agg_axes: str  # "map" (conv h,w), "none" (plain neuron), "tokens", "qk" (head)


def component_id(kind, layer_id, index):
    return f"{kind}:{layer_id}:{index}"


def _mask_width(graph: Graph, layer: Layer) -> int:
    if layer.kind == "conv2d":
        return layer.param("weight").shape[0]
    if layer.kind == "linear":
        return layer.param("weight").shape[0]
    if layer.kind == "attn_matmul":
        return layer.attr("num_heads")
    raise GraphError(f"layer {layer.id!r} has no prunable output channels")


def enumerate_components(graph: Graph, kind: str) -> list[Component]:
    """All components of one kind, ordered by (layer order, index).

    ``linear_neuron`` skips attention projections and the final logit layer;
    pruning output classes is handled by :func:`restrict_outputs` instead.
    """
    if kind not in COMPONENT_KINDS:
        raise ConfigError(f"unknown component kind {kind!r}")
    comps: list[Component] = []
    last_id = graph.layers[-1].id
    for layer in graph.layers:
        if kind == "conv_filter" and layer.kind == "conv2d":
            n = layer.param("weight").shape[0]
            axes = "map"
        elif kind == "linear_neuron" and layer.kind == "linear":
            if layer.attr("role") in PROJECTION_ROLES or layer.id == last_id:
                continue
            n = layer.param("weight").shape[0]
            axes = "tokens" if len(graph.output_shape(layer.id)) > 1 else "none"
        elif kind == "attention_head" and layer.kind == "attn_matmul":
            n = layer.attr("num_heads")
            axes = "qk"
        else:
            continue
        comps.extend(
            Component(component_id(kind, layer.id, i), kind, layer.id, i, axes)
            for i in range(n)
        )
    if not comps:
        raise ConfigError(f"graph has no components of kind {kind!r}")
    return comps


@dataclass(frozen=True)
class PruneMask:
    """Keep/drop flag for every component of one kind."""

    kind: str
    keep: Mapping[str, bool]

    @classmethod
    def keep_all(cls, graph: Graph, kind: str) -> "PruneMask":
        return cls(kind, {c.id: True for c in enumerate_components(graph, kind)})

    @classmethod
    def dropping(cls, graph: Graph, kind: str, drop_ids: Iterable[str]) -> "PruneMask":
        drop = set(drop_ids)
        keep = {c.id: c.id not in drop for c in enumerate_components(graph, kind)}
        missing = drop - set(keep)
        if missing:
            raise ConfigError(f"mask drops unknown components: {sorted(missing)[:3]}")
        return cls(kind, keep)

    def dropped(self) -> list[str]:
        return [cid for cid, k in self.keep.items() if not k]


def apply_mask(graph: Graph, mask: PruneMask) -> Graph:
    """Zero the outputs of dropped components; keep everything else intact.

    Masked channels produce exactly 0 for every input (bias included).  The
    mask state of the targeted kind is replaced wholesale, so re-applying the
    same mask is a no-op.
    """
    comps = enumerate_components(graph, mask.kind)
    want = {c.id for c in comps}
    got = set(mask.keep)
    if want != got:
        raise ConfigError(
            f"mask does not cover the graph's {mask.kind} components "
            f"(missing {len(want - got)}, extra {len(got - want)})"
        )
    per_layer: dict[str, list[int]] = {}
    for c in comps:
        per_layer.setdefault(c.layer_id, []).append(int(mask.keep[c.id]))
    g = graph
    for layer_id, flags in per_layer.items():
        layer = g.layer(layer_id)
        if layer.attr("out_mask") == flags:
            continue
        attrs = dict(layer.attrs)
        if all(flags):
            attrs.pop("out_mask", None)
        else:
            attrs["out_mask"] = flags
        g = g.replace_layer(layer_id, attrs=attrs)
    return g


# ---------------------------------------------------------------------------
# Output restriction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassRestriction:
    """A nonempty subset of output class indices, in the order given."""

    classes: tuple[int, ...]

    def __post_init__(self):
        if len(self.classes) == 0:
            raise ConfigError("class restriction must be nonempty")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("class restriction contains duplicate indices")

    def remap(self, labels: np.ndarray) -> np.ndarray:
        """Map original labels into restricted index space (callers must have
        filtered labels to the subset first)."""
        lut = {c: i for i, c in enumerate(self.classes)}
        return np.array([lut[int(y)] for y in labels], dtype=np.int64)


def restrict_outputs(graph: Graph, restriction: ClassRestriction) -> Graph:
    """Keep only the selected logits; records the original indices as class_map."""
    for c in restriction.classes:
        if not 0 <= c < graph.num_classes:
            raise ConfigError(f"class {c} outside output spec of {graph.num_classes}")
    out = graph.output_layer()
    if out.kind != "linear":
        raise GraphError("output restriction requires a linear logit layer")
    idx = list(restriction.classes)
    params = {"weight": np.ascontiguousarray(out.param("weight")[idx])}
    if "bias" in out.params:
        params["bias"] = np.ascontiguousarray(out.param("bias")[idx])
    attrs = dict(out.attrs)
    attrs["class_map"] = [int(c) for c in idx]
    if "out_mask" in attrs:
        attrs["out_mask"] = [attrs["out_mask"][c] for c in idx]
    new_layers = [
        Layer(out.id, out.kind, attrs, params) if l.id == out.id else l for l in graph.layers
    ]
    return Graph(new_layers, graph.inputs, graph.input_shape, len(idx))
