"""Torch-module to interchange-graph conversion.

Supported sources are ``nn.Sequential`` chains over the closed layer set
(Linear, Conv2d, ReLU, GELU, MaxPool2d, AvgPool2d, Flatten, LayerNorm,
with BatchNorm folded into the preceding affine layer and Dropout/Identity
skipped) and :class:`~nnixport.blocks.TransformerBlockNet`, whose fused
attention is decomposed into explicit query/key/value/output projections
plus softmax and matmul nodes.  Anything else is collected and reported in
one :class:`UnsupportedLayerError` naming every offending module.
"""

from dataclasses import dataclass, field

import numpy as np
from torch import nn

from relprune import Graph, Layer

from .blocks import TransformerBlockNet
from .errors import ArchError, UnsupportedLayerError


def _np(tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype(np.float32, copy=False)


def _pair(value, what, source):
    if isinstance(value, tuple):
        if value[0] != value[1]:
            raise ArchError(f"{source}: non-square {what} {value} not supported")
        return int(value[0])
    return int(value)


@dataclass
class ConvertedModel:
    """Interchange graph plus the source-to-target layer mapping table."""

    graph: Graph
    mapping: list[dict] = field(default_factory=list)


class _ChainBuilder:
    """Accumulates interchange layers while walking a torch chain."""

    def __init__(self):
        self.layers: list[Layer] = []
        self.mapping: list[dict] = []
        self.unsupported: list[str] = []
        self.counts: dict[str, int] = {}

    def _next_id(self, prefix: str) -> str:
        self.counts[prefix] = self.counts.get(prefix, 0) + 1
        return f"{prefix}{self.counts[prefix]}"

    def record(self, source, module, target, action):
        self.mapping.append(
            {
                "source": source,
                "kind": type(module).__name__,
                "target": target,
                "action": action,
            }
        )

    def emit(self, source, module, layer: Layer):
        self.layers.append(layer)
        self.record(source, module, layer.id, "mapped")

    def reject(self, source, module, why=None):
        entry = f"{type(module).__name__} ({source})"
        if why:
            entry += f": {why}"
        self.unsupported.append(entry)

    # -- per-kind handlers --------------------------------------------------

    def add_linear(self, source, mod: nn.Linear):
        params = {"weight": _np(mod.weight)}
        if mod.bias is not None:
            params["bias"] = _np(mod.bias)
        self.emit(source, mod, Layer(self._next_id("fc"), "linear", {}, params))

    def add_conv(self, source, mod: nn.Conv2d):
        if mod.groups != 1:
            return self.reject(source, mod, "grouped convolution not supported")
        if _pair(mod.dilation, "dilation", source) != 1:
            return self.reject(source, mod, "dilation not supported")
        attrs = {
            "stride": _pair(mod.stride, "stride", source),
            "padding": _pair(mod.padding, "padding", source),
        }
        params = {"weight": _np(mod.weight)}
        if mod.bias is not None:
            params["bias"] = _np(mod.bias)
        self.emit(source, mod, Layer(self._next_id("conv"), "conv2d", attrs, params))

    def add_pool(self, source, mod, kind: str):
        if getattr(mod, "ceil_mode", False):
            return self.reject(source, mod, "ceil_mode not supported")
        if _pair(mod.padding, "padding", source) != 0:
            return self.reject(source, mod, "only zero padding supported")
        kernel = _pair(mod.kernel_size, "kernel", source)
        stride = kernel if mod.stride is None else _pair(mod.stride, "stride", source)
        self.emit(
            source, mod,
            Layer(self._next_id("pool"), kind, {"kernel": kernel, "stride": stride}),
        )

    def add_gelu(self, source, mod: nn.GELU):
        if getattr(mod, "approximate", "none") != "none":
            return self.reject(source, mod, "only the exact erf form is supported")
        self.emit(source, mod, Layer(self._next_id("act"), "gelu"))

    def add_layernorm(self, source, mod: nn.LayerNorm):
        if len(mod.normalized_shape) != 1:
            return self.reject(source, mod, "only last-axis normalization supported")
        if not mod.elementwise_affine:
            return self.reject(source, mod, "affine parameters required")
        self.emit(
            source, mod,
            Layer(
                self._next_id("norm"), "layernorm", {"eps": float(mod.eps)},
                {"weight": _np(mod.weight), "bias": _np(mod.bias)},
            ),
        )

    def add_flatten(self, source, mod: nn.Flatten):
        if mod.start_dim != 1 or mod.end_dim != -1:
            return self.reject(source, mod, "only full flattening after batch supported")
        self.emit(source, mod, Layer(self._next_id("flat"), "flatten"))

    def fold_batchnorm(self, source, mod):
        """Fold an eval-mode BatchNorm into the previous affine layer."""
        prev = self.layers[-1] if self.layers else None
        wants = {nn.BatchNorm2d: "conv2d", nn.BatchNorm1d: "linear"}[type(mod)]
        if prev is None or prev.kind != wants:
            return self.reject(
                source, mod, f"must directly follow a {wants} layer to be folded"
            )
        scale = _np(mod.weight) / np.sqrt(_np(mod.running_var) + mod.eps)
        shift = _np(mod.bias) - _np(mod.running_mean) * scale
        weight = prev.param("weight") * scale.reshape((-1,) + (1,) * (prev.param("weight").ndim - 1))
        bias = prev.params.get("bias")
        bias = shift if bias is None else bias * scale + shift
        self.layers[-1] = Layer(
            prev.id, prev.kind, prev.attrs,
            {"weight": weight.astype(np.float32), "bias": bias.astype(np.float32)},
        )
        self.record(source, mod, prev.id, "folded")

    # -- walk ---------------------------------------------------------------

    def walk(self, source, module):
        if isinstance(module, nn.Sequential):
            for name, child in module.named_children():
                self.walk(f"{source}.{name}" if source else name, child)
        elif isinstance(module, nn.Linear):
            self.add_linear(source, module)
        elif isinstance(module, nn.Conv2d):
            self.add_conv(source, module)
        elif isinstance(module, nn.ReLU):
            self.emit(source, module, Layer(self._next_id("act"), "relu"))
        elif isinstance(module, nn.GELU):
            self.add_gelu(source, module)
        elif isinstance(module, nn.MaxPool2d):
            self.add_pool(source, module, "maxpool2d")
        elif isinstance(module, nn.AvgPool2d):
            self.add_pool(source, module, "avgpool2d")
        elif isinstance(module, nn.LayerNorm):
            self.add_layernorm(source, module)
        elif isinstance(module, nn.Flatten):
            self.add_flatten(source, module)
        elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
            self.fold_batchnorm(source, module)
        elif isinstance(module, (nn.Dropout, nn.Identity)):
            self.record(source, module, "", "skipped")
        else:
            self.reject(source, module)

    def finish(self, input_shape) -> ConvertedModel:
        if self.unsupported:
            raise UnsupportedLayerError(self.unsupported)
        if not self.layers or self.layers[-1].kind != "linear":
            raise ArchError("model must end with a Linear classifier head")
        head = self.layers[-1]
        renamed = Layer("head", "linear", {"role": "head"}, head.params)
        self.layers[-1] = renamed
        for row in self.mapping:
            if row["target"] == head.id:
                row["target"] = "head"
        num_classes = int(renamed.param("weight").shape[0])
        graph = Graph.chain(self.layers, tuple(input_shape), num_classes)
        return ConvertedModel(graph, self.mapping)


def _convert_transformer_block(module: TransformerBlockNet) -> ConvertedModel:
    attn = module.attn
    dim = attn.embed_dim
    heads = attn.num_heads
    if attn.in_proj_weight is None:
        raise ArchError("attention with separate q/k/v weights not supported")
    if module.head.in_features != module.tokens * dim:
        raise ArchError("head width does not match tokens * dim")

    wqkv = _np(attn.in_proj_weight)
    bqkv = _np(attn.in_proj_bias) if attn.in_proj_bias is not None else None

    def proj(rows):
        params = {"weight": wqkv[rows]}
        if bqkv is not None:
            params["bias"] = bqkv[rows]
        return params

    def linear_layer(lid, mod, role):
        params = {"weight": _np(mod.weight)}
        if mod.bias is not None:
            params["bias"] = _np(mod.bias)
        return Layer(lid, "linear", {"role": role}, params)

    def norm_layer(lid, mod):
        return Layer(
            lid, "layernorm", {"eps": float(mod.eps)},
            {"weight": _np(mod.weight), "bias": _np(mod.bias)},
        )

    layers: list[Layer] = []
    edges: list[tuple[str, str]] = []

    def add(layer, *srcs):
        layers.append(layer)
        edges.extend((s, layer.id) for s in srcs)
        return layer.id

    q_rows = slice(0, dim)
    k_rows = slice(dim, 2 * dim)
    v_rows = slice(2 * dim, 3 * dim)

    prev = add(linear_layer("embed", module.embed, "embed"), "@input")
    n1 = add(norm_layer("b1_ln1", module.ln1), prev)
    q = add(Layer("b1_q", "linear", {"role": "proj_q"}, proj(q_rows)), n1)
    k = add(Layer("b1_k", "linear", {"role": "proj_k"}, proj(k_rows)), n1)
    v = add(Layer("b1_v", "linear", {"role": "proj_v"}, proj(v_rows)), n1)
    sc = add(Layer("b1_scores", "attn_scores", {"num_heads": heads}), q, k)
    sm = add(Layer("b1_softmax", "softmax", {}), sc)
    ctx = add(Layer("b1_attn", "attn_matmul", {"num_heads": heads}), sm, v)
    o = add(linear_layer("b1_o", attn.out_proj, "proj_o"), ctx)
    r1 = add(Layer("b1_res1", "add", {}), prev, o)
    n2 = add(norm_layer("b1_ln2", module.ln2), r1)
    m1 = add(linear_layer("b1_mlp1", module.mlp1, "mlp"), n2)
    g = add(Layer("b1_gelu", "gelu", {}), m1)
    m2 = add(linear_layer("b1_mlp2", module.mlp2, "mlp"), g)
    r2 = add(Layer("b1_res2", "add", {}), r1, m2)
    flat = add(Layer("flat", "flatten", {}), r2)
    head_params = {"weight": _np(module.head.weight)}
    if module.head.bias is not None:
        head_params["bias"] = _np(module.head.bias)
    add(Layer("head", "linear", {"role": "head"}, head_params), flat)

    num_classes = int(module.head.out_features)
    input_shape = (module.tokens, int(module.embed.in_features))
    graph = Graph.create(layers, edges, input_shape, num_classes)

    attn_nodes = "+".join(("b1_q", "b1_k", "b1_v", "b1_scores", "b1_softmax", "b1_attn", "b1_o"))
    mapping = [
        {"source": "embed", "kind": "Linear", "target": "embed", "action": "mapped"},
        {"source": "ln1", "kind": "LayerNorm", "target": "b1_ln1", "action": "mapped"},
        {"source": "attn", "kind": "MultiheadAttention", "target": attn_nodes, "action": "decomposed"},
        {"source": "ln2", "kind": "LayerNorm", "target": "b1_ln2", "action": "mapped"},
        {"source": "mlp1", "kind": "Linear", "target": "b1_mlp1", "action": "mapped"},
        {"source": "act", "kind": "GELU", "target": "b1_gelu", "action": "mapped"},
        {"source": "mlp2", "kind": "Linear", "target": "b1_mlp2", "action": "mapped"},
        {"source": "head", "kind": "Linear", "target": "head", "action": "mapped"},
    ]
    return ConvertedModel(graph, mapping)


def convert_module(module: nn.Module, input_shape=None) -> ConvertedModel:
    """Convert a supported torch module into an interchange graph.

    ``input_shape`` (without the batch axis) is required for chain models;
    :class:`TransformerBlockNet` carries its own shape.
    """
    if isinstance(module, TransformerBlockNet):
        return _convert_transformer_block(module)
    if input_shape is None:
        raise ArchError("input_shape is required for chain models")
    builder = _ChainBuilder()
    builder.walk("", module)
    return builder.finish(input_shape)
