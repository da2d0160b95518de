"""Relevance backpropagation: the rule family, layer-group composites, and
the attribution engine.

A composite assigns one propagation rule to each depth group of parameterized
layers (LLL / MLL / HLL for the first quarter, middle, and last quarter of
hidden layers, FCL for the trailing classifier), plus a softmax handler for
attention graphs and a magnitude flag for score ranking.  All relevance
arithmetic runs in float64 regardless of model dtype.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .graph import Graph, INPUT_ID, PROJECTION_ROLES
from .runtime import (
    ActivationTrace,
    _merge_heads,
    _split_heads,
    col2im,
    forward_trace,
    im2col,
    pool_cols,
    pool_uncols,
)

EPSILON_DEFAULT = 1e-6
GAMMA_DEFAULT = 0.25
RULE_KINDS = ("basic", "epsilon", "alpha_beta", "z_plus", "gamma")
GROUPS = ("LLL", "MLL", "HLL", "FCL")
OVERRIDE_KEYS = ("conv2d", "linear", "projection")


def sign0(z):
    """Sign with sign(0) = +1, as used by every stabilized denominator."""
    return np.where(np.asarray(z) >= 0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# Rules and composites
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    """One member of the propagation-rule family with its constants."""

    kind: str
    epsilon: float = EPSILON_DEFAULT
    alpha: float | None = None
    beta: float | None = None
    gamma: float = GAMMA_DEFAULT

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ConfigError(f"unknown rule kind {self.kind!r}; choose from {RULE_KINDS}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if self.kind == "alpha_beta":
            if self.alpha is None or self.beta is None:
                raise ConfigError("alpha_beta rule needs both alpha and beta")
            if self.alpha + self.beta != 1.0:
                raise ConfigError(
                    f"alpha + beta must equal 1 exactly, got {self.alpha} + {self.beta}"
                )

    @property
    def name(self) -> str:
        if self.kind == "basic":
            return "basic"
        if self.kind == "epsilon":
            return "eps"
        if self.kind == "z_plus":
            return "zplus"
        if self.kind == "alpha_beta":
            if (self.alpha, self.beta) == (2.0, -1.0):
                return "ab21"
            return f"a{self.alpha:g}b{self.beta:g}"
        if self.gamma == GAMMA_DEFAULT:
            return "gamma"
        return f"gamma{self.gamma:g}"


def parse_rule(name, constants=None) -> Rule:
    """Rule from its composite-JSON string plus optional constants block."""
    c = {k: v for k, v in (constants or {}).items() if v is not None}
    eps = float(c.get("epsilon", EPSILON_DEFAULT))
    key = str(name).strip().lower()
    if key in ("z_plus", "z-plus", "z+"):
        key = "zplus"
    if key in ("cp_lrp",):
        raise ConfigError(f"{name!r} is a softmax handler, not a layer rule")
    if key == "basic":
        return Rule("basic", epsilon=eps)
    if key in ("eps", "epsilon"):
        return Rule("epsilon", epsilon=eps)
    if key == "zplus":
        return Rule("z_plus", epsilon=eps)
    if key in ("ab21", "alpha2beta1"):
        return Rule("alpha_beta", epsilon=eps, alpha=2.0, beta=-1.0)
    if key in ("ab", "alpha_beta", "alphabeta"):
        if "alpha" not in c or "beta" not in c:
            raise ConfigError("alpha_beta rule string needs alpha/beta constants")
        return Rule("alpha_beta", epsilon=eps, alpha=float(c["alpha"]), beta=float(c["beta"]))
    if key.startswith("a") and "b" in key[1:]:
        try:
            a_s, b_s = key[1:].split("b", 1)
            return Rule("alpha_beta", epsilon=eps, alpha=float(a_s), beta=float(b_s))
        except ValueError:
            pass
    if key == "gamma":
        return Rule("gamma", epsilon=eps, gamma=float(c.get("gamma", GAMMA_DEFAULT)))
    if key.startswith("gamma"):
        try:
            return Rule("gamma", epsilon=eps, gamma=float(key[len("gamma") :]))
        except ValueError:
            pass
    raise ConfigError(f"cannot parse rule name {name!r}")


class SoftmaxHandler(str, Enum):
    """How relevance crosses the attention softmax."""

    CP_LRP = "cp_lrp"
    ATTNLRP_DTD = "attnlrp_dtd"
    ATTNLRP_ZPLUS = "attnlrp_zplus"


_SOFTMAX_ALIASES = {
    "cp_lrp": SoftmaxHandler.CP_LRP,
    "cplrp": SoftmaxHandler.CP_LRP,
    "attnlrp_dtd": SoftmaxHandler.ATTNLRP_DTD,
    "attnlrp": SoftmaxHandler.ATTNLRP_DTD,
    "dtd": SoftmaxHandler.ATTNLRP_DTD,
    "eps": SoftmaxHandler.ATTNLRP_DTD,
    "epsilon": SoftmaxHandler.ATTNLRP_DTD,
    "attnlrp_zplus": SoftmaxHandler.ATTNLRP_ZPLUS,
    "zplus": SoftmaxHandler.ATTNLRP_ZPLUS,
    "z_plus": SoftmaxHandler.ATTNLRP_ZPLUS,
    "z+": SoftmaxHandler.ATTNLRP_ZPLUS,
}


def parse_softmax_handler(name) -> SoftmaxHandler:
    key = str(name).strip().lower().replace("-", "_")
    if key not in _SOFTMAX_ALIASES:
        raise ConfigError(f"unknown softmax handler {name!r}")
    return _SOFTMAX_ALIASES[key]


@dataclass(frozen=True)
class CompositeConfig:
    """Per-group rule assignment plus softmax handling and the magnitude flag.

    ``overrides`` optionally pins a rule by layer type ("conv2d", "linear",
    "projection") regardless of depth group, which some published composites
    require; it is emitted as an extra key in the JSON form.
    """

    rule_lll: Rule
    rule_mll: Rule
    rule_hll: Rule
    rule_fcl: Rule
    softmax: SoftmaxHandler | None = None
    magnitude: bool = False
    overrides: Mapping[str, Rule] = field(default_factory=dict)

    def __post_init__(self):
        for key in self.overrides:
            if key not in OVERRIDE_KEYS:
                raise ConfigError(f"override key {key!r} not in {OVERRIDE_KEYS}")

    def group_rule(self, group: str) -> Rule:
        return {
            "LLL": self.rule_lll,
            "MLL": self.rule_mll,
            "HLL": self.rule_hll,
            "FCL": self.rule_fcl,
        }[group]

    @property
    def composite_id(self) -> str:
        parts = [self.rule_lll.name, self.rule_mll.name, self.rule_hll.name, self.rule_fcl.name]
        if self.softmax is not None:
            parts.append(self.softmax.value)
        if self.overrides:
            parts.append("ovr[" + ",".join(f"{k}={r.name}" for k, r in sorted(self.overrides.items())) + "]")
        if self.magnitude:
            parts.append("mag")
        return "/".join(parts)

    def to_json(self) -> dict:
        rules = [self.rule_lll, self.rule_mll, self.rule_hll, self.rule_fcl]
        constants = {"epsilon": self.rule_lll.epsilon}
        for r in rules:
            if r.kind == "alpha_beta":
                constants.setdefault("alpha", r.alpha)
                constants.setdefault("beta", r.beta)
            if r.kind == "gamma":
                constants.setdefault("gamma", r.gamma)
        out = {
            "LLL": self.rule_lll.name,
            "MLL": self.rule_mll.name,
            "HLL": self.rule_hll.name,
            "FCL": self.rule_fcl.name,
            "softmax": self.softmax.value if self.softmax else None,
            "magnitude": bool(self.magnitude),
            "constants": constants,
        }
        if self.overrides:
            out["overrides"] = {
                k: {"rule": r.name, "epsilon": r.epsilon, "gamma": r.gamma}
                for k, r in sorted(self.overrides.items())
            }
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "CompositeConfig":
        missing = [g for g in GROUPS if g not in data]
        if missing:
            raise ConfigError(f"composite JSON missing group rules {missing}")
        constants = data.get("constants", {})
        rules = {g: parse_rule(data[g], constants) for g in GROUPS}
        softmax = data.get("softmax")
        overrides = {}
        for key, spec in (data.get("overrides") or {}).items():
            if isinstance(spec, str):
                overrides[key] = parse_rule(spec, constants)
            else:
                overrides[key] = parse_rule(spec.get("rule"), {**constants, **spec})
        return cls(
            rule_lll=rules["LLL"],
            rule_mll=rules["MLL"],
            rule_hll=rules["HLL"],
            rule_fcl=rules["FCL"],
            softmax=parse_softmax_handler(softmax) if softmax else None,
            magnitude=bool(data.get("magnitude", False)),
            overrides=overrides,
        )


def _uniform(rule: Rule, magnitude: bool, softmax=None, overrides=None) -> CompositeConfig:
    return CompositeConfig(rule, rule, rule, rule, softmax, magnitude, overrides or {})


_EPS = Rule("epsilon")
_ZP = Rule("z_plus")
_AB21 = Rule("alpha_beta", alpha=2.0, beta=-1.0)
_GAMMA = Rule("gamma")

# Preset name -> (composite, softmax handler to adopt on attention graphs).
_PRESETS: dict[str, tuple[CompositeConfig, SoftmaxHandler]] = {
    "eps-all": (_uniform(_EPS, magnitude=True), SoftmaxHandler.ATTNLRP_DTD),
    "ours-cnn": (_uniform(_EPS, magnitude=True), SoftmaxHandler.ATTNLRP_DTD),
    "yeom": (_uniform(_ZP, magnitude=False), SoftmaxHandler.ATTNLRP_ZPLUS),
    "faithful-cnn": (
        CompositeConfig(_EPS, _EPS, _EPS, _ZP, magnitude=False),
        SoftmaxHandler.ATTNLRP_DTD,
    ),
    "faithful-vit": (
        _uniform(
            Rule("gamma", gamma=0.05),
            magnitude=False,
            softmax=SoftmaxHandler.ATTNLRP_ZPLUS,
            overrides={"conv2d": _GAMMA, "linear": Rule("gamma", gamma=0.05), "projection": _EPS},
        ),
        SoftmaxHandler.ATTNLRP_ZPLUS,
    ),
    "ours-vit-heads": (
        CompositeConfig(_EPS, _EPS, _ZP, _AB21, SoftmaxHandler.ATTNLRP_DTD, magnitude=True),
        SoftmaxHandler.ATTNLRP_DTD,
    ),
    "ours-vit-linear": (
        CompositeConfig(_EPS, _AB21, _GAMMA, _GAMMA, SoftmaxHandler.CP_LRP, magnitude=True),
        SoftmaxHandler.CP_LRP,
    ),
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def get_preset(name: str) -> CompositeConfig:
    try:
        return _PRESETS[name][0]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}") from None


def resolve_composite(composite: CompositeConfig, graph: Graph, preset=None) -> CompositeConfig:
    """Align the softmax field with the graph (present iff attention exists).

    For presets, a missing handler is filled with the preset's companion
    handler; otherwise a mismatch is an error.
    """
    has_attn = graph.has_attention()
    if has_attn and composite.softmax is None:
        if preset in _PRESETS:
            return CompositeConfig(
                composite.rule_lll, composite.rule_mll, composite.rule_hll, composite.rule_fcl,
                _PRESETS[preset][1], composite.magnitude, composite.overrides,
            )
        raise ConfigError("graph contains attention but composite sets no softmax handler")
    if not has_attn and composite.softmax is not None:
        return CompositeConfig(
            composite.rule_lll, composite.rule_mll, composite.rule_hll, composite.rule_fcl,
            None, composite.magnitude, composite.overrides,
        )
    return composite


# ---------------------------------------------------------------------------
# Layer grouping
# ---------------------------------------------------------------------------


def split_layer_groups(graph: Graph) -> dict[str, str]:
    """Assign every conv/linear layer to LLL, MLL, HLL, or FCL.

    FCL holds the trailing classifier: the linear layers after the final
    flatten, or just the logit layer for a plain MLP.  The remaining
    (hidden) layers split by depth: first floor(25%) to LLL, last
    floor(25%) to HLL, middle to MLL.
    """
    param_ids = [l.id for l in graph.layers if l.kind in ("conv2d", "linear")]
    if not param_ids:
        raise ConfigError("graph has no parameterized layers to group")
    flat = [i for i, l in enumerate(graph.layers) if l.kind == "flatten"]
    if flat:
        cut = flat[-1]
        fcl = [l.id for i, l in enumerate(graph.layers) if i > cut and l.kind == "linear"]
    elif graph.layers[-1].kind == "linear":
        # A plain MLP: only the logit layer counts as the classifier.
        fcl = [graph.layers[-1].id]
    else:
        fcl = []
    if not fcl:
        warnings.warn("graph has no trailing fully connected classifier; FCL group is empty")
    hidden = [lid for lid in param_ids if lid not in fcl]
    k = len(hidden) // 4
    groups = {lid: "FCL" for lid in fcl}
    for i, lid in enumerate(hidden):
        if i < k:
            groups[lid] = "LLL"
        elif i >= len(hidden) - k:
            groups[lid] = "HLL"
        else:
            groups[lid] = "MLL"
    return groups


def rule_for_layer(layer, group: str, composite: CompositeConfig) -> Rule:
    """Resolve the effective rule: type override first, then the group rule."""
    ovr = composite.overrides
    if layer.kind == "linear" and layer.attr("role") in PROJECTION_ROLES and "projection" in ovr:
        return ovr["projection"]
    if layer.kind in ovr:
        return ovr[layer.kind]
    return composite.group_rule(group)


# ---------------------------------------------------------------------------
# Core propagation steps (all float64)
# ---------------------------------------------------------------------------


def _f64(*arrays):
    return tuple(None if a is None else np.asarray(a, dtype=np.float64) for a in arrays)


def _split_sign(arr):
    return np.maximum(arr, 0.0), np.minimum(arr, 0.0)


def _finite(r_in, rule: Rule):
    if not np.isfinite(r_in).all():
        raise NonFiniteError(
            f"{rule.kind} rule produced non-finite relevance", where=rule.kind
        )
    return r_in


def propagate_linear(rule: Rule, a, w, bias, r_out):
    """One rule step through ``z = a @ w.T + bias``.

    ``a``: (..., n_in); ``w``: (n_out, n_in); ``r_out``: (..., n_out).
    Returns relevance of ``a`` with the same leading shape.  The bias joins
    every denominator (absorbing its share), which is why exact conservation
    holds only on bias-free layers.
    """
    a, w, bias, r_out = _f64(a, w, bias, r_out)
    if a.shape[-1] != w.shape[1] or r_out.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"propagate_linear: a{a.shape} / w{w.shape} / R{r_out.shape} are inconsistent"
        )
    b = bias if bias is not None else 0.0

    if rule.kind in ("basic", "epsilon"):
        z = a @ w.T + b
        if rule.kind == "basic":
            bad = (z == 0.0) & (r_out != 0.0)
            if bad.any():
                raise NonFiniteError(
                    "basic rule hit a zero denominator with nonzero relevance",
                    where="basic",
                )
            s = np.where(r_out == 0.0, 0.0, r_out / np.where(z == 0.0, 1.0, z))
        else:
            s = r_out / (z + rule.epsilon * sign0(z))
        return _finite(a * (s @ w), rule)

    ap, an = _split_sign(a)
    wp, wn = _split_sign(w)
    bp, bn = _split_sign(np.asarray(b, dtype=np.float64))

    if rule.kind in ("alpha_beta", "z_plus"):
        alpha, beta = (1.0, 0.0) if rule.kind == "z_plus" else (rule.alpha, rule.beta)
        zp = ap @ wp.T + an @ wn.T + bp
        sp = r_out / (zp + (zp == 0.0))
        r_in = alpha * (ap * (sp @ wp) + an * (sp @ wn))
        if beta != 0.0:
            zn = ap @ wn.T + an @ wp.T + bn
            sn = r_out / (zn + (zn == 0.0))
            r_in = r_in + beta * (ap * (sn @ wn) + an * (sn @ wp))
        return _finite(r_in, rule)

    # gamma: favor positive contributions by a tunable margin.
    z = a @ w.T + b
    zp = ap @ wp.T + an @ wn.T + bp
    denom = z + rule.gamma * zp
    s = r_out / (denom + rule.epsilon * sign0(denom))
    return _finite(a * (s @ w) + rule.gamma * (ap * (s @ wp) + an * (s @ wn)), rule)


def propagate_conv(rule: Rule, layer, x, r_out):
    """Conv layer step: lower to patches, apply the linear rule, scatter back."""
    w = layer.param("weight").astype(np.float64)
    f, c, kh, kw = w.shape
    stride, padding = layer.attr("stride", 1), layer.attr("padding", 0)
    bias = layer.params.get("bias")
    cols = im2col(np.asarray(x, dtype=np.float64)[None], kh, kw, stride, padding)[0]
    r_cols = propagate_linear(rule, cols, w.reshape(f, -1), bias, np.moveaxis(r_out, 0, 2))
    return col2im(r_cols[None], (1,) + x.shape, kh, kw, stride, padding)[0]


def propagate_activation(layer, x, r_out):
    """Identity for elementwise activations; winner/proportional for pools."""
    kind = layer.kind
    if kind in ("relu", "gelu"):
        return np.asarray(r_out, dtype=np.float64)
    if kind in ("maxpool2d", "avgpool2d"):
        k = layer.attr("kernel")
        s = layer.attr("stride", k)
        x64 = np.asarray(x, dtype=np.float64)[None]
        cols = pool_cols(x64, k, s)
        r_flat = np.asarray(r_out, dtype=np.float64).reshape(cols.shape[:3])[..., None]
        if kind == "maxpool2d":
            r_cols = np.zeros_like(cols)
            np.put_along_axis(r_cols, cols.argmax(axis=-1)[..., None], r_flat, axis=-1)
        else:
            total = cols.sum(axis=-1, keepdims=True)
            r_cols = cols * (r_flat / (total + EPSILON_DEFAULT * sign0(total)))
        return pool_uncols(r_cols, x64.shape, k, s)[0]
    raise ConfigError(f"propagate_activation does not handle kind {kind!r}")


def propagate_layernorm(layer, x, r_out):
    """Detached-statistics treatment: the affine part under the ε-rule."""
    eps = layer.attr("eps", 1e-5)
    x64 = np.asarray(x, dtype=np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    std = np.sqrt(((x64 - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x64 - mu) / std
    w = layer.param("weight").astype(np.float64)
    b = layer.params.get("bias")
    y = xhat * w + (b.astype(np.float64) if b is not None else 0.0)
    return (xhat * w) / (y + EPSILON_DEFAULT * sign0(y)) * np.asarray(r_out, dtype=np.float64)


def propagate_softmax(handler: SoftmaxHandler, x, s, r_out):
    """Relevance through a softmax row (last axis) per the chosen handler."""
    x, s, r_out = _f64(x, s, r_out)
    if handler == SoftmaxHandler.CP_LRP:
        return np.zeros_like(x)
    if handler == SoftmaxHandler.ATTNLRP_DTD:
        return x * (r_out - s * r_out.sum(axis=-1, keepdims=True))
    if handler == SoftmaxHandler.ATTNLRP_ZPLUS:
        n = x.shape[-1]
        eye = np.eye(n)
        # M[..., j, i] = J_ji * x_i with J the softmax Jacobian at x.
        jac = s[..., :, None] * (eye - s[..., None, :])
        m_pos = np.maximum(jac * x[..., None, :], 0.0)
        b_tilde = s * (1.0 - x + (s * x).sum(axis=-1, keepdims=True))
        denom = m_pos.sum(axis=-1) + np.maximum(b_tilde, 0.0) + EPSILON_DEFAULT
        weights = r_out / denom
        return (m_pos * weights[..., :, None]).sum(axis=-2)
    raise ConfigError(f"unknown softmax handler {handler!r}")


def _attn_factor(o, r_out, epsilon, halved):
    scale = 2.0 if halved else 1.0
    denom = scale * o
    return r_out / (denom + epsilon * sign0(denom))


def propagate_matmul_attn(a, v, o, r_out, epsilon=EPSILON_DEFAULT):
    """Bilinear split of attention-output relevance between A and V.

    ``a``: (H, Tq, Tk); ``v``: (Tk, H*dv); ``o``/``r_out``: (Tq, H*dv).
    Each operand receives half of every product term's share (the 2·O
    denominator), so the two returned maps together conserve ``r_out`` up to
    the stabilizer.
    """
    a, v, o, r_out = _f64(a, v, o, r_out)
    heads = a.shape[0]
    if v.shape[-1] % heads or o.shape != r_out.shape:
        raise ShapeError(f"propagate_matmul_attn: A{a.shape} / V{v.shape} / O{o.shape}")
    vh = _split_heads(v, heads)  # (H, Tk, dv)
    fh = _split_heads(_attn_factor(o, r_out, epsilon, halved=True), heads)  # (H, Tq, dv)
    r_a = a * (fh @ vh.swapaxes(-1, -2))
    r_v = _merge_heads(vh * (a.swapaxes(-1, -2) @ fh))
    return r_a, r_v


def propagate_matmul_eps(a, v, o, r_out, epsilon=EPSILON_DEFAULT):
    """Value-path-only ε-rule with the attention matrix held constant."""
    a, v, o, r_out = _f64(a, v, o, r_out)
    heads = a.shape[0]
    vh = _split_heads(v, heads)
    sh = _split_heads(_attn_factor(o, r_out, epsilon, halved=False), heads)
    return _merge_heads(vh * (a.swapaxes(-1, -2) @ sh))


def propagate_attn_scores(layer, q, k, scores, r_out, epsilon=EPSILON_DEFAULT):
    """Bilinear split of score relevance between the Q and K operands."""
    q, k, scores, r_out = _f64(q, k, scores, r_out)
    heads = layer.attr("num_heads")
    dk = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads) / np.sqrt(dk)
    f = _attn_factor(scores, r_out, epsilon, halved=True)  # (H, Tq, Tk)
    r_q = _merge_heads(qh * (f @ kh))
    r_k = _merge_heads(kh * (f.swapaxes(-1, -2) @ qh))
    return r_q, r_k


# ---------------------------------------------------------------------------
# Whole-graph attribution
# ---------------------------------------------------------------------------


@dataclass
class RelevanceTrace:
    """Per-layer output relevance for one (sample, class) attribution."""

    graph: Graph
    class_index: int
    initial_value: float
    layer_relevance: dict[str, np.ndarray]
    input_relevance: np.ndarray

    def relevance_of(self, layer_id: str) -> np.ndarray:
        if layer_id == INPUT_ID:
            return self.input_relevance
        return self.layer_relevance[layer_id]

    def head_relevance(self, attn_layer_id: str) -> np.ndarray:
        """Relevance of the attention matrix feeding ``attn_layer_id``."""
        a_src = self.graph.inputs[attn_layer_id][0]
        return self.layer_relevance[a_src]


def _validate_softmax_choice(graph: Graph, composite: CompositeConfig):
    has_attn = graph.has_attention()
    if has_attn and composite.softmax is None:
        raise ConfigError(
            "graph contains attention softmax but the composite sets no handler"
        )
    if not has_attn and composite.softmax is not None:
        raise ConfigError("composite sets a softmax handler but the graph has no attention")


def attribute(
    graph: Graph,
    x,
    class_index: int,
    composite: CompositeConfig,
    trace: ActivationTrace | None = None,
) -> RelevanceTrace:
    """Backpropagate one logit's relevance through the whole graph."""
    _validate_softmax_choice(graph, composite)
    if trace is None:
        trace = forward_trace(graph, x)
    logits = trace.logits
    if not 0 <= class_index < logits.shape[0]:
        raise ConfigError(f"target class {class_index} outside {logits.shape[0]} outputs")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        groups = split_layer_groups(graph)

    def group_rule_near(idx: int) -> Rule:
        """Group rule inherited by a parameter-free layer from depth context."""
        for j in range(idx, -1, -1):
            lid = graph.layers[j].id
            if lid in groups:
                return composite.group_rule(groups[lid])
        return composite.rule_mll

    initial = float(logits[class_index])
    rel: dict[str, np.ndarray] = {}
    seed = np.zeros(logits.shape, dtype=np.float64)
    seed[class_index] = initial
    rel[graph.layers[-1].id] = seed
    layer_relevance: dict[str, np.ndarray] = {}

    for idx in range(len(graph.layers) - 1, -1, -1):
        layer = graph.layers[idx]
        srcs = graph.inputs[layer.id]
        r_out = rel.pop(layer.id, None)
        if r_out is None:
            r_out = np.zeros(graph.output_shape(layer.id), dtype=np.float64)
        layer_relevance[layer.id] = r_out
        xs = trace.inputs_of(layer.id)
        kind = layer.kind

        if kind == "linear":
            rule = rule_for_layer(layer, groups[layer.id], composite)
            r_in = [propagate_linear(rule, xs[0], layer.param("weight"), layer.params.get("bias"), r_out)]
        elif kind == "conv2d":
            rule = rule_for_layer(layer, groups[layer.id], composite)
            r_in = [propagate_conv(rule, layer, xs[0], r_out)]
        elif kind in ("relu", "gelu", "maxpool2d", "avgpool2d"):
            r_in = [propagate_activation(layer, xs[0], r_out)]
        elif kind == "flatten":
            r_in = [np.asarray(r_out, dtype=np.float64).reshape(xs[0].shape)]
        elif kind == "add":
            pair = np.stack(
                [np.asarray(xs[0], dtype=np.float64).ravel(), np.asarray(xs[1], dtype=np.float64).ravel()],
                axis=-1,
            )
            r_pair = propagate_linear(
                group_rule_near(idx), pair, np.ones((1, 2)), None,
                np.asarray(r_out, dtype=np.float64).reshape(-1, 1),
            )
            r_in = [r_pair[:, 0].reshape(xs[0].shape), r_pair[:, 1].reshape(xs[1].shape)]
        elif kind == "layernorm":
            r_in = [propagate_layernorm(layer, xs[0], r_out)]
        elif kind == "softmax":
            r_in = [propagate_softmax(composite.softmax, xs[0], trace.output(layer.id), r_out)]
        elif kind == "attn_scores":
            r_q, r_k = propagate_attn_scores(layer, xs[0], xs[1], trace.output(layer.id), r_out)
            r_in = [r_q, r_k]
        elif kind == "attn_matmul":
            if composite.softmax == SoftmaxHandler.CP_LRP:
                r_v = propagate_matmul_eps(xs[0], xs[1], trace.output(layer.id), r_out)
                r_in = [np.zeros(np.asarray(xs[0]).shape, dtype=np.float64), r_v]
            else:
                r_a, r_v = propagate_matmul_attn(xs[0], xs[1], trace.output(layer.id), r_out)
                r_in = [r_a, r_v]
        else:
            raise ConfigError(f"no propagation handler for layer kind {kind!r}")

        for piece, src in zip(r_in, srcs):
            if not np.isfinite(piece).all():
                raise NonFiniteError(
                    f"non-finite relevance produced at layer {layer.id!r}", where=layer.id
                )
            if src in rel:
                rel[src] = rel[src] + piece
            else:
                rel[src] = piece

    input_rel = rel.get(INPUT_ID)
    if input_rel is None:
        input_rel = np.zeros(graph.input_shape, dtype=np.float64)
    return RelevanceTrace(graph, class_index, initial, layer_relevance, input_rel)
