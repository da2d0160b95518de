"""Forward evaluation and reverse-mode gradients for layered graphs.

Every operation runs with an explicit leading batch axis; the single-sample
entry points (:func:`forward_trace`, :func:`backward_grad`) wrap and unwrap
that axis around a shared implementation.  Computations preserve the input
dtype, so float32 models evaluated on float64 probes run entirely in float64.
Numerically delicate reductions (softmax, layer norm statistics) always
accumulate in float64 internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import NonFiniteError, ShapeError
from .graph import INPUT_ID, Graph, Layer

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _param(layer: Layer, name: str, dtype) -> np.ndarray:
    return layer.param(name).astype(dtype, copy=False)


def mask_vector(layer: Layer, n: int, dtype):
    """The layer's keep mask as a 0/1 float vector, or None if unmasked."""
    flags = layer.attr("out_mask")
    if flags is None:
        return None
    if len(flags) != n:
        raise ShapeError(f"out_mask of {layer.id!r} has {len(flags)} flags, expected {n}")
    return np.asarray(flags, dtype=dtype)


# ---------------------------------------------------------------------------
# Convolution lowering
# ---------------------------------------------------------------------------


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather conv patches: (B, C, H, W) -> (B, OH, OW, C*kh*kw)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    cols = np.moveaxis(win, 1, 3)  # (B, OH, OW, C, kh, kw)
    return np.ascontiguousarray(cols).reshape(b, oh, ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch values back: the exact adjoint of :func:`im2col`."""
    b, c, h, w = x_shape
    oh, ow = cols.shape[1], cols.shape[2]
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    patches = cols.reshape(b, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += np.moveaxis(
                patches[:, :, :, :, i, j], 3, 1
            )
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out


def pool_cols(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Per-channel pooling windows: (B, C, H, W) -> (B*C, OH, OW, k*k)."""
    b, c, h, w = x.shape
    return im2col(x.reshape(b * c, 1, h, w), kernel, kernel, stride, 0)


def pool_uncols(cols: np.ndarray, x_shape, kernel: int, stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    flat = col2im(cols, (b * c, 1, h, w), kernel, kernel, stride, 0)
    return flat.reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# Per-kind forward ops (batched)
# ---------------------------------------------------------------------------


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(..., T, H*d) -> (..., H, T, d)"""
    t, hd = x.shape[-2], x.shape[-1]
    d = hd // heads
    return x.reshape(x.shape[:-2] + (t, heads, d)).swapaxes(-2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """(..., H, T, d) -> (..., T, H*d)"""
    y = x.swapaxes(-2, -3)
    return np.ascontiguousarray(y).reshape(y.shape[:-2] + (-1,))


def _f_linear(layer, xs, dtype):
    (x,) = xs
    w = _param(layer, "weight", dtype)
    y = x @ w.T
    if "bias" in layer.params:
        y = y + _param(layer, "bias", dtype)
    m = mask_vector(layer, w.shape[0], dtype)
    return y * m if m is not None else y


def _f_conv2d(layer, xs, dtype):
    (x,) = xs
    w = _param(layer, "weight", dtype)
    f, c, kh, kw = w.shape
    stride, padding = layer.attr("stride", 1), layer.attr("padding", 0)
    cols = im2col(x, kh, kw, stride, padding)
    y = cols @ w.reshape(f, -1).T
    if "bias" in layer.params:
        y = y + _param(layer, "bias", dtype)
    y = np.moveaxis(y, 3, 1)  # (B, F, OH, OW)
    m = mask_vector(layer, f, dtype)
    return y * m[:, None, None] if m is not None else np.ascontiguousarray(y)


def _f_relu(layer, xs, dtype):
    return np.maximum(xs[0], 0)


def _f_gelu(layer, xs, dtype):
    x = xs[0]
    return (0.5 * x * (1.0 + erf(x / _SQRT2))).astype(dtype, copy=False)


def _f_maxpool(layer, xs, dtype):
    (x,) = xs
    k = layer.attr("kernel")
    s = layer.attr("stride", k)
    cols = pool_cols(x, k, s)
    b, c = x.shape[:2]
    return cols.max(axis=-1).reshape(b, c, cols.shape[1], cols.shape[2])


def _f_avgpool(layer, xs, dtype):
    (x,) = xs
    k = layer.attr("kernel")
    s = layer.attr("stride", k)
    cols = pool_cols(x, k, s)
    b, c = x.shape[:2]
    mean = cols.mean(axis=-1, dtype=np.float64).astype(dtype, copy=False)
    return mean.reshape(b, c, cols.shape[1], cols.shape[2])


def _f_flatten(layer, xs, dtype):
    x = xs[0]
    return x.reshape(x.shape[0], -1)


def _f_add(layer, xs, dtype):
    return xs[0] + xs[1]


def _layernorm_stats(x: np.ndarray, eps: float):
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc / std  # float64 normalized activations


def _f_layernorm(layer, xs, dtype):
    (x,) = xs
    xhat = _layernorm_stats(x, layer.attr("eps", 1e-5))
    w = layer.param("weight").astype(np.float64, copy=False)
    b = layer.param("bias").astype(np.float64, copy=False) if "bias" in layer.params else 0.0
    return (xhat * w + b).astype(dtype, copy=False)


def softmax_probs(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis, accumulated in float64."""
    x64 = x.astype(np.float64, copy=False)
    e = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _f_softmax(layer, xs, dtype):
    return softmax_probs(xs[0]).astype(dtype, copy=False)


def _f_attn_scores(layer, xs, dtype):
    q, k = xs
    heads = layer.attr("num_heads")
    dk = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    return (qh @ kh.swapaxes(-1, -2)) / np.sqrt(dk).astype(dtype)


def _f_attn_matmul(layer, xs, dtype):
    a, v = xs
    heads = layer.attr("num_heads")
    vh = _split_heads(v, heads)
    oh = a @ vh  # (..., H, Tq, dv)
    m = mask_vector(layer, heads, dtype)
    if m is not None:
        oh = oh * m[:, None, None]
    return _merge_heads(oh)


_FORWARD = {
    "linear": _f_linear,
    "conv2d": _f_conv2d,
    "relu": _f_relu,
    "gelu": _f_gelu,
    "maxpool2d": _f_maxpool,
    "avgpool2d": _f_avgpool,
    "flatten": _f_flatten,
    "add": _f_add,
    "layernorm": _f_layernorm,
    "softmax": _f_softmax,
    "attn_scores": _f_attn_scores,
    "attn_matmul": _f_attn_matmul,
}


# ---------------------------------------------------------------------------
# Per-kind vector-Jacobian products
# ---------------------------------------------------------------------------


def _v_linear(layer, xs, out, d, collect):
    (x,) = xs
    dtype = d.dtype
    w = _param(layer, "weight", dtype)
    m = mask_vector(layer, w.shape[0], dtype)
    if m is not None:
        d = d * m
    grads = None
    if collect:
        d2 = d.reshape(-1, d.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        grads = {"weight": d2.T @ x2}
        if "bias" in layer.params:
            grads["bias"] = d2.sum(axis=0)
    return [d @ w], grads


def _v_conv2d(layer, xs, out, d, collect):
    (x,) = xs
    dtype = d.dtype
    w = _param(layer, "weight", dtype)
    f, c, kh, kw = w.shape
    stride, padding = layer.attr("stride", 1), layer.attr("padding", 0)
    m = mask_vector(layer, f, dtype)
    if m is not None:
        d = d * m[:, None, None]
    d_mat = np.moveaxis(d, 1, 3)  # (B, OH, OW, F)
    d_cols = d_mat @ w.reshape(f, -1)
    grads = None
    if collect:
        cols = im2col(x.astype(dtype, copy=False), kh, kw, stride, padding)
        grads = {"weight": (d_mat.reshape(-1, f).T @ cols.reshape(-1, c * kh * kw)).reshape(w.shape)}
        if "bias" in layer.params:
            grads["bias"] = d_mat.reshape(-1, f).sum(axis=0)
    return [col2im(d_cols, x.shape, kh, kw, stride, padding)], grads


def _v_relu(layer, xs, out, d, collect):
    return [d * (xs[0] > 0)], None


def _v_gelu(layer, xs, out, d, collect):
    x = xs[0].astype(d.dtype, copy=False)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return [d * (cdf + x * pdf)], None


def _v_maxpool(layer, xs, out, d, collect):
    (x,) = xs
    k = layer.attr("kernel")
    s = layer.attr("stride", k)
    cols = pool_cols(x, k, s)
    winners = cols.argmax(axis=-1)  # first max wins on ties
    d_cols = np.zeros(cols.shape, dtype=d.dtype)
    b, c = x.shape[:2]
    d_flat = d.reshape(b * c, d.shape[2], d.shape[3])
    np.put_along_axis(d_cols, winners[..., None], d_flat[..., None], axis=-1)
    return [pool_uncols(d_cols, x.shape, k, s)], None


def _v_avgpool(layer, xs, out, d, collect):
    (x,) = xs
    k = layer.attr("kernel")
    s = layer.attr("stride", k)
    b, c = x.shape[:2]
    oh, ow = d.shape[2], d.shape[3]
    d_cols = np.broadcast_to(
        (d / (k * k)).reshape(b * c, oh, ow, 1), (b * c, oh, ow, k * k)
    ).astype(d.dtype, copy=False)
    return [pool_uncols(d_cols, x.shape, k, s)], None


def _v_flatten(layer, xs, out, d, collect):
    return [d.reshape(xs[0].shape)], None


def _v_add(layer, xs, out, d, collect):
    return [d, d], None


def _v_layernorm(layer, xs, out, d, collect):
    (x,) = xs
    eps = layer.attr("eps", 1e-5)
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / std
    w = layer.param("weight").astype(np.float64, copy=False)
    d64 = d.astype(np.float64, copy=False)
    g = d64 * w
    dx = (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / std
    grads = None
    if collect:
        lead = tuple(range(d.ndim - 1))
        grads = {"weight": (d64 * xhat).sum(axis=lead)}
        if "bias" in layer.params:
            grads["bias"] = d64.sum(axis=lead)
    return [dx.astype(d.dtype, copy=False)], grads


def _v_softmax(layer, xs, out, d, collect):
    s = out.astype(np.float64, copy=False)
    d64 = d.astype(np.float64, copy=False)
    dx = s * (d64 - (d64 * s).sum(axis=-1, keepdims=True))
    return [dx.astype(d.dtype, copy=False)], None


def _v_attn_scores(layer, xs, out, d, collect):
    q, k = xs
    heads = layer.attr("num_heads")
    dk = q.shape[-1] // heads
    scale = 1.0 / np.sqrt(dk)
    qh = _split_heads(q.astype(d.dtype, copy=False), heads)
    kh = _split_heads(k.astype(d.dtype, copy=False), heads)
    dq = _merge_heads(d @ kh) * scale
    dk_ = _merge_heads(d.swapaxes(-1, -2) @ qh) * scale
    return [dq, dk_], None


def _v_attn_matmul(layer, xs, out, d, collect):
    a, v = xs
    heads = layer.attr("num_heads")
    dh = _split_heads(d, heads)  # (..., H, Tq, dv)
    m = mask_vector(layer, heads, d.dtype)
    if m is not None:
        dh = dh * m[:, None, None]
    vh = _split_heads(v.astype(d.dtype, copy=False), heads)
    da = dh @ vh.swapaxes(-1, -2)
    dv = _merge_heads(a.astype(d.dtype, copy=False).swapaxes(-1, -2) @ dh)
    return [da, dv], None


_VJP = {
    "linear": _v_linear,
    "conv2d": _v_conv2d,
    "relu": _v_relu,
    "gelu": _v_gelu,
    "maxpool2d": _v_maxpool,
    "avgpool2d": _v_avgpool,
    "flatten": _v_flatten,
    "add": _v_add,
    "layernorm": _v_layernorm,
    "softmax": _v_softmax,
    "attn_scores": _v_attn_scores,
    "attn_matmul": _v_attn_matmul,
}


# ---------------------------------------------------------------------------
# Traces and entry points
# ---------------------------------------------------------------------------


@dataclass
class ActivationTrace:
    """All intermediate activations of one sample, keyed by layer id."""

    graph: Graph
    x: np.ndarray
    outputs: dict[str, np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[self.graph.layers[-1].id]

    def output(self, layer_id: str) -> np.ndarray:
        if layer_id == INPUT_ID:
            return self.x
        return self.outputs[layer_id]

    def inputs_of(self, layer_id: str) -> list[np.ndarray]:
        return [self.output(src) for src in self.graph.inputs[layer_id]]


@dataclass
class GradientTrace:
    """Gradient of one logit with respect to the input and every activation."""

    input_grad: np.ndarray
    d_out: dict[str, np.ndarray]

    def wrt(self, tensor_id: str) -> np.ndarray:
        if tensor_id == INPUT_ID:
            return self.input_grad
        return self.d_out[tensor_id]


def _run_forward(graph: Graph, xb: np.ndarray, check: bool = True) -> dict[str, np.ndarray]:
    tensors = {INPUT_ID: xb}
    dtype = xb.dtype
    for layer in graph.layers:
        xs = [tensors[src] for src in graph.inputs[layer.id]]
        out = _FORWARD[layer.kind](layer, xs, dtype)
        if check and not np.isfinite(out).all():
            raise NonFiniteError(
                f"non-finite values in forward output of layer {layer.id!r}", where=layer.id
            )
        tensors[layer.id] = out
    return tensors


def _check_input(graph: Graph, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    want = graph.input_shape
    got = x.shape[1:] if batched else x.shape
    if got != want or (batched and x.ndim != len(want) + 1):
        raise ShapeError(f"input shape {x.shape} does not match model input {want}")
    return x


def forward_trace(graph: Graph, x: np.ndarray) -> ActivationTrace:
    """Run one sample and keep every layer output for later propagation."""
    x = _check_input(graph, x, batched=False)
    tensors = _run_forward(graph, x[None])
    outputs = {layer.id: tensors[layer.id][0] for layer in graph.layers}
    return ActivationTrace(graph, x, outputs)


def forward_logits(graph: Graph, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for a batch of samples, evaluated in chunks."""
    x = _check_input(graph, x, batched=True)
    last = graph.layers[-1].id
    chunks = [
        _run_forward(graph, x[i : i + batch_size])[last] for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def top1_accuracy(graph: Graph, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of samples whose highest logit matches the label."""
    logits = forward_logits(graph, x, batch_size=batch_size)
    return float((logits.argmax(axis=1) == np.asarray(y)).mean())


def _sweep(graph: Graph, tensors: dict, seed: np.ndarray, collect_params: bool = False):
    """Reverse pass from a logit-space seed vector through the whole graph."""
    d: dict[str, np.ndarray] = {graph.layers[-1].id: seed}
    param_grads: dict[str, dict[str, np.ndarray]] = {}
    for layer in reversed(graph.layers):
        d_out = d.get(layer.id)
        if d_out is None:
            continue
        xs = [tensors[src] for src in graph.inputs[layer.id]]
        d_xs, grads = _VJP[layer.kind](layer, xs, tensors[layer.id], d_out, collect_params)
        if grads:
            param_grads[layer.id] = grads
        for src, dx in zip(graph.inputs[layer.id], d_xs):
            if src in d:
                d[src] = d[src] + dx
            else:
                d[src] = dx
    return d, param_grads


def backward_grad(graph: Graph, trace: ActivationTrace, class_index: int) -> GradientTrace:
    """Gradient of logit ``class_index`` for the traced sample (float64)."""
    logits = trace.logits
    if not 0 <= class_index < logits.shape[0]:
        raise ShapeError(f"class index {class_index} outside {logits.shape[0]} logits")
    seed = np.zeros((1, logits.shape[0]), dtype=np.float64)
    seed[0, class_index] = 1.0
    tensors = {INPUT_ID: trace.x[None]}
    tensors.update({k: v[None] for k, v in trace.outputs.items()})
    d, _ = _sweep(graph, tensors, seed)
    return GradientTrace(
        input_grad=d[INPUT_ID][0],
        d_out={k: v[0] for k, v in d.items() if k != INPUT_ID},
    )


def parameter_gradients(graph: Graph, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy loss, accuracy, and parameter gradients on a batch."""
    x = _check_input(graph, x, batched=True)
    y = np.asarray(y, dtype=np.int64)
    tensors = _run_forward(graph, x)
    logits = tensors[graph.layers[-1].id]
    probs = softmax_probs(logits)
    n = len(x)
    picked = np.clip(probs[np.arange(n), y], 1e-12, None)
    loss = float(-np.log(picked).mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    d_logits = probs.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    _, grads = _sweep(graph, tensors, d_logits.astype(logits.dtype), collect_params=True)
    return loss, acc, grads
