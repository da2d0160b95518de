"""Non-relevance attribution baselines: integrated gradients and random scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import Graph
from .runtime import backward_grad, forward_trace

IG_STEPS_DEFAULT = 20


@dataclass(frozen=True)
class IGConfig:
    """Path-integral settings: interpolation steps and the baseline input."""

    steps: int = IG_STEPS_DEFAULT
    baseline: np.ndarray | None = None  # defaults to all-zeros

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"integrated gradients needs steps >= 1, got {self.steps}")


@dataclass
class IGAttribution:
    """Input attribution plus latent attributions of every layer output."""

    class_index: int
    input_attribution: np.ndarray
    latent: dict[str, np.ndarray]
    completeness_gap: float  # |sum(input attribution) - (f(x) - f(x'))|


def integrated_gradients(
    graph: Graph, x, class_index: int, cfg: IGConfig | None = None
) -> IGAttribution:
    """Right-Riemann path integral of gradients from the baseline to ``x``.

    The input attribution is ``(x - x') * mean_k grad(x' + k/m (x - x'))``
    for k = 1..m.  Latent attributions integrate each layer's activation
    deltas against the logit gradient at that layer along the same path,
    which reduces to the input formula at the input layer.
    """
    cfg = cfg or IGConfig()
    x = np.asarray(x, dtype=np.float64)
    baseline = (
        np.zeros_like(x) if cfg.baseline is None else np.asarray(cfg.baseline, dtype=np.float64)
    )
    if baseline.shape != x.shape:
        raise ShapeError(f"baseline shape {baseline.shape} does not match input {x.shape}")

    m = cfg.steps
    delta = x - baseline
    prev = forward_trace(graph, baseline)
    f_base = float(prev.logits[class_index])
    layer_ids = [l.id for l in graph.layers]

    grad_sum = np.zeros_like(x)
    latent = {lid: np.zeros(graph.output_shape(lid), dtype=np.float64) for lid in layer_ids}
    for k in range(1, m + 1):
        point = baseline + (k / m) * delta
        trace = forward_trace(graph, point)
        grads = backward_grad(graph, trace, class_index)
        grad_sum += grads.input_grad
        for lid in layer_ids:
            step = trace.output(lid).astype(np.float64) - prev.output(lid).astype(np.float64)
            latent[lid] += step * grads.wrt(lid)
        prev = trace

    input_attr = delta * grad_sum / m
    f_x = float(prev.logits[class_index])
    gap = abs(float(input_attr.sum()) - (f_x - f_base))
    return IGAttribution(class_index, input_attr, latent, gap)


def random_scores(component_ids, seed: int) -> dict[str, float]:
    """I.i.d. uniform scores per component; deterministic for a given seed."""
    ids = list(component_ids)
    if not ids:
        raise ConfigError("random_scores needs at least one component")
    rng = np.random.default_rng(seed)
    values = rng.uniform(size=len(ids))
    return {cid: float(v) for cid, v in zip(ids, values)}
