"""Model-behavior reports: heatmap drift under pruning, perturbation
faithfulness curves, per-layer relevance flow tables, and the summary
statistics used across them.

Everything here emits data (dataclasses and CSV strings), not figures.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .formats import write_dataset_file
from .graph import Graph, PruneMask, apply_mask
from .lrp import CompositeConfig, attribute
from .pruning import ComponentScores, ReferenceSet, component_relevance, rank_components
from .runtime import forward_trace, softmax_probs

HEATMAP_DRIFT_COLUMNS = ("rate", "similarity", "confidence")
RELEVANCE_FLOW_COLUMNS = ("layer", "count", "mean_abs", "max_abs")


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def curve_stats(curves) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and standard error of a stack of per-seed curves.

    SEM uses the sample standard deviation (ddof=1) over sqrt(n); with a
    single curve it is NaN at every point.
    """
    curves = np.asarray(curves, dtype=np.float64)
    if curves.ndim != 2:
        raise ShapeError(f"expected a (seeds, points) stack, got shape {curves.shape}")
    mean = curves.mean(axis=0)
    n = curves.shape[0]
    if n < 2:
        return mean, np.full_like(mean, np.nan)
    return mean, curves.std(axis=0, ddof=1) / math.sqrt(n)


def pearson(x, y) -> float | None:
    """Product-moment correlation; None when either series has no variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"series shapes {x.shape} and {y.shape} do not match")
    if len(x) < 3:
        raise ConfigError("Pearson correlation needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    denom_sq = float((dx @ dx) * (dy @ dy))
    if denom_sq == 0.0:
        return None
    return float((dx @ dy) / math.sqrt(denom_sq))


def cosine_similarity(a, b) -> float | None:
    """Cosine of two flattened tensors; None if either has zero norm.

    Identical inputs short-circuit to exactly 1.0 so that the unpruned
    reference point of a drift series is 1.0 by construction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"heatmap shapes {a.shape} and {b.shape} do not match")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Heatmap drift under pruning
# ---------------------------------------------------------------------------


def channel_heatmap(relevance: np.ndarray) -> np.ndarray:
    """Input relevance reduced to a display heatmap.

    Image-like tensors (rank >= 3) are summed over the leading channel axis;
    token grids (rank 2) over their trailing feature axis; vectors pass
    through unchanged.
    """
    relevance = np.asarray(relevance)
    if relevance.ndim >= 3:
        return relevance.sum(axis=0)
    if relevance.ndim == 2:
        return relevance.sum(axis=-1)
    return relevance


@dataclass(frozen=True)
class HeatmapSeries:
    """Heatmaps of one (input, class) pair across pruning rates, with cosine
    similarity to the unpruned heatmap and model confidence per rate."""

    rates: tuple[float, ...]
    class_index: int
    heatmaps: tuple[np.ndarray, ...]
    similarity: tuple[float | None, ...]
    confidence: tuple[float, ...]

    def __post_init__(self):
        n = len(self.rates)
        if not (len(self.heatmaps) == len(self.similarity) == len(self.confidence) == n):
            raise ShapeError("series fields must have one entry per rate")
        for sim in self.similarity:
            if sim is not None and not -1.0 <= sim <= 1.0:
                raise ConfigError(f"cosine similarity {sim} outside [-1, 1]")

    @property
    def confidence_correlation(self) -> float | None:
        """Pearson r between similarity and confidence over rates with a
        defined similarity; None when degenerate."""
        pairs = [(s, c) for s, c in zip(self.similarity, self.confidence) if s is not None]
        if len(pairs) < 3:
            return None
        sims, confs = zip(*pairs)
        return pearson(sims, confs)


def heatmap_drift(
    graph: Graph,
    scores: ComponentScores,
    rates,
    x: np.ndarray,
    class_index: int,
    composite: CompositeConfig,
) -> HeatmapSeries:
    """Explain one input at growing pruning rates and track heatmap change.

    At each rate the lowest-ranked ``floor(rate * p)`` components are masked
    (same schedule as the pruning sweep), the input heatmap is recomputed
    with ``composite``, and its cosine similarity to the rate-0 heatmap plus
    the softmax confidence of ``class_index`` are recorded.
    """
    rates = [float(r) for r in rates]
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ConfigError("pruning rates must lie in [0, 1]")
    ranked = rank_components(scores)
    p = len(ranked)

    heatmaps, sims, confs = [], [], []
    reference = None
    for rate in rates:
        dropped = ranked[: int(np.floor(rate * p))]
        masked = apply_mask(graph, PruneMask.dropping(graph, scores.kind, dropped))
        trace = attribute(masked, x, class_index, composite)
        heat = channel_heatmap(trace.input_relevance)
        conf = softmax_probs(forward_trace(masked, x).logits)[class_index]
        if reference is None:
            reference = heat
        heatmaps.append(heat)
        sims.append(cosine_similarity(heat, reference))
        confs.append(float(conf))
    return HeatmapSeries(tuple(rates), int(class_index), tuple(heatmaps),
                         tuple(sims), tuple(confs))


def drift_to_csv(series: HeatmapSeries) -> str:
    """Drift series as CSV; missing similarities render as empty cells."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEATMAP_DRIFT_COLUMNS)
    for rate, sim, conf in zip(series.rates, series.similarity, series.confidence):
        writer.writerow([f"{rate:.6g}", "" if sim is None else f"{sim:.6g}", f"{conf:.6g}"])
    return buf.getvalue()


def write_drift_csv(series: HeatmapSeries, path) -> None:
    with open(path, "w") as fh:
        fh.write(drift_to_csv(series))


def dump_heatmaps(series: HeatmapSeries, path) -> None:
    """Raw heatmap stack as a dataset file (labels = pruning rate in %)."""
    stack = np.stack(series.heatmaps).astype(np.float32)
    labels = np.array([int(round(r * 100)) for r in series.rates], dtype=np.int64)
    write_dataset_file(stack, labels, path)


# ---------------------------------------------------------------------------
# Perturbation faithfulness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationCurve:
    """Confidence as the most-relevant input entries are replaced."""

    fractions: np.ndarray
    confidence: np.ndarray
    area: float


def perturbation_curve(
    graph: Graph,
    heatmap: np.ndarray,
    x: np.ndarray,
    class_index: int,
    steps: int = 100,
    baseline=None,
) -> PerturbationCurve:
    """Replace input entries in descending heatmap order, tracking confidence.

    The curve has ``steps + 1`` points at fractions i/steps; fraction 0 is
    the clean input and fraction 1 the fully-baselined one.  ``baseline``
    may be a scalar or an array broadcastable to the input (default zeros);
    reports built on datasets pass the per-channel dataset mean.  The area
    is the trapezoidal integral over the fraction axis: lower means the
    heatmap found the evidence earlier.
    """
    steps = int(steps)
    if steps < 1:
        raise ConfigError("perturbation needs at least 1 step")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.shape != x.shape:
        raise ShapeError(f"heatmap shape {heatmap.shape} does not match input {x.shape}")
    base = np.zeros_like(x) if baseline is None else np.broadcast_to(
        np.asarray(baseline, dtype=x.dtype), x.shape)

    # Descending relevance; equal entries resolve by flat position.
    order = np.argsort(-heatmap.ravel(), kind="stable")
    n = order.size
    flat_x = x.ravel().copy()
    flat_base = base.ravel()

    fractions = np.arange(steps + 1) / steps
    confidence = np.empty(steps + 1)
    replaced = 0
    for i, frac in enumerate(fractions):
        want = int(np.floor(frac * n))
        if want > replaced:
            sel = order[replaced:want]
            flat_x[sel] = flat_base[sel]
            replaced = want
        logits = forward_trace(graph, flat_x.reshape(x.shape)).logits
        confidence[i] = softmax_probs(logits)[class_index]
    area = float(np.trapezoid(confidence, fractions))
    return PerturbationCurve(fractions, confidence, area)


# ---------------------------------------------------------------------------
# Relevance flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowRow:
    """Magnitude summary of one layer's component relevance."""

    layer_id: str
    count: int
    mean_abs: float
    max_abs: float


def flow_from_scores(graph: Graph, scores: ComponentScores, components=None) -> tuple[FlowRow, ...]:
    """Per-layer count/mean/max of |score|, rows in graph layer order.

    ``components`` optionally restricts the table to a subset of component
    ids (e.g. only planted-irrelevant ones).
    """
    wanted = None if components is None else set(components)
    position = {layer.id: i for i, layer in enumerate(graph.layers)}
    by_layer: dict[str, list[float]] = {}
    for comp in scores.components:
        if wanted is not None and comp.id not in wanted:
            continue
        by_layer.setdefault(comp.layer_id, []).append(abs(scores.values[comp.id]))
    rows = []
    for layer_id in sorted(by_layer, key=position.__getitem__):
        values = by_layer[layer_id]
        rows.append(FlowRow(layer_id, len(values), float(np.mean(values)), float(np.max(values))))
    return tuple(rows)


def relevance_flow(
    graph: Graph,
    refs: ReferenceSet,
    kind: str,
    composite: CompositeConfig | None = None,
    *,
    method: str = "lrp",
    components=None,
) -> tuple[FlowRow, ...]:
    """Score components on the reference set, then summarize per layer."""
    scores = component_relevance(graph, refs, kind, composite=composite, method=method)
    return flow_from_scores(graph, scores, components)


def flow_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RELEVANCE_FLOW_COLUMNS)
    for row in rows:
        writer.writerow([row.layer_id, row.count, f"{row.mean_abs:.6g}", f"{row.max_abs:.6g}"])
    return buf.getvalue()


def write_flow_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(flow_to_csv(rows))
