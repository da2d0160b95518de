"""Component scoring over reference samples, ranking, and pruning sweeps.

The pipeline: draw a reference set, attribute every sample toward its own
label, aggregate per-component relevance, rank ascending, then sweep the
pruning rate and measure top-1 accuracy.  The area under that accuracy
curve (its mean over the rate grid) is the objective the composite search
maximizes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .baselines import IGConfig, integrated_gradients, random_scores
from .errors import ConfigError
from .graph import Component, Graph, PruneMask, apply_mask, enumerate_components
from .lrp import CompositeConfig, attribute
from .runtime import top1_accuracy

METHODS = ("lrp", "ig", "random")


# ---------------------------------------------------------------------------
# Reference sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceSet:
    """Samples attributed toward their own labels when scoring components."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ConfigError("reference samples and labels differ in length")
        if len(self.x) == 0:
            raise ConfigError("reference set must hold at least one sample")

    @property
    def n_ref(self) -> int:
        return len(self.x)

    def by_class(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.y == c) for c in np.unique(self.y)}

    @classmethod
    def draw(cls, x, y, n_ref: int, rng: np.random.Generator) -> "ReferenceSet":
        """Stratified draw: n_ref samples split as evenly as possible by class."""
        x = np.asarray(x)
        y = np.asarray(y)
        if n_ref < 1:
            raise ConfigError("n_ref must be at least 1")
        classes = np.unique(y)
        base, extra = divmod(n_ref, len(classes))
        picks = []
        for i, c in enumerate(classes):
            quota = base + (1 if i < extra else 0)
            pool = np.flatnonzero(y == c)
            if quota > len(pool):
                raise ConfigError(
                    f"insufficient samples of class {int(c)} for requested count "
                    f"(need {quota}, have {len(pool)})"
                )
            if quota:
                picks.append(rng.choice(pool, size=quota, replace=False))
        idx = np.concatenate(picks)
        idx = idx[rng.permutation(len(idx))]
        return cls(x[idx], y[idx])


# ---------------------------------------------------------------------------
# Component scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentScores:
    """One mean-relevance score per component of a single kind."""

    kind: str
    method: str
    magnitude: bool
    components: tuple[Component, ...]
    values: dict[str, float]

    def __post_init__(self):
        if set(self.values) != {c.id for c in self.components}:
            raise ConfigError("scores do not cover the enumerated components")
        bad = [cid for cid, v in self.values.items() if not np.isfinite(v)]
        if bad:
            raise ConfigError(f"non-finite component scores: {bad[:3]}")

    def __getitem__(self, cid: str) -> float:
        return self.values[cid]


def _head_source(graph: Graph, layer_id: str) -> str:
    """The attention-matrix producer feeding an attention matmul layer."""
    return graph.inputs[layer_id][0]


def _aggregate_component(comp: Component, tensor: np.ndarray, head_magnitude: bool) -> float:
    """Reduce one sample's relevance tensor to a scalar for one component."""
    if comp.agg_axes == "map":  # conv filter: sum its output map
        return float(tensor[comp.index].sum())
    if comp.agg_axes == "none":  # plain neuron
        return float(tensor[comp.index])
    if comp.agg_axes == "tokens":  # transformer neuron: sum over tokens
        return float(tensor[:, comp.index].sum())
    if comp.agg_axes == "qk":  # head: sum the (q, k) map
        head_map = tensor[comp.index]
        if head_magnitude:
            return float(np.abs(head_map.sum(axis=-1)).sum())
        return float(head_map.sum())
    raise ConfigError(f"unknown aggregation {comp.agg_axes!r}")


def component_relevance(
    graph: Graph,
    refs: ReferenceSet,
    kind: str,
    *,
    composite: CompositeConfig | None = None,
    method: str = "lrp",
    ig_config: IGConfig | None = None,
    seed: int = 0,
) -> ComponentScores:
    """Mean per-component relevance over the reference set.

    Per sample, a component's relevance map is summed over its free axes
    (conv spatial map, token axis, or head (q, k) map; heads use the
    sum-of-absolute-row-sums form when the composite asks for magnitudes).
    Sample aggregates are averaged with 1/n_ref; under the magnitude flag the
    final scores are absolute values.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown scoring method {method!r}; choose from {METHODS}")
    comps = tuple(enumerate_components(graph, kind))

    if method == "random":
        values = random_scores([c.id for c in comps], seed)
        return ComponentScores(kind, "random", False, comps, values)

    magnitude = bool(composite.magnitude) if composite is not None else False
    totals = dict.fromkeys((c.id for c in comps), 0.0)
    for x_i, y_i in zip(refs.x, refs.y):
        if method == "lrp":
            if composite is None:
                raise ConfigError("lrp scoring needs a composite")
            tr = attribute(graph, x_i, int(y_i), composite)
            tensor_of = tr.layer_relevance.__getitem__
        else:  # ig
            res = integrated_gradients(graph, x_i, int(y_i), ig_config)
            tensor_of = res.latent.__getitem__
        for comp in comps:
            lid = comp.layer_id
            tensor = tensor_of(_head_source(graph, lid) if comp.agg_axes == "qk" else lid)
            totals[comp.id] += _aggregate_component(comp, tensor, magnitude)

    values = {cid: total / refs.n_ref for cid, total in totals.items()}
    if magnitude:
        values = {cid: abs(v) for cid, v in values.items()}
    return ComponentScores(kind, method, magnitude, comps, values)


def rank_components(scores: ComponentScores) -> list[str]:
    """Component ids in ascending score order (ascending |score| under the
    magnitude flag), ties broken by (layer id, index)."""
    def key(comp: Component):
        v = scores.values[comp.id]
        return (abs(v) if scores.magnitude else v, comp.layer_id, comp.index)

    return [c.id for c in sorted(scores.components, key=key)]


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    """Rate grid i/m for i in 0..m-1 over one component kind."""

    kind: str
    steps: int = 20
    iterative: bool = False

    def __post_init__(self):
        if self.steps < 2:
            raise ConfigError(f"a sweep needs at least 2 rates, got steps={self.steps}")

    @property
    def rates(self) -> np.ndarray:
        return np.arange(self.steps) / self.steps


def a_pr(accuracies) -> float:
    """Area under the accuracy-over-rate curve: the plain mean (equal grid)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ConfigError("cannot average an empty accuracy curve")
    return float(acc.mean())


def top_pr(rates, accuracies) -> float:
    """Highest rate keeping at least 95% of the unpruned accuracy."""
    rates = np.asarray(rates, dtype=np.float64)
    acc = np.asarray(accuracies, dtype=np.float64)
    if rates.shape != acc.shape or rates.size == 0 or rates[0] != 0.0:
        raise ConfigError("rate grid must be nonempty and start at 0")
    ok = acc >= 0.95 * acc[0]
    return float(rates[ok].max())


@dataclass(frozen=True)
class SweepCurve:
    """One seed's accuracy-vs-rate curve with its summary scores."""

    rates: np.ndarray
    accuracy: np.ndarray
    a_pr: float
    top_pr: float
    dropped: tuple[tuple[str, ...], ...]  # component ids masked at each rate


def run_sweep(
    graph: Graph,
    scores: ComponentScores,
    cfg: SweepConfig,
    eval_x,
    eval_y,
    *,
    refs: ReferenceSet | None = None,
    composite: CompositeConfig | None = None,
) -> SweepCurve:
    """Mask the lowest-ranked components at each rate and measure accuracy.

    Scoring is one-shot and masks grow cumulatively.  With ``cfg.iterative``
    the remaining components are re-scored on the masked graph after every
    rate, which needs the reference set (and composite for lrp scoring).
    """
    if len(eval_x) == 0:
        raise ConfigError("evaluation set is empty")
    if scores.kind != cfg.kind:
        raise ConfigError(f"scores are for kind {scores.kind!r}, sweep wants {cfg.kind!r}")
    if cfg.iterative and refs is None:
        raise ConfigError("iterative re-scoring needs the reference set")

    p = len(scores.components)
    ranked = rank_components(scores)
    rates = cfg.rates
    accs = np.empty(len(rates))
    dropped_per_rate: list[tuple[str, ...]] = []
    dropped: list[str] = []
    current = graph

    for i, rate in enumerate(rates):
        want = int(np.floor(rate * p))
        if want > len(dropped):
            if cfg.iterative and dropped:
                rescored = component_relevance(
                    current, refs, cfg.kind, composite=composite, method=scores.method
                )
                remaining = [cid for cid in rank_components(rescored) if cid not in set(dropped)]
            else:
                remaining = [cid for cid in ranked if cid not in set(dropped)]
            dropped.extend(remaining[: want - len(dropped)])
            current = apply_mask(graph, PruneMask.dropping(graph, cfg.kind, dropped))
        dropped_per_rate.append(tuple(dropped))
        accs[i] = top1_accuracy(current, eval_x, eval_y)

    return SweepCurve(rates, accs, a_pr(accs), top_pr(rates, accs), tuple(dropped_per_rate))


def _sem(values: np.ndarray, axis=0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis]
    if n < 2:
        return np.full(values.mean(axis=axis).shape, np.nan)
    return values.std(axis=axis, ddof=1) / np.sqrt(n)


@dataclass(frozen=True)
class SweepResult:
    """Seed-aggregated sweep: per-rate accuracy mean and standard error."""

    rates: np.ndarray
    acc_mean: np.ndarray
    acc_sem: np.ndarray
    a_pr_values: np.ndarray  # one per seed
    a_pr_mean: float
    a_pr_sem: float
    top_pr: float  # of the mean curve
    method: str
    composite_id: str
    seed_count: int
    curves: tuple[SweepCurve, ...] = field(repr=False, default=())

    @classmethod
    def from_curves(cls, curves, method: str, composite_id: str) -> "SweepResult":
        curves = tuple(curves)
        if not curves:
            raise ConfigError("no sweep curves to aggregate")
        acc = np.stack([c.accuracy for c in curves])
        a_vals = np.array([c.a_pr for c in curves])
        mean_curve = acc.mean(axis=0)
        return cls(
            rates=curves[0].rates,
            acc_mean=mean_curve,
            acc_sem=_sem(acc),
            a_pr_values=a_vals,
            a_pr_mean=float(a_vals.mean()),
            a_pr_sem=float(_sem(a_vals)),
            top_pr=top_pr(curves[0].rates, mean_curve),
            method=method,
            composite_id=composite_id,
            seed_count=len(curves),
            curves=curves,
        )


def evaluate_pruning(
    graph: Graph,
    pool_x,
    pool_y,
    eval_x,
    eval_y,
    cfg: SweepConfig,
    *,
    composite: CompositeConfig | None = None,
    method: str = "lrp",
    n_ref: int = 10,
    seeds=(0,),
    ig_config: IGConfig | None = None,
) -> SweepResult:
    """Full pipeline: per seed, draw references, score, sweep; then aggregate."""
    curves = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        refs = ReferenceSet.draw(pool_x, pool_y, n_ref, rng)
        scores = component_relevance(
            graph, refs, cfg.kind,
            composite=composite, method=method, ig_config=ig_config, seed=int(seed),
        )
        curves.append(
            run_sweep(graph, scores, cfg, eval_x, eval_y, refs=refs, composite=composite)
        )
    composite_id = composite.composite_id if composite is not None else ""
    return SweepResult.from_curves(curves, method, composite_id)


def ref_count_study(
    graph: Graph,
    pool_x,
    pool_y,
    eval_x,
    eval_y,
    cfg: SweepConfig,
    counts,
    seeds,
    *,
    composite: CompositeConfig | None = None,
    method: str = "lrp",
) -> dict[int, SweepResult]:
    """Sweep stability as the reference count grows: one SweepResult per count."""
    out: dict[int, SweepResult] = {}
    for count in counts:
        out[int(count)] = evaluate_pruning(
            graph, pool_x, pool_y, eval_x, eval_y, cfg,
            composite=composite, method=method, n_ref=int(count), seeds=seeds,
        )
    return out


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

SWEEP_CSV_COLUMNS = ("rate", "acc_mean", "acc_sem", "method", "composite_id", "seed_count")


def sweep_to_csv(result: SweepResult) -> str:
    """Render the per-rate summary as CSV with a fixed column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_CSV_COLUMNS)
    for rate, mean, sem in zip(result.rates, result.acc_mean, result.acc_sem):
        writer.writerow(
            [
                f"{rate:.6g}",
                f"{mean:.6g}",
                f"{sem:.6g}",
                result.method,
                result.composite_id,
                result.seed_count,
            ]
        )
    return buf.getvalue()


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w") as fh:
        fh.write(sweep_to_csv(result))
