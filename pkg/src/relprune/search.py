"""Composite hyperparameter search: maximize the area under the
pruning-rate/accuracy curve over a finite grid of composites.

Three entry points share one record format: ``grid_search`` sweeps the whole
space, ``bayes_search`` runs Bayesian optimization with a Gaussian-process
surrogate over one-hot encoded composites, and ``hybrid_search`` chains the
two, re-gridding only the per-dimension choices that survive in the top
records.  Every search is deterministic given (space, seed, evaluator) and
can resume from a JSON-lines record log.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .errors import ConfigError, FormatError, SearchError
from .lrp import (
    CompositeConfig,
    Rule,
    SoftmaxHandler,
    parse_rule,
    parse_softmax_handler,
)
from .pruning import SweepConfig, evaluate_pruning

DEFAULT_RULES = (
    Rule("epsilon"),
    Rule("alpha_beta", alpha=2.0, beta=-1.0),
    Rule("z_plus"),
    Rule("gamma"),
)
EI_XI = 0.01
GP_JITTER = 1e-8
GP_JITTER_MAX = 1e-2


# ---------------------------------------------------------------------------
# Search space
# ---------------------------------------------------------------------------


def _as_rules(values) -> tuple[Rule, ...]:
    return tuple(v if isinstance(v, Rule) else parse_rule(v) for v in values)


def _as_handlers(values) -> tuple[SoftmaxHandler | None, ...]:
    out = []
    for v in values:
        if v is None or isinstance(v, SoftmaxHandler):
            out.append(v)
        else:
            out.append(parse_softmax_handler(v))
    return tuple(out)


@dataclass(frozen=True)
class SearchSpace:
    """Finite composite grid: rule choices per depth group, softmax handler
    choices, and the magnitude-flag domain.

    Configurations are ordered lexicographically by dimension (LLL, MLL,
    HLL, FCL, softmax, magnitude); each categorical choice encodes as a
    one-hot block for the surrogate model.
    """

    rules_lll: tuple[Rule, ...] = DEFAULT_RULES
    rules_mll: tuple[Rule, ...] = DEFAULT_RULES
    rules_hll: tuple[Rule, ...] = DEFAULT_RULES
    rules_fcl: tuple[Rule, ...] = DEFAULT_RULES
    softmax: tuple[SoftmaxHandler | None, ...] = (None,)
    magnitude: tuple[bool, ...] = (False, True)

    def __post_init__(self):
        object.__setattr__(self, "rules_lll", _as_rules(self.rules_lll))
        object.__setattr__(self, "rules_mll", _as_rules(self.rules_mll))
        object.__setattr__(self, "rules_hll", _as_rules(self.rules_hll))
        object.__setattr__(self, "rules_fcl", _as_rules(self.rules_fcl))
        object.__setattr__(self, "softmax", _as_handlers(self.softmax))
        object.__setattr__(self, "magnitude", tuple(bool(m) for m in self.magnitude))
        for name, choices in self.dimensions():
            if not choices:
                raise ConfigError(f"search dimension {name!r} is empty")
            if len(set(choices)) != len(choices):
                raise ConfigError(f"search dimension {name!r} has duplicate choices")

    def dimensions(self) -> tuple[tuple[str, tuple], ...]:
        return (
            ("LLL", self.rules_lll),
            ("MLL", self.rules_mll),
            ("HLL", self.rules_hll),
            ("FCL", self.rules_fcl),
            ("softmax", self.softmax),
            ("magnitude", self.magnitude),
        )

    @property
    def size(self) -> int:
        return math.prod(len(c) for _, c in self.dimensions())

    @property
    def encoding_width(self) -> int:
        return sum(len(c) for _, c in self.dimensions())

    def config_at(self, index: int) -> CompositeConfig:
        if not 0 <= index < self.size:
            raise ConfigError(f"config index {index} outside space of size {self.size}")
        picked = []
        rem = index
        for _, choices in reversed(self.dimensions()):
            rem, j = divmod(rem, len(choices))
            picked.append(choices[j])
        mag, sm, fcl, hll, mll, lll = picked
        return CompositeConfig(lll, mll, hll, fcl, sm, mag)

    def configs(self) -> Iterator[CompositeConfig]:
        for i in range(self.size):
            yield self.config_at(i)

    def _choice_indices(self, composite: CompositeConfig) -> tuple[int, ...]:
        if composite.overrides:
            raise ConfigError("composite with overrides lies outside the search space")
        values = (
            composite.rule_lll, composite.rule_mll, composite.rule_hll,
            composite.rule_fcl, composite.softmax, composite.magnitude,
        )
        picked = []
        for (name, choices), value in zip(self.dimensions(), values):
            try:
                picked.append(choices.index(value))
            except ValueError:
                raise ConfigError(
                    f"composite {composite.composite_id!r} outside space: "
                    f"dimension {name!r} has no such choice"
                ) from None
        return tuple(picked)

    def index_of(self, composite: CompositeConfig) -> int:
        index = 0
        for (_, choices), j in zip(self.dimensions(), self._choice_indices(composite)):
            index = index * len(choices) + j
        return index

    def encode(self, composite: CompositeConfig) -> np.ndarray:
        """Concatenated one-hot blocks, one block per dimension."""
        blocks = []
        for (_, choices), j in zip(self.dimensions(), self._choice_indices(composite)):
            block = np.zeros(len(choices))
            block[j] = 1.0
            blocks.append(block)
        return np.concatenate(blocks)

    @classmethod
    def cnn_default(cls) -> "SearchSpace":
        return cls()

    @classmethod
    def vit_default(cls) -> "SearchSpace":
        return cls(softmax=tuple(SoftmaxHandler))

    def to_json(self) -> dict:
        return {
            "LLL": [r.name for r in self.rules_lll],
            "MLL": [r.name for r in self.rules_mll],
            "HLL": [r.name for r in self.rules_hll],
            "FCL": [r.name for r in self.rules_fcl],
            "softmax": [s.value if s else None for s in self.softmax],
            "magnitude": list(self.magnitude),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SearchSpace":
        known = {"LLL", "MLL", "HLL", "FCL", "softmax", "magnitude"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown search space keys {unknown}")
        kwargs = {}
        for key, fld in (("LLL", "rules_lll"), ("MLL", "rules_mll"),
                         ("HLL", "rules_hll"), ("FCL", "rules_fcl")):
            if key in data:
                kwargs[fld] = tuple(parse_rule(n) for n in data[key])
        if "softmax" in data:
            kwargs["softmax"] = _as_handlers(data["softmax"])
        if "magnitude" in data:
            kwargs["magnitude"] = tuple(bool(m) for m in data["magnitude"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Records and the resumable log
# ---------------------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class SearchRecord:
    """One evaluated composite: its objective value or the failure reason."""

    composite: CompositeConfig
    a_pr: float | None
    seeds: tuple[int, ...] = ()
    timestamp: str = ""
    error: str | None = None

    def __post_init__(self):
        if (self.a_pr is None) == (self.error is None):
            raise ConfigError("record needs exactly one of a_pr or error")
        if self.a_pr is not None and not 0.0 <= self.a_pr <= 1.0:
            raise ConfigError(f"A_PR {self.a_pr} outside [0, 1]")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        out = {
            "composite": self.composite.to_json(),
            "composite_id": self.composite.composite_id,
            "a_pr": self.a_pr,
            "seeds": list(self.seeds),
            "timestamp": self.timestamp,
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "SearchRecord":
        return cls(
            composite=CompositeConfig.from_json(data["composite"]),
            a_pr=data.get("a_pr"),
            seeds=tuple(data.get("seeds", ())),
            timestamp=str(data.get("timestamp", "")),
            error=data.get("error"),
        )


class SearchLog:
    """Append-only JSON-lines log of SearchRecords, used to resume a search."""

    def __init__(self, path):
        self.path = Path(path)

    def load(self) -> list[SearchRecord]:
        if not self.path.exists():
            return []
        records = []
        for i, line in enumerate(self.path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(SearchRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ConfigError) as err:
                raise FormatError(f"bad search log line {i} in {self.path}: {err}") from err
        return records

    def append(self, record: SearchRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_json()) + "\n")


def _prior_records(log: SearchLog | None, space: SearchSpace) -> dict[str, SearchRecord]:
    """First log record per composite id, restricted to configs in the space."""
    if log is None:
        return {}
    ids = {c.composite_id for c in space.configs()}
    out: dict[str, SearchRecord] = {}
    for rec in log.load():
        cid = rec.composite.composite_id
        if cid in ids and cid not in out:
            out[cid] = rec
    return out


# ---------------------------------------------------------------------------
# Gaussian-process surrogate
# ---------------------------------------------------------------------------


def _rbf(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Unit length-scale on one-hot blocks: exp(-half squared distance) is a
    # Hamming-distance kernel on the underlying categorical choices.
    return np.exp(-0.5 * cdist(np.atleast_2d(a), np.atleast_2d(b), "sqeuclidean"))


def _factor_with_jitter(k: np.ndarray, jitter: float):
    """Cholesky of k + jitter*I, escalating jitter tenfold up to a cap."""
    while jitter <= GP_JITTER_MAX:
        try:
            return cho_factor(k + jitter * np.eye(len(k)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SearchError(f"kernel matrix singular even with jitter {GP_JITTER_MAX:g}")


@dataclass(frozen=True)
class GaussianProcess:
    """RBF-kernel regressor over one-hot composite encodings."""

    x: np.ndarray
    y_mean: float
    alpha: np.ndarray
    factor: tuple
    jitter: float

    @classmethod
    def fit(cls, x, y, jitter: float = GP_JITTER) -> "GaussianProcess":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or len(x) != len(y):
            raise ConfigError("GP expects a 2-d design matrix and matching targets")
        if len(x) < 2:
            raise ConfigError("GP needs at least two observations")
        factor, used = _factor_with_jitter(_rbf(x, x), jitter)
        y_mean = float(y.mean())
        alpha = cho_solve(factor, y - y_mean)
        return cls(x, y_mean, alpha, factor, used)

    def predict(self, c) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each row of ``c``."""
        ks = _rbf(np.asarray(c, dtype=np.float64), self.x)
        mean = self.y_mean + ks @ self.alpha
        v = cho_solve(self.factor, ks.T)
        var = np.clip(1.0 - np.sum(ks * v.T, axis=1), 0.0, None)
        return mean, var


def expected_improvement(mean, var, best: float, xi: float = EI_XI) -> np.ndarray:
    """EI acquisition over candidate posteriors, exploration constant xi."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.clip(np.asarray(var, dtype=np.float64), 0.0, None))
    gain = mean - best - xi
    ei = np.maximum(gain, 0.0)
    open_ = sd > 0.0
    z = gain[open_] / sd[open_]
    ei[open_] = gain[open_] * norm.cdf(z) + sd[open_] * norm.pdf(z)
    return ei


# ---------------------------------------------------------------------------
# Evaluation plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepEvaluator:
    """Deterministic A_PR objective over a fixed graph, data, and seed set."""

    graph: object
    pool_x: np.ndarray
    pool_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    cfg: SweepConfig
    method: str = "lrp"
    n_ref: int = 10
    seeds: tuple[int, ...] = (0,)

    def __call__(self, composite: CompositeConfig) -> float:
        result = evaluate_pruning(
            self.graph, self.pool_x, self.pool_y, self.eval_x, self.eval_y,
            self.cfg, composite=composite, method=self.method,
            n_ref=self.n_ref, seeds=self.seeds,
        )
        return float(result.a_pr_mean)


def _evaluator_seeds(evaluator) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in getattr(evaluator, "seeds", ()))
    except TypeError:
        return ()


def _evaluate_one(composite, evaluator, seeds) -> SearchRecord:
    try:
        value = float(evaluator(composite))
    except Exception as err:  # contract: record the failure, skip the config
        return SearchRecord(composite, None, seeds, _utc_now(), f"{type(err).__name__}: {err}")
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        return SearchRecord(composite, None, seeds, _utc_now(), f"objective value {value!r} outside [0, 1]")
    return SearchRecord(composite, value, seeds, _utc_now(), None)


def _evaluate_many(composites, evaluator, seeds, jobs: int) -> list[SearchRecord]:
    if jobs <= 1 or len(composites) <= 1:
        return [_evaluate_one(c, evaluator, seeds) for c in composites]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda c: _evaluate_one(c, evaluator, seeds), composites))


@dataclass(frozen=True)
class SearchResult:
    """Best composite plus the full evaluation trace (and, for the Bayesian
    phases, the reduced space handed to the follow-up grid)."""

    best: SearchRecord
    records: tuple[SearchRecord, ...]
    space: SearchSpace
    reduced_space: SearchSpace | None = None
    reduction: float | None = None

    @property
    def n_evaluations(self) -> int:
        return len(self.records)

    @property
    def failures(self) -> tuple[SearchRecord, ...]:
        return tuple(r for r in self.records if not r.ok)


def _argmax_record(records, space: SearchSpace) -> SearchRecord:
    """Highest A_PR; exact ties broken by lexicographic position in the space."""
    winners = [r for r in records if r.ok]
    if not winners:
        raise SearchError(f"all {len(records)} evaluations failed")
    return min(winners, key=lambda r: (-r.a_pr, space.index_of(r.composite)))


# ---------------------------------------------------------------------------
# Search strategies
# ---------------------------------------------------------------------------


def grid_search(space: SearchSpace, evaluator, *, log: SearchLog | None = None,
                jobs: int = 1) -> SearchResult:
    """Evaluate every configuration once, in lexicographic order."""
    prior = _prior_records(log, space)
    ordered = list(space.configs())
    todo = [c for c in ordered if c.composite_id not in prior]
    fresh = {r.composite.composite_id: r
             for r in _evaluate_many(todo, evaluator, _evaluator_seeds(evaluator), jobs)}
    if log is not None:
        for c in ordered:
            if c.composite_id in fresh:
                log.append(fresh[c.composite_id])
    records = [prior.get(c.composite_id) or fresh[c.composite_id] for c in ordered]
    return SearchResult(_argmax_record(records, space), tuple(records), space)


def _reduce_space(space: SearchSpace, records, top_k: int) -> SearchSpace:
    """Keep, per dimension, only the choices present in the top-k records."""
    if top_k >= space.size:
        return space
    winners = sorted(
        (r for r in records if r.ok),
        key=lambda r: (-r.a_pr, space.index_of(r.composite)),
    )[:top_k]
    keep = [set() for _ in space.dimensions()]
    for rec in winners:
        for d, j in enumerate(space._choice_indices(rec.composite)):
            keep[d].add(j)
    dims = [tuple(choices[j] for j in range(len(choices)) if j in keep[d])
            for d, (_, choices) in enumerate(space.dimensions())]
    return SearchSpace(*dims)


def bayes_search(space: SearchSpace, evaluator, *, budget: int | None = None,
                 init: int = 10, top_k: int = 5, seed: int = 0,
                 log: SearchLog | None = None) -> SearchResult:
    """Bayesian optimization over the one-hot encoded space.

    Seeds with ``init`` random configurations, then repeatedly fits the GP
    surrogate to all successful observations and evaluates the unvisited
    configuration with the highest expected improvement (ties broken
    lexicographically).  Returns the trace plus the reduced space spanned by
    the ``top_k`` best records.
    """
    size = space.size
    init = int(init)
    if init < 2:
        raise ConfigError("init count must be at least 2")
    if budget is None:
        budget = max(init, math.ceil(0.25 * size))
    budget = int(budget)
    if budget < init:
        raise ConfigError(f"budget {budget} below init count {init}")
    budget = min(budget, size)  # exhausting the space degenerates to grid search

    seeds_meta = _evaluator_seeds(evaluator)
    prior = _prior_records(log, space)
    encodings = np.stack([space.encode(c) for c in space.configs()])
    ids = [c.composite_id for c in space.configs()]

    records: list[SearchRecord] = []
    done: set[str] = set()

    def admit(index: int) -> None:
        cid = ids[index]
        rec = prior.get(cid)
        if rec is None:
            rec = _evaluate_one(space.config_at(index), evaluator, seeds_meta)
            if log is not None:
                log.append(rec)
        records.append(rec)
        done.add(cid)

    # Resumed records count toward the budget in their original order.
    for cid, rec in prior.items():
        if len(records) >= budget:
            break
        records.append(rec)
        done.add(cid)

    explore = iter(np.random.default_rng(seed).permutation(size))

    def next_unvisited() -> int | None:
        for index in explore:
            if ids[index] not in done:
                return int(index)
        return None

    while len(records) < budget and len(records) < size:
        observed = [(space.index_of(r.composite), r.a_pr) for r in records if r.ok]
        if len(records) < init or len(observed) < 2:
            index = next_unvisited()
        else:
            obs_idx = np.array([i for i, _ in observed])
            y = np.array([v for _, v in observed])
            gp = GaussianProcess.fit(encodings[obs_idx], y)
            candidates = np.array([i for i in range(size) if ids[i] not in done])
            mean, var = gp.predict(encodings[candidates])
            ei = expected_improvement(mean, var, float(y.max()))
            index = int(candidates[np.argmax(ei)])
        if index is None:
            break
        admit(index)

    best = _argmax_record(records, space)
    reduced = _reduce_space(space, records, int(top_k))
    return SearchResult(best, tuple(records), space, reduced,
                        1.0 - reduced.size / size)


def hybrid_search(space: SearchSpace, evaluator, *, budget: int | None = None,
                  init: int = 10, top_k: int = 5, seed: int = 0,
                  log: SearchLog | None = None, jobs: int = 1) -> SearchResult:
    """Bayesian phase, then an exhaustive grid over the reduced space.

    Configurations already evaluated in the Bayesian phase are not re-run;
    the best record is the argmax over both phases combined.
    """
    bo = bayes_search(space, evaluator, budget=budget, init=init, top_k=top_k,
                      seed=seed, log=log)
    done = {r.composite.composite_id for r in bo.records}
    prior = _prior_records(log, bo.reduced_space)
    remaining = [c for c in bo.reduced_space.configs() if c.composite_id not in done]
    todo = [c for c in remaining if c.composite_id not in prior]
    fresh = {r.composite.composite_id: r
             for r in _evaluate_many(todo, evaluator, _evaluator_seeds(evaluator), jobs)}
    if log is not None:
        for c in todo:
            log.append(fresh[c.composite_id])
    phase2 = [prior.get(c.composite_id) or fresh[c.composite_id] for c in remaining]
    records = bo.records + tuple(phase2)
    return SearchResult(_argmax_record(records, space), records, space,
                        bo.reduced_space, bo.reduction)
