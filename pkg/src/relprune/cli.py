"""Command-line harness: prune sweeps, composite search, fixtures, and reports.

Subcommands
-----------
prune    score components on reference draws, sweep pruning rates, write CSV
search   hybrid composite search maximizing mean accuracy over the rate grid
fixture  generate a desk-scale model + dataset bundle
report   aggregate a finished run into reference-count, flow, and drift CSVs

Runs are driven by a JSON config file, command-line flags, or both (flags
win).  Reproducibility: every per-seed RNG stream is keyed by the seed value
itself, so seed lists can be reordered or extended without changing existing
curves, and re-running a command yields byte-identical artifacts.

Exit codes: 0 success, 2 configuration or input-format problems, 1 any other
library error.  Failures print a single ``error: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, RelpruneError
from .fixtures import FIXTURE_KINDS, make_fixture
from .formats import load_model_file, read_dataset_file
from .graph import ClassRestriction, restrict_outputs
from .lrp import CompositeConfig, get_preset, resolve_composite
from .pruning import (
    METHODS,
    SWEEP_CSV_COLUMNS,
    ReferenceSet,
    SweepConfig,
    SweepResult,
    component_relevance,
    rank_components,
    ref_count_study,
    run_sweep,
    write_sweep_csv,
)
from .reports import heatmap_drift, relevance_flow, write_drift_csv, write_flow_csv
from .search import SearchLog, SearchSpace, SweepEvaluator, hybrid_search

# Flag-facing component names mapped onto the internal component kinds.
TARGETS = {
    "filters": "conv_filter",
    "neurons": "linear_neuron",
    "heads": "attention_head",
}

DEFAULT_REF_COUNTS = (1, 4, 10)

_CONFIG_KEYS = frozenset(
    {
        "model", "data", "out", "target", "classes", "method",
        "preset", "composite", "steps", "n_ref", "seeds", "jobs",
    }
)


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------


def parse_seeds(value) -> tuple[int, ...]:
    """Seed lists like ``0,1,2`` or ``0-19`` (inclusive ranges), or int lists."""
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    out: list[int] = []
    for part in str(value).split(","):
        part = part.strip()
        if not part:
            continue
        lo, dash, hi = part.partition("-")
        try:
            if dash and lo:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ConfigError(f"empty seed range {part!r}")
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list entry {part!r}") from None
    if not out:
        raise ConfigError("seed list is empty")
    return tuple(out)


def parse_ints(value, what: str) -> tuple[int, ...]:
    """Comma-separated integer lists from flags, or int lists from JSON."""
    if isinstance(value, (list, tuple)):
        value = ",".join(str(v) for v in value)
    try:
        out = tuple(int(p) for p in str(value).split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad {what} list {value!r}") from None
    if not out:
        raise ConfigError(f"{what} list is empty")
    return out


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """One pruning or search run: what model, what data, how to score, where
    to write.  ``data`` serves as both the reference pool and the eval set."""

    model: Path
    data: Path
    out: Path
    target: str = "filters"
    classes: tuple[int, ...] | None = None
    method: str = "lrp"
    preset: str | None = None
    composite: dict | None = None
    steps: int = 20
    n_ref: int = 10
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}; choose from {tuple(TARGETS)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown scoring method {self.method!r}; choose from {METHODS}")
        if self.preset is not None and self.composite is not None:
            raise ConfigError("give either a preset name or an inline composite, not both")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.preset is not None:
            get_preset(self.preset)
        if self.composite is not None:
            CompositeConfig.from_json(self.composite)

    @property
    def kind(self) -> str:
        return TARGETS[self.target]

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RunConfig":
        """Build from merged config-file + flag settings; JSON nulls count as
        unset so flags can fall back to the dataclass defaults."""
        data = {k: v for k, v in dict(data).items() if v is not None}
        unknown = sorted(set(data) - _CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        missing = [k for k in ("model", "data", "out") if k not in data]
        if missing:
            raise ConfigError(f"missing required settings {missing}")
        conv = dict(data)
        for key in ("model", "data", "out"):
            conv[key] = Path(conv[key])
        if "classes" in conv:
            conv["classes"] = parse_ints(conv["classes"], "class")
        if "seeds" in conv:
            conv["seeds"] = parse_seeds(conv["seeds"])
        for key in ("steps", "n_ref", "jobs"):
            if key in conv:
                conv[key] = int(conv[key])
        if "composite" in conv and not isinstance(conv["composite"], Mapping):
            raise ConfigError("inline composite must be a JSON object")
        return cls(**conv)

    def to_json(self) -> dict:
        return {
            "model": str(self.model),
            "data": str(self.data),
            "out": str(self.out),
            "target": self.target,
            "classes": list(self.classes) if self.classes is not None else None,
            "method": self.method,
            "preset": self.preset,
            "composite": self.composite,
            "steps": self.steps,
            "n_ref": self.n_ref,
            "seeds": list(self.seeds),
            "jobs": self.jobs,
        }

    def validate_paths(self) -> None:
        if not self.model.exists():
            raise ConfigError(f"model not found: {self.model}")
        if not self.data.exists():
            raise ConfigError(f"dataset not found: {self.data}")

    def resolved_composite(self, graph) -> CompositeConfig | None:
        """The composite aligned with the graph, or None for non-lrp scoring.
        With neither a preset nor an inline composite given, the uniform
        epsilon-with-magnitudes default applies."""
        if self.method != "lrp":
            return None
        if self.composite is not None:
            return resolve_composite(CompositeConfig.from_json(self.composite), graph)
        name = self.preset if self.preset is not None else "eps-all"
        return resolve_composite(get_preset(name), graph, preset=name)


def collect_config(args: argparse.Namespace) -> RunConfig:
    """Merge the optional JSON config file with explicitly given flags."""
    merged: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(loaded)
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if isinstance(merged.get("composite"), str):
        try:
            merged["composite"] = json.loads(merged["composite"])
        except json.JSONDecodeError as err:
            raise ConfigError(f"inline composite is not valid JSON: {err}") from None
    return RunConfig.from_mapping(merged)


def load_task(cfg: RunConfig):
    """Model and dataset with the class restriction applied to both."""
    graph = load_model_file(cfg.model)
    x, y = read_dataset_file(cfg.data)
    if cfg.classes is not None:
        restriction = ClassRestriction(cfg.classes)
        graph = restrict_outputs(graph, restriction)
        keep = np.isin(y, cfg.classes)
        if not keep.any():
            raise ConfigError("class restriction leaves no samples")
        x, y = x[keep], restriction.remap(y[keep])
    return graph, x, y


# ---------------------------------------------------------------------------
# prune
# ---------------------------------------------------------------------------


def _seed_curve(graph, x, y, cfg: RunConfig, composite, seed: int):
    """One seed of the pipeline (draw references, score, sweep), keeping the
    scores so the ranking can be written alongside the curve."""
    sweep_cfg = SweepConfig(cfg.kind, cfg.steps)
    rng = np.random.default_rng(seed)
    refs = ReferenceSet.draw(x, y, cfg.n_ref, rng)
    scores = component_relevance(
        graph, refs, cfg.kind, composite=composite, method=cfg.method, seed=int(seed)
    )
    curve = run_sweep(graph, scores, sweep_cfg, x, y, refs=refs, composite=composite)
    return scores, curve


def _run_seeds(graph, x, y, cfg: RunConfig, composite):
    """(scores, curve) per seed, in seed-list order.  With ``jobs`` > 1 the
    seeds run on a thread pool; only the caller touches the filesystem, so
    all artifact writes stay single-writer."""
    def task(seed):
        return _seed_curve(graph, x, y, cfg, composite, seed)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(task, cfg.seeds))
    return [task(seed) for seed in cfg.seeds]


def _finite(value: float) -> float | None:
    return float(value) if math.isfinite(value) else None


def _result_json(result: SweepResult) -> dict:
    return {
        "composite_id": result.composite_id,
        "method": result.method,
        "seed_count": result.seed_count,
        "a_pr_mean": _finite(result.a_pr_mean),
        "a_pr_sem": _finite(result.a_pr_sem),
        "top_pr": _finite(result.top_pr),
    }


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_prune(args: argparse.Namespace) -> int:
    cfg = collect_config(args)
    cfg.validate_paths()
    graph, x, y = load_task(cfg)
    composite = cfg.resolved_composite(graph)
    pairs = _run_seeds(graph, x, y, cfg, composite)
    composite_id = composite.composite_id if composite is not None else ""
    result = SweepResult.from_curves([c for _, c in pairs], cfg.method, composite_id)

    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "run.json", {**cfg.to_json(), "result": _result_json(result)})
    write_sweep_csv(result, cfg.out / "sweep.csv")
    scores = pairs[0][0]
    _write_json(
        cfg.out / "ranked.json",
        {
            "kind": cfg.kind,
            "method": cfg.method,
            "composite_id": composite_id,
            "seed": cfg.seeds[0],
            "ranking": rank_components(scores),
            "scores": {cid: float(v) for cid, v in scores.values.items()},
        },
    )
    print(
        f"a_pr_mean={result.a_pr_mean:.6g} top_pr={result.top_pr:.6g} "
        f"seeds={result.seed_count} out={cfg.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def _load_space(spec: str | None, graph) -> SearchSpace:
    """A search space from a JSON file, inline JSON, or the model default."""
    if spec is None:
        return SearchSpace.vit_default() if graph.has_attention() else SearchSpace.cnn_default()
    path = Path(spec)
    text = path.read_text() if path.exists() else spec
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"search space is neither a file nor valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("search space JSON must hold an object")
    return SearchSpace.from_json(data)


def cmd_search(args: argparse.Namespace) -> int:
    cfg = collect_config(args)
    cfg.validate_paths()
    graph, x, y = load_task(cfg)
    space = _load_space(args.space, graph)
    evaluator = SweepEvaluator(
        graph, x, y, x, y, SweepConfig(cfg.kind, cfg.steps),
        n_ref=cfg.n_ref, seeds=cfg.seeds,
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    log = SearchLog(cfg.out / "search.jsonl")
    result = hybrid_search(
        space, evaluator,
        budget=args.budget, init=args.init, top_k=args.top_k,
        seed=args.seed, log=log, jobs=cfg.jobs,
    )
    best = result.best
    _write_json(
        cfg.out / "best_composite.json",
        {
            "composite": best.composite.to_json(),
            "composite_id": best.composite.composite_id,
            "a_pr": best.a_pr,
            "seeds": list(best.seeds),
            "n_evaluations": result.n_evaluations,
            "failures": len(result.failures),
            "space_size": space.size,
            "reduction": result.reduction,
        },
    )
    print(
        f"best={best.composite.composite_id} a_pr={best.a_pr:.6g} "
        f"evaluations={result.n_evaluations}/{space.size} out={cfg.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# fixture
# ---------------------------------------------------------------------------


def cmd_fixture(args: argparse.Namespace) -> int:
    bundle = make_fixture(args.kind, args.seed, out_dir=args.out)
    planted = len(bundle.manifest.get("irrelevant_components", []))
    print(f"kind={bundle.kind} seed={bundle.seed} planted_irrelevant={planted} out={args.out}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REFCOUNT_CSV_COLUMNS = ("n_ref",) + SWEEP_CSV_COLUMNS


def refcount_to_csv(study: Mapping[int, SweepResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REFCOUNT_CSV_COLUMNS)
    for count in sorted(study):
        result = study[count]
        for rate, mean, sem in zip(result.rates, result.acc_mean, result.acc_sem):
            writer.writerow(
                [
                    count,
                    f"{rate:.6g}",
                    f"{mean:.6g}",
                    f"{sem:.6g}",
                    result.method,
                    result.composite_id,
                    result.seed_count,
                ]
            )
    return buf.getvalue()


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    run_file = run_dir / "run.json"
    if not run_file.exists():
        raise ConfigError(f"no run artifacts found in {run_dir}")
    try:
        data = json.loads(run_file.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"run record is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise FormatError("run record must hold a JSON object")
    data.pop("result", None)
    cfg = RunConfig.from_mapping(data)
    cfg.validate_paths()
    graph, x, y = load_task(cfg)
    composite = cfg.resolved_composite(graph)
    counts = parse_ints(args.counts, "reference count") if args.counts else DEFAULT_REF_COUNTS
    out = Path(args.out) if args.out else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    sweep_cfg = SweepConfig(cfg.kind, cfg.steps)
    study = ref_count_study(
        graph, x, y, x, y, sweep_cfg, counts, cfg.seeds,
        composite=composite, method=cfg.method,
    )
    with open(out / "refcount.csv", "w") as fh:
        fh.write(refcount_to_csv(study))

    refs = ReferenceSet.draw(x, y, cfg.n_ref, np.random.default_rng(cfg.seeds[0]))
    rows = relevance_flow(graph, refs, cfg.kind, composite, method=cfg.method)
    write_flow_csv(rows, out / "flow.csv")

    if composite is not None:
        scores = component_relevance(
            graph, refs, cfg.kind, composite=composite,
            method=cfg.method, seed=int(cfg.seeds[0]),
        )
        series = heatmap_drift(graph, scores, sweep_cfg.rates, x[0], int(y[0]), composite)
        write_drift_csv(series, out / "drift.csv")

    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file with run settings; flags override it")
    sub.add_argument("--model", help="model file (binary interchange format)")
    sub.add_argument("--data", help="dataset file (reference pool and eval set)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--target", choices=tuple(TARGETS), help="component kind to prune")
    sub.add_argument("--classes", help="comma-separated class subset, e.g. 0,3,7")
    sub.add_argument("--method", choices=METHODS, help="scoring method")
    sub.add_argument("--preset", help="composite preset name")
    sub.add_argument("--composite", help="inline composite JSON")
    sub.add_argument("--steps", type=int, help="rate count m; the grid is i/m for i < m")
    sub.add_argument("--n-ref", type=int, dest="n_ref", help="reference samples per draw")
    sub.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-19")
    sub.add_argument("--jobs", type=int, help="worker threads for per-seed work")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relprune",
        description="Attribution-guided structured pruning of small neural networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="score, rank, and sweep one component kind")
    _add_run_flags(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("search", help="find the composite maximizing mean accuracy over rates")
    _add_run_flags(p)
    p.add_argument("--space", help="search space JSON (file or inline); default fits the model")
    p.add_argument("--budget", type=int, help="total evaluation budget")
    p.add_argument("--init", type=int, default=10, help="random initial design size")
    p.add_argument("--top-k", type=int, default=5, dest="top_k",
                   help="top records kept when reducing the space")
    p.add_argument("--seed", type=int, default=0, help="proposal RNG seed")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fixture", help="generate a model + dataset fixture")
    p.add_argument("--kind", required=True, choices=FIXTURE_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("report", help="aggregate a finished run directory into CSVs")
    p.add_argument("--run", required=True, help="directory holding run.json")
    p.add_argument("--out", help="report directory (default: <run>/report)")
    p.add_argument("--counts", help="reference counts for the stability study, e.g. 1,4,10")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RelpruneError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
