"""Attribution-guided structured pruning for small neural networks.

The package walks a serialized computation graph, propagates per-class
relevance backwards through it under a configurable rule composite, turns the
latent relevance into one score per structural component (conv filter, linear
neuron, attention head), and measures accuracy as the lowest-scored
components are masked at a growing rate.  A hybrid grid/model-based search
tunes the composite to maximize the mean accuracy over that rate grid.
"""

from .errors import (
    ConfigError,
    FormatError,
    GraphError,
    NonFiniteError,
    RelpruneError,
    SearchError,
    ShapeError,
    TrainingError,
)
from .graph import (
    COMPONENT_KINDS,
    ClassRestriction,
    Component,
    Graph,
    Layer,
    PruneMask,
    apply_mask,
    component_id,
    enumerate_components,
    restrict_outputs,
    validate_graph,
)
from .runtime import (
    ActivationTrace,
    GradientTrace,
    backward_grad,
    forward_logits,
    forward_trace,
    parameter_gradients,
    softmax_probs,
    top1_accuracy,
)
from .formats import (
    load_model,
    load_model_file,
    read_dataset,
    read_dataset_file,
    save_model,
    save_model_file,
    write_dataset,
    write_dataset_file,
)
from .lrp import (
    GROUPS,
    PRESET_NAMES,
    CompositeConfig,
    RelevanceTrace,
    Rule,
    SoftmaxHandler,
    attribute,
    get_preset,
    parse_rule,
    parse_softmax_handler,
    resolve_composite,
    split_layer_groups,
)
from .baselines import IGAttribution, IGConfig, integrated_gradients, random_scores
from .fixtures import (
    FIXTURE_KINDS,
    FixtureBundle,
    build_cnn,
    build_mlp,
    build_vit,
    make_blob_dataset,
    make_fixture,
    train_graph,
)
from .pruning import (
    METHODS,
    ComponentScores,
    ReferenceSet,
    SweepConfig,
    SweepCurve,
    SweepResult,
    a_pr,
    component_relevance,
    evaluate_pruning,
    rank_components,
    ref_count_study,
    run_sweep,
    sweep_to_csv,
    top_pr,
    write_sweep_csv,
)
from .search import (
    GaussianProcess,
    SearchLog,
    SearchRecord,
    SearchResult,
    SearchSpace,
    SweepEvaluator,
    bayes_search,
    expected_improvement,
    grid_search,
    hybrid_search,
)
from .reports import (
    HeatmapSeries,
    PerturbationCurve,
    channel_heatmap,
    cosine_similarity,
    curve_stats,
    dump_heatmaps,
    flow_to_csv,
    heatmap_drift,
    pearson,
    perturbation_curve,
    relevance_flow,
    write_drift_csv,
    write_flow_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace",
    "COMPONENT_KINDS",
    "ClassRestriction",
    "Component",
    "ComponentScores",
    "CompositeConfig",
    "ConfigError",
    "FIXTURE_KINDS",
    "FixtureBundle",
    "FormatError",
    "GROUPS",
    "GaussianProcess",
    "GradientTrace",
    "Graph",
    "GraphError",
    "HeatmapSeries",
    "IGAttribution",
    "IGConfig",
    "Layer",
    "METHODS",
    "NonFiniteError",
    "PRESET_NAMES",
    "PerturbationCurve",
    "PruneMask",
    "ReferenceSet",
    "RelevanceTrace",
    "RelpruneError",
    "Rule",
    "SearchError",
    "SearchLog",
    "SearchRecord",
    "SearchResult",
    "SearchSpace",
    "ShapeError",
    "SoftmaxHandler",
    "SweepConfig",
    "SweepCurve",
    "SweepEvaluator",
    "SweepResult",
    "TrainingError",
    "a_pr",
    "apply_mask",
    "attribute",
    "backward_grad",
    "bayes_search",
    "build_cnn",
    "build_mlp",
    "build_vit",
    "channel_heatmap",
    "component_id",
    "component_relevance",
    "cosine_similarity",
    "curve_stats",
    "dump_heatmaps",
    "enumerate_components",
    "evaluate_pruning",
    "expected_improvement",
    "flow_to_csv",
    "forward_logits",
    "forward_trace",
    "get_preset",
    "grid_search",
    "heatmap_drift",
    "hybrid_search",
    "integrated_gradients",
    "load_model",
    "load_model_file",
    "make_blob_dataset",
    "make_fixture",
    "parameter_gradients",
    "parse_rule",
    "parse_softmax_handler",
    "pearson",
    "perturbation_curve",
    "random_scores",
    "rank_components",
    "read_dataset",
    "read_dataset_file",
    "ref_count_study",
    "relevance_flow",
    "resolve_composite",
    "restrict_outputs",
    "run_sweep",
    "save_model",
    "save_model_file",
    "softmax_probs",
    "split_layer_groups",
    "sweep_to_csv",
    "top1_accuracy",
    "top_pr",
    "train_graph",
    "validate_graph",
    "write_dataset",
    "write_dataset_file",
    "write_drift_csv",
    "write_flow_csv",
    "write_sweep_csv",
]
