"""Heatmap drift, perturbation faithfulness, relevance flow, and statistics."""

import numpy as np
import pytest

from relprune.errors import ConfigError, ShapeError
from relprune.fixtures import build_vit, make_blob_dataset, make_fixture
from relprune.lrp import attribute, get_preset, resolve_composite
from relprune.pruning import ReferenceSet, component_relevance
from relprune.reports import (
    HeatmapSeries,
    channel_heatmap,
    cosine_similarity,
    curve_stats,
    drift_to_csv,
    flow_from_scores,
    flow_to_csv,
    heatmap_drift,
    pearson,
    perturbation_curve,
    relevance_flow,
)
from relprune.runtime import forward_trace, softmax_probs


@pytest.fixture(scope="module")
def planted():
    return make_fixture("planted-cnn", seed=11)


@pytest.fixture(scope="module")
def trained():
    return make_fixture("trained-mlp", seed=3)


def conv_scores(fb, n_ref=8, seed=0):
    refs = ReferenceSet.draw(*fb.train, n_ref, np.random.default_rng(seed))
    return refs, component_relevance(
        fb.graph, refs, "conv_filter", composite=get_preset("eps-all")
    )


class TestStats:
    def test_identical_curves_have_zero_sem(self):
        mean, sem = curve_stats([[1.0, 0.5, 0.25]] * 4)
        np.testing.assert_array_equal(mean, [1.0, 0.5, 0.25])
        np.testing.assert_array_equal(sem, [0.0, 0.0, 0.0])

    def test_sem_hand_value(self):
        # std of (0, 2) with ddof=1 is sqrt(2); sem = sqrt(2)/sqrt(2) = 1.
        mean, sem = curve_stats([[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(mean, [1.0, 2.0])
        np.testing.assert_array_equal(sem, [1.0, 1.0])

    def test_single_curve_sem_is_nan(self):
        _, sem = curve_stats([[1.0, 2.0]])
        assert np.isnan(sem).all()

    def test_curve_stack_shape_checked(self):
        with pytest.raises(ShapeError):
            curve_stats(np.zeros(5))

    def test_pearson_hand_case(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == 1.0

    def test_pearson_perfect_negative(self):
        assert pearson([1, 2, 3], [6, 4, 2]) == -1.0

    def test_pearson_zero(self):
        assert pearson([1, 2, 3], [1, 0, 1]) == 0.0

    def test_pearson_degenerate_variance_is_missing(self):
        assert pearson([1, 2, 3], [5, 5, 5]) is None

    def test_pearson_needs_three_points(self):
        with pytest.raises(ConfigError, match="3 points"):
            pearson([1, 2], [3, 4])


class TestCosineSimilarity:
    def test_identical_is_exactly_one(self):
        h = np.random.default_rng(0).standard_normal((5, 5))
        assert cosine_similarity(h, h) == 1.0

    def test_invariant_to_positive_scaling(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            h = rng.standard_normal(12)
            assert cosine_similarity(h, 3.7 * h) == pytest.approx(1.0, abs=1e-12)
            assert cosine_similarity(0.01 * h, h) == pytest.approx(1.0, abs=1e-12)

    def test_antiparallel(self):
        h = np.array([1.0, -2.0, 3.0])
        assert cosine_similarity(h, -h) == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_zero_norm_is_missing(self):
        assert cosine_similarity(np.zeros(4), np.ones(4)) is None
        assert cosine_similarity(np.ones(4), np.zeros(4)) is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_similarity(np.ones(3), np.ones(4))


class TestChannelHeatmap:
    def test_image_sums_channels(self):
        r = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(channel_heatmap(r), r.sum(axis=0))

    def test_tokens_sum_features(self):
        r = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(channel_heatmap(r), r.sum(axis=-1))

    def test_vector_passthrough(self):
        r = np.arange(4.0)
        np.testing.assert_array_equal(channel_heatmap(r), r)


class TestHeatmapDrift:
    def test_rate_zero_similarity_is_exactly_one(self, planted):
        _, scores = conv_scores(planted)
        x, y = planted.train[0][0], int(planted.train[1][0])
        series = heatmap_drift(planted.graph, scores, [0.0], x, y, get_preset("eps-all"))
        assert series.similarity[0] == 1.0
        baseline = softmax_probs(forward_trace(planted.graph, x).logits)[y]
        assert series.confidence[0] == pytest.approx(baseline, rel=1e-12)

    def test_irrelevant_only_pruning_keeps_similarity(self, planted):
        # Rates up to 24/32 mask only planted-irrelevant filters, so the
        # heatmap must stay essentially unchanged.
        _, scores = conv_scores(planted)
        x, y = planted.train[0][1], int(planted.train[1][1])
        rates = [0.0, 0.25, 0.5, 0.75]
        series = heatmap_drift(planted.graph, scores, rates, x, y, get_preset("eps-all"))
        assert all(sim is not None and sim >= 0.999 for sim in series.similarity)

    def test_full_sweep_reports_correlation(self, trained):
        refs = ReferenceSet.draw(*trained.train, 8, np.random.default_rng(0))
        scores = component_relevance(
            trained.graph, refs, "linear_neuron", composite=get_preset("eps-all")
        )
        x, y = trained.test[0][0], int(trained.test[1][0])
        rates = [i / 10 for i in range(10)]
        series = heatmap_drift(trained.graph, scores, rates, x, y, get_preset("eps-all"))
        # The correlation is reported, not asserted to any particular value.
        r = series.confidence_correlation
        assert r is None or -1.0 <= r <= 1.0

    def test_rejects_bad_rates(self, planted):
        _, scores = conv_scores(planted)
        x, y = planted.train[0][0], int(planted.train[1][0])
        with pytest.raises(ConfigError, match="rates"):
            heatmap_drift(planted.graph, scores, [0.0, 1.5], x, y, get_preset("eps-all"))

    def test_series_validation(self):
        h = np.ones((2, 2))
        with pytest.raises(ConfigError, match="similarity"):
            HeatmapSeries((0.0,), 0, (h,), (1.5,), (0.5,))
        with pytest.raises(ShapeError, match="one entry per rate"):
            HeatmapSeries((0.0, 0.5), 0, (h,), (1.0,), (0.5,))

    def test_drift_csv_renders_missing_similarity(self):
        h = np.ones((2, 2))
        series = HeatmapSeries((0.0, 0.5), 1, (h, h), (1.0, None), (0.9, 0.4))
        lines = drift_to_csv(series).splitlines()
        assert lines[0] == "rate,similarity,confidence"
        assert lines[1] == "0,1,0.9"
        assert lines[2] == "0.5,,0.4"


class TestPerturbationCurve:
    def test_endpoints_match_clean_and_baselined_input(self, trained):
        x, y = trained.test[0][0], int(trained.test[1][0])
        heat = np.random.default_rng(0).standard_normal(x.shape)
        curve = perturbation_curve(trained.graph, heat, x, y, steps=4)
        clean = softmax_probs(forward_trace(trained.graph, x).logits)[y]
        blank = softmax_probs(forward_trace(trained.graph, np.zeros_like(x)).logits)[y]
        assert curve.confidence[0] == pytest.approx(clean, rel=1e-12)
        assert curve.confidence[-1] == pytest.approx(blank, rel=1e-12)
        assert len(curve.fractions) == 5

    def test_custom_baseline(self, trained):
        x, y = trained.test[0][1], int(trained.test[1][1])
        base = np.full_like(x, 0.25)
        curve = perturbation_curve(trained.graph, np.ones_like(x), x, y, steps=2,
                                   baseline=0.25)
        target = softmax_probs(forward_trace(trained.graph, base).logits)[y]
        assert curve.confidence[-1] == pytest.approx(target, rel=1e-12)

    def test_more_steps_than_entries(self, trained):
        x, y = trained.test[0][0], int(trained.test[1][0])
        curve = perturbation_curve(trained.graph, np.ones_like(x), x, y, steps=40)
        assert len(curve.confidence) == 41
        assert np.isfinite(curve.confidence).all()

    def test_validation(self, trained):
        x, y = trained.test[0][0], int(trained.test[1][0])
        with pytest.raises(ConfigError, match="step"):
            perturbation_curve(trained.graph, np.ones_like(x), x, y, steps=0)
        with pytest.raises(ShapeError, match="heatmap shape"):
            perturbation_curve(trained.graph, np.ones(3), x, y, steps=2)

    def test_relevance_order_beats_random_order(self, trained):
        # Averaged over 5 inputs per seed, the relevance-ranked curve must
        # have no larger an area than a random ranking in >= 19/20 seeds.
        x_te, y_te = trained.test
        composite = get_preset("eps-all")
        wins = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            idx = rng.choice(len(x_te), 5, replace=False)
            gaps = []
            for i in idx:
                x, y = x_te[i], int(y_te[i])
                heat = attribute(trained.graph, x, y, composite).input_relevance
                ranked = perturbation_curve(trained.graph, heat, x, y, steps=16)
                random = perturbation_curve(
                    trained.graph, rng.standard_normal(x.shape), x, y, steps=16
                )
                gaps.append(ranked.area - random.area)
            wins += np.mean(gaps) <= 0
        assert wins >= 19


class TestRelevanceFlow:
    def test_planted_cnn_table(self, planted):
        refs, scores = conv_scores(planted)
        rows = flow_from_scores(planted.graph, scores)
        assert [r.layer_id for r in rows] == ["conv1", "conv2"]
        assert [r.count for r in rows] == [16, 16]
        assert all(r.max_abs >= r.mean_abs >= 0.0 for r in rows)

    def test_planted_irrelevant_mass_is_zero(self, planted):
        refs, scores = conv_scores(planted)
        rows = flow_from_scores(
            planted.graph, scores, components=planted.manifest["irrelevant_components"]
        )
        assert [r.count for r in rows] == [12, 12]
        assert all(r.mean_abs == 0.0 and r.max_abs == 0.0 for r in rows)

    def test_twelve_block_vit_has_twelve_rows(self):
        rng = np.random.default_rng(0)
        graph = build_vit(4, 8, 16, 12, 2, 32, 3, rng)
        x, y, _, _ = make_blob_dataset((4, 8), 3, 4, 1, rng, noise=0.5, smooth=0)
        refs = ReferenceSet.draw(x, y, 3, np.random.default_rng(1))
        composite = resolve_composite(get_preset("eps-all"), graph, preset="eps-all")
        rows = relevance_flow(graph, refs, "attention_head", composite)
        assert len(rows) == 12
        assert [r.layer_id for r in rows] == [f"b{i}_attn" for i in range(1, 13)]
        assert all(r.count == 2 for r in rows)

    def test_flow_csv_is_deterministic(self, planted):
        outputs = []
        for _ in range(2):
            refs = ReferenceSet.draw(*planted.train, 6, np.random.default_rng(4))
            scores = component_relevance(
                planted.graph, refs, "conv_filter", composite=get_preset("eps-all")
            )
            outputs.append(flow_to_csv(flow_from_scores(planted.graph, scores)))
        assert outputs[0] == outputs[1]
        assert outputs[0].splitlines()[0] == "layer,count,mean_abs,max_abs"
