"""Self-generated fixture models: determinism, planted structure, training."""

import json

import numpy as np
import pytest

from relprune.errors import ConfigError, TrainingError
from relprune.fixtures import (
    FIXTURE_KINDS,
    build_mlp,
    make_blob_dataset,
    make_fixture,
    train_graph,
)
from relprune.formats import load_model_file, read_dataset_file
from relprune.graph import PruneMask, apply_mask, enumerate_components
from relprune.runtime import forward_logits, top1_accuracy


def test_fixture_kinds_listed():
    assert set(FIXTURE_KINDS) == {"trained-mlp", "trained-cnn", "planted-cnn", "planted-vit"}


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        make_fixture("resnet-50", seed=0)


def test_fixture_is_deterministic():
    a = make_fixture("trained-mlp", seed=7)
    b = make_fixture("trained-mlp", seed=7)
    for la, lb in zip(a.graph.layers, b.graph.layers):
        assert la.id == lb.id
        for name in la.params:
            np.testing.assert_array_equal(la.params[name], lb.params[name])
    np.testing.assert_array_equal(a.test[0], b.test[0])
    assert a.manifest == b.manifest


def test_trained_mlp_reaches_target():
    fx = make_fixture("trained-mlp", seed=3)
    x, y = fx.train
    assert top1_accuracy(fx.graph, x, y) >= 0.95
    assert fx.manifest["kind"] == "trained-mlp"
    assert len(enumerate_components(fx.graph, "linear_neuron")) == 20


def test_trained_cnn_reaches_target():
    fx = make_fixture("trained-cnn", seed=3)
    x, y = fx.train
    assert top1_accuracy(fx.graph, x, y) >= 0.95
    assert len(enumerate_components(fx.graph, "conv_filter")) == 24


def test_planted_cnn_irrelevant_components_are_inert():
    fx = make_fixture("planted-cnn", seed=11)
    irrelevant = fx.manifest["irrelevant_components"]
    assert len(irrelevant) == 24

    x, _ = fx.test
    before = forward_logits(fx.graph, x)
    masked = apply_mask(fx.graph, PruneMask.dropping(fx.graph, "conv_filter", irrelevant))
    after = forward_logits(masked, x)
    np.testing.assert_array_equal(before, after)


def test_planted_cnn_accuracy():
    fx = make_fixture("planted-cnn", seed=11)
    x, y = fx.test
    assert top1_accuracy(fx.graph, x, y) >= 0.95


def test_planted_vit_dead_heads_are_inert():
    fx = make_fixture("planted-vit", seed=5)
    irrelevant = fx.manifest["irrelevant_components"]
    assert len(irrelevant) == 8  # 2 dead heads in each of 4 blocks
    assert len(enumerate_components(fx.graph, "attention_head")) == 16

    x, _ = fx.test
    before = forward_logits(fx.graph, x)
    masked = apply_mask(
        fx.graph, PruneMask.dropping(fx.graph, "attention_head", irrelevant)
    )
    after = forward_logits(masked, x)
    np.testing.assert_array_equal(before, after)


def test_make_fixture_writes_files(tmp_path):
    fx = make_fixture("trained-mlp", seed=1, out_dir=tmp_path)
    reloaded = load_model_file(tmp_path / "model.nnix")
    x, y = read_dataset_file(tmp_path / "test.dset")
    np.testing.assert_array_equal(x, fx.test[0])
    np.testing.assert_array_equal(y, fx.test[1])
    np.testing.assert_allclose(
        forward_logits(reloaded, x), forward_logits(fx.graph, x), rtol=1e-6
    )
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["kind"] == "trained-mlp"
    assert manifest["seed"] == 1


def test_trainer_raises_when_budget_too_small():
    rng = np.random.default_rng(0)
    g = build_mlp(16, [12], 4, rng)
    x, y = make_blob_dataset((16,), 4, 50, 10, rng, noise=0.9)[:2]
    with pytest.raises(TrainingError):
        train_graph(g, x, y, np.random.default_rng(1), epochs=1, lr=0.0)


def test_blob_dataset_shapes_and_balance():
    rng = np.random.default_rng(2)
    xtr, ytr, xte, yte = make_blob_dataset((1, 8, 8), 5, 20, 10, rng, noise=0.5)
    assert xtr.shape == (100, 1, 8, 8) and xtr.dtype == np.float32
    assert sorted(set(ytr.tolist())) == [0, 1, 2, 3, 4]
    assert xte.shape == (50, 1, 8, 8) and yte.shape == (50,)
