"""Self-contained verification models: builders, synthetic data, a small
trainer, and planted-ground-truth fixtures.

Planted fixtures embed a trained core network inside a wider one whose extra
components have exactly zero outgoing weights.  Those components provably
cannot influence the logits, which gives an exact oracle for relevance
ranking and pruning checks.  Trained fixtures run a seeded SGD loop on
Gaussian-blob classification until they reach a target accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import os

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, TrainingError
from .formats import save_model_file, write_dataset_file
from .graph import Graph, Layer, component_id
from .lrp import attribute, get_preset
from .runtime import parameter_gradients, top1_accuracy

FIXTURE_KINDS = ("planted-cnn", "planted-vit", "trained-mlp", "trained-cnn")


# ---------------------------------------------------------------------------
# Graph builders
# ---------------------------------------------------------------------------


def _init(rng, shape, fan_in):
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def _zeros(n):
    return np.zeros(n, dtype=np.float32)


def build_mlp(input_dim, hidden, num_classes, rng, bias=True):
    """Fully connected ReLU network: input -> hidden... -> logits."""
    layers = []
    prev = input_dim
    for i, width in enumerate(hidden, start=1):
        params = {"weight": _init(rng, (width, prev), prev)}
        if bias:
            params["bias"] = _zeros(width)
        layers.append(Layer(f"fc{i}", "linear", {}, params))
        layers.append(Layer(f"act{i}", "relu"))
        prev = width
    params = {"weight": _init(rng, (num_classes, prev), prev)}
    if bias:
        params["bias"] = _zeros(num_classes)
    layers.append(Layer("head", "linear", {"role": "head"}, params))
    return Graph.chain(layers, (input_dim,), num_classes)


def build_cnn(input_shape, conv_plan, fc_widths, num_classes, rng, kernel=3, padding=1,
              activation="relu"):
    """Conv/pool stack followed by fully connected layers.

    ``conv_plan`` mixes output-channel counts (conv + activation) with the
    string ``"pool"`` (2x2 max pool).  ``activation`` selects the
    nonlinearity used after every conv and hidden fc layer.
    """
    layers = []
    c, h, w = input_shape
    conv_i = pool_i = 0
    for step in conv_plan:
        if step == "pool":
            pool_i += 1
            layers.append(Layer(f"pool{pool_i}", "maxpool2d", {"kernel": 2}))
            h, w = h // 2, w // 2
        else:
            conv_i += 1
            weight = _init(rng, (step, c, kernel, kernel), c * kernel * kernel)
            layers.append(
                Layer(f"conv{conv_i}", "conv2d", {"stride": 1, "padding": padding},
                      {"weight": weight, "bias": _zeros(step)})
            )
            layers.append(Layer(f"cact{conv_i}", activation))
            c = step
    layers.append(Layer("flat", "flatten"))
    prev = c * h * w
    for i, width in enumerate(fc_widths, start=1):
        layers.append(
            Layer(f"fc{i}", "linear", {}, {"weight": _init(rng, (width, prev), prev), "bias": _zeros(width)})
        )
        layers.append(Layer(f"fact{i}", activation))
        prev = width
    layers.append(
        Layer("head", "linear", {"role": "head"},
              {"weight": _init(rng, (num_classes, prev), prev), "bias": _zeros(num_classes)})
    )
    return Graph.chain(layers, input_shape, num_classes)


def build_vit(tokens, patch_dim, dim, depth, heads, mlp_dim, num_classes, rng):
    """Small encoder: patch embedding, ``depth`` attention blocks, flat head.

    Input samples are pre-patchified (tokens, patch_dim) arrays.
    """
    if dim % heads:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    layers = []
    edges = []

    def add(layer, *srcs):
        layers.append(layer)
        edges.extend((s, layer.id) for s in srcs)
        return layer.id

    lin = lambda out_d, in_d: {"weight": _init(rng, (out_d, in_d), in_d), "bias": _zeros(out_d)}
    ln = lambda: {"weight": np.ones(dim, dtype=np.float32), "bias": _zeros(dim)}

    prev = add(Layer("embed", "linear", {"role": "embed"}, lin(dim, patch_dim)), "@input")
    for b in range(1, depth + 1):
        n1 = add(Layer(f"b{b}_ln1", "layernorm", {"eps": 1e-5}, ln()), prev)
        q = add(Layer(f"b{b}_q", "linear", {"role": "proj_q"}, lin(dim, dim)), n1)
        k = add(Layer(f"b{b}_k", "linear", {"role": "proj_k"}, lin(dim, dim)), n1)
        v = add(Layer(f"b{b}_v", "linear", {"role": "proj_v"}, lin(dim, dim)), n1)
        sc = add(Layer(f"b{b}_scores", "attn_scores", {"num_heads": heads}), q, k)
        sm = add(Layer(f"b{b}_softmax", "softmax", {}), sc)
        ctx = add(Layer(f"b{b}_attn", "attn_matmul", {"num_heads": heads}), sm, v)
        o = add(Layer(f"b{b}_o", "linear", {"role": "proj_o"}, lin(dim, dim)), ctx)
        r1 = add(Layer(f"b{b}_res1", "add", {}), prev, o)
        n2 = add(Layer(f"b{b}_ln2", "layernorm", {"eps": 1e-5}, ln()), r1)
        m1 = add(Layer(f"b{b}_mlp1", "linear", {"role": "mlp"}, lin(mlp_dim, dim)), n2)
        g = add(Layer(f"b{b}_gelu", "gelu", {}), m1)
        m2 = add(Layer(f"b{b}_mlp2", "linear", {"role": "mlp"}, lin(dim, mlp_dim)), g)
        prev = add(Layer(f"b{b}_res2", "add", {}), r1, m2)
    flat = add(Layer("flat", "flatten", {}), prev)
    add(Layer("head", "linear", {"role": "head"}, lin(num_classes, tokens * dim)), flat)
    return Graph.create(layers, edges, (tokens, patch_dim), num_classes)


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


def make_blob_dataset(shape, num_classes, n_train, n_test, rng, noise=0.6, smooth=1.0):
    """Classification data: one smooth random template per class plus noise."""
    templates = []
    for _ in range(num_classes):
        t = rng.standard_normal(shape)
        if len(shape) == 3 and smooth > 0:
            t = gaussian_filter(t, sigma=(0, smooth, smooth))
        t /= max(t.std(), 1e-9)
        templates.append(t)

    def draw(n_per_class):
        xs, ys = [], []
        for c, t in enumerate(templates):
            xs.append(t + noise * rng.standard_normal((n_per_class,) + shape))
            ys.append(np.full(n_per_class, c, dtype=np.int64))
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        order = rng.permutation(len(x))
        return x[order], y[order]

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return x_tr, y_tr, x_te, y_te


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


def _extract_params(graph):
    return {l.id: {k: v.copy() for k, v in l.params.items()} for l in graph.layers if l.params}


def _with_params(graph, params):
    layers = [
        Layer(l.id, l.kind, l.attrs, params[l.id]) if l.id in params else l
        for l in graph.layers
    ]
    return Graph(layers, graph.inputs, graph.input_shape, graph.num_classes)


def train_graph(graph, x, y, rng, *, epochs=60, lr=0.05, momentum=0.9,
                batch_size=64, target_acc=0.95):
    """Seeded SGD with momentum until ``target_acc`` train accuracy.

    Returns (trained graph, epochs used, final accuracy).  Raises
    TrainingError if the budget runs out first.
    """
    params = _extract_params(graph)
    velocity = {lid: {k: np.zeros_like(v) for k, v in d.items()} for lid, d in params.items()}
    n = len(x)
    acc = 0.0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            g = _with_params(graph, params)
            _, _, grads = parameter_gradients(g, x[idx], y[idx])
            for lid, layer_grads in grads.items():
                for name, grad in layer_grads.items():
                    v = velocity[lid][name]
                    v *= momentum
                    v -= lr * grad.astype(np.float32)
                    params[lid][name] = params[lid][name] + v
        current = _with_params(graph, params)
        acc = top1_accuracy(current, x, y)
        if acc >= target_acc:
            return current, epoch, acc
    raise TrainingError(
        f"train accuracy {acc:.3f} below target {target_acc} after {epochs} epochs"
    )


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@dataclass
class FixtureBundle:
    """A generated model plus its data and ground-truth annotations."""

    kind: str
    seed: int
    graph: Graph
    train: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    manifest: dict = field(default_factory=dict)


def _trained_mlp(seed):
    rng = np.random.default_rng(seed)
    x_tr, y_tr, x_te, y_te = make_blob_dataset((16,), 4, 80, 40, rng, noise=0.9, smooth=0)
    graph = build_mlp(16, [12, 8], 4, rng)
    graph, epochs, acc = train_graph(graph, x_tr, y_tr, rng)
    manifest = {"train_accuracy": acc, "epochs": epochs, "classes": 4}
    return FixtureBundle("trained-mlp", seed, graph, (x_tr, y_tr), (x_te, y_te), manifest)


def _trained_cnn(seed):
    rng = np.random.default_rng(seed)
    x_tr, y_tr, x_te, y_te = make_blob_dataset((1, 8, 8), 10, 40, 20, rng, noise=0.7)
    graph = build_cnn((1, 8, 8), [8, "pool", 16, "pool"], [], 10, rng)
    graph, epochs, acc = train_graph(graph, x_tr, y_tr, rng, epochs=80, lr=0.05)
    manifest = {"train_accuracy": acc, "epochs": epochs, "classes": 10}
    return FixtureBundle("trained-cnn", seed, graph, (x_tr, y_tr), (x_te, y_te), manifest)


def _filter_sums(trace, layer_id):
    return trace.layer_relevance[layer_id].sum(axis=(1, 2))


def _verify_strict_separation(graph, datasets, keep1, keep2, irr1, irr2):
    """Require nonzero core-filter relevance on every sample, zeros elsewhere.

    A trained core filter can saturate so hard that its activation map
    underflows to exact zero on some inputs; its relevance then ties with
    the planted-irrelevant filters and the ranking oracle breaks.  Checking
    every sample up front turns strict separation into a property of the
    fixture rather than of the reference draw.
    """
    composite = get_preset("eps-all")
    for xs, ys in datasets:
        for x, y in zip(xs, ys):
            trace = attribute(graph, x, int(y), composite)
            s1, s2 = _filter_sums(trace, "conv1"), _filter_sums(trace, "conv2")
            if np.any(s1[irr1] != 0.0) or np.any(s2[irr2] != 0.0):
                raise TrainingError("planted-irrelevant filter has nonzero relevance")
            if np.any(s1[keep1] == 0.0) or np.any(s2[keep2] == 0.0):
                raise TrainingError("core filter relevance vanished on a sample")


def _planted_cnn(seed):
    """Wide CNN (16+16 filters) hiding a trained 4+4-filter core.

    The 24 extra filters have zero outgoing weights everywhere, so logits,
    accuracy, and relevance are exactly those of the core.  GELU activations
    keep core responses nonzero almost everywhere, and each candidate core is
    re-trained from a derived sub-seed until every relevant filter carries
    strictly nonzero relevance on every train and test sample.
    """
    last = None
    for attempt in range(10):
        try:
            return _planted_cnn_attempt(seed, np.random.default_rng([seed, attempt]))
        except TrainingError as err:
            last = err
    raise TrainingError(f"planted-cnn seed {seed} failed after 10 attempts: {last}")


def _planted_cnn_attempt(seed, rng):
    x_tr, y_tr, x_te, y_te = make_blob_dataset((1, 8, 8), 4, 60, 30, rng, noise=0.6)
    core = build_cnn((1, 8, 8), [4, "pool", 4, "pool"], [], 4, rng, activation="gelu")
    core, _, acc = train_graph(core, x_tr, y_tr, rng, epochs=80, lr=0.05)

    wide = build_cnn((1, 8, 8), [16, "pool", 16, "pool"], [], 4, rng, activation="gelu")
    keep1 = np.sort(rng.permutation(16)[:4])
    keep2 = np.sort(rng.permutation(16)[:4])
    params = _extract_params(wide)

    c1, c2, head = (core.layer(i) for i in ("conv1", "conv2", "head"))
    params["conv1"]["weight"][keep1] = c1.param("weight")
    params["conv1"]["bias"][keep1] = c1.param("bias")
    # Outgoing weights of planted-irrelevant conv1 filters are identically 0.
    w2 = params["conv2"]["weight"]
    w2[:, :, :, :] = 0.0
    irr1 = np.setdiff1d(np.arange(16), keep1)
    irr2 = np.setdiff1d(np.arange(16), keep2)
    w2[np.ix_(keep2, keep1)] = c2.param("weight")
    w2[np.ix_(irr2, keep1)] = _init(rng, (len(irr2), len(keep1), 3, 3), 36)
    params["conv2"]["bias"][:] = rng.standard_normal(16).astype(np.float32) * 0.1
    params["conv2"]["bias"][keep2] = c2.param("bias")
    # Head columns: flatten order is (channel, h, w); only core channels wired.
    per = 4  # 2x2 spatial positions after the second pool
    wh = np.zeros_like(params["head"]["weight"])
    core_w = head.param("weight")
    for k, ch in enumerate(keep2):
        wh[:, ch * per : (ch + 1) * per] = core_w[:, k * per : (k + 1) * per]
    params["head"]["weight"] = wh
    params["head"]["bias"] = head.param("bias").copy()

    graph = _with_params(wide, params)
    _verify_strict_separation(
        graph, [(x_tr, y_tr), (x_te, y_te)], keep1, keep2, irr1, irr2
    )
    irrelevant = [component_id("conv_filter", "conv1", int(i)) for i in irr1]
    irrelevant += [component_id("conv_filter", "conv2", int(i)) for i in irr2]
    relevant = [component_id("conv_filter", "conv1", int(i)) for i in keep1]
    relevant += [component_id("conv_filter", "conv2", int(i)) for i in keep2]
    manifest = {
        "train_accuracy": acc,
        "classes": 4,
        "irrelevant_components": irrelevant,
        "relevant_components": relevant,
    }
    return FixtureBundle("planted-cnn", seed, graph, (x_tr, y_tr), (x_te, y_te), manifest)


def _planted_vit(seed):
    """Untrained 4-block, 4-head encoder with 2 dead heads per block.

    A head's only outgoing path is its slice of the output-projection weight
    columns; zeroing that slice makes the head provably irrelevant.
    """
    rng = np.random.default_rng(seed)
    tokens, patch, dim, heads = 8, 16, 32, 4
    x_tr, y_tr, x_te, y_te = make_blob_dataset((tokens, patch), 4, 40, 20, rng, noise=0.6, smooth=0)
    graph = build_vit(tokens, patch, dim, 4, heads, 2 * dim, 4, rng)
    dv = dim // heads
    irrelevant = []
    for b in range(1, 5):
        dead = np.sort(rng.permutation(heads)[:2])
        lid = f"b{b}_o"
        w = graph.layer(lid).param("weight").copy()
        for h in dead:
            w[:, h * dv : (h + 1) * dv] = 0.0
        graph = graph.replace_layer(lid, params=dict(graph.layer(lid).params, weight=w))
        irrelevant += [component_id("attention_head", f"b{b}_attn", int(h)) for h in dead]
    manifest = {"classes": 4, "irrelevant_components": irrelevant}
    return FixtureBundle("planted-vit", seed, graph, (x_tr, y_tr), (x_te, y_te), manifest)


_MAKERS = {
    "planted-cnn": _planted_cnn,
    "planted-vit": _planted_vit,
    "trained-mlp": _trained_mlp,
    "trained-cnn": _trained_cnn,
}


def make_fixture(kind, seed, out_dir=None) -> FixtureBundle:
    """Build one fixture; optionally write model/datasets/manifest to disk."""
    if kind not in _MAKERS:
        raise ConfigError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
    bundle = _MAKERS[kind](int(seed))
    bundle.manifest.setdefault("kind", kind)
    bundle.manifest.setdefault("seed", int(seed))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model_file(bundle.graph, os.path.join(out_dir, "model.nnix"))
        write_dataset_file(*bundle.train, os.path.join(out_dir, "train.dset"))
        write_dataset_file(*bundle.test, os.path.join(out_dir, "test.dset"))
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(bundle.manifest, fh, indent=2, sort_keys=True)
    return bundle
