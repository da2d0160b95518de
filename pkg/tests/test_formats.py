"""Model and dataset serialization round-trips, corruption handling, BN fold."""

import struct

import numpy as np
import pytest

from relprune.errors import FormatError
from relprune.fixtures import build_cnn, build_mlp, build_vit
from relprune.formats import (
    dataset_from_idx,
    load_model,
    read_dataset,
    read_idx,
    save_model,
    write_dataset,
    write_model_bytes,
)
from relprune.runtime import forward_logits, forward_trace
from relprune.graph import enumerate_components


def _mlp_bytes(rng):
    return save_model(build_mlp(6, [5], 3, rng))


class TestModelRoundTrip:
    @pytest.mark.parametrize("builder", [
        lambda rng: build_mlp(6, [5], 3, rng),
        lambda rng: build_cnn((1, 8, 8), [4, "pool", 4], [6], 3, rng),
        lambda rng: build_vit(4, 8, 16, 2, 4, 32, 3, rng),
    ])
    def test_forward_parity_and_bit_identity(self, builder):
        rng = np.random.default_rng(0)
        g = builder(rng)
        blob = save_model(g)
        g2 = load_model(blob)
        x = rng.standard_normal((5,) + g.input_shape).astype(np.float32)
        np.testing.assert_array_equal(forward_logits(g, x), forward_logits(g2, x))
        assert save_model(g2) == blob

    def test_metadata_round_trip(self):
        rng = np.random.default_rng(1)
        g = build_mlp(4, [8], 1000, rng)
        g2 = load_model(save_model(g))
        assert g2.num_classes == 1000
        assert g2.input_shape == (4,)
        comps = [c.id for c in enumerate_components(g, "linear_neuron")]
        assert comps == [c.id for c in enumerate_components(g2, "linear_neuron")]

    def test_attrs_round_trip(self):
        rng = np.random.default_rng(2)
        g = build_vit(4, 8, 16, 1, 4, 32, 3, rng)
        g2 = load_model(save_model(g))
        assert g2.layer("b1_attn").attr("num_heads") == 4
        assert g2.layer("b1_q").attr("role") == "proj_q"


class TestModelErrors:
    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            load_model(b"NOPE!\n" + b"\x00" * 32)

    def test_truncated_tensor_region(self):
        rng = np.random.default_rng(3)
        blob = _mlp_bytes(rng)
        with pytest.raises(FormatError, match="data region too short"):
            load_model(blob[:-8])

    def test_truncated_header(self):
        rng = np.random.default_rng(3)
        blob = _mlp_bytes(rng)
        with pytest.raises(FormatError, match="header"):
            load_model(blob[:20])

    def test_unknown_kind(self):
        blob = write_model_bytes(
            [{"id": "x", "kind": "megapool", "attrs": {}, "tensors": {}}],
            [("@input", "x")], (4,), 4,
        )
        with pytest.raises(FormatError, match="unknown layer kind"):
            load_model(blob)

    def test_zero_size_tensor_rejected_at_save(self):
        with pytest.raises(FormatError, match="zero-size"):
            write_model_bytes(
                [{"id": "x", "kind": "linear", "attrs": {},
                  "tensors": {"weight": np.zeros((0, 4), dtype=np.float32)}}],
                [("@input", "x")], (4,), 0,
            )

    def test_nonfinite_tensor_rejected_at_save(self):
        with pytest.raises(FormatError, match="non-finite"):
            write_model_bytes(
                [{"id": "x", "kind": "linear", "attrs": {},
                  "tensors": {"weight": np.full((2, 2), np.nan, dtype=np.float32)}}],
                [("@input", "x")], (2,), 2,
            )


def _bn_model_bytes(rng, eps=1e-5):
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    bn = {
        "weight": (0.5 + rng.random(3)).astype(np.float32),
        "bias": rng.standard_normal(3).astype(np.float32),
        "running_mean": rng.standard_normal(3).astype(np.float32),
        "running_var": (0.5 + rng.random(3)).astype(np.float32),
    }
    head_w = rng.standard_normal((2, 3 * 6 * 6)).astype(np.float32)
    specs = [
        {"id": "c", "kind": "conv2d", "attrs": {"stride": 1, "padding": 1},
         "tensors": {"weight": w, "bias": b}},
        {"id": "bn", "kind": "batchnorm2d", "attrs": {"eps": eps}, "tensors": bn},
        {"id": "flat", "kind": "flatten", "attrs": {}, "tensors": {}},
        {"id": "head", "kind": "linear", "attrs": {}, "tensors": {"weight": head_w}},
    ]
    edges = [("@input", "c"), ("c", "bn"), ("bn", "flat"), ("flat", "head")]
    blob = write_model_bytes(specs, edges, (2, 6, 6), 2)
    return blob, (w, b, bn, head_w, eps)


class TestBatchNormFolding:
    def test_fold_matches_unfolded_pair(self):
        rng = np.random.default_rng(4)
        blob, (w, b, bn, head_w, eps) = _bn_model_bytes(rng)
        g = load_model(blob)
        assert [l.kind for l in g.layers] == ["conv2d", "flatten", "linear"]
        x = rng.standard_normal((2, 6, 6)).astype(np.float32)
        conv_out = forward_trace(g, x).output("c")
        # Independent oracle: raw conv then explicit normalization.
        from scipy.signal import correlate2d

        xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
        for f in range(3):
            raw = sum(correlate2d(xp[c], w[f, c].astype(np.float64), "valid") for c in range(2))
            raw += b[f]
            ref = (raw - bn["running_mean"][f]) / np.sqrt(bn["running_var"][f] + eps)
            ref = ref * bn["weight"][f] + bn["bias"][f]
            np.testing.assert_allclose(conv_out[f], ref, rtol=1e-5, atol=1e-5)

    def test_folded_model_round_trips(self):
        rng = np.random.default_rng(5)
        blob, _ = _bn_model_bytes(rng)
        g = load_model(blob)
        blob2 = save_model(g)
        assert save_model(load_model(blob2)) == blob2

    def test_bn_after_pool_rejected(self):
        bn = {
            "weight": np.ones(2, dtype=np.float32), "bias": np.zeros(2, dtype=np.float32),
            "running_mean": np.zeros(2, dtype=np.float32), "running_var": np.ones(2, dtype=np.float32),
        }
        specs = [
            {"id": "p", "kind": "maxpool2d", "attrs": {"kernel": 2}, "tensors": {}},
            {"id": "bn", "kind": "batchnorm2d", "attrs": {}, "tensors": bn},
            {"id": "flat", "kind": "flatten", "attrs": {}, "tensors": {}},
            {"id": "head", "kind": "linear", "attrs": {},
             "tensors": {"weight": np.ones((2, 18), dtype=np.float32)}},
        ]
        edges = [("@input", "p"), ("p", "bn"), ("bn", "flat"), ("flat", "head")]
        with pytest.raises(FormatError, match="cannot fold"):
            load_model(write_model_bytes(specs, edges, (2, 6, 6), 2))


class TestDatasets:
    def test_dset_round_trip(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((7, 2, 4, 4)).astype(np.float32)
        y = rng.integers(0, 5, 7)
        x2, y2 = read_dataset(write_dataset(x, y))
        np.testing.assert_array_equal(x, x2)
        np.testing.assert_array_equal(y, y2)
        assert y2.dtype == np.int64

    def test_dset_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            read_dataset(b"XSET1" + b"\x00" * 64)

    def test_dset_truncated(self):
        rng = np.random.default_rng(7)
        blob = write_dataset(rng.standard_normal((4, 3)).astype(np.float32), np.arange(4))
        with pytest.raises(FormatError, match="truncated"):
            read_dataset(blob[:-4])

    def test_dset_label_count_mismatch(self):
        with pytest.raises(FormatError, match="labels"):
            write_dataset(np.zeros((3, 2), dtype=np.float32), np.arange(2))

    def test_idx_images_and_labels(self):
        imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        img_blob = struct.pack(">HBB3I", 0, 0x08, 3, 2, 3, 3) + imgs.tobytes()
        lab_blob = struct.pack(">HBB1I", 0, 0x08, 1, 2) + bytes([1, 0])
        assert struct.unpack(">I", img_blob[:4])[0] == 0x00000803
        assert struct.unpack(">I", lab_blob[:4])[0] == 0x00000801
        x, y = dataset_from_idx(img_blob, lab_blob)
        assert x.shape == (2, 1, 3, 3) and x.dtype == np.float32
        np.testing.assert_allclose(x[1, 0, 0, 0], 9 / 255.0)
        np.testing.assert_array_equal(y, [1, 0])

    def test_idx_float_variant(self):
        data = np.linspace(0, 1, 6, dtype=">f4")
        blob = struct.pack(">HBB2I", 0, 0x0D, 2, 2, 3) + data.tobytes()
        arr = read_idx(blob)
        assert arr.shape == (2, 3)
        np.testing.assert_allclose(arr.reshape(-1), data.astype(np.float32))

    def test_idx_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            read_idx(b"\x01\x00\x08\x01" + b"\x00" * 8)
