import json
import struct

import numpy as np
import pytest

import onnx_builder as ob
from fixtures_onnx import manifest_dict, skip_bn_lrn_net, toy_conv_net
from nnsm_exporter.convert import (
    ExportError,
    ExportManifest,
    convert,
    export,
)
from nnsm_exporter.onnx_wire import parse_model


def manifest_for(fixture, tmp_path, seed=0):
    raw, net, input_shape, final = fixture(seed) if fixture is toy_conv_net else fixture()
    src = tmp_path / "model.onnx"
    src.write_bytes(raw)
    class_count = {toy_conv_net: 5}.get(fixture, 3)
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(
        manifest_dict(src, class_count, input_shape[1], final)
    ))
    return ExportManifest.from_json(mpath), raw


def parse_nnsm(path):
    raw = path.read_bytes()
    assert raw[:4] == b"NNSM"
    (version,) = struct.unpack("<I", raw[4:8])
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    return version, header, raw[16 + hlen :]


class TestConvert:
    def test_toy_net_layers_and_header(self, tmp_path):
        manifest, _ = manifest_for(toy_conv_net, tmp_path)
        out = tmp_path / "m.nnsm"
        export(manifest, out)
        version, header, blob = parse_nnsm(out)
        assert version == 1
        kinds = [l["kind"] for l in header["layers"]]
        assert kinds == ["Conv2d", "ReLU", "MaxPool", "Flatten", "Linear"]
        assert header["class_count"] == 5
        assert header["input_shape"] == [1, 3, 8, 8]
        final = [l for l in header["layers"] if l["kind"] == "Linear"]
        assert final[0]["params"]["final"] is True
        assert len(blob) == header["blob_bytes"]

    def test_matmul_add_fuses_to_linear(self, tmp_path):
        manifest, _ = manifest_for(skip_bn_lrn_net, tmp_path)
        out = tmp_path / "m.nnsm"
        export(manifest, out)
        _, header, _ = parse_nnsm(out)
        kinds = [l["kind"] for l in header["layers"]]
        assert kinds.count("Linear") == 1
        assert "Add" in kinds  # the skip connection survives as Add
        assert kinds.count("Add") == 1  # the bias Add was fused away

    def test_weights_copied_exactly(self, tmp_path):
        manifest, raw = manifest_for(toy_conv_net, tmp_path)
        converted = convert(parse_model(raw), manifest)
        g = parse_model(raw)
        np.testing.assert_array_equal(converted["blobs"][0], g.initializers["w1"].data)

    def test_reexport_is_bitwise_identical(self, tmp_path):
        manifest, _ = manifest_for(toy_conv_net, tmp_path)
        a, b = tmp_path / "a.nnsm", tmp_path / "b.nnsm"
        export(manifest, a)
        export(manifest, b)
        assert a.read_bytes() == b.read_bytes()

    def test_gemm_transb_zero_transposed(self, tmp_path):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((4, 2)).astype(np.float32)  # (in, out), transB=0
        nodes = [
            ob.node("Flatten", ["x"], ["f"], "flat", ob.attr_int("axis", 1)),
            ob.node("Gemm", ["f", "w", "b"], ["scores"], "fc"),
        ]
        inits = [ob.tensor("w", w), ob.tensor("b", np.zeros(2, dtype=np.float32))]
        raw = ob.model(nodes, inits, "x", (1, 1, 2, 2), "scores", (1, 2))
        src = tmp_path / "m.onnx"
        src.write_bytes(raw)
        manifest = ExportManifest(
            source=str(src), class_count=2, preprocess_mean=(0.0,),
            preprocess_std=(1.0,), final_linear="fc",
        )
        converted = convert(parse_model(raw), manifest)
        linear = converted["header"]["layers"][-1]
        assert linear["tensors"]["weight"]["shape"] == [2, 4]


class TestConvertErrors:
    def test_unsupported_op_names_node(self, tmp_path):
        nodes = [
            ob.node("Sigmoid", ["x"], ["y"], "sig9"),
            ob.node("Flatten", ["y"], ["f"], "flat", ob.attr_int("axis", 1)),
            ob.node("Gemm", ["f", "w", "b"], ["scores"], "fc",
                    ob.attr_int("transB", 1)),
        ]
        inits = [ob.tensor("w", np.ones((1, 4), dtype=np.float32)),
                 ob.tensor("b", np.zeros(1, dtype=np.float32))]
        raw = ob.model(nodes, inits, "x", (1, 1, 2, 2), "scores", (1, 1))
        src = tmp_path / "m.onnx"
        src.write_bytes(raw)
        manifest = ExportManifest(
            source=str(src), class_count=1, preprocess_mean=(0.0,),
            preprocess_std=(1.0,), final_linear="fc",
        )
        with pytest.raises(ExportError, match=r"Sigmoid.*sig9"):
            export(manifest, tmp_path / "m.nnsm")

    def test_training_mode_batchnorm_rejected(self, tmp_path):
        ones = np.ones(1, dtype=np.float32)
        nodes = [
            ob.node("BatchNormalization", ["x", "g", "b", "m", "v"], ["y"], "bn",
                    ob.attr_int("training_mode", 1)),
            ob.node("Flatten", ["y"], ["f"], "flat", ob.attr_int("axis", 1)),
            ob.node("Gemm", ["f", "w", "bb"], ["scores"], "fc",
                    ob.attr_int("transB", 1)),
        ]
        inits = [ob.tensor(n, ones) for n in ("g", "b", "m", "v")]
        inits += [ob.tensor("w", np.ones((1, 4), dtype=np.float32)),
                  ob.tensor("bb", np.zeros(1, dtype=np.float32))]
        raw = ob.model(nodes, inits, "x", (1, 1, 2, 2), "scores", (1, 1))
        src = tmp_path / "m.onnx"
        src.write_bytes(raw)
        manifest = ExportManifest(
            source=str(src), class_count=1, preprocess_mean=(0.0,),
            preprocess_std=(1.0,), final_linear="fc",
        )
        with pytest.raises(ExportError, match="training-mode"):
            export(manifest, tmp_path / "m.nnsm")

    def test_missing_final_marker(self, tmp_path):
        manifest, raw = manifest_for(toy_conv_net, tmp_path)
        from dataclasses import replace

        bad = replace(manifest, final_linear="nope")
        with pytest.raises(ExportError, match="matches 0 nodes"):
            convert(parse_model(raw), bad)

    def test_class_count_mismatch(self, tmp_path):
        manifest, raw = manifest_for(toy_conv_net, tmp_path)
        from dataclasses import replace

        bad = replace(manifest, class_count=7)
        with pytest.raises(ExportError, match="7 classes"):
            convert(parse_model(raw), bad)

    def test_asymmetric_pads_rejected(self, tmp_path):
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        nodes = [
            ob.node("Conv", ["x", "w"], ["y"], "conv",
                    ob.attr_ints("kernel_shape", [2, 2]),
                    ob.attr_ints("pads", [1, 0, 0, 1])),
            ob.node("Flatten", ["y"], ["f"], "flat", ob.attr_int("axis", 1)),
            ob.node("Gemm", ["f", "wf", "bf"], ["scores"], "fc",
                    ob.attr_int("transB", 1)),
        ]
        inits = [ob.tensor("w", w),
                 ob.tensor("wf", np.ones((1, 16), dtype=np.float32)),
                 ob.tensor("bf", np.zeros(1, dtype=np.float32))]
        raw = ob.model(nodes, inits, "x", (1, 1, 4, 4), "scores", (1, 1))
        src = tmp_path / "m.onnx"
        src.write_bytes(raw)
        manifest = ExportManifest(
            source=str(src), class_count=1, preprocess_mean=(0.0,),
            preprocess_std=(1.0,), final_linear="fc",
        )
        with pytest.raises(ExportError, match="asymmetric"):
            convert(parse_model(raw), manifest)

    def test_manifest_validation(self):
        with pytest.raises(ExportError, match="source format"):
            ExportManifest(source="x", class_count=1, preprocess_mean=(0.0,),
                           preprocess_std=(1.0,), final_linear="fc",
                           source_format="tflite")
        with pytest.raises(ExportError, match="family"):
            ExportManifest(source="x", class_count=1, preprocess_mean=(0.0,),
                           preprocess_std=(1.0,), final_linear="fc",
                           family="transformer")
