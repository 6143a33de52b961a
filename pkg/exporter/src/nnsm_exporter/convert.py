"""ONNX-subset to NNSM conversion.

The converter maps each supported ONNX node onto one engine layer,
infers shapes as it walks the graph, and writes an NNSM v1 file per the
engine's documented format. Batch norm is exported un-folded, in
inference form. Unsupported constructs abort with the op name and node
id; determinism is bit-level (re-exporting a source yields identical
bytes).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .onnx_wire import OnnxGraph, OnnxNode, load_onnx

SUPPORTED_OPS = (
    "Conv", "Gemm", "MatMul", "Add", "Relu", "MaxPool", "AveragePool",
    "GlobalAveragePool", "BatchNormalization", "LRN", "Flatten", "Concat",
)

FAMILY_TAGS = ("vgg-like", "resnet-like", "other")


class ExportError(ValueError):
    pass


@dataclass(frozen=True)
class ExportManifest:
    """What to convert and the metadata the engine needs alongside it."""

    source: str
    class_count: int
    preprocess_mean: tuple[float, ...]
    preprocess_std: tuple[float, ...]
    final_linear: str  # node name of the classifier Gemm/MatMul
    name: str = "exported"
    family: str = "other"
    source_format: str = "onnx"

    def __post_init__(self):
        if self.source_format != "onnx":
            raise ExportError(f"unsupported source format {self.source_format!r}")
        if self.family not in FAMILY_TAGS:
            raise ExportError(f"unknown family tag {self.family!r}")
        if self.class_count < 1:
            raise ExportError(f"class count must be positive, got {self.class_count}")
        if len(self.preprocess_mean) != len(self.preprocess_std):
            raise ExportError("preprocess mean/std lengths differ")

    @staticmethod
    def from_json(path) -> "ExportManifest":
        raw = json.loads(Path(path).read_text())
        try:
            pre = raw.get("preprocess", {})
            return ExportManifest(
                source=raw["source"],
                class_count=int(raw["class_count"]),
                preprocess_mean=tuple(float(x) for x in pre["mean"]),
                preprocess_std=tuple(float(x) for x in pre["std"]),
                final_linear=raw["final_linear"],
                name=raw.get("name", "exported"),
                family=raw.get("family", "other"),
                source_format=raw.get("source_format", "onnx"),
            )
        except KeyError as exc:
            raise ExportError(f"manifest {path} is missing field {exc}") from exc


def _sym_pads(node: OnnxNode) -> tuple[int, int]:
    pads = tuple(int(p) for p in node.attrs.get("pads", (0, 0, 0, 0)))
    if len(pads) != 4 or pads[0] != pads[2] or pads[1] != pads[3]:
        raise ExportError(
            f"node {node.name!r}: asymmetric pads {pads} are not supported"
        )
    return pads[0], pads[1]


def _conv_out_hw(hw, kernel, stride, padding):
    out = tuple(
        (n + 2 * p - k) // s + 1
        for n, k, s, p in zip(hw, kernel, stride, padding)
    )
    if min(out) < 1:
        raise ExportError(f"non-positive conv output extent {out}")
    return out


class _Builder:
    """Accumulates engine layers while tracking value shapes."""

    def __init__(self, input_name, input_shape):
        self.layers: list[dict] = []
        self.blobs: list[np.ndarray] = []
        self.offset = 0
        self.next_id = 1
        # ONNX value name -> (engine layer id or None for the graph input, shape)
        self.values: dict[str, tuple[int | None, tuple[int, ...]]] = {
            input_name: (None, tuple(input_shape))
        }

    def shape_of(self, name) -> tuple[int, ...]:
        if name not in self.values:
            raise ExportError(f"value {name!r} is not produced by any supported node")
        return self.values[name][1]

    def source_ids(self, names) -> list[int]:
        ids = []
        for n in names:
            src, _ = self.values[n]
            if src is not None:
                ids.append(src)
        return ids

    def add_layer(self, kind, src_names, params, tensors, out_name, out_shape, node_name):
        entry = {
            "id": self.next_id,
            "kind": kind,
            "inputs": self.source_ids(src_names),
            "params": params,
        }
        if tensors:
            tensor_specs = {}
            for tname, arr in tensors.items():
                arr = np.ascontiguousarray(arr, dtype=np.float32)
                tensor_specs[tname] = {"offset": self.offset, "shape": list(arr.shape)}
                self.blobs.append(arr)
                self.offset += arr.nbytes
            entry["tensors"] = tensor_specs
        self.layers.append(entry)
        self.values[out_name] = (self.next_id, tuple(out_shape))
        self.next_id += 1


def _initializer(graph: OnnxGraph, node: OnnxNode, idx: int, what: str) -> np.ndarray:
    if idx >= len(node.inputs) or node.inputs[idx] not in graph.initializers:
        raise ExportError(f"node {node.name!r}: {what} must be a stored initializer")
    t = graph.initializers[node.inputs[idx]]
    return np.asarray(t.data, dtype=np.float32)


def convert(graph: OnnxGraph, manifest: ExportManifest) -> dict:
    """ONNX graph -> NNSM header dict plus weight blobs (in header order)."""
    if len(graph.inputs) != 1:
        raise ExportError(f"expected exactly one graph input, got {sorted(graph.inputs)}")
    input_name, input_shape = next(iter(graph.inputs.items()))
    if len(input_shape) != 4 or input_shape[0] != 1:
        raise ExportError(
            f"graph input must be (1, c, h, w), got {input_shape}"
        )
    if len(manifest.preprocess_mean) != input_shape[1]:
        raise ExportError(
            f"preprocess constants cover {len(manifest.preprocess_mean)} channels, "
            f"input has {input_shape[1]}"
        )
    final_matches = [n for n in graph.nodes if n.name == manifest.final_linear]
    if len(final_matches) != 1:
        raise ExportError(
            f"final-Linear identifier {manifest.final_linear!r} matches "
            f"{len(final_matches)} nodes, expected exactly one"
        )
    if final_matches[0].op_type not in ("Gemm", "MatMul"):
        raise ExportError(
            f"final-Linear node {manifest.final_linear!r} is a "
            f"{final_matches[0].op_type}, expected Gemm or MatMul"
        )

    b = _Builder(input_name, input_shape)
    consumed: set[int] = set()  # node indexes fused into a predecessor
    for idx, node in enumerate(graph.nodes):
        if idx in consumed:
            continue
        op = node.op_type
        if op not in SUPPORTED_OPS:
            raise ExportError(f"unsupported op {op!r} at node {node.name!r}")
        if op == "Conv":
            _convert_conv(graph, b, node)
        elif op == "Relu":
            s = b.shape_of(node.inputs[0])
            b.add_layer("ReLU", node.inputs[:1], {}, {}, node.outputs[0], s, node.name)
        elif op == "MaxPool":
            _convert_pool(b, node, "MaxPool")
        elif op == "AveragePool":
            pads = _sym_pads(node)
            if pads != (0, 0) and not int(node.attrs.get("count_include_pad", 0)):
                raise ExportError(
                    f"node {node.name!r}: padded AveragePool needs count_include_pad=1"
                )
            if int(node.attrs.get("ceil_mode", 0)) != 0:
                raise ExportError(f"node {node.name!r}: ceil_mode not supported")
            _convert_pool(b, node, "AvgPool")
        elif op == "GlobalAveragePool":
            s = b.shape_of(node.inputs[0])
            b.add_layer(
                "GlobalAvgPool", node.inputs[:1], {}, {},
                node.outputs[0], (s[0], s[1], 1, 1), node.name,
            )
        elif op == "BatchNormalization":
            _convert_batchnorm(graph, b, node)
        elif op == "LRN":
            _convert_lrn(b, node)
        elif op == "Flatten":
            if int(node.attrs.get("axis", 1)) != 1:
                raise ExportError(f"node {node.name!r}: only axis=1 Flatten supported")
            s = b.shape_of(node.inputs[0])
            b.add_layer(
                "Flatten", node.inputs[:1], {}, {},
                node.outputs[0], (1, s[1] * s[2] * s[3], 1, 1), node.name,
            )
        elif op == "Gemm":
            _convert_gemm(graph, b, node, manifest)
        elif op == "MatMul":
            consumed.add(_convert_matmul_add(graph, b, node, idx, manifest))
        elif op == "Add":
            _convert_add(graph, b, node)
        elif op == "Concat":
            _convert_concat(b, node)

    out_name = graph.outputs[0]
    if out_name not in b.values:
        raise ExportError(f"graph output {out_name!r} was not produced")
    out_shape = b.shape_of(out_name)
    if out_shape[1] != manifest.class_count:
        raise ExportError(
            f"manifest declares {manifest.class_count} classes, "
            f"model emits {out_shape[1]}"
        )

    header = {
        "name": manifest.name,
        "family": manifest.family,
        "input_shape": list(input_shape),
        "class_count": manifest.class_count,
        "preprocess": {
            "mean": [float(x) for x in manifest.preprocess_mean],
            "std": [float(x) for x in manifest.preprocess_std],
        },
        "layers": b.layers,
        "blob_bytes": b.offset,
    }
    return {"header": header, "blobs": b.blobs}


def _convert_conv(graph, b, node):
    w = _initializer(graph, node, 1, "conv weight")
    if w.ndim != 4:
        raise ExportError(f"node {node.name!r}: conv weight must be 4-D")
    if int(node.attrs.get("group", 1)) != 1:
        raise ExportError(f"node {node.name!r}: grouped convolution not supported")
    if set(node.attrs.get("dilations", (1, 1))) != {1}:
        raise ExportError(f"node {node.name!r}: dilations not supported")
    bias = (
        _initializer(graph, node, 2, "conv bias")
        if len(node.inputs) > 2
        else np.zeros(w.shape[0], dtype=np.float32)
    )
    kernel = tuple(int(k) for k in node.attrs.get("kernel_shape", w.shape[2:]))
    stride = tuple(int(s) for s in node.attrs.get("strides", (1, 1)))
    padding = _sym_pads(node)
    s = b.shape_of(node.inputs[0])
    if s[1] != w.shape[1]:
        raise ExportError(
            f"node {node.name!r}: input has {s[1]} channels, weight expects {w.shape[1]}"
        )
    out_hw = _conv_out_hw(s[2:], kernel, stride, padding)
    b.add_layer(
        "Conv2d",
        node.inputs[:1],
        {
            "in_channels": int(w.shape[1]),
            "out_channels": int(w.shape[0]),
            "kernel": list(kernel),
            "stride": list(stride),
            "padding": list(padding),
        },
        {"weight": w, "bias": bias.reshape(-1)},
        node.outputs[0],
        (1, int(w.shape[0]), *out_hw),
        node.name,
    )


def _convert_pool(b, node, kind):
    kernel = tuple(int(k) for k in node.attrs["kernel_shape"])
    stride = tuple(int(s) for s in node.attrs.get("strides", kernel))
    padding = _sym_pads(node)
    if kind == "MaxPool" and int(node.attrs.get("ceil_mode", 0)) != 0:
        raise ExportError(f"node {node.name!r}: ceil_mode not supported")
    s = b.shape_of(node.inputs[0])
    out_hw = _conv_out_hw(s[2:], kernel, stride, padding)
    b.add_layer(
        kind,
        node.inputs[:1],
        {"kernel": list(kernel), "stride": list(stride), "padding": list(padding)},
        {},
        node.outputs[0],
        (s[0], s[1], *out_hw),
        node.name,
    )


def _convert_batchnorm(graph, b, node):
    if int(node.attrs.get("training_mode", 0)) != 0:
        raise ExportError(f"node {node.name!r}: training-mode batch norm rejected")
    if len(node.outputs) > 1 and any(node.outputs[1:]):
        raise ExportError(f"node {node.name!r}: batch norm with stats outputs rejected")
    gamma = _initializer(graph, node, 1, "batch-norm scale")
    beta = _initializer(graph, node, 2, "batch-norm shift")
    mean = _initializer(graph, node, 3, "batch-norm mean")
    var = _initializer(graph, node, 4, "batch-norm variance")
    if (var <= 0).any():
        raise ExportError(f"node {node.name!r}: variance must be strictly positive")
    s = b.shape_of(node.inputs[0])
    b.add_layer(
        "BatchNormInference",
        node.inputs[:1],
        {"eps": float(node.attrs.get("epsilon", 1e-5))},
        {"gamma": gamma, "beta": beta, "mean": mean, "var": var},
        node.outputs[0],
        s,
        node.name,
    )


def _convert_lrn(b, node):
    size = int(node.attrs["size"])
    if size % 2 == 0:
        raise ExportError(f"node {node.name!r}: LRN window size must be odd")
    s = b.shape_of(node.inputs[0])
    b.add_layer(
        "LocalResponseNorm",
        node.inputs[:1],
        {
            "size": size,
            "alpha": float(node.attrs.get("alpha", 1e-4)),
            "beta": float(node.attrs.get("beta", 0.75)),
            "k": float(node.attrs.get("bias", 1.0)),
        },
        {},
        node.outputs[0],
        s,
        node.name,
    )


def _linear_layer(b, node, manifest, src_name, w_out_in, bias, out_name):
    s = b.shape_of(src_name)
    in_features = s[1] * s[2] * s[3]
    if w_out_in.shape[1] != in_features:
        raise ExportError(
            f"node {node.name!r}: weight expects {w_out_in.shape[1]} features, "
            f"input provides {in_features}"
        )
    b.add_layer(
        "Linear",
        (src_name,),
        {
            "in_features": int(in_features),
            "out_features": int(w_out_in.shape[0]),
            "final": node.name == manifest.final_linear,
        },
        {"weight": w_out_in, "bias": bias.reshape(-1)},
        out_name,
        (1, int(w_out_in.shape[0]), 1, 1),
        node.name,
    )


def _convert_gemm(graph, b, node, manifest):
    if float(node.attrs.get("alpha", 1.0)) != 1.0 or float(node.attrs.get("beta", 1.0)) != 1.0:
        raise ExportError(f"node {node.name!r}: Gemm alpha/beta must be 1")
    if int(node.attrs.get("transA", 0)) != 0:
        raise ExportError(f"node {node.name!r}: Gemm transA not supported")
    w = _initializer(graph, node, 1, "linear weight")
    if int(node.attrs.get("transB", 0)) == 0:
        w = np.ascontiguousarray(w.T)
    bias = (
        _initializer(graph, node, 2, "linear bias")
        if len(node.inputs) > 2
        else np.zeros(w.shape[0], dtype=np.float32)
    )
    _linear_layer(b, node, manifest, node.inputs[0], w, bias, node.outputs[0])


def _convert_matmul_add(graph, b, node, idx, manifest) -> int:
    """MatMul immediately consumed by an initializer Add becomes one
    Linear layer; returns the Add's node index to mark it consumed."""
    w = _initializer(graph, node, 1, "linear weight")
    out = node.outputs[0]
    consumers = [
        (i, n)
        for i, n in enumerate(graph.nodes)
        if out in n.inputs
    ]
    if len(consumers) != 1 or consumers[0][1].op_type != "Add":
        raise ExportError(
            f"node {node.name!r}: MatMul must feed exactly one bias Add"
        )
    add_idx, add_node = consumers[0]
    other = [n for n in add_node.inputs if n != out]
    if len(other) != 1 or other[0] not in graph.initializers:
        raise ExportError(
            f"node {add_node.name!r}: bias Add needs one initializer operand"
        )
    bias = np.asarray(graph.initializers[other[0]].data, dtype=np.float32)
    # identifier may name either half of the fused pair
    fused = node if node.name == manifest.final_linear else add_node
    _linear_layer(
        b, fused, manifest, node.inputs[0],
        np.ascontiguousarray(w.T), bias, add_node.outputs[0],
    )
    return add_idx


def _convert_add(graph, b, node):
    if any(n in graph.initializers for n in node.inputs):
        raise ExportError(
            f"node {node.name!r}: Add with initializer operands is only "
            f"supported as a MatMul bias"
        )
    s0 = b.shape_of(node.inputs[0])
    s1 = b.shape_of(node.inputs[1])
    if s0 != s1:
        raise ExportError(f"node {node.name!r}: Add operand shapes {s0} != {s1}")
    b.add_layer("Add", node.inputs[:2], {}, {}, node.outputs[0], s0, node.name)


def _convert_concat(b, node):
    if int(node.attrs["axis"]) != 1:
        raise ExportError(f"node {node.name!r}: only channel-axis Concat supported")
    shapes = [b.shape_of(n) for n in node.inputs]
    spatial = {(s[0], s[2], s[3]) for s in shapes}
    if len(spatial) != 1:
        raise ExportError(f"node {node.name!r}: Concat spatial extents disagree")
    bs, h, w = next(iter(spatial))
    out = (bs, sum(s[1] for s in shapes), h, w)
    b.add_layer("Concat", node.inputs, {}, {}, node.outputs[0], out, node.name)


def write_nnsm(converted: dict, path) -> None:
    """Serializes a conversion result as a canonical NNSM v1 file."""
    payload = json.dumps(
        converted["header"], sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"NNSM")
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for arr in converted["blobs"]:
            fh.write(arr.astype("<f4").tobytes())


def export(manifest: ExportManifest, out_path) -> None:
    graph = load_onnx(manifest.source)
    write_nnsm(convert(graph, manifest), out_path)
