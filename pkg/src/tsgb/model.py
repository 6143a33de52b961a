"""Network graph data model and the NNSM serialization format.

NNSM v1 layout:

    bytes 0..3    magic ``NNSM``
    bytes 4..7    u32 little-endian version (= 1)
    bytes 8..15   u64 little-endian header byte length
    then          UTF-8 JSON header
    then          one contiguous little-endian float32 blob

The header lists layers in topological order with kind-specific
parameters and, for parameterized layers, named tensor entries giving
byte offsets into the blob. The full schema is documented in
``docs/nnsm-format.md`` with a committed golden fixture.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import ConvGeometry

MAGIC = b"NNSM"
VERSION = 1

LAYER_KINDS = frozenset(
    {
        "Conv2d",
        "Linear",
        "ReLU",
        "MaxPool",
        "AvgPool",
        "AdaptiveAvgPool",
        "GlobalAvgPool",
        "BatchNormInference",
        "LocalResponseNorm",
        "Flatten",
        "Add",
        "Concat",
    }
)

FAMILY_TAGS = ("vgg-like", "resnet-like", "other")

# Tensor entries each parameterized kind must carry, in blob order.
_TENSOR_FIELDS = {
    "Conv2d": ("weight", "bias"),
    "Linear": ("weight", "bias"),
    "BatchNormInference": ("gamma", "beta", "mean", "var"),
}


class ModelFormatError(ValueError):
    """Base class for NNSM parsing and validation failures."""


class MagicMismatchError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedBlobError(ModelFormatError):
    pass


class UnknownLayerKindError(ModelFormatError):
    pass


class GraphValidationError(ModelFormatError):
    """Raised when a loaded graph violates its structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class LayerSpec:
    """One node of the network graph.

    ``inputs`` holds source layer ids; an empty tuple means the layer
    consumes the graph input image. ``params`` carries kind-specific
    scalars, ``tensors`` the kind's named float32 arrays.
    """

    id: int
    kind: str
    inputs: tuple[int, ...]
    params: Mapping = field(default_factory=dict)
    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def geometry(self) -> ConvGeometry:
        if self.kind != "Conv2d":
            raise ValueError(f"layer {self.id} ({self.kind}) has no conv geometry")
        p = self.params
        return ConvGeometry(
            int(p["in_channels"]),
            int(p["out_channels"]),
            tuple(p["kernel"]),
            tuple(p.get("stride", (1, 1))),
            tuple(p.get("padding", (0, 0))),
        )

    def is_final_linear(self) -> bool:
        return self.kind == "Linear" and bool(self.params.get("final", False))


@dataclass(frozen=True)
class ModelGraph:
    """Topologically ordered layer list plus input/output metadata."""

    name: str
    family: str
    input_shape: tuple[int, int, int, int]
    class_count: int
    preprocess_mean: np.ndarray
    preprocess_std: np.ndarray
    layers: tuple[LayerSpec, ...]

    def layer(self, layer_id: int) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(f"no layer with id {layer_id}")

    def final_linear_id(self) -> int:
        for l in self.layers:
            if l.is_final_linear():
                return l.id
        raise GraphValidationError(["no Linear layer is marked final"])

    def consumers(self) -> dict[int, list[int]]:
        by_source: dict[int, list[int]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                by_source[src].append(l.id)
        return by_source

    def output_layer(self) -> LayerSpec:
        return self.layers[-1]


def infer_shapes(graph: ModelGraph) -> dict[int, tuple[int, int, int, int]]:
    """Output shape of every layer, walking the topological order.

    Raises GraphValidationError on the first inconsistency, naming the
    offending layer.
    """
    shapes: dict[int, tuple[int, int, int, int]] = {}

    def src_shapes(layer):
        if not layer.inputs:
            return [graph.input_shape]
        out = []
        for s in layer.inputs:
            if s not in shapes:
                raise GraphValidationError(
                    [f"layer {layer.id} reads {s} before it is defined"]
                )
            out.append(shapes[s])
        return out

    for l in graph.layers:
        srcs = src_shapes(l)
        try:
            shapes[l.id] = _infer_one(l, srcs)
        except GraphValidationError:
            raise
        except Exception as exc:
            raise GraphValidationError([f"layer {l.id} ({l.kind}): {exc}"]) from exc
    return shapes


def _infer_one(l: LayerSpec, srcs) -> tuple[int, int, int, int]:
    kind = l.kind
    if kind in ("ReLU", "BatchNormInference", "LocalResponseNorm"):
        (s,) = srcs
        if kind == "BatchNormInference" and l.tensors["gamma"].shape[0] != s[1]:
            raise ValueError(
                f"batch-norm channel extent {l.tensors['gamma'].shape[0]} != input {s[1]}"
            )
        return s
    if kind == "Conv2d":
        (s,) = srcs
        g = l.geometry()
        if s[1] != g.in_channels:
            raise ValueError(f"input channels {s[1]} != declared {g.in_channels}")
        ho, wo = g.out_hw((s[2], s[3]))
        return (s[0], g.out_channels, ho, wo)
    if kind == "Linear":
        (s,) = srcs
        feat = s[1] * s[2] * s[3]
        if feat != int(l.params["in_features"]) or (s[2], s[3]) != (1, 1):
            raise ValueError(
                f"linear expects ({l.params['in_features']},1,1) features, got {s[1:]}"
            )
        return (s[0], int(l.params["out_features"]), 1, 1)
    if kind in ("MaxPool", "AvgPool"):
        (s,) = srcs
        g = ConvGeometry(
            s[1], s[1], tuple(l.params["kernel"]),
            tuple(l.params.get("stride", l.params["kernel"])),
            tuple(l.params.get("padding", (0, 0))),
        )
        ho, wo = g.out_hw((s[2], s[3]))
        return (s[0], s[1], ho, wo)
    if kind == "AdaptiveAvgPool":
        (s,) = srcs
        oh, ow = l.params["output_size"]
        if oh > s[2] or ow > s[3] or oh < 1 or ow < 1:
            raise ValueError(f"adaptive target {oh}x{ow} invalid for input {s[2]}x{s[3]}")
        return (s[0], s[1], int(oh), int(ow))
    if kind == "GlobalAvgPool":
        (s,) = srcs
        return (s[0], s[1], 1, 1)
    if kind == "Flatten":
        (s,) = srcs
        return (s[0], s[1] * s[2] * s[3], 1, 1)
    if kind == "Add":
        if len(set(srcs)) != 1:
            raise ValueError(f"add sources disagree: {srcs}")
        return srcs[0]
    if kind == "Concat":
        spatial = {(s[0], s[2], s[3]) for s in srcs}
        if len(spatial) != 1:
            raise ValueError(f"concat spatial extents disagree: {srcs}")
        b, h, w = next(iter(spatial))
        return (b, sum(s[1] for s in srcs), h, w)
    raise UnknownLayerKindError(f"unknown layer kind {kind!r}")


def validate(graph: ModelGraph) -> list[str]:
    """All invariant violations as human-readable strings; empty iff valid."""
    v: list[str] = []
    ids = [l.id for l in graph.layers]
    if len(set(ids)) != len(ids):
        v.append("layer ids are not unique")
    if not graph.layers:
        v.append("graph has no layers")
        return v
    if graph.family not in FAMILY_TAGS:
        v.append(f"unknown family tag {graph.family!r}")

    entry = [l.id for l in graph.layers if not l.inputs]
    if len(entry) != 1:
        v.append(f"expected exactly one input node, found {len(entry)}")
    used = {s for l in graph.layers for s in l.inputs}
    terminal = [l.id for l in graph.layers if l.id not in used]
    if len(terminal) != 1:
        v.append(f"expected exactly one output node, found {len(terminal)}")

    finals = [l for l in graph.layers if l.is_final_linear()]
    if len(finals) != 1:
        v.append(f"expected exactly one final Linear, found {len(finals)}")
    elif terminal and finals[0].id != terminal[0]:
        v.append(f"final Linear {finals[0].id} is not the output node {terminal[0]}")
    if finals and int(finals[0].params["out_features"]) != graph.class_count:
        v.append(
            f"final Linear emits {finals[0].params['out_features']} features, "
            f"class count is {graph.class_count}"
        )

    c_in = graph.input_shape[1]
    if graph.preprocess_mean.shape != (c_in,) or graph.preprocess_std.shape != (c_in,):
        v.append("preprocess constants do not match the input channel extent")
    elif (graph.preprocess_std == 0).any():
        v.append("preprocess std contains zero")

    for l in graph.layers:
        if l.kind not in LAYER_KINDS:
            v.append(f"layer {l.id}: unknown kind {l.kind!r}")
            continue
        for name in _TENSOR_FIELDS.get(l.kind, ()):
            if name not in l.tensors:
                v.append(f"layer {l.id}: missing tensor {name!r}")
        if l.kind == "Conv2d" and "weight" in l.tensors:
            g = l.geometry()
            want = (g.out_channels, g.in_channels, *g.kernel)
            if l.tensors["weight"].shape != want:
                v.append(f"layer {l.id}: conv weight shape {l.tensors['weight'].shape} != {want}")
        if l.kind == "Linear" and "weight" in l.tensors:
            want = (int(l.params["out_features"]), int(l.params["in_features"]))
            if l.tensors["weight"].shape != want:
                v.append(f"layer {l.id}: linear weight shape {l.tensors['weight'].shape} != {want}")
        if l.kind == "BatchNormInference" and "var" in l.tensors:
            if (l.tensors["var"] <= 0).any():
                v.append(f"layer {l.id}: batch-norm variance must be strictly positive")
        if l.kind == "LocalResponseNorm" and int(l.params["size"]) % 2 == 0:
            v.append(f"layer {l.id}: LRN window size must be odd")
        if l.kind == "Add" and len(l.inputs) != 2:
            v.append(f"layer {l.id}: Add takes exactly 2 sources, has {len(l.inputs)}")
        if l.kind == "Concat" and len(l.inputs) < 2:
            v.append(f"layer {l.id}: Concat needs at least 2 sources")

    if not v:
        try:
            infer_shapes(graph)
        except GraphValidationError as exc:
            v.extend(exc.violations)
    return v


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _header_dict(graph: ModelGraph):
    header = {
        "name": graph.name,
        "family": graph.family,
        "input_shape": list(graph.input_shape),
        "class_count": graph.class_count,
        "preprocess": {
            "mean": [float(x) for x in graph.preprocess_mean],
            "std": [float(x) for x in graph.preprocess_std],
        },
        "layers": [],
    }
    offset = 0
    blobs = []
    for l in graph.layers:
        entry = {
            "id": l.id,
            "kind": l.kind,
            "inputs": list(l.inputs),
            "params": dict(l.params),
        }
        tensors = {}
        for name in _TENSOR_FIELDS.get(l.kind, ()):
            arr = np.ascontiguousarray(l.tensors[name], dtype=np.float32)
            tensors[name] = {"offset": offset, "shape": list(arr.shape)}
            blobs.append(arr)
            offset += arr.nbytes
        if tensors:
            entry["tensors"] = tensors
        header["layers"].append(entry)
    header["blob_bytes"] = offset
    return header, blobs


def save_model(graph: ModelGraph, path) -> None:
    """Writes the graph as a canonical, bit-reproducible NNSM v1 file."""
    violations = validate(graph)
    if violations:
        raise GraphValidationError(violations)
    header, blobs = _header_dict(graph)
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for arr in blobs:
            fh.write(arr.astype("<f4").tobytes())


def load_model(path) -> ModelGraph:
    """Parses and fully validates an NNSM v1 file."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: not an NNSM file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported NNSM version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise TruncatedBlobError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed JSON header: {exc}") from exc
    blob = raw[16 + header_len :]
    declared = int(header.get("blob_bytes", len(blob)))
    if len(blob) < declared:
        raise TruncatedBlobError(
            f"{path}: weight blob holds {len(blob)} bytes, header declares {declared}"
        )

    layers = []
    for entry in header["layers"]:
        kind = entry["kind"]
        if kind not in LAYER_KINDS:
            raise UnknownLayerKindError(f"{path}: unknown layer kind {kind!r}")
        tensors = {}
        for name, meta in entry.get("tensors", {}).items():
            shape = tuple(int(x) for x in meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = int(meta["offset"])
            end = start + 4 * count
            if start < 0 or end > len(blob):
                raise TruncatedBlobError(
                    f"{path}: tensor {name!r} of layer {entry['id']} "
                    f"spans bytes {start}..{end} of a {len(blob)}-byte blob"
                )
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()
        layers.append(
            LayerSpec(
                id=int(entry["id"]),
                kind=kind,
                inputs=tuple(int(x) for x in entry["inputs"]),
                params=dict(entry.get("params", {})),
                tensors=tensors,
            )
        )
    graph = ModelGraph(
        name=str(header.get("name", "")),
        family=str(header.get("family", "other")),
        input_shape=tuple(int(x) for x in header["input_shape"]),
        class_count=int(header["class_count"]),
        preprocess_mean=np.asarray(header["preprocess"]["mean"], dtype=np.float32),
        preprocess_std=np.asarray(header["preprocess"]["std"], dtype=np.float32),
        layers=tuple(layers),
    )
    violations = validate(graph)
    if violations:
        raise GraphValidationError(violations)
    return graph
