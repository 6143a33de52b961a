"""Self-contained reader for the ONNX protobuf subset the exporter
understands.

Parses the protobuf wire format directly (no protobuf runtime, no onnx
package) against the stable field numbers of onnx.proto3, skipping any
field it does not know. Only what conversion needs is materialized:
graph topology, node attributes, float32/int64 initializers, and
tensor-typed graph inputs/outputs. The supported operator subset is
documented in the package docs (docs/onnx-subset.md).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class OnnxParseError(ValueError):
    pass


# wire types
_VARINT, _I64, _LEN, _I32 = 0, 1, 2, 5


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxParseError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise OnnxParseError("varint too long")


def iter_fields(buf: bytes):
    """Yields (field_number, wire_type, value); value is an int for
    varint/fixed fields and bytes for length-delimited ones."""
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        fno, wt = tag >> 3, tag & 7
        if wt == _VARINT:
            val, pos = _read_varint(buf, pos)
        elif wt == _I64:
            if pos + 8 > len(buf):
                raise OnnxParseError("truncated fixed64")
            val = struct.unpack_from("<Q", buf, pos)[0]
            pos += 8
        elif wt == _LEN:
            n, pos = _read_varint(buf, pos)
            if pos + n > len(buf):
                raise OnnxParseError("truncated length-delimited field")
            val = buf[pos : pos + n]
            pos += n
        elif wt == _I32:
            if pos + 4 > len(buf):
                raise OnnxParseError("truncated fixed32")
            val = struct.unpack_from("<I", buf, pos)[0]
            pos += 4
        else:
            raise OnnxParseError(f"unsupported wire type {wt}")
        yield fno, wt, val


def _signed64(v: int) -> int:
    return v - (1 << 64) if v >= (1 << 63) else v


def _packed_or_single_ints(wt, val, out: list[int]):
    if wt == _VARINT:
        out.append(_signed64(val))
    else:  # packed
        pos = 0
        while pos < len(val):
            v, pos = _read_varint(val, pos)
            out.append(_signed64(v))


def _packed_or_single_floats(wt, val, out: list[float]):
    if wt == _I32:
        out.append(struct.unpack("<f", struct.pack("<I", val))[0])
    else:  # packed
        if len(val) % 4:
            raise OnnxParseError("packed float payload not a multiple of 4")
        out.extend(struct.unpack(f"<{len(val) // 4}f", val))


# TensorProto.DataType values the subset accepts
FLOAT, INT64 = 1, 7

# AttributeProto.AttributeType
ATTR_FLOAT, ATTR_INT, ATTR_STRING, ATTR_TENSOR = 1, 2, 3, 4
ATTR_FLOATS, ATTR_INTS = 6, 7


@dataclass
class OnnxTensor:
    name: str = ""
    dims: tuple[int, ...] = ()
    data_type: int = 0
    data: np.ndarray | None = None


@dataclass
class OnnxNode:
    op_type: str = ""
    name: str = ""
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


@dataclass
class OnnxGraph:
    nodes: list[OnnxNode]
    initializers: dict[str, OnnxTensor]
    inputs: dict[str, tuple[int, ...]]   # graph inputs minus initializers
    outputs: list[str]
    opset: int
    ir_version: int


def _parse_tensor(buf: bytes) -> OnnxTensor:
    t = OnnxTensor()
    dims: list[int] = []
    float_data: list[float] = []
    int64_data: list[int] = []
    raw = b""
    for fno, wt, val in iter_fields(buf):
        if fno == 1:
            _packed_or_single_ints(wt, val, dims)
        elif fno == 2:
            t.data_type = val
        elif fno == 4:
            _packed_or_single_floats(wt, val, float_data)
        elif fno == 7:
            _packed_or_single_ints(wt, val, int64_data)
        elif fno == 8:
            t.name = val.decode("utf-8")
        elif fno == 9:
            raw = val
        elif fno == 14 and val != 0:
            raise OnnxParseError(f"tensor {t.name!r}: external data not supported")
    t.dims = tuple(dims)
    count = int(np.prod(t.dims)) if t.dims else 1
    if t.data_type == FLOAT:
        if raw:
            arr = np.frombuffer(raw, dtype="<f4", count=count)
        else:
            arr = np.asarray(float_data, dtype=np.float32)
    elif t.data_type == INT64:
        if raw:
            arr = np.frombuffer(raw, dtype="<i8", count=count)
        else:
            arr = np.asarray(int64_data, dtype=np.int64)
    else:
        raise OnnxParseError(
            f"tensor {t.name!r}: unsupported data type {t.data_type}"
        )
    if arr.size != count:
        raise OnnxParseError(
            f"tensor {t.name!r}: payload holds {arr.size} values, dims say {count}"
        )
    t.data = arr.reshape(t.dims)
    return t


def _parse_attribute(buf: bytes):
    name = ""
    atype = 0
    f_val = None
    i_val = None
    s_val = None
    t_val = None
    floats: list[float] = []
    ints: list[int] = []
    for fno, wt, val in iter_fields(buf):
        if fno == 1:
            name = val.decode("utf-8")
        elif fno == 2:
            f_val = struct.unpack("<f", struct.pack("<I", val))[0]
        elif fno == 3:
            i_val = _signed64(val)
        elif fno == 4:
            s_val = val.decode("utf-8", errors="replace")
        elif fno == 5:
            t_val = _parse_tensor(val)
        elif fno == 7:
            _packed_or_single_floats(wt, val, floats)
        elif fno == 8:
            _packed_or_single_ints(wt, val, ints)
        elif fno == 20:
            atype = val
    if atype == ATTR_FLOAT:
        return name, f_val
    if atype == ATTR_INT:
        return name, i_val
    if atype == ATTR_STRING:
        return name, s_val
    if atype == ATTR_TENSOR:
        return name, t_val
    if atype == ATTR_FLOATS:
        return name, tuple(floats)
    if atype == ATTR_INTS:
        return name, tuple(ints)
    # tolerate writers that omit the type field when exactly one value set
    for candidate in (f_val, i_val, s_val, t_val):
        if candidate is not None:
            return name, candidate
    if ints:
        return name, tuple(ints)
    if floats:
        return name, tuple(floats)
    raise OnnxParseError(f"attribute {name!r} has an unsupported type {atype}")


def _parse_node(buf: bytes) -> OnnxNode:
    node = OnnxNode()
    inputs: list[str] = []
    outputs: list[str] = []
    for fno, wt, val in iter_fields(buf):
        if fno == 1:
            inputs.append(val.decode("utf-8"))
        elif fno == 2:
            outputs.append(val.decode("utf-8"))
        elif fno == 3:
            node.name = val.decode("utf-8")
        elif fno == 4:
            node.op_type = val.decode("utf-8")
        elif fno == 5:
            aname, aval = _parse_attribute(val)
            node.attrs[aname] = aval
    node.inputs = tuple(inputs)
    node.outputs = tuple(outputs)
    return node


def _parse_shape(buf: bytes) -> tuple[int, ...]:
    dims: list[int] = []
    for fno, wt, val in iter_fields(buf):
        if fno == 1:  # Dimension
            dim_value = None
            for dfno, dwt, dval in iter_fields(val):
                if dfno == 1:
                    dim_value = _signed64(dval)
            if dim_value is None:
                raise OnnxParseError("symbolic dimensions are not supported")
            dims.append(dim_value)
    return tuple(dims)


def _parse_value_info(buf: bytes) -> tuple[str, tuple[int, ...] | None]:
    name = ""
    shape = None
    for fno, wt, val in iter_fields(buf):
        if fno == 1:
            name = val.decode("utf-8")
        elif fno == 2:  # TypeProto
            for tfno, twt, tval in iter_fields(val):
                if tfno == 1:  # tensor_type
                    for sfno, swt, sval in iter_fields(tval):
                        if sfno == 2:  # shape
                            shape = _parse_shape(sval)
    return name, shape


def _parse_graph(buf: bytes) -> tuple[list[OnnxNode], dict, dict, list[str]]:
    nodes: list[OnnxNode] = []
    initializers: dict[str, OnnxTensor] = {}
    raw_inputs: dict[str, tuple[int, ...] | None] = {}
    outputs: list[str] = []
    for fno, wt, val in iter_fields(buf):
        if fno == 1:
            nodes.append(_parse_node(val))
        elif fno == 5:
            t = _parse_tensor(val)
            initializers[t.name] = t
        elif fno == 11:
            name, shape = _parse_value_info(val)
            raw_inputs[name] = shape
        elif fno == 12:
            name, _ = _parse_value_info(val)
            outputs.append(name)
    inputs = {
        name: shape
        for name, shape in raw_inputs.items()
        if name not in initializers
    }
    return nodes, initializers, inputs, outputs


def parse_model(raw: bytes) -> OnnxGraph:
    """Parses ONNX ModelProto bytes into the exporter's graph model."""
    graph_buf = None
    opset = 0
    ir_version = 0
    for fno, wt, val in iter_fields(raw):
        if fno == 1:
            ir_version = val
        elif fno == 7:
            graph_buf = val
        elif fno == 8:  # OperatorSetIdProto
            domain, version = "", 0
            for ofno, owt, oval in iter_fields(val):
                if ofno == 1:
                    domain = oval.decode("utf-8")
                elif ofno == 2:
                    version = _signed64(oval)
            if domain == "":
                opset = max(opset, version)
    if graph_buf is None:
        raise OnnxParseError("model carries no graph")
    nodes, initializers, inputs, outputs = _parse_graph(graph_buf)
    if not outputs:
        raise OnnxParseError("graph declares no outputs")
    for name, shape in inputs.items():
        if shape is None:
            raise OnnxParseError(f"graph input {name!r} has no static shape")
    return OnnxGraph(
        nodes=nodes,
        initializers=initializers,
        inputs={k: tuple(v) for k, v in inputs.items()},
        outputs=outputs,
        opset=opset,
        ir_version=ir_version,
    )


def load_onnx(path) -> OnnxGraph:
    with open(path, "rb") as fh:
        return parse_model(fh.read())
