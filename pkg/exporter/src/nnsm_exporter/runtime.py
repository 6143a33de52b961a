"""Numpy reference evaluator for the supported ONNX operator subset.

Used as the source-side runtime when verifying an exported model against
the engine. Implements ONNX semantics (notably AveragePool's
count_include_pad switch) in float32, matching mainstream runtimes to
well below the verification tolerance.
"""

from __future__ import annotations

import numpy as np

from .onnx_wire import OnnxGraph, OnnxNode


class OnnxEvalError(ValueError):
    pass


def _attr(node: OnnxNode, name, default=None):
    return node.attrs.get(name, default)


def _pads4(node: OnnxNode):
    pads = tuple(_attr(node, "pads", (0, 0, 0, 0)))
    if len(pads) != 4 or pads[0] != pads[2] or pads[1] != pads[3]:
        raise OnnxEvalError(f"node {node.name!r}: only symmetric 2-D pads supported, got {pads}")
    return int(pads[0]), int(pads[1])


def _window_views(x, kernel, stride, padding, pad_value):
    ph, pw = padding
    padded = np.pad(
        x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value
    )
    win = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=(2, 3))
    return win[:, :, :: stride[0], :: stride[1], :, :]


def _conv(node, x, w, b):
    if int(_attr(node, "group", 1)) != 1:
        raise OnnxEvalError(f"node {node.name!r}: grouped convolution not supported")
    dil = tuple(_attr(node, "dilations", (1, 1)))
    if set(dil) != {1}:
        raise OnnxEvalError(f"node {node.name!r}: dilations not supported")
    kernel = tuple(int(k) for k in _attr(node, "kernel_shape", w.shape[2:]))
    stride = tuple(int(s) for s in _attr(node, "strides", (1, 1)))
    win = _window_views(x, kernel, stride, _pads4(node), 0.0)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out.astype(np.float32))


def _maxpool(node, x):
    kernel = tuple(int(k) for k in node.attrs["kernel_shape"])
    stride = tuple(int(s) for s in _attr(node, "strides", kernel))
    if int(_attr(node, "ceil_mode", 0)) != 0:
        raise OnnxEvalError(f"node {node.name!r}: ceil_mode not supported")
    win = _window_views(x, kernel, stride, _pads4(node), -np.inf)
    return win.max(axis=(4, 5)).astype(np.float32)


def _avgpool(node, x):
    kernel = tuple(int(k) for k in node.attrs["kernel_shape"])
    stride = tuple(int(s) for s in _attr(node, "strides", kernel))
    padding = _pads4(node)
    include_pad = int(_attr(node, "count_include_pad", 0))
    win = _window_views(x, kernel, stride, padding, 0.0)
    sums = win.sum(axis=(4, 5))
    if include_pad or padding == (0, 0):
        return (sums / (kernel[0] * kernel[1])).astype(np.float32)
    ones = np.ones((1, 1) + x.shape[2:], dtype=np.float32)
    counts = _window_views(ones, kernel, stride, padding, 0.0).sum(axis=(4, 5))
    return (sums / counts).astype(np.float32)


def _batchnorm(node, x, scale, b, mean, var):
    if int(_attr(node, "training_mode", 0)) != 0:
        raise OnnxEvalError(f"node {node.name!r}: training-mode batch norm rejected")
    eps = float(_attr(node, "epsilon", 1e-5))
    inv = scale / np.sqrt(var + eps)
    return (x * inv[None, :, None, None] + (b - mean * inv)[None, :, None, None]).astype(np.float32)


def _lrn(node, x):
    size = int(node.attrs["size"])
    alpha = float(_attr(node, "alpha", 1e-4))
    beta = float(_attr(node, "beta", 0.75))
    k = float(_attr(node, "bias", 1.0))
    half = size // 2
    c = x.shape[1]
    sq = x.astype(np.float64) ** 2
    out = np.empty_like(x, dtype=np.float64)
    for ci in range(c):
        lo, hi = max(0, ci - half), min(c, ci + half + 1)
        den = (k + alpha / size * sq[:, lo:hi].sum(axis=1)) ** beta
        out[:, ci] = x[:, ci] / den
    return out.astype(np.float32)


def _gemm(node, x, w, b):
    alpha = float(_attr(node, "alpha", 1.0))
    beta = float(_attr(node, "beta", 1.0))
    if int(_attr(node, "transA", 0)) != 0:
        raise OnnxEvalError(f"node {node.name!r}: transA not supported")
    if int(_attr(node, "transB", 0)):
        w = w.T
    out = alpha * (x @ w)
    if b is not None:
        out = out + beta * b
    return out.astype(np.float32)


def evaluate(graph: OnnxGraph, image: np.ndarray) -> np.ndarray:
    """Runs the graph on one image, returning the flattened output scores."""
    if len(graph.inputs) != 1:
        raise OnnxEvalError(f"expected exactly one graph input, got {list(graph.inputs)}")
    input_name = next(iter(graph.inputs))
    values: dict[str, np.ndarray] = {
        name: t.data for name, t in graph.initializers.items()
    }
    values[input_name] = np.asarray(image, dtype=np.float32)

    def get(name):
        if name not in values:
            raise OnnxEvalError(f"value {name!r} used before it is produced")
        return values[name]

    for node in graph.nodes:
        op = node.op_type
        if op == "Conv":
            b = get(node.inputs[2]) if len(node.inputs) > 2 else None
            out = _conv(node, get(node.inputs[0]), get(node.inputs[1]), b)
        elif op == "Relu":
            out = np.maximum(get(node.inputs[0]), 0.0)
        elif op == "MaxPool":
            out = _maxpool(node, get(node.inputs[0]))
        elif op == "AveragePool":
            out = _avgpool(node, get(node.inputs[0]))
        elif op == "GlobalAveragePool":
            out = get(node.inputs[0]).mean(axis=(2, 3), keepdims=True)
        elif op == "BatchNormalization":
            out = _batchnorm(node, *(get(n) for n in node.inputs[:5]))
        elif op == "LRN":
            out = _lrn(node, get(node.inputs[0]))
        elif op == "Flatten":
            if int(_attr(node, "axis", 1)) != 1:
                raise OnnxEvalError(f"node {node.name!r}: only axis=1 Flatten supported")
            x = get(node.inputs[0])
            out = x.reshape(x.shape[0], -1)
        elif op == "Gemm":
            b = get(node.inputs[2]) if len(node.inputs) > 2 else None
            out = _gemm(node, get(node.inputs[0]), get(node.inputs[1]), b)
        elif op == "MatMul":
            out = (get(node.inputs[0]) @ get(node.inputs[1])).astype(np.float32)
        elif op == "Add":
            out = get(node.inputs[0]) + get(node.inputs[1])
        elif op == "Concat":
            axis = int(node.attrs["axis"])
            out = np.concatenate([get(n) for n in node.inputs], axis=axis)
        else:
            raise OnnxEvalError(f"unsupported op {op!r} at node {node.name!r}")
        values[node.outputs[0]] = out

    return get(graph.outputs[0]).reshape(-1).astype(np.float32)
