"""Forward execution of a ModelGraph with full activation capture.

Every layer's input and output features are retained (no recomputation),
since the backward rules need both sides of each layer. Preprocessing
constants from the model header are applied here, so callers always work
on the raw image grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .model import LayerSpec, ModelGraph, infer_shapes
from .tensor import ShapeMismatchError, Tensor


@dataclass(frozen=True)
class LayerActivation:
    inputs: tuple[Tensor, ...]
    output: Tensor


@dataclass(frozen=True)
class ActivationTrace:
    """All recorded features of one forward pass.

    ``image`` is the raw input; ``normalized`` the image after the
    model's mean/std preprocessing (what the first layer consumed).
    ``scores`` are the pre-softmax outputs of the final layer.
    """

    entries: Mapping[int, LayerActivation]
    scores: np.ndarray
    image: Tensor
    normalized: Tensor

    def at(self, layer_id: int) -> LayerActivation:
        return self.entries[layer_id]


def normalize_image(graph: ModelGraph, image: Tensor) -> Tensor:
    mean = graph.preprocess_mean[None, :, None, None]
    std = graph.preprocess_std[None, :, None, None]
    return Tensor((image.data - mean) / std)


def lrn_forward(x: Tensor, size: int, alpha: float, beta: float, k: float) -> Tensor:
    """Across-channel response normalization with an odd, centered window."""
    half = size // 2
    sq = x.data.astype(np.float64) ** 2
    c = x.channels
    den = np.empty_like(sq)
    for ci in range(c):
        lo, hi = max(0, ci - half), min(c, ci + half + 1)
        den[:, ci] = sq[:, lo:hi].sum(axis=1)
    scale = (k + alpha / size * den) ** beta
    return Tensor((x.data / scale).astype(np.float32))


def _run_layer(layer: LayerSpec, inputs: tuple[Tensor, ...]) -> Tensor:
    kind = layer.kind
    if kind == "Conv2d":
        return T.conv2d(inputs[0], Tensor(layer.tensors["weight"][...]), layer.tensors["bias"], layer.geometry())
    if kind == "Linear":
        x = inputs[0].data.reshape(-1)
        w = layer.tensors["weight"]
        b = layer.tensors["bias"]
        out = w.astype(np.float32) @ x + b
        return Tensor(out.reshape(1, -1, 1, 1))
    if kind == "ReLU":
        return Tensor(np.maximum(inputs[0].data, 0.0))
    if kind == "MaxPool":
        p = layer.params
        return T.maxpool2d(inputs[0], p["kernel"], p["stride"], p.get("padding", (0, 0)))
    if kind == "AvgPool":
        p = layer.params
        return T.avgpool2d(inputs[0], p["kernel"], p["stride"], p.get("padding", (0, 0)))
    if kind == "AdaptiveAvgPool":
        return T.adaptive_avgpool2d(inputs[0], tuple(layer.params["output_size"]))
    if kind == "GlobalAvgPool":
        return T.global_avgpool(inputs[0])
    if kind == "BatchNormInference":
        t = layer.tensors
        eps = float(layer.params.get("eps", 1e-5))
        scale = (t["gamma"] / np.sqrt(t["var"] + eps)).astype(np.float32)
        shift = (t["beta"] - t["mean"] * scale).astype(np.float32)
        return Tensor(inputs[0].data * scale[None, :, None, None] + shift[None, :, None, None])
    if kind == "LocalResponseNorm":
        p = layer.params
        return lrn_forward(inputs[0], int(p["size"]), float(p["alpha"]), float(p["beta"]), float(p["k"]))
    if kind == "Flatten":
        return Tensor(inputs[0].data.reshape(1, -1, 1, 1))
    if kind == "Add":
        return T.ew_add(inputs[0], inputs[1])
    if kind == "Concat":
        return Tensor(np.concatenate([t.data for t in inputs], axis=1))
    raise ShapeMismatchError(f"no forward rule for layer kind {kind!r}")


def run_forward(graph: ModelGraph, image: Tensor) -> ActivationTrace:
    """Executes the graph, recording every layer's input/output features."""
    if image.shape != graph.input_shape:
        raise ShapeMismatchError(
            f"image shape {image.shape} != model input shape {graph.input_shape}"
        )
    expected = infer_shapes(graph)
    normalized = normalize_image(graph, image)
    outputs: dict[int, Tensor] = {}
    entries: dict[int, LayerActivation] = {}
    for layer in graph.layers:
        ins = tuple(outputs[s] for s in layer.inputs) if layer.inputs else (normalized,)
        try:
            out = _run_layer(layer, ins)
        except ShapeMismatchError as exc:
            raise ShapeMismatchError(f"layer {layer.id} ({layer.kind}): {exc}") from exc
        if out.shape != expected[layer.id]:
            raise ShapeMismatchError(
                f"layer {layer.id} ({layer.kind}) produced {out.shape}, "
                f"expected {expected[layer.id]}"
            )
        outputs[layer.id] = out
        entries[layer.id] = LayerActivation(inputs=ins, output=out)
    scores = outputs[graph.output_layer().id].data.reshape(-1).copy()
    return ActivationTrace(entries=entries, scores=scores, image=image, normalized=normalized)


def top_k(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties broken by lower index."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k={k} out of range for {scores.shape[0]} classes")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()
