"""Target-selective gradient propagation from the class scores to the image.

The engine walks the graph top-down and dispatches one backward rule per
layer. Under the rectified rule sets, the final fully-connected layer
enhances its negative connections by the ratio of positive to negative
contributions, convolutions redistribute gradient by feature-response
ratios over each receptive field (weights are not consulted), and
normalization layers rescale by the output/input feature ratio. All other
layers keep their ordinary gradients. The plain gradient and guided-ReLU
rule sets are included as baselines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .forward import ActivationTrace
from .model import LayerSpec, ModelGraph
from .tensor import EPS_DEFAULT, ConvGeometry, Tensor, guard_denominator, guard_hits

RULE_SETS = ("tsgb", "vanilla", "guided", "tsgb_fc_only", "tsgb_conv_only")

# Best-performing scale coefficients per model family; always overridable.
FAMILY_ALPHA = {"vgg-like": 0.8, "resnet-like": 0.9}


class AttributionError(ValueError):
    pass


class MissingRuleError(AttributionError):
    pass


def default_alpha(family: str) -> float:
    return FAMILY_ALPHA.get(family, 0.8)


@dataclass(frozen=True)
class AttributionRequest:
    """What to attribute: target class, scale coefficient, rule selection.

    ``avgpool_ratio`` controls whether average-pooling layers use the
    feature-ratio rule: "auto" applies it only when the pooled input
    contains negative values (and a rectified rule set is active),
    "always"/"never" force either branch.
    """

    target: int
    alpha: float = 0.8
    rule_set: str = "tsgb"
    stop_layer: int | None = None
    eps: float = EPS_DEFAULT
    avgpool_ratio: str = "auto"

    def __post_init__(self):
        if self.target < 0:
            raise AttributionError(f"target class {self.target} is negative")
        if not self.alpha > 0:
            raise AttributionError(f"alpha must be positive, got {self.alpha}")
        if self.rule_set not in RULE_SETS:
            raise AttributionError(
                f"unknown rule set {self.rule_set!r}, expected one of {RULE_SETS}"
            )
        if self.avgpool_ratio not in ("auto", "always", "never"):
            raise AttributionError(f"bad avgpool_ratio {self.avgpool_ratio!r}")

    @property
    def rectify_fc(self) -> bool:
        return self.rule_set in ("tsgb", "tsgb_fc_only")

    @property
    def rectify_conv(self) -> bool:
        return self.rule_set in ("tsgb", "tsgb_conv_only")


@dataclass(frozen=True)
class AttributionState:
    """Per-layer gradients w.r.t. each layer's input features.

    ``input_gradient`` is the gradient on the raw image grid (after
    undoing the preprocessing scale); it is None when a stop layer cut
    the propagation short.
    """

    gradients: Mapping[int, tuple[Tensor, ...]]
    input_gradient: Tensor | None
    diagnostics: dict
    request: AttributionRequest

    def at(self, layer_id: int) -> Tensor:
        grads = self.gradients[layer_id]
        if len(grads) != 1:
            raise KeyError(f"layer {layer_id} has {len(grads)} input gradients")
        return grads[0]


class _Counter:
    """Mutable epsilon-guard hit counter threaded through the rules."""

    def __init__(self):
        self.hits = 0

    def add(self, denom, eps):
        self.hits += guard_hits(denom, eps)


# ---------------------------------------------------------------------------
# Fully-connected rules
# ---------------------------------------------------------------------------


def init_output_gradient(trace: ActivationTrace, target: int) -> np.ndarray:
    """One-hot gradient over the pre-softmax scores, 1 at the target."""
    n = trace.scores.shape[0]
    if not 0 <= target < n:
        raise AttributionError(f"target class {target} out of range [0, {n})")
    g = np.zeros(n, dtype=np.float32)
    g[target] = 1.0
    return g


def enhancement_factors(
    x: np.ndarray, weight: np.ndarray, alpha: float, eps: float = EPS_DEFAULT
) -> np.ndarray:
    """Per-output-node multiplier on negative connections.

    E_j = alpha * (sum_i x_i w+_ij) / (sum_i |x_i w-_ij|), with the
    denominator eps-guarded. Output nodes whose column has no negative
    weights fall back to E_j = 1 (the rule is independent of E there).
    """
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    w = np.asarray(weight, dtype=np.float32)
    wp = np.maximum(w, 0.0)
    wn = w - wp
    pos = wp @ x
    neg = np.abs(wn) @ np.abs(x)
    has_neg = (wn < 0).any(axis=1)
    e = np.where(has_neg, alpha * pos / np.maximum(neg, eps), 1.0)
    return e.astype(np.float32)


def backward_fc_final(
    x: np.ndarray,
    weight: np.ndarray,
    g_out: np.ndarray,
    alpha: float,
    eps: float = EPS_DEFAULT,
    counter: _Counter | None = None,
) -> np.ndarray:
    """Rectified backward rule of the final fully-connected layer:
    g_i = sum_j (w+_ij + E_j w-_ij) g_j."""
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    w = np.asarray(weight, dtype=np.float32)
    g_out = np.asarray(g_out, dtype=np.float32).reshape(-1)
    if w.shape != (g_out.shape[0], x.shape[0]):
        raise T.ShapeMismatchError(
            f"weight shape {w.shape} incompatible with x {x.shape} / g {g_out.shape}"
        )
    wp = np.maximum(w, 0.0)
    wn = w - wp
    e = enhancement_factors(x, w, alpha, eps)
    if counter is not None:
        neg = np.abs(wn) @ np.abs(x)
        counter.add(neg[(wn < 0).any(axis=1)], eps)
    return wp.T @ g_out + wn.T @ (e * g_out)


def backward_fc_vanilla(weight: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Ordinary gradient of a fully-connected layer: g = W^T g_out."""
    w = np.asarray(weight, dtype=np.float32)
    g_out = np.asarray(g_out, dtype=np.float32).reshape(-1)
    if w.shape[0] != g_out.shape[0]:
        raise T.ShapeMismatchError(
            f"weight shape {w.shape} incompatible with gradient {g_out.shape}"
        )
    return w.T @ g_out


# ---------------------------------------------------------------------------
# Convolution rules
# ---------------------------------------------------------------------------


def backward_conv_direct(
    x_in: Tensor,
    x_out: Tensor,
    g_out: Tensor,
    geom: ConvGeometry,
    eps: float = EPS_DEFAULT,
) -> Tensor:
    """Reference form of the feature-ratio conv rule, receptive field by
    receptive field.

    Each output node distributes x_j * g_j, normalised by the sum of
    input magnitudes over its window, back across that window; the
    window-magnitude denominator is recomputed for every output channel,
    mirroring the uncollapsed multi-channel kernel. Kept as the oracle
    the optimised form is tested against; accumulates in float64.
    """
    _check_conv_shapes(x_in, x_out, g_out, geom)
    kh, kw = geom.kernel
    sh, sw = geom.stride
    ph, pw = geom.padding
    h, w = x_in.spatial
    ho, wo = x_out.spatial
    out = np.empty_like(x_in.data)
    for bi in range(x_in.shape[0]):
        apad = np.pad(
            np.abs(x_in.data[bi].astype(np.float64)),
            ((0, 0), (ph, ph), (pw, pw)),
        )
        xo_go = x_out.data[bi].astype(np.float64) * g_out.data[bi].astype(np.float64)
        acc = np.zeros((h + 2 * ph, w + 2 * pw), dtype=np.float64)
        for n in range(geom.out_channels):
            t = xo_go[n]
            for oi in range(ho):
                hs = oi * sh
                for oj in range(wo):
                    ws = oj * sw
                    den = max(apad[:, hs : hs + kh, ws : ws + kw].sum(), eps)
                    acc[hs : hs + kh, ws : ws + kw] += t[oi, oj] / den
        core = acc[ph : ph + h, pw : pw + w]
        out[bi] = (core[None, :, :] * np.sign(x_in.data[bi].astype(np.float64))).astype(
            np.float32
        )
    return Tensor(out)


def backward_conv_fast(
    x_in: Tensor,
    x_out: Tensor,
    g_out: Tensor,
    geom: ConvGeometry,
    eps: float = EPS_DEFAULT,
    counter: _Counter | None = None,
) -> Tensor:
    """Channel-collapsed form of the feature-ratio conv rule.

    Because the ratio kernel is all ones, the channel sums can be taken
    first: one single-channel convolution for the denominator, one
    single-channel adjoint convolution for the scatter, then the sign
    mask per input channel. Equal to backward_conv_direct up to float
    round-off at a fraction of its cost; independent of the conv weights
    by construction.
    """
    _check_conv_shapes(x_in, x_out, g_out, geom)
    ones = Tensor(np.ones((1, 1, *geom.kernel), dtype=np.float32))
    cg = geom.collapsed()
    den = T.conv2d(T.channel_sum(T.tensor_abs(x_in)), ones, None, cg)
    if counter is not None:
        counter.add(den.data, eps)
    num = T.channel_sum(T.ew_mul(x_out, g_out))
    s = Tensor(num.data / guard_denominator(den.data, eps))
    shared = T.conv2d_transposed(s, ones, cg, output_hw=x_in.spatial)
    return Tensor(shared.data * np.sign(x_in.data))


def _check_conv_shapes(x_in, x_out, g_out, geom):
    if x_in.channels != geom.in_channels:
        raise T.ShapeMismatchError(
            f"input channel extent {x_in.channels} != geometry {geom.in_channels}"
        )
    ho, wo = geom.out_hw(x_in.spatial)
    want = (x_in.shape[0], geom.out_channels, ho, wo)
    if x_out.shape != want or g_out.shape != want:
        raise T.ShapeMismatchError(
            f"output features {x_out.shape} / gradient {g_out.shape} != {want}"
        )


# ---------------------------------------------------------------------------
# Normalization and pass-through rules
# ---------------------------------------------------------------------------


def backward_norm(
    x_in: Tensor,
    x_out: Tensor,
    g_out: Tensor,
    eps: float = EPS_DEFAULT,
    counter: _Counter | None = None,
) -> Tensor:
    """Feature-ratio rule for elementwise normalization layers:
    g_in = (x_out / x_in) * g_out, eps-guarded.

    Away from guarded cells this conserves the product:
    x_in * g_in == x_out * g_out.
    """
    if not (x_in.shape == x_out.shape == g_out.shape):
        raise T.ShapeMismatchError(
            f"normalization rule needs equal shapes, got {x_in.shape}, "
            f"{x_out.shape}, {g_out.shape}"
        )
    if counter is not None:
        counter.add(x_in.data, eps)
    return Tensor(x_out.data / guard_denominator(x_in.data, eps) * g_out.data)


def backward_passthrough(
    kind: str,
    layer: LayerSpec,
    inputs: tuple[Tensor, ...],
    g_out: Tensor,
    guided: bool = False,
) -> tuple[Tensor, ...]:
    """Ordinary gradients of the non-parametric layers."""
    if kind == "ReLU":
        mask = inputs[0].data > 0
        g = g_out.data * mask
        if guided:
            g = g * (g_out.data > 0)
        return (Tensor(g),)
    if kind == "MaxPool":
        p = layer.params
        return (
            T.maxpool2d_backward(
                inputs[0], g_out, p["kernel"], p["stride"], p.get("padding", (0, 0))
            ),
        )
    if kind == "AvgPool":
        p = layer.params
        return (
            T.avgpool2d_scatter(
                g_out, inputs[0].spatial, p["kernel"], p["stride"], p.get("padding", (0, 0))
            ),
        )
    if kind == "AdaptiveAvgPool":
        return (T.adaptive_avgpool2d_scatter(g_out, inputs[0].spatial),)
    if kind == "GlobalAvgPool":
        return (T.global_avgpool_scatter(g_out, inputs[0].spatial),)
    if kind == "Flatten":
        return (Tensor(g_out.data.reshape(inputs[0].shape)),)
    if kind == "Add":
        return (g_out, g_out)
    if kind == "Concat":
        grads = []
        start = 0
        for t in inputs:
            grads.append(Tensor(g_out.data[:, start : start + t.channels]))
            start += t.channels
        return tuple(grads)
    raise MissingRuleError(f"no pass-through rule for layer kind {kind!r}")


def _bn_gradient(layer: LayerSpec, g_out: Tensor) -> Tensor:
    t = layer.tensors
    eps = float(layer.params.get("eps", 1e-5))
    scale = (t["gamma"] / np.sqrt(t["var"] + eps)).astype(np.float32)
    return Tensor(g_out.data * scale[None, :, None, None])


def _lrn_gradient(layer: LayerSpec, x_in: Tensor, g_out: Tensor) -> Tensor:
    # y_c = x_c d_c^-beta with d_c = k + alpha/n * sum of squares over the
    # channel window; the cross terms couple channels within the window.
    p = layer.params
    size, alpha, beta, k = int(p["size"]), float(p["alpha"]), float(p["beta"]), float(p["k"])
    half = size // 2
    x = x_in.data.astype(np.float64)
    g = g_out.data.astype(np.float64)
    c = x.shape[1]
    d = np.empty_like(x)
    for ci in range(c):
        lo, hi = max(0, ci - half), min(c, ci + half + 1)
        d[:, ci] = k + alpha / size * (x[:, lo:hi] ** 2).sum(axis=1)
    t = g * x * d ** (-beta - 1.0)
    cross = np.empty_like(x)
    for ci in range(c):
        lo, hi = max(0, ci - half), min(c, ci + half + 1)
        cross[:, ci] = t[:, lo:hi].sum(axis=1)
    g_in = g * d ** (-beta) - (2.0 * alpha * beta / size) * x * cross
    return Tensor(g_in.astype(np.float32))


def _avgpool_ratio_backward(
    layer: LayerSpec, x_in: Tensor, x_out: Tensor, g_out: Tensor, eps, counter
) -> Tensor:
    # Feature-ratio treatment for pools whose input goes negative: scatter
    # the output features and gradients to input resolution through the
    # pooling adjoint, then apply the elementwise ratio rule.
    p = layer.params
    kernel, stride, padding = p["kernel"], p["stride"], p.get("padding", (0, 0))
    x_up = T.avgpool2d_scatter(x_out, x_in.spatial, kernel, stride, padding)
    g_up = T.avgpool2d_scatter(g_out, x_in.spatial, kernel, stride, padding)
    return backward_norm(x_in, x_up, g_up, eps, counter)


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------


def _plan_rules(
    graph: ModelGraph, trace: ActivationTrace, req: AttributionRequest
) -> dict[int, str]:
    """Resolves the backward rule of every layer before any work starts."""
    final_id = graph.final_linear_id()
    plan: dict[int, str] = {}
    for layer in graph.layers:
        kind = layer.kind
        if kind == "Linear":
            if layer.id == final_id and req.rectify_fc:
                plan[layer.id] = "fc_rectified"
            else:
                plan[layer.id] = "fc_vanilla"
        elif kind == "Conv2d":
            plan[layer.id] = "conv_ratio" if req.rectify_conv else "conv_gradient"
        elif kind in ("BatchNormInference", "LocalResponseNorm"):
            plan[layer.id] = "norm_ratio" if req.rectify_conv else "norm_gradient"
        elif kind == "AvgPool":
            has_neg = bool((trace.at(layer.id).inputs[0].data < 0).any())
            use_ratio = req.avgpool_ratio == "always" or (
                req.avgpool_ratio == "auto" and req.rectify_conv and has_neg
            )
            plan[layer.id] = "avgpool_ratio" if use_ratio else "avgpool"
        elif kind == "ReLU":
            plan[layer.id] = "relu_guided" if req.rule_set == "guided" else "relu"
        elif kind in ("MaxPool", "AdaptiveAvgPool", "GlobalAvgPool", "Flatten", "Add", "Concat"):
            plan[layer.id] = kind.lower()
        else:
            raise MissingRuleError(
                f"no backward rule for layer {layer.id} of kind {kind!r} "
                f"under rule set {req.rule_set!r}"
            )
    return plan


def run_attribution(
    graph: ModelGraph, trace: ActivationTrace, req: AttributionRequest
) -> AttributionState:
    """Propagates the one-hot target gradient down to the image (or to
    ``req.stop_layer``), dispatching one rule per layer."""
    plan = _plan_rules(graph, trace, req)
    if req.stop_layer is not None and req.stop_layer not in plan:
        raise AttributionError(f"stop_layer {req.stop_layer} is not a layer id")

    onehot = init_output_gradient(trace, req.target)
    diagnostics = {"rules": plan, "guard_hits": {}, "warnings": []}
    if trace.scores[req.target] <= 0:
        msg = (
            f"target logit {trace.scores[req.target]:.6g} is not positive; "
            "the contribution-ratio guarantee does not apply"
        )
        diagnostics["warnings"].append(msg)
        warnings.warn(msg, stacklevel=2)

    out_id = graph.output_layer().id
    pending: dict[int, np.ndarray] = {
        out_id: onehot.reshape(trace.at(out_id).output.shape)
    }
    image_grad: np.ndarray | None = None
    gradients: dict[int, tuple[Tensor, ...]] = {}

    for layer in reversed(graph.layers):
        if layer.id not in pending:
            continue  # below the stop layer on an already-cut branch
        g_out = Tensor(pending.pop(layer.id))
        acts = trace.at(layer.id)
        counter = _Counter()
        grads = _apply_rule(plan[layer.id], layer, acts, g_out, req, counter)
        gradients[layer.id] = grads
        if counter.hits:
            diagnostics["guard_hits"][layer.id] = counter.hits
        if layer.id == req.stop_layer:
            break
        if not layer.inputs:
            image_grad = grads[0].data if image_grad is None else image_grad + grads[0].data
        else:
            for src, g in zip(layer.inputs, grads):
                if src in pending:
                    pending[src] = pending[src] + g.data
                else:
                    pending[src] = g.data

    input_gradient = None
    if image_grad is not None:
        # undo the preprocessing scale so the gradient lives on raw pixels
        std = graph.preprocess_std[None, :, None, None]
        input_gradient = Tensor(image_grad / std)
    return AttributionState(
        gradients=gradients,
        input_gradient=input_gradient,
        diagnostics=diagnostics,
        request=req,
    )


def _apply_rule(rule, layer, acts, g_out, req, counter) -> tuple[Tensor, ...]:
    x_in = acts.inputs[0]
    if rule == "fc_rectified":
        g = backward_fc_final(
            x_in.data.reshape(-1),
            layer.tensors["weight"],
            g_out.data.reshape(-1),
            req.alpha,
            req.eps,
            counter,
        )
        return (Tensor(g.reshape(x_in.shape)),)
    if rule == "fc_vanilla":
        g = backward_fc_vanilla(layer.tensors["weight"], g_out.data.reshape(-1))
        return (Tensor(g.reshape(x_in.shape)),)
    if rule == "conv_ratio":
        return (
            backward_conv_fast(x_in, acts.output, g_out, layer.geometry(), req.eps, counter),
        )
    if rule == "conv_gradient":
        w = Tensor(layer.tensors["weight"][...])
        return (T.conv2d_transposed(g_out, w, layer.geometry(), output_hw=x_in.spatial),)
    if rule == "norm_ratio":
        return (backward_norm(x_in, acts.output, g_out, req.eps, counter),)
    if rule == "norm_gradient":
        if layer.kind == "BatchNormInference":
            return (_bn_gradient(layer, g_out),)
        return (_lrn_gradient(layer, x_in, g_out),)
    if rule == "avgpool_ratio":
        return (_avgpool_ratio_backward(layer, x_in, acts.output, g_out, req.eps, counter),)
    if rule == "relu_guided":
        return backward_passthrough("ReLU", layer, acts.inputs, g_out, guided=True)
    kind_by_rule = {
        "relu": "ReLU",
        "maxpool": "MaxPool",
        "avgpool": "AvgPool",
        "adaptiveavgpool": "AdaptiveAvgPool",
        "globalavgpool": "GlobalAvgPool",
        "flatten": "Flatten",
        "add": "Add",
        "concat": "Concat",
    }
    return backward_passthrough(kind_by_rule[rule], layer, acts.inputs, g_out)
