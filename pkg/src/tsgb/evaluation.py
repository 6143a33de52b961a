"""Quantitative evaluation protocols at desk scale: deletion metric,
Pointing Game, top-k localization error, and the parameter-randomization
sanity check."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .attribution import AttributionRequest, run_attribution
from .forward import run_forward, softmax, top_k
from .model import ModelGraph
from .saliency import BBox, SaliencyMap, argmax_point, assemble, binarize_bbox
from .tensor import Tensor


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    """Labeled target regions per image: image id -> ((label, BBox), ...)."""

    regions: Mapping[str, tuple[tuple[int, BBox], ...]]

    def labels(self, image_id: str) -> list[int]:
        return sorted({label for label, _ in self.regions[image_id]})


@dataclass(frozen=True)
class EvalReport:
    """Per-image records plus an aggregate recomputable from them."""

    metric: str
    records: tuple[dict, ...]
    aggregate: dict
    config: dict

    def jsonl_lines(self) -> list[str]:
        import json

        lines = [
            json.dumps({"record": r}, sort_keys=True, separators=(",", ":"))
            for r in self.records
        ]
        lines.append(
            json.dumps(
                {"metric": self.metric, "aggregate": self.aggregate, "config": self.config},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
        return lines

    def summary(self) -> str:
        cfg = " ".join(f"{k}={v}" for k, v in sorted(self.config.items()))
        agg = " ".join(
            f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
            for k, v in sorted(self.aggregate.items())
        )
        return f"[{self.metric}] {agg} ({len(self.records)} records; {cfg})"


def _mean_std(values) -> dict:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": int(arr.size)}


def compute_map(
    graph: ModelGraph,
    image: Tensor,
    target: int,
    rule_set: str = "tsgb",
    alpha: float | None = None,
    truncate: bool = True,
) -> SaliencyMap:
    """Forward + attribution + assembly in one step; negative truncation
    applied by default."""
    from .attribution import default_alpha
    from .saliency import truncate_negatives

    a = default_alpha(graph.family) if alpha is None else alpha
    trace = run_forward(graph, image)
    state = run_attribution(graph, trace, AttributionRequest(target=target, alpha=a, rule_set=rule_set))
    m = assemble(state, trace)
    return truncate_negatives(m) if truncate else m


# ---------------------------------------------------------------------------
# Deletion metric
# ---------------------------------------------------------------------------


def deletion_curve(
    graph: ModelGraph,
    image: Tensor,
    m: SaliencyMap,
    target: int,
    step_fraction: float,
    baseline: float = 0.0,
):
    """Probability of the target as pixels are erased in saliency order.

    Pixels are ranked by negatively-truncated saliency, descending, ties
    broken by row-major index; each step erases the next `step_fraction`
    of all pixels to the erase baseline (given in normalized units, so 0
    is the preprocessing mean). Returns (fractions, probabilities).
    """
    if not 0.0 < step_fraction <= 0.5:
        raise EvalError(f"step_fraction must lie in (0, 0.5], got {step_fraction}")
    if not 0 <= target < graph.class_count:
        raise EvalError(f"target {target} out of range [0, {graph.class_count})")
    h, w = m.values.shape
    if (h, w) != graph.input_shape[2:]:
        raise EvalError(f"map extents {(h, w)} != model input {graph.input_shape[2:]}")
    ranked = np.argsort(-np.maximum(m.values, 0.0).ravel(), kind="stable")
    total = h * w
    erase_value = (
        graph.preprocess_mean + graph.preprocess_std * baseline
    ).astype(np.float32)[None, :, None, None]

    steps = math.ceil(1.0 / step_fraction)
    fractions = [0.0]
    probs = [float(softmax(run_forward(graph, image).scores)[target])]
    pixels = image.data.copy()
    erased = 0
    for t in range(1, steps + 1):
        k = total if t == steps else min(total, round(t * step_fraction * total))
        idx = ranked[erased:k]
        rows, cols = idx // w, idx % w
        pixels[:, :, rows, cols] = erase_value[:, :, 0, 0][..., None]
        erased = k
        fractions.append(erased / total)
        probs.append(float(softmax(run_forward(graph, Tensor(pixels)).scores)[target]))
    return np.asarray(fractions), np.asarray(probs)


def deletion_score(
    graph: ModelGraph,
    image: Tensor,
    m: SaliencyMap,
    target: int,
    step_fraction: float,
    baseline: float = 0.0,
) -> float:
    """Trapezoidal area under the deletion curve; lower is better."""
    fractions, probs = deletion_curve(graph, image, m, target, step_fraction, baseline)
    return float(np.trapezoid(probs, fractions))


# ---------------------------------------------------------------------------
# Pointing Game
# ---------------------------------------------------------------------------


def pointing_game(
    maps: Mapping[tuple[str, int], SaliencyMap],
    gt: GroundTruth,
    margin: int = 15,
) -> EvalReport:
    """Hit ratio of the saliency maximum against the labeled regions.

    A hit is counted when the argmax lies inside some region of the
    labeled class, dilated by `margin` pixels. Accuracy is computed per
    class, then averaged over classes.
    """
    records = []
    per_class: dict[int, list[bool]] = {}
    for image_id in sorted(gt.regions):
        for label in gt.labels(image_id):
            if (image_id, label) not in maps:
                raise EvalError(f"missing saliency map for image {image_id!r} class {label}")
            m = maps[(image_id, label)]
            row, col = argmax_point(m)
            boxes = [b for lab, b in gt.regions[image_id] if lab == label]
            hit = any(b.contains(row, col, margin) for b in boxes)
            per_class.setdefault(label, []).append(hit)
            records.append(
                {"image": image_id, "label": label, "argmax": [row, col], "hit": hit}
            )
    class_acc = {c: float(np.mean(hits)) for c, hits in sorted(per_class.items())}
    aggregate = _mean_std(class_acc.values())
    aggregate["per_class"] = class_acc
    aggregate["hit_rate"] = float(np.mean([r["hit"] for r in records]))
    return EvalReport(
        metric="pointing_game",
        records=tuple(records),
        aggregate=aggregate,
        config={"margin": margin},
    )


# ---------------------------------------------------------------------------
# Top-k localization error
# ---------------------------------------------------------------------------


def loc_error(
    graph: ModelGraph,
    dataset,
    k: int,
    threshold_fraction: float,
    rule_set: str = "tsgb",
    alpha: float | None = None,
) -> EvalReport:
    """ILSVRC-style protocol: an image counts as correct when some top-k
    prediction has the ground-truth class and a thresholded box with
    IoU >= 0.5 (boundary inclusive) against a ground-truth box."""
    records = []
    for item in dataset.items:
        if not item.entries:
            raise EvalError(f"image {item.id!r} has no ground-truth boxes")
        trace = run_forward(graph, item.image)
        predictions = top_k(trace.scores, k)
        labels = {label for label, _ in item.entries}
        correct = False
        detail = []
        for cls in predictions:
            if correct or cls not in labels:
                continue
            m = compute_map(graph, item.image, cls, rule_set=rule_set, alpha=alpha)
            try:
                box = binarize_bbox(m, threshold_fraction)
            except Exception:
                continue
            best = max(
                (box.iou(b) for label, b in item.entries if label == cls),
                default=0.0,
            )
            detail.append({"class": cls, "iou": best})
            if best >= 0.5:
                correct = True
        records.append({"image": item.id, "error": not correct, "candidates": detail})
    err = float(np.mean([r["error"] for r in records])) if records else float("nan")
    return EvalReport(
        metric="loc_error",
        records=tuple(records),
        aggregate={"error_rate": err, "mean": err, "std": 0.0, "count": len(records)},
        config={"k": k, "threshold_fraction": threshold_fraction, "rule_set": rule_set},
    )


# ---------------------------------------------------------------------------
# Parameter-randomization sanity check
# ---------------------------------------------------------------------------

_PARAMETERIZED = ("Conv2d", "Linear", "BatchNormInference")


def randomize_parameters(
    graph: ModelGraph, layer_ids: Sequence[int], rng: np.random.Generator
) -> ModelGraph:
    """New graph with the selected layers' weight tensors re-drawn from a
    normal distribution matched to each tensor's original mean/std.

    Batch-norm running statistics are kept (the variance must stay
    positive); its scale/shift are randomized like weights.
    """
    chosen = set(layer_ids)
    new_layers = []
    for l in graph.layers:
        if l.id in chosen and l.kind in _PARAMETERIZED:
            names = ("gamma", "beta") if l.kind == "BatchNormInference" else ("weight", "bias")
            tensors = dict(l.tensors)
            for name in names:
                orig = tensors[name]
                tensors[name] = rng.normal(
                    float(orig.mean()), float(orig.std()), orig.shape
                ).astype(np.float32)
            new_layers.append(replace(l, tensors=tensors))
        else:
            new_layers.append(l)
    return replace(graph, layers=tuple(new_layers))


def parameterized_layer_ids(graph: ModelGraph) -> list[int]:
    return [l.id for l in graph.layers if l.kind in _PARAMETERIZED]


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation with mean ranks for ties.

    Identical inputs return exactly 1.0; a constant side with any
    variation on the other returns 0.0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise EvalError(f"rank correlation needs equal sizes, got {a.size} and {b.size}")
    if np.array_equal(a, b):
        return 1.0

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size, dtype=np.float64)
        r[order] = np.arange(1, v.size + 1)
        # average the ranks of tied values
        sv = v[order]
        i = 0
        while i < v.size:
            j = i
            while j + 1 < v.size and sv[j + 1] == sv[i]:
                j += 1
            if j > i:
                r[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
            i = j + 1
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        return 0.0
    return float(ra @ rb) / den


def sanity_check(
    graph: ModelGraph,
    items,
    rule_set: str = "tsgb",
    mode: str = "all-at-once",
    seed: int = 0,
    alpha: float | None = None,
    layer_ids: Sequence[int] | None = None,
) -> EvalReport:
    """Correlation of saliency maps before and after re-drawing model
    parameters; low correlation indicates parameter sensitivity.

    `items` yields (image_id, image, target). Mode "all-at-once"
    randomizes every parameterized layer in one go; "cascading-top-down"
    re-randomizes growing prefixes from the classifier downward, one
    stage per prefix. Reports Spearman correlation of both the truncated
    and the absolute-value map variants.
    """
    if mode not in ("all-at-once", "cascading-top-down"):
        raise EvalError(f"unknown randomization mode {mode!r}")
    all_ids = parameterized_layer_ids(graph) if layer_ids is None else list(layer_ids)
    stages = (
        [list(all_ids)]
        if mode == "all-at-once"
        else [all_ids[len(all_ids) - n :] for n in range(1, len(all_ids) + 1)]
    )

    originals = []
    for image_id, image, target in items:
        m = compute_map(graph, image, target, rule_set=rule_set, alpha=alpha, truncate=False)
        originals.append((image_id, image, target, m))

    records = []
    for stage_idx, ids in enumerate(stages):
        rng = np.random.default_rng(seed + stage_idx)
        randomized = randomize_parameters(graph, ids, rng)
        for image_id, image, target, m0 in originals:
            m1 = compute_map(randomized, image, target, rule_set=rule_set, alpha=alpha, truncate=False)
            rho_trunc = spearman(np.maximum(m0.values, 0), np.maximum(m1.values, 0))
            rho_abs = spearman(np.abs(m0.values), np.abs(m1.values))
            records.append(
                {
                    "image": image_id,
                    "stage": stage_idx,
                    "layers": list(ids),
                    "rho_truncated": rho_trunc,
                    "rho_abs": rho_abs,
                }
            )
    aggregate = _mean_std(r["rho_truncated"] for r in records)
    abs_agg = _mean_std(r["rho_abs"] for r in records)
    aggregate["abs_mean"] = abs_agg["mean"]
    aggregate["abs_std"] = abs_agg["std"]
    return EvalReport(
        metric="sanity_check",
        records=tuple(records),
        aggregate=aggregate,
        config={"rule_set": rule_set, "mode": mode, "seed": seed},
    )
