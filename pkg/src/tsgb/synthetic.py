"""Synthetic colored-blob dataset with exact ground truth, plus a
hand-constructed detector network whose decision evidence is known by
construction.

Each image carries one large, dimmer target blob (its class defines the
label) and one smaller but brighter distractor blob of another class on
a noise background. The detector scores classes by pooled color-matched
evidence; a shared "any blob" channel entangles the classes in the
classifier head, and cross-class connections are negative. That layout
makes the plain gradient light up distractor evidence through the shared
channel, while the contribution-ratio enhancement of the negative
connections suppresses it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LayerSpec, ModelGraph
from .ppm import read_image, write_image_tensor
from .saliency import BBox
from .tensor import Tensor

CLASS_NAMES = ("red", "green", "blue", "yellow")
CLASS_COLORS = (
    (1.00, 0.15, 0.15),
    (0.15, 1.00, 0.15),
    (0.15, 0.15, 1.00),
    (1.00, 1.00, 0.15),
)

# Raw-pixel statistics the detector weights are written against.
PREPROCESS_MEAN = (0.25, 0.25, 0.25)
PREPROCESS_STD = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class DatasetItem:
    id: str
    image: Tensor
    entries: tuple[tuple[int, BBox], ...]  # (class label, region)


@dataclass(frozen=True)
class SyntheticDataset:
    items: tuple[DatasetItem, ...]
    class_count: int
    class_names: tuple[str, ...]
    seed: int

    def ground_truth(self):
        from .evaluation import GroundTruth

        return GroundTruth(regions={it.id: it.entries for it in self.items})


def _place_box(rng, hw, size_range, taken: list[BBox], gap: int = 2) -> BBox:
    h, w = hw
    for _ in range(200):
        bh = int(rng.integers(size_range[0], size_range[1] + 1))
        bw = int(rng.integers(size_range[0], size_range[1] + 1))
        y0 = int(rng.integers(1, h - bh - 1))
        x0 = int(rng.integers(1, w - bw - 1))
        box = BBox(x0, y0, x0 + bw - 1, y0 + bh - 1)
        grown = BBox(
            max(0, box.x0 - gap), max(0, box.y0 - gap),
            min(w - 1, box.x1 + gap), min(h - 1, box.y1 + gap),
        )
        if all(grown.iou(t) == 0.0 for t in taken):
            return box
    raise RuntimeError("could not place a non-overlapping blob")


def _paint(img: np.ndarray, box: BBox, color, intensity: float, rng) -> None:
    for c in range(3):
        patch = color[c] * intensity + rng.uniform(
            -0.02, 0.02, (box.y1 - box.y0 + 1, box.x1 - box.x0 + 1)
        )
        img[c, box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = patch


def generate_synthetic_dataset(
    n: int,
    seed: int,
    image_hw: tuple[int, int] = (32, 32),
    target_size: tuple[int, int] = (10, 12),
    distractor_size: tuple[int, int] = (4, 5),
    target_intensity: float = 0.75,
    distractor_intensity: float = 1.0,
    distractor_fraction: float = 0.75,
    noise: tuple[float, float] = (0.05, 0.25),
) -> SyntheticDataset:
    """Deterministic dataset of labeled blob images; same seed, same bytes.

    A `distractor_fraction` share of the images carries a smaller but
    brighter off-class blob. Images are quantized to 8-bit on creation so
    that in-memory tensors and PPM files round-trip exactly.
    """
    rng = np.random.default_rng(seed)
    h, w = image_hw
    items = []
    for i in range(n):
        label = int(rng.integers(0, len(CLASS_NAMES)))
        dis_label = int((label + 1 + rng.integers(0, len(CLASS_NAMES) - 1)) % len(CLASS_NAMES))
        with_distractor = bool(rng.uniform() < distractor_fraction)
        img = rng.uniform(noise[0], noise[1], (3, h, w))
        target_box = _place_box(rng, image_hw, target_size, [])
        _paint(img, target_box, CLASS_COLORS[label], target_intensity, rng)
        if with_distractor:
            dis_box = _place_box(rng, image_hw, distractor_size, [target_box])
            _paint(img, dis_box, CLASS_COLORS[dis_label], distractor_intensity, rng)
        quantized = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
        items.append(
            DatasetItem(
                id=f"img_{i:05d}",
                image=Tensor(quantized[None].astype(np.float32)),
                entries=((label, target_box),),
            )
        )
    return SyntheticDataset(
        items=tuple(items),
        class_count=len(CLASS_NAMES),
        class_names=CLASS_NAMES,
        seed=seed,
    )


def save_dataset(ds: SyntheticDataset, directory) -> None:
    """Writes the suite as PPM images plus one JSON ground-truth index."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    index = {
        "class_count": ds.class_count,
        "class_names": list(ds.class_names),
        "seed": ds.seed,
        "images": [],
    }
    for item in ds.items:
        rel = f"images/{item.id}.ppm"
        write_image_tensor(root / rel, item.image)
        index["images"].append(
            {
                "id": item.id,
                "file": rel,
                "entries": [
                    {"label": label, "bbox": [b.x0, b.y0, b.x1, b.y1]}
                    for label, b in item.entries
                ],
            }
        )
    (root / "index.json").write_text(
        json.dumps(index, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_dataset(directory) -> SyntheticDataset:
    root = Path(directory)
    index = json.loads((root / "index.json").read_text())
    items = []
    for rec in index["images"]:
        entries = tuple(
            (int(e["label"]), BBox(*[int(v) for v in e["bbox"]]))
            for e in rec["entries"]
        )
        items.append(
            DatasetItem(id=rec["id"], image=read_image(root / rec["file"]), entries=entries)
        )
    return SyntheticDataset(
        items=tuple(items),
        class_count=int(index["class_count"]),
        class_names=tuple(index["class_names"]),
        seed=int(index.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Hand-constructed detector
# ---------------------------------------------------------------------------

# Color-matched 1x1 filters in normalized units: strong positive on the
# class's own channels, negative elsewhere; the bias keeps background
# noise and off-class colors below zero.
_MATCHER_WEIGHTS = (
    (2.0, -1.0, -1.0),
    (-1.0, 2.0, -1.0),
    (-1.0, -1.0, 2.0),
    (1.0, 1.0, -2.0),
)
_MATCHER_BIAS = -2.0

# Classifier head: own evidence, shared "any blob" evidence, cross-class
# suppression. The shared path must dominate the per-pixel gradient of
# both blobs for the plain gradient to chase the brighter distractor,
# while the cross connections give the ratio enhancement its lever. The
# overall scale only sharpens the softmax (shared evidence cancels in
# score differences); the ratios are what carry the mechanism.
_HEAD_OWN = 1.0
_HEAD_SHARED = 12.0
_HEAD_CROSS = -1.0


def build_detector(image_hw: tuple[int, int] = (32, 32)) -> ModelGraph:
    """Blob-color detector: 1x1 color matchers, a 3x3 smoothing stage with
    an extra shared channel summing all classes, pooling, and an entangled
    classifier head."""
    k = len(CLASS_NAMES)
    conv1_w = np.zeros((k, 3, 1, 1), dtype=np.float32)
    for c, wvec in enumerate(_MATCHER_WEIGHTS):
        conv1_w[c, :, 0, 0] = wvec
    conv1_b = np.full(k, _MATCHER_BIAS, dtype=np.float32)

    # smoothing kernel: center-dominant 3x3
    smooth = np.full((3, 3), 0.15, dtype=np.float32)
    smooth[1, 1] = 1.0
    conv2_w = np.zeros((k + 1, k, 3, 3), dtype=np.float32)
    for c in range(k):
        conv2_w[c, c] = smooth  # per-class smoothed evidence
        conv2_w[k, c] = smooth  # shared channel: any class evidence
    conv2_b = np.zeros(k + 1, dtype=np.float32)

    head = np.full((k, k + 1), _HEAD_CROSS, dtype=np.float32)
    for c in range(k):
        head[c, c] = _HEAD_OWN
        head[c, k] = _HEAD_SHARED
    head_b = np.zeros(k, dtype=np.float32)

    h, w = image_hw
    layers = (
        LayerSpec(
            id=1, kind="Conv2d", inputs=(),
            params={"in_channels": 3, "out_channels": k, "kernel": [1, 1],
                    "stride": [1, 1], "padding": [0, 0]},
            tensors={"weight": conv1_w, "bias": conv1_b},
        ),
        LayerSpec(id=2, kind="ReLU", inputs=(1,)),
        LayerSpec(
            id=3, kind="Conv2d", inputs=(2,),
            params={"in_channels": k, "out_channels": k + 1, "kernel": [3, 3],
                    "stride": [1, 1], "padding": [1, 1]},
            tensors={"weight": conv2_w, "bias": conv2_b},
        ),
        LayerSpec(id=4, kind="ReLU", inputs=(3,)),
        LayerSpec(
            id=5, kind="AvgPool", inputs=(4,),
            params={"kernel": [2, 2], "stride": [2, 2], "padding": [0, 0]},
        ),
        LayerSpec(id=6, kind="GlobalAvgPool", inputs=(5,)),
        LayerSpec(id=7, kind="Flatten", inputs=(6,)),
        LayerSpec(
            id=8, kind="Linear", inputs=(7,),
            params={"in_features": k + 1, "out_features": k, "final": True},
            tensors={"weight": head, "bias": head_b},
        ),
    )
    return ModelGraph(
        name="blob-detector",
        family="other",
        input_shape=(1, 3, h, w),
        class_count=k,
        preprocess_mean=np.asarray(PREPROCESS_MEAN, dtype=np.float32),
        preprocess_std=np.asarray(PREPROCESS_STD, dtype=np.float32),
        layers=layers,
    )
