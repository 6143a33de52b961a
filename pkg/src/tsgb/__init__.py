"""Target-selective gradient backprop: a CNN saliency engine with
rectified backward rules, plus deletion / pointing / localization /
sanity-check evaluation protocols."""

from .attribution import (
    AttributionRequest,
    AttributionState,
    RULE_SETS,
    backward_conv_direct,
    backward_conv_fast,
    backward_fc_final,
    backward_fc_vanilla,
    backward_norm,
    default_alpha,
    init_output_gradient,
    run_attribution,
)
from .evaluation import (
    EvalReport,
    GroundTruth,
    compute_map,
    deletion_score,
    loc_error,
    pointing_game,
    sanity_check,
    spearman,
)
from .forward import ActivationTrace, run_forward, softmax, top_k
from .model import LayerSpec, ModelGraph, load_model, save_model, validate
from .ppm import read_image, write_image_tensor
from .saliency import (
    BBox,
    SaliencyMap,
    argmax_point,
    assemble,
    binarize_bbox,
    export_image,
    truncate_negatives,
)
from .synthetic import build_detector, generate_synthetic_dataset, load_dataset, save_dataset
from .tensor import ConvGeometry, Tensor

__version__ = "0.1.0"
