"""Tiny hand-built networks shared across the test suite."""

import numpy as np

from tsgb.model import LayerSpec, ModelGraph


def conv_layer(lid, inputs, weight, bias, stride=(1, 1), padding=(0, 0)):
    weight = np.asarray(weight, dtype=np.float32)
    n, m, kh, kw = weight.shape
    return LayerSpec(
        id=lid,
        kind="Conv2d",
        inputs=tuple(inputs),
        params={
            "in_channels": m,
            "out_channels": n,
            "kernel": [kh, kw],
            "stride": list(stride),
            "padding": list(padding),
        },
        tensors={"weight": weight, "bias": np.asarray(bias, dtype=np.float32)},
    )


def linear_layer(lid, inputs, weight, bias, final=False):
    weight = np.asarray(weight, dtype=np.float32)
    out_f, in_f = weight.shape
    return LayerSpec(
        id=lid,
        kind="Linear",
        inputs=tuple(inputs),
        params={"in_features": in_f, "out_features": out_f, "final": final},
        tensors={"weight": weight, "bias": np.asarray(bias, dtype=np.float32)},
    )


def relu_layer(lid, inputs):
    return LayerSpec(id=lid, kind="ReLU", inputs=tuple(inputs))


def flatten_layer(lid, inputs):
    return LayerSpec(id=lid, kind="Flatten", inputs=tuple(inputs))


def maxpool_layer(lid, inputs, kernel, stride=None, padding=(0, 0)):
    return LayerSpec(
        id=lid,
        kind="MaxPool",
        inputs=tuple(inputs),
        params={
            "kernel": list(kernel),
            "stride": list(stride if stride is not None else kernel),
            "padding": list(padding),
        },
    )


def avgpool_layer(lid, inputs, kernel, stride=None, padding=(0, 0)):
    return LayerSpec(
        id=lid,
        kind="AvgPool",
        inputs=tuple(inputs),
        params={
            "kernel": list(kernel),
            "stride": list(stride if stride is not None else kernel),
            "padding": list(padding),
        },
    )


def bn_layer(lid, inputs, gamma, beta, mean, var, eps=1e-5):
    return LayerSpec(
        id=lid,
        kind="BatchNormInference",
        inputs=tuple(inputs),
        params={"eps": eps},
        tensors={
            "gamma": np.asarray(gamma, dtype=np.float32),
            "beta": np.asarray(beta, dtype=np.float32),
            "mean": np.asarray(mean, dtype=np.float32),
            "var": np.asarray(var, dtype=np.float32),
        },
    )


def lrn_layer(lid, inputs, size=3, alpha=1e-4, beta=0.75, k=1.0):
    return LayerSpec(
        id=lid,
        kind="LocalResponseNorm",
        inputs=tuple(inputs),
        params={"size": size, "alpha": alpha, "beta": beta, "k": k},
    )


def make_graph(layers, input_shape, class_count, name="fixture", family="other",
               mean=None, std=None):
    c = input_shape[1]
    return ModelGraph(
        name=name,
        family=family,
        input_shape=tuple(input_shape),
        class_count=class_count,
        preprocess_mean=np.asarray(mean if mean is not None else [0.0] * c, dtype=np.float32),
        preprocess_std=np.asarray(std if std is not None else [1.0] * c, dtype=np.float32),
        layers=tuple(layers),
    )


def conv_relu_linear_net(seed=11, in_hw=(5, 5)):
    """conv(2->3, 3x3, pad 1) -> relu -> flatten -> linear, 4 classes."""
    rng = np.random.default_rng(seed)
    h, w = in_hw
    conv_w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0.5
    conv_b = rng.standard_normal(3).astype(np.float32) * 0.1
    lin_w = rng.standard_normal((4, 3 * h * w)).astype(np.float32) * 0.3
    lin_b = rng.standard_normal(4).astype(np.float32) * 0.1
    layers = [
        conv_layer(1, [], conv_w, conv_b, padding=(1, 1)),
        relu_layer(2, [1]),
        flatten_layer(3, [2]),
        linear_layer(4, [3], lin_w, lin_b, final=True),
    ]
    return make_graph(layers, (1, 2, h, w), 4, name="conv-relu-linear")


def random_image(shape, seed=21):
    from tsgb.tensor import Tensor

    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0.0, 1.0, size=shape).astype(np.float32))
