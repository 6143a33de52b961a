"""Shared ONNX fixture models, each paired with an equivalent torch module."""

import numpy as np
import torch
import torch.nn as nn

import onnx_builder as ob


def toy_conv_net(seed=0):
    """Conv(3->4, 3x3, pad 1) -> Relu -> MaxPool 2 -> Flatten -> Gemm(5).

    Returns (onnx_bytes, torch_module, input_shape, final_node_name).
    """
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.4
    b1 = rng.standard_normal(4).astype(np.float32) * 0.1
    w2 = rng.standard_normal((5, 4 * 4 * 4)).astype(np.float32) * 0.3
    b2 = rng.standard_normal(5).astype(np.float32) * 0.1

    nodes = [
        ob.node("Conv", ["x", "w1", "b1"], ["c1"], "conv1",
                ob.attr_ints("kernel_shape", [3, 3]),
                ob.attr_ints("strides", [1, 1]),
                ob.attr_ints("pads", [1, 1, 1, 1])),
        ob.node("Relu", ["c1"], ["r1"], "relu1"),
        ob.node("MaxPool", ["r1"], ["p1"], "pool1",
                ob.attr_ints("kernel_shape", [2, 2]),
                ob.attr_ints("strides", [2, 2])),
        ob.node("Flatten", ["p1"], ["f1"], "flat1", ob.attr_int("axis", 1)),
        ob.node("Gemm", ["f1", "w2", "b2"], ["scores"], "fc",
                ob.attr_int("transB", 1)),
    ]
    inits = [ob.tensor("w1", w1), ob.tensor("b1", b1),
             ob.tensor("w2", w2), ob.tensor("b2", b2)]
    raw = ob.model(nodes, inits, "x", (1, 3, 8, 8), "scores", (1, 5))

    torch_net = nn.Sequential(
        nn.Conv2d(3, 4, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(4 * 4 * 4, 5),
    )
    with torch.no_grad():
        torch_net[0].weight.copy_(torch.from_numpy(w1))
        torch_net[0].bias.copy_(torch.from_numpy(b1))
        torch_net[4].weight.copy_(torch.from_numpy(w2))
        torch_net[4].bias.copy_(torch.from_numpy(b2))
    torch_net.eval()
    return raw, torch_net, (1, 3, 8, 8), "fc"


class _SkipNet(nn.Module):
    def __init__(self, w1, b1, gamma, beta, mean, var, w2, b2, wfc, bfc):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 4, 3, padding=1)
        self.bn = nn.BatchNorm2d(4)
        self.conv2 = nn.Conv2d(4, 4, 3, padding=1)
        self.lrn = nn.LocalResponseNorm(3, alpha=0.2, beta=0.75, k=1.0)
        self.pool = nn.AvgPool2d(2)
        self.fc = nn.Linear(4 * 3 * 3, 3)
        with torch.no_grad():
            self.conv1.weight.copy_(torch.from_numpy(w1))
            self.conv1.bias.copy_(torch.from_numpy(b1))
            self.bn.weight.copy_(torch.from_numpy(gamma))
            self.bn.bias.copy_(torch.from_numpy(beta))
            self.bn.running_mean.copy_(torch.from_numpy(mean))
            self.bn.running_var.copy_(torch.from_numpy(var))
            self.conv2.weight.copy_(torch.from_numpy(w2))
            self.conv2.bias.copy_(torch.from_numpy(b2))
            self.fc.weight.copy_(torch.from_numpy(wfc))
            self.fc.bias.copy_(torch.from_numpy(bfc))
        self.eval()

    def forward(self, x):
        y = torch.relu(self.bn(self.conv1(x)))
        z = self.lrn(self.conv2(y)) + y
        z = self.pool(torch.relu(z))
        return self.fc(z.flatten(1))


def skip_bn_lrn_net(seed=1):
    """Conv -> BN -> Relu -> [Conv -> LRN -> Add skip] -> Relu -> AvgPool ->
    Flatten -> MatMul+Add classifier. Exercises every remaining op."""
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.4
    b1 = rng.standard_normal(4).astype(np.float32) * 0.1
    gamma = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    beta = rng.uniform(-0.2, 0.2, 4).astype(np.float32)
    mean = rng.uniform(-0.2, 0.2, 4).astype(np.float32)
    var = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    w2 = rng.standard_normal((4, 4, 3, 3)).astype(np.float32) * 0.3
    b2 = rng.standard_normal(4).astype(np.float32) * 0.1
    wfc = rng.standard_normal((3, 4 * 3 * 3)).astype(np.float32) * 0.3
    bfc = rng.standard_normal(3).astype(np.float32) * 0.1

    nodes = [
        ob.node("Conv", ["x", "w1", "b1"], ["c1"], "conv1",
                ob.attr_ints("kernel_shape", [3, 3]),
                ob.attr_ints("strides", [1, 1]),
                ob.attr_ints("pads", [1, 1, 1, 1])),
        ob.node("BatchNormalization", ["c1", "gamma", "beta", "mu", "var"],
                ["n1"], "bn1", ob.attr_float("epsilon", 1e-5)),
        ob.node("Relu", ["n1"], ["r1"], "relu1"),
        ob.node("Conv", ["r1", "w2", "b2"], ["c2"], "conv2",
                ob.attr_ints("kernel_shape", [3, 3]),
                ob.attr_ints("strides", [1, 1]),
                ob.attr_ints("pads", [1, 1, 1, 1])),
        ob.node("LRN", ["c2"], ["l1"], "lrn1",
                ob.attr_int("size", 3), ob.attr_float("alpha", 0.2),
                ob.attr_float("beta", 0.75), ob.attr_float("bias", 1.0)),
        ob.node("Add", ["l1", "r1"], ["s1"], "skip1"),
        ob.node("Relu", ["s1"], ["r2"], "relu2"),
        ob.node("AveragePool", ["r2"], ["p1"], "pool1",
                ob.attr_ints("kernel_shape", [2, 2]),
                ob.attr_ints("strides", [2, 2])),
        ob.node("Flatten", ["p1"], ["f1"], "flat1", ob.attr_int("axis", 1)),
        ob.node("MatMul", ["f1", "wfc_t"], ["m1"], "fc_matmul"),
        ob.node("Add", ["m1", "bfc"], ["scores"], "fc_bias"),
    ]
    inits = [
        ob.tensor("w1", w1), ob.tensor("b1", b1),
        ob.tensor("gamma", gamma), ob.tensor("beta", beta),
        ob.tensor("mu", mean), ob.tensor("var", var),
        ob.tensor("w2", w2), ob.tensor("b2", b2),
        ob.tensor("wfc_t", np.ascontiguousarray(wfc.T)), ob.tensor("bfc", bfc),
    ]
    raw = ob.model(nodes, inits, "x", (1, 3, 6, 6), "scores", (1, 3))
    torch_net = _SkipNet(w1, b1, gamma, beta, mean, var, w2, b2, wfc, bfc)
    return raw, torch_net, (1, 3, 6, 6), "fc_matmul"


def manifest_dict(source, class_count, channels, final, name="toy"):
    return {
        "source": str(source),
        "source_format": "onnx",
        "name": name,
        "family": "other",
        "class_count": class_count,
        "preprocess": {"mean": [0.0] * channels, "std": [1.0] * channels},
        "final_linear": final,
    }
