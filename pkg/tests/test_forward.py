import numpy as np
import pytest

from tsgb.forward import run_forward, softmax, top_k
from tsgb.model import infer_shapes
from tsgb.tensor import ShapeMismatchError, Tensor

from fixtures import (
    bn_layer,
    conv_layer,
    conv_relu_linear_net,
    flatten_layer,
    linear_layer,
    lrn_layer,
    make_graph,
    maxpool_layer,
    random_image,
    relu_layer,
)
from oracles import naive_forward


# Scores of conv_relu_linear_net(seed=11) on random_image(seed=21), computed
# once with the float64 loop oracle and frozen here.
GOLDEN_SCORES = [1.0720618325, -0.0931791222, -0.5916542112, -2.1342871303]


@pytest.fixture
def net():
    return conv_relu_linear_net()


@pytest.fixture
def image(net):
    return random_image(net.input_shape)


class TestRunForward:
    def test_matches_naive_oracle_and_golden(self, net, image):
        trace = run_forward(net, image)
        ref = naive_forward(net, image.data)
        np.testing.assert_allclose(trace.scores, ref, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(trace.scores, GOLDEN_SCORES, rtol=1e-5, atol=1e-5)

    def test_zero_image_bias_free_net_gives_zero_scores(self):
        rng = np.random.default_rng(3)
        layers = [
            conv_layer(1, [], rng.standard_normal((2, 1, 3, 3)), np.zeros(2), padding=(1, 1)),
            relu_layer(2, [1]),
            flatten_layer(3, [2]),
            linear_layer(4, [3], rng.standard_normal((3, 2 * 4 * 4)), np.zeros(3), final=True),
        ]
        g = make_graph(layers, (1, 1, 4, 4), 3)
        trace = run_forward(g, Tensor.zeros((1, 1, 4, 4)))
        np.testing.assert_array_equal(trace.scores, np.zeros(3, dtype=np.float32))

    def test_identity_batchnorm(self):
        layers = [
            bn_layer(1, [], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], eps=1e-5),
            flatten_layer(2, [1]),
            linear_layer(3, [2], np.eye(8, dtype=np.float32), np.zeros(8), final=True),
        ]
        g = make_graph(layers, (1, 2, 2, 2), 8)
        img = random_image((1, 2, 2, 2), seed=5)
        trace = run_forward(g, img)
        np.testing.assert_allclose(
            trace.at(1).output.data, img.data, rtol=1e-4, atol=1e-5
        )

    def test_trace_covers_every_layer_with_inferred_shapes(self, net, image):
        trace = run_forward(net, image)
        shapes = infer_shapes(net)
        assert set(trace.entries) == {l.id for l in net.layers}
        for lid, shape in shapes.items():
            assert trace.at(lid).output.shape == shape

    def test_scores_equal_last_layer_output(self, net, image):
        trace = run_forward(net, image)
        np.testing.assert_array_equal(
            trace.scores, trace.at(4).output.data.reshape(-1)
        )

    def test_shape_mismatch_names_layer(self, net):
        with pytest.raises(ShapeMismatchError, match="image shape"):
            run_forward(net, Tensor.zeros((1, 2, 9, 9)))

    def test_deterministic(self, net, image):
        a = run_forward(net, image)
        b = run_forward(net, image)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_maxpool_output_dominates_window(self):
        rng = np.random.default_rng(8)
        layers = [
            maxpool_layer(1, [], (2, 2)),
            flatten_layer(2, [1]),
            linear_layer(3, [2], np.ones((2, 2 * 3 * 3)), np.zeros(2), final=True),
        ]
        g = make_graph(layers, (1, 2, 6, 6), 2)
        img = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
        trace = run_forward(g, img)
        pooled = trace.at(1).output.data
        x = img.data
        for ci in range(2):
            for oi in range(3):
                for oj in range(3):
                    window = x[0, ci, 2 * oi : 2 * oi + 2, 2 * oj : 2 * oj + 2]
                    assert (pooled[0, ci, oi, oj] >= window).all()

    def test_lrn_matches_oracle(self):
        layers = [
            lrn_layer(1, [], size=3, alpha=0.3, beta=0.75, k=1.0),
            flatten_layer(2, [1]),
            linear_layer(3, [2], np.ones((2, 4 * 3 * 3)), np.zeros(2), final=True),
        ]
        g = make_graph(layers, (1, 4, 3, 3), 2)
        img = random_image((1, 4, 3, 3), seed=9)
        trace = run_forward(g, img)
        ref = naive_forward(g, img.data)
        np.testing.assert_allclose(trace.scores, ref, rtol=1e-5, atol=1e-6)

    def test_committed_golden_file_classifies_deterministically(self):
        from pathlib import Path

        from tsgb.model import load_model

        g = load_model(Path(__file__).parent / "data" / "golden_conv_relu_linear.nnsm")
        trace = run_forward(g, random_image(g.input_shape))
        np.testing.assert_allclose(trace.scores, GOLDEN_SCORES, rtol=1e-5, atol=1e-5)
        assert top_k(trace.scores, 1) == [0]

    def test_preprocessing_applied(self):
        layers = [
            flatten_layer(1, []),
            linear_layer(2, [1], np.eye(4, dtype=np.float32), np.zeros(4), final=True),
        ]
        g = make_graph(layers, (1, 1, 2, 2), 4, mean=[0.5], std=[0.25])
        img = Tensor(np.full((1, 1, 2, 2), 0.75, dtype=np.float32))
        trace = run_forward(g, img)
        np.testing.assert_allclose(trace.scores, np.full(4, 1.0), rtol=1e-6)
        np.testing.assert_array_equal(trace.image.data, img.data)


class TestTopK:
    def test_basic(self):
        assert top_k(np.array([0.1, 3.0, 2.0]), 2) == [1, 2]

    def test_tie_break_lower_index(self):
        assert top_k(np.array([1.0, 1.0, 1.0]), 3) == [0, 1, 2]

    def test_matches_full_sort(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            v = rng.standard_normal(17)
            k = int(rng.integers(1, 18))
            got = top_k(v, k)
            want = sorted(range(17), key=lambda i: (-v[i], i))[:k]
            assert got == want

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            top_k(np.array([1.0, 2.0]), 3)


def test_softmax_is_probability_vector():
    p = softmax(np.array([1.0, 2.0, 3.0]))
    assert p.shape == (3,)
    assert abs(p.sum() - 1.0) < 1e-12
    assert (p > 0).all() and p.argmax() == 2
