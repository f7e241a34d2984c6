import numpy as np
import pytest

from conftest import make_sample
from oracles import (
    fd_gradient_tensors,
    forward_probs_pure,
    max_relative_error,
    random_instance,
)
from placenet.data import MultiCategoryPointSet
from placenet.graph import build_knn_graph
from placenet.network import (
    ALL_PLACE_TYPES,
    Gradients,
    LayerGrads,
    LayerParams,
    ModelParams,
    init_model,
    layer_forward,
    load_model,
    loss_and_gradients,
    model_forward,
    node_input_features,
    rekey_model,
    save_model,
    sgd_step,
)


def scalar_layer(w, b, a, slope=0.01, key=0):
    return LayerParams(
        {key: np.array([[w]], dtype=float)},
        {key: np.array([[b]], dtype=float)},
        np.array([[a]], dtype=float),
        slope,
    )


def two_node_sample():
    return MultiCategoryPointSet(
        "pair", 0, 0, np.array([0, 0]), np.array([[0.0, 0.0], [1.0, 0.0]])
    )


class TestNodeInputFeatures:
    def test_one_category_origin_corner(self):
        s = MultiCategoryPointSet(
            "a", 0, 0, np.array([0, 0]), np.array([[0.0, 0.0], [2.0, 3.0]])
        )
        feats = node_input_features(s, 1)
        assert feats[0].tolist() == [1.0, 0.0, 0.0]

    def test_two_categories_max_corner(self):
        s = MultiCategoryPointSet(
            "a", 0, 0, np.array([0, 1]), np.array([[0.0, 0.0], [2.0, 3.0]])
        )
        feats = node_input_features(s, 2)
        assert feats[1].tolist() == [0.0, 1.0, 1.0, 1.0]

    def test_coordinates_in_unit_box(self):
        s = make_sample(seed=3, n=30)
        feats = node_input_features(s, 3)
        coords = feats[:, 3:]
        assert coords.min() >= 0.0 and coords.max() <= 1.0

    def test_degenerate_axis(self):
        s = MultiCategoryPointSet(
            "a", 0, 0, np.array([0, 0]), np.array([[0.0, 1.0], [0.0, 4.0]])
        )
        feats = node_input_features(s, 1)
        assert np.all(np.isfinite(feats))
        assert feats[:, 1].tolist() == [0.0, 0.0]


class TestLayerForward:
    def test_zero_weights_zero_output(self):
        s = two_node_sample()
        g = build_knn_graph(s.locations, 1)
        layer = scalar_layer(0.0, 0.0, 0.7)
        out = layer_forward(np.array([[1.0], [2.0]]), g, s.categories, layer, 0)
        assert np.all(out == 0.0)

    def test_isolated_node_identity_self_term(self):
        # cutoff smaller than any pairwise distance: empty neighbor lists
        s = two_node_sample()
        g = build_knn_graph(s.locations, 1, cutoff=0.5)
        assert all(nb.size == 0 for nb in g.neighbors)
        h_in = np.array([[0.3], [1.4]])
        layer = scalar_layer(5.0, 1.0, 9.9)
        out = layer_forward(h_in, g, s.categories, layer, 0)
        np.testing.assert_array_equal(out, h_in)

    def test_two_mutually_adjacent_scalar_nodes(self):
        # hand evaluation, frozen from the pure-Python oracle arithmetic:
        # out[s] = W * (alpha * h[other]) + B * h[s]
        #   out[0] = 2*(0.5*2) + 1*1 = 3
        #   out[1] = 2*(0.5*1) + 1*2 = 3
        s = two_node_sample()
        g = build_knn_graph(s.locations, 1)
        layer = scalar_layer(2.0, 1.0, 0.5)
        out = layer_forward(np.array([[1.0], [2.0]]), g, s.categories, layer, 0)
        np.testing.assert_array_equal(out, np.array([[3.0], [3.0]]))

    def test_unknown_place_type_key(self):
        s = two_node_sample()
        g = build_knn_graph(s.locations, 1)
        with pytest.raises(KeyError, match="place-type"):
            layer_forward(np.array([[1.0], [2.0]]), g, s.categories, scalar_layer(1, 1, 1), 3)

    def test_dimension_mismatch(self):
        s = two_node_sample()
        g = build_knn_graph(s.locations, 1)
        with pytest.raises(ValueError, match="incompatible"):
            layer_forward(np.ones((2, 3)), g, s.categories, scalar_layer(1, 1, 1), 0)


class TestModelForward:
    def test_all_zero_params_uniform_probs(self):
        s = make_sample(seed=0, n=6)
        g = build_knn_graph(s.locations, 2)
        zeros = ModelParams(
            np.zeros((4, 5)),
            (LayerParams({0: np.zeros((4, 4))}, {0: np.zeros((4, 4))}, np.zeros((3, 3))),),
            np.zeros((2, 4)),
            np.zeros(2),
            3,
        )
        trace = model_forward(s, g, zeros, 0)
        np.testing.assert_array_equal(trace.probs, [0.5, 0.5])

    def test_probabilities_sum_to_one(self):
        for seed in range(10):
            sample, graph, params, _ = random_instance(seed)
            trace = model_forward(sample, graph, params, 0)
            assert abs(trace.probs.sum() - 1.0) <= 1e-12
            assert np.all(trace.probs >= 0.0)

    def test_point_order_invariance_exact(self):
        rng = np.random.default_rng(8)
        for seed in range(10):
            sample, graph, params, _ = random_instance(seed)
            trace1 = model_forward(sample, graph, params, 0)
            perm = rng.permutation(sample.num_points)
            shuffled = MultiCategoryPointSet(
                sample.sample_id, sample.place_type, sample.label,
                sample.categories[perm], sample.locations[perm],
            )
            graph2 = build_knn_graph(shuffled.locations, graph.k, graph.cutoff)
            trace2 = model_forward(shuffled, graph2, params, 0)
            assert np.array_equal(trace1.probs, trace2.probs)
            assert np.array_equal(trace1.pooled, trace2.pooled)

    def test_matches_pure_python_oracle(self):
        for seed in range(15):
            sample, graph, params, _ = random_instance(seed)
            trace = model_forward(sample, graph, params, 0)
            logits, probs = forward_probs_pure(
                sample, [list(map(int, nb)) for nb in graph.neighbors], params, 0
            )
            np.testing.assert_allclose(trace.logits, logits, rtol=0, atol=1e-10)
            np.testing.assert_allclose(trace.probs, probs, rtol=0, atol=1e-10)

    def test_place_type_isolation(self):
        sample, graph, params, _ = random_instance(3)
        # clone weights under a second key, then perturb only that key
        layers = []
        rng = np.random.default_rng(99)
        for layer in params.layers:
            W = dict(layer.W)
            B = dict(layer.B)
            W[1] = rng.normal(size=W[0].shape)
            B[1] = rng.normal(size=B[0].shape)
            layers.append(LayerParams(W, B, layer.alpha, layer.leaky_slope))
        multi = ModelParams(
            params.embedding, tuple(layers), params.classifier_w,
            params.classifier_b, params.num_categories,
        )
        before = model_forward(sample, graph, multi, 0).probs
        layers2 = []
        for layer in multi.layers:
            W = dict(layer.W)
            W[1] = W[1] + 100.0
            layers2.append(LayerParams(W, layer.B, layer.alpha, layer.leaky_slope))
        perturbed = ModelParams(
            multi.embedding, tuple(layers2), multi.classifier_w,
            multi.classifier_b, multi.num_categories,
        )
        after = model_forward(sample, graph, perturbed, 0).probs
        assert np.array_equal(before, after)


class TestGradients:
    def test_finite_difference_check(self):
        worst = 0.0
        for seed in range(25):
            sample, graph, params, label = random_instance(seed)
            _, grads = loss_and_gradients(sample, graph, params, 0, label)
            analytic = {"embedding": grads.embedding,
                        "classifier_w": grads.classifier_w,
                        "classifier_b": grads.classifier_b}
            for i, lg in enumerate(grads.layers):
                analytic[f"layer{i}.W[0]"] = lg.dW[0]
                analytic[f"layer{i}.B[0]"] = lg.dB[0]
                analytic[f"layer{i}.alpha"] = lg.d_alpha
            for name, numerical in fd_gradient_tensors(sample, graph, params, 0, label):
                err = max_relative_error(analytic[name], numerical)
                worst = max(worst, err)
        assert worst <= 1e-5

    def test_saturated_correct_class_zero_loss_and_grads(self):
        sample, graph, params, _ = random_instance(1)
        big = ModelParams(
            params.embedding, params.layers,
            np.zeros_like(params.classifier_w),
            np.array([100.0] + [0.0] * (params.num_classes - 1)),
            params.num_categories,
        )
        loss, grads = loss_and_gradients(sample, graph, big, 0, 0)
        assert loss <= 1e-12
        flat = [grads.embedding, grads.classifier_w, grads.classifier_b]
        for lg in grads.layers:
            flat.extend([lg.dW[0], lg.dB[0], lg.d_alpha])
        assert max(float(np.abs(t).max()) for t in flat) <= 1e-12

    def test_empty_graph_zero_alpha_gradient(self):
        sample, _, params, label = random_instance(2)
        isolated = build_knn_graph(sample.locations, 1, cutoff=1e-9)
        assert isolated.num_edges == 0
        _, grads = loss_and_gradients(sample, isolated, params, 0, label)
        for lg in grads.layers:
            assert np.all(lg.d_alpha == 0.0)

    def test_leaky_derivative_closed_form_both_regions(self):
        # two identical nodes, scalar dims: pre = w*a + b at both nodes.
        # Positive region: gradients independent of the slope and equal to the
        # hand formulas dW = a*dpool, dB = dpool, dalpha = w*dpool.
        # Negative region: the same formulas scaled by the slope.
        s = two_node_sample()
        g = build_knn_graph(s.locations, 1)
        emb = np.array([[1.0, 0.0, 0.0]])  # h0 = 1 for both nodes
        cw = np.array([[0.8], [-0.3]])
        cb = np.zeros(2)

        def model(w, b, a, slope):
            return ModelParams(emb, (scalar_layer(w, b, a, slope),), cw, cb, 1)

        for w, b, a in [(2.0, 1.0, 0.5), (1.5, -4.0, 0.5)]:
            pre = w * a + b
            region = 1.0 if pre > 0 else None
            for slope in (0.01, 0.2):
                m = model(w, b, a, slope)
                sigma_p = 1.0 if pre > 0 else slope
                out = pre if pre > 0 else slope * pre
                logits = cw[:, 0] * out
                e = np.exp(logits - logits.max())
                p = e / e.sum()
                dlogits = p.copy()
                dlogits[0] -= 1.0
                dpool = float(cw[:, 0] @ dlogits)
                dpre_winner = dpool * sigma_p
                loss, grads = loss_and_gradients(s, g, m, 0, 0)
                assert grads.layers[0].dW[0][0, 0] == pytest.approx(a * dpre_winner, rel=1e-12)
                assert grads.layers[0].dB[0][0, 0] == pytest.approx(dpre_winner, rel=1e-12)
                assert grads.layers[0].d_alpha[0, 0] == pytest.approx(w * dpre_winner, rel=1e-12)
                if region:
                    # positive region: slope must not enter at all
                    m2 = model(w, b, a, 0.37)
                    _, grads2 = loss_and_gradients(s, g, m2, 0, 0)
                    assert grads.layers[0].dW[0][0, 0] == grads2.layers[0].dW[0][0, 0]


class TestSgdStep:
    def test_lr_zero_bit_identical(self):
        sample, graph, params, label = random_instance(4)
        _, grads = loss_and_gradients(sample, graph, params, 0, label)
        stepped = sgd_step(params, grads, 0.0)
        assert np.array_equal(stepped.embedding, params.embedding)
        for l1, l2 in zip(stepped.layers, params.layers):
            assert np.array_equal(l1.W[0], l2.W[0])
            assert np.array_equal(l1.alpha, l2.alpha)

    def test_update_arithmetic(self):
        p = ModelParams(
            np.array([[1.0, 1.0, 1.0]]),
            (scalar_layer(1.0, 1.0, 1.0),),
            np.array([[1.0], [1.0]]),
            np.zeros(2),
            1,
        )
        g = Gradients(
            np.zeros((1, 3)),
            (LayerGrads({0: np.array([[0.5]])}, {}, None),),
            None, None,
        )
        stepped = sgd_step(p, g, 1e-3)
        assert stepped.layers[0].W[0][0, 0] == 0.9995
        assert stepped.layers[0].B[0][0, 0] == 1.0

    def test_only_present_keys_touched(self):
        rng = np.random.default_rng(10)
        keys = (0, 1, 2)
        params = init_model(rng, 2, 2, 2, 3, keys)
        grads = Gradients(
            None,
            tuple(
                LayerGrads({1: np.ones((3, 3))}, {1: np.ones((3, 3))}, None)
                for _ in range(2)
            ),
            None, None,
        )
        stepped = sgd_step(params, grads, 0.1)
        for i in range(2):
            for key in (0, 2):
                assert stepped.layers[i].W[key] is params.layers[i].W[key]
                assert stepped.layers[i].B[key] is params.layers[i].B[key]
            assert not np.array_equal(stepped.layers[i].W[1], params.layers[i].W[1])

    def test_linearity_in_lr(self):
        # the update term lr*g is exactly linear in lr for a power-of-two
        # ratio; measured from zero params so subtraction rounding cannot hide it
        rng = np.random.default_rng(11)
        zeros = ModelParams(
            np.zeros((3, 4)),
            (LayerParams({0: np.zeros((3, 3))}, {0: np.zeros((3, 3))}, np.zeros((2, 2))),),
            np.zeros((2, 3)),
            np.zeros(2),
            2,
        )
        grads = Gradients(
            rng.normal(size=(3, 4)),
            (LayerGrads({0: rng.normal(size=(3, 3))},
                        {0: rng.normal(size=(3, 3))},
                        rng.normal(size=(2, 2))),),
            rng.normal(size=(2, 3)),
            rng.normal(size=2),
        )
        full = sgd_step(zeros, grads, 2e-3)
        half = sgd_step(zeros, grads, 1e-3)
        np.testing.assert_array_equal(full.embedding, 2.0 * half.embedding)
        np.testing.assert_array_equal(
            full.layers[0].W[0], 2.0 * half.layers[0].W[0]
        )
        np.testing.assert_array_equal(
            full.layers[0].alpha, 2.0 * half.layers[0].alpha
        )


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        params = init_model(rng, 3, 2, 3, 5, (ALL_PLACE_TYPES,))
        path = str(tmp_path / "model.npz")
        save_model(params, path, meta={"seed": 12, "strategy": "osfa"})
        loaded, meta = load_model(path)
        assert meta == {"seed": 12, "strategy": "osfa"}
        assert np.array_equal(loaded.embedding, params.embedding)
        assert np.array_equal(loaded.classifier_w, params.classifier_w)
        assert np.array_equal(loaded.classifier_b, params.classifier_b)
        for l1, l2 in zip(loaded.layers, params.layers):
            assert set(l1.W) == set(l2.W)
            for key in l1.W:
                assert np.array_equal(l1.W[key], l2.W[key])
                assert np.array_equal(l1.B[key], l2.B[key])
            assert np.array_equal(l1.alpha, l2.alpha)
            assert l1.leaky_slope == l2.leaky_slope

    def test_save_is_byte_deterministic(self, tmp_path):
        rng = np.random.default_rng(13)
        params = init_model(rng, 2, 2, 2, 4, (0, 1))
        p1, p2 = str(tmp_path / "m1.npz"), str(tmp_path / "m2.npz")
        save_model(params, p1, meta={"x": 1})
        save_model(params, p2, meta={"x": 1})
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_rekey_aliases_tensors(self):
        rng = np.random.default_rng(14)
        params = init_model(rng, 2, 2, 2, 4, (ALL_PLACE_TYPES,))
        rekeyed = rekey_model(params, ALL_PLACE_TYPES, 5)
        assert rekeyed.place_type_keys == (5,)
        assert rekeyed.layers[0].W[5] is params.layers[0].W[ALL_PLACE_TYPES]
