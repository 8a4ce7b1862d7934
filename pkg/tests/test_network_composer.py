import numpy as np
import pytest

from behavior_dnn.core.errors import ConfigurationError
from behavior_dnn.core.feature_extractor import FeatureLayout
from behavior_dnn.core.network import forward, predict
from behavior_dnn.core.network_composer import (CompositeSpec, SubnetAssignment, build_subnet, compose_sd,
                                                densify, late_fusion_scores, partition_features, unfreeze)


def trained_subnets(assignment, hidden=15, seed=0):
    subnets = []
    for j, group in enumerate(assignment.groups):
        subnet = build_subnet(group.indices, hidden, seed + j, group.name)
        subnet.info["trained"] = True
        subnets.append(subnet)
    return subnets


@pytest.fixture
def knowledge_assignment():
    return partition_features("knowledge", FeatureLayout.default(28))


class TestPartition:
    def test_knowledge_groups_on_default_layout(self, knowledge_assignment):
        sizes = {g.name: len(g.indices) for g in knowledge_assignment.groups}
        assert sizes == {"pitch": 6, "mfccs": 72, "mfbs": 72, "intensity": 6, "jitter_shimmer": 12}
        assert knowledge_assignment.dimension == 168

    def test_random_split_is_disjoint_cover(self):
        assignment = partition_features("random", FeatureLayout.default(28), num_groups=5, seed=3)
        sizes = sorted(len(g.indices) for g in assignment.groups)
        assert sizes == [33, 33, 34, 34, 34]
        assert sorted(i for g in assignment.groups for i in g.indices) == list(range(168))

    def test_random_split_is_seeded(self):
        layout = FeatureLayout.default(28)
        a = partition_features("random", layout, seed=1)
        b = partition_features("random", layout, seed=1)
        c = partition_features("random", layout, seed=2)
        assert a == b
        assert a != c

    def test_unlabeled_columns_rejected_in_knowledge_mode(self):
        with pytest.raises(ConfigurationError):
            partition_features("knowledge", FeatureLayout.default(4))

    def test_too_many_random_groups(self):
        with pytest.raises(ConfigurationError):
            partition_features("random", FeatureLayout.default(1), num_groups=7)

    def test_overlapping_groups_rejected(self):
        with pytest.raises(ConfigurationError):
            SubnetAssignment.from_pairs([("a", (0, 1)), ("b", (1, 2))], 3)


class TestComposite:
    def test_parameter_counts(self, knowledge_assignment):
        sd = compose_sd(trained_subnets(knowledge_assignment), (30, 10), seed=0)
        base = sum(15 * (len(g.indices) + 1) for g in knowledge_assignment.groups)
        fusion = 75 * 30 + 30 + 30 * 10 + 10 + 10 * 1 + 1
        assert fusion == 2601
        assert sd.network.trainable_parameter_count() == fusion
        assert sd.parameter_count() == base + fusion

        sj = unfreeze(sd)
        assert sj.parameter_count() == sd.parameter_count()
        assert sj.network.trainable_parameter_count() == sj.parameter_count()

        dense = densify(sd)
        assert dense.parameter_count() == 168 * 75 + 75 + fusion
        assert dense.parameter_count() > sj.parameter_count()

    def test_base_blocks_copy_subnet_weights(self, knowledge_assignment):
        subnets = trained_subnets(knowledge_assignment)
        sd = compose_sd(subnets, (30, 10), seed=0)
        assert not sd.base_layer.trainable
        for j, subnet in enumerate(subnets):
            weights, biases = sd.subnet_block(j)
            np.testing.assert_array_equal(weights, subnet.layers[0].weights)
            np.testing.assert_array_equal(biases, subnet.layers[0].biases)

    def test_composite_hidden_equals_subnet_hidden(self, knowledge_assignment):
        subnets = trained_subnets(knowledge_assignment)
        sd = compose_sd(subnets, (30, 10), seed=0)
        x = np.random.default_rng(0).normal(size=(5, 168))
        activations, _ = forward(sd.network, x)
        start = 0
        for subnet in subnets:
            sub_activations, _ = forward(subnet, subnet.select_inputs(x))
            np.testing.assert_allclose(activations[1][:, start:start + 15], sub_activations[1], rtol=0, atol=1e-12)
            start += 15

    def test_densify_preserves_forward(self, knowledge_assignment):
        sd = compose_sd(trained_subnets(knowledge_assignment), (30, 10), seed=1)
        dense = densify(sd)
        x = np.random.default_rng(5).normal(size=(1000, 168))
        np.testing.assert_allclose(predict(dense, x), predict(sd.network, x), rtol=1e-9)

    def test_densify_zero_filled_count(self, knowledge_assignment):
        sd = compose_sd(trained_subnets(knowledge_assignment), (30, 10), seed=1)
        dense = densify(sd)
        expected = 168 * 75 - sum(15 * len(g.indices) for g in knowledge_assignment.groups)
        assert expected == 10080
        assert int(np.sum(dense.layers[0].weights == 0.0)) == expected
        assert dense.layers[0].mask is None

    def test_untrained_subnet_rejected(self, knowledge_assignment):
        subnets = trained_subnets(knowledge_assignment)
        subnets[2].info["trained"] = False
        with pytest.raises(ConfigurationError):
            compose_sd(subnets, (30, 10), seed=0)

    def test_unfreeze_keeps_outputs_and_is_idempotent(self, knowledge_assignment):
        rng = np.random.default_rng(9)
        for seed in range(5):
            sd = compose_sd(trained_subnets(knowledge_assignment, hidden=int(rng.integers(2, 8)), seed=seed),
                            (int(rng.integers(2, 12)),), seed=seed)
            x = rng.normal(size=(20, 168))
            once = unfreeze(sd)
            np.testing.assert_array_equal(predict(once.network, x), predict(sd.network, x))
            twice = unfreeze(once)
            assert [layer.trainable for layer in twice.network.layers] == [True] * len(sd.network.layers)
            for a, b in zip(once.network.layers, twice.network.layers):
                np.testing.assert_array_equal(a.weights, b.weights)
                np.testing.assert_array_equal(a.biases, b.biases)
                assert (a.mask is None) == (b.mask is None)
                if a.mask is not None:
                    np.testing.assert_array_equal(a.mask, b.mask)
            assert twice.subnet_widths == once.subnet_widths
            assert not sd.base_layer.trainable

    def test_single_subnet_without_fusion_layers(self):
        subnet = build_subnet((0, 1, 2), 4, seed=0, name="pitch")
        subnet.info["trained"] = True
        sd = compose_sd([subnet], (), seed=0)
        assert [(s.input_dim, s.output_dim) for s in sd.network.shapes] == [(3, 4), (4, 1)]
        assert not sd.base_layer.trainable and sd.network.layers[1].trainable
        np.testing.assert_array_equal(sd.base_layer.weights, subnet.layers[0].weights)
        x = np.random.default_rng(1).normal(size=(6, 3))
        hidden, _ = forward(sd.network, x)
        np.testing.assert_allclose(hidden[1], forward(subnet, x)[0][1], rtol=0, atol=1e-12)

    def test_round_trip_through_params(self, knowledge_assignment):
        sd = compose_sd(trained_subnets(knowledge_assignment), (30, 10), seed=0)
        rebuilt = CompositeSpec.from_params(sd.network)
        assert rebuilt.assignment == sd.assignment
        assert rebuilt.subnet_widths == sd.subnet_widths


class TestSubnets:
    def test_subnet_ignores_other_columns(self):
        subnet = build_subnet((1, 4), 3, seed=0)
        frames = np.random.default_rng(1).normal(size=(4, 6))
        noisy = frames.copy()
        noisy[:, [0, 2, 3, 5]] += 10.0
        np.testing.assert_array_equal(predict(subnet, frames), predict(subnet, noisy))

    def test_late_fusion_is_mean_of_subnets(self, knowledge_assignment):
        subnets = trained_subnets(knowledge_assignment, hidden=4)
        x = np.random.default_rng(2).normal(size=(3, 168))
        expected = np.mean([predict(s, x) for s in subnets], axis=0)
        np.testing.assert_allclose(late_fusion_scores(subnets, x), expected)

    def test_empty_group(self):
        with pytest.raises(ConfigurationError):
            build_subnet((), 3, seed=0)
