import numpy as np
import pytest

from dsm.core.tensor import Tape, argmax_onehot, constant, total
from dsm.errors import ContractError
from dsm.layers.kmmm import KmmmBlock, aggregate, querywise_argmax


def _brute_force_assignment(scores: np.ndarray) -> np.ndarray:
    onehot = np.zeros_like(scores)
    for column in range(scores.shape[1]):
        best = 0
        for row in range(1, scores.shape[0]):
            if scores[row, column] > scores[best, column]:
                best = row
        onehot[best, column] = 1
    return onehot


def test_argmax_matches_brute_force_with_ties(rng: np.random.Generator) -> None:
    for _ in range(1000):
        scores = rng.integers(0, 3, size=(4, 6)).astype(np.float64)
        np.testing.assert_array_equal(argmax_onehot(scores), _brute_force_assignment(scores))


def test_every_position_has_exactly_one_query(rng: np.random.Generator) -> None:
    assignment = querywise_argmax(constant(rng.standard_normal((5, 11)), dtype="float64"))
    np.testing.assert_array_equal(assignment.data.sum(axis=0), np.ones(11))


def test_summed_clusters_conserve_feature_mass(rng: np.random.Generator) -> None:
    features = constant(rng.standard_normal((12, 3)), dtype="float64")
    assignment = querywise_argmax(constant(rng.standard_normal((4, 12)), dtype="float64"))
    clusters = aggregate(assignment, features, "sum")
    np.testing.assert_allclose(clusters.data.sum(axis=0), features.data.sum(axis=0))


def test_mean_clusters_leave_empty_queries_at_zero() -> None:
    scores = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 3.0]])
    features = constant(np.array([[2.0, 0.0], [4.0, 2.0], [1.0, 1.0]]), dtype="float64")
    clusters = aggregate(querywise_argmax(constant(scores, dtype="float64")), features, "mean")
    np.testing.assert_allclose(clusters.data, [[3.0, 1.0], [0.0, 0.0], [1.0, 1.0]])


def test_aggregate_rejects_misaligned_inputs() -> None:
    with pytest.raises(ContractError):
        aggregate(constant(np.ones((2, 3)), dtype="float64"), constant(np.ones((4, 2)), dtype="float64"))


@pytest.mark.parametrize("classic", [False, True])
def test_block_keeps_query_shape(rng: np.random.Generator, classic: bool) -> None:
    block = KmmmBlock(4, 3, 2, rng, dtype="float64", classic_attention=classic)
    queries = constant(rng.standard_normal((3, 4)), dtype="float64")
    features = constant(rng.standard_normal((10, 4)), dtype="float64")
    updated, scores = block(queries, features)
    assert updated.shape == (3, 4)
    assert scores.shape == (3, 10)


def test_block_without_query_filter_has_fewer_parameters(rng: np.random.Generator) -> None:
    full = KmmmBlock(4, 3, 2, rng, dtype="float64")
    reduced = KmmmBlock(4, 3, 2, rng, dtype="float64", query_ssm=False)
    assert len(reduced.parameters()) < len(full.parameters())
    assert not any(name.startswith("query_ssm") for name, _ in reduced.named_parameters())


def test_gradient_flows_through_hard_assignment(rng: np.random.Generator) -> None:
    block = KmmmBlock(4, 3, 2, rng, dtype="float64")
    queries = constant(rng.standard_normal((3, 4)), dtype="float64")
    features = constant(rng.standard_normal((8, 4)), dtype="float64")
    with Tape() as tape:
        updated, _ = block(queries, features)
        loss = total(updated)
    tape.backward(loss)
    assert block.spatial_ssm is not None
    assert all(tensor.grad is not None for tensor in block.spatial_ssm.parameters())


def test_classic_attention_adds_argmax_values(rng: np.random.Generator) -> None:
    block = KmmmBlock(4, 3, 2, rng, dtype="float64", classic_attention=True)
    queries = rng.standard_normal((3, 4))
    features = rng.standard_normal((6, 4))
    assert block.query_proj is not None
    assert block.key_proj is not None
    assert block.value_proj is not None
    q = queries @ block.query_proj.weight.data + block.query_proj.bias.data
    k = features @ block.key_proj.weight.data + block.key_proj.bias.data
    v = features @ block.value_proj.weight.data + block.value_proj.bias.data
    expected = queries + argmax_onehot(q @ k.T) @ v
    updated, _ = block(constant(queries, dtype="float64"), constant(features, dtype="float64"))
    np.testing.assert_allclose(updated.data, expected, atol=1e-12)
