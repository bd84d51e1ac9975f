import numpy as np
import pytest

from dsm.core.tensor import parameter
from dsm.errors import ContractError
from dsm.training.optim import AdamW, AdamWHyper, OptimState, adamw_step, warmup_cosine


def test_first_step_moves_by_learning_rate() -> None:
    values = np.array([1.0, -2.0, 0.5])
    adamw_step([("w", values)], [np.array([0.3, -4.0, 1e-3])], OptimState(), AdamWHyper(lr=0.1, weight_decay=0))
    np.testing.assert_allclose(values, [0.9, -1.9, 0.4], atol=1e-5)


def test_weight_decay_is_decoupled() -> None:
    values = np.array([2.0, -4.0])
    adamw_step([("w", values)], [np.zeros(2)], OptimState(), AdamWHyper(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(values, [2.0 * 0.95, -4.0 * 0.95])


def test_missing_gradient_leaves_parameter_and_moments_alone() -> None:
    frozen = np.array([1.0, 2.0])
    state = adamw_step([("frozen", frozen)], [None], OptimState(), AdamWHyper(lr=0.1))
    np.testing.assert_array_equal(frozen, [1.0, 2.0])
    assert "frozen" not in state.first
    assert state.step == 1


def test_gradient_shape_must_match() -> None:
    with pytest.raises(ContractError):
        adamw_step([("w", np.zeros(3))], [np.zeros(2)], OptimState(), AdamWHyper(lr=0.1))


def test_schedule_warms_up_then_decays() -> None:
    rates = [warmup_cosine(step, 100, 1.0, 0.1) for step in range(100)]
    assert rates[0] == pytest.approx(0.1)
    assert rates[9] == pytest.approx(1.0)
    assert rates[10] == pytest.approx(1.0)
    assert all(later <= earlier for earlier, later in zip(rates[10:], rates[11:], strict=False))
    assert rates[-1] < 1e-2


def test_schedule_without_warmup_starts_at_peak() -> None:
    assert warmup_cosine(0, 10, 0.5, 0.0) == pytest.approx(0.5)


def test_schedule_needs_steps() -> None:
    with pytest.raises(ContractError):
        warmup_cosine(0, 0, 1.0, 0.1)


def test_optimizer_minimizes_a_quadratic() -> None:
    weights = parameter(np.array([3.0, -2.0]), dtype="float64")
    optimizer = AdamW([("w", weights)], AdamWHyper(lr=0.1, weight_decay=0), total_steps=300, warmup_fraction=0.0)
    for _ in range(300):
        weights.grad = 2 * weights.data
        optimizer.step()
    np.testing.assert_allclose(weights.data, 0.0, atol=0.05)


def test_moments_round_trip_through_load() -> None:
    weights = parameter(np.ones(2), dtype="float64")
    optimizer = AdamW([("w", weights)], AdamWHyper(lr=0.01), total_steps=10, warmup_fraction=0.0)
    weights.grad = np.array([0.5, -0.5])
    optimizer.step()
    first, second = optimizer.moments()
    restored = AdamW([("w", weights)], AdamWHyper(lr=0.01), total_steps=10, warmup_fraction=0.0)
    restored.load_moments(first, second, step=1)
    assert restored.state.step == 1
    np.testing.assert_array_equal(restored.moments()[0]["w"], first["w"])


def test_moments_for_unknown_parameters_are_rejected() -> None:
    optimizer = AdamW([("w", parameter(np.ones(1), dtype="float64"))], AdamWHyper(lr=0.1), 5, 0.0)
    with pytest.raises(ContractError):
        optimizer.load_moments({"other": np.ones(1)}, {}, step=0)
