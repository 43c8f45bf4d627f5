"""Loss terms and analytic gradients against the finite-difference oracle."""

import numpy as np
import pytest

from cap.bank import build_bank, top_k_neighbors
from cap.errors import DataError
from cap.model import forward, init_model, param_items, with_params
from cap.objective import (
    batch_gradients,
    batch_loss,
    constraint_term,
    finite_difference_oracle,
    gradients,
    similarity_loss,
    total_loss,
)


def _random_case(rng, d=None, k=None, variant="linear", attention=True, batch=3):
    d = d or int(rng.integers(2, 9))
    k = k or int(rng.integers(1, 5))
    n = k + batch + 2
    bank = build_bank(rng.standard_normal((n, d)) + 2.0)
    model = init_model(d, variant, attention_enabled=attention, seed=int(rng.integers(1000)))
    # Perturb away from the identity so gradients are generic.
    perturbed = {
        name: value + 0.2 * rng.standard_normal(value.shape)
        for name, value in param_items(model)
    }
    model = with_params(model, perturbed)
    queries = rng.standard_normal((batch, d)) + 2.0
    neighbor_rows = np.stack(
        [top_k_neighbors(bank, q, k).matrix for q in queries]
    )
    return model, queries, neighbor_rows


def _pairs(model, queries, neighbor_rows, bank_dim):
    from cap.bank import NeighborSet

    pairs = []
    for q, rows in zip(queries, neighbor_rows):
        k = rows.shape[0]
        pairs.append(
            (
                q,
                NeighborSet(
                    indices=np.arange(k, dtype=np.int64),
                    similarities=np.ones(k),
                    matrix=rows,
                ),
            )
        )
    return pairs


def test_similarity_loss_frozen_values():
    rng = np.random.default_rng(41)
    bank = build_bank(np.tile(np.array([1.0, 1.0, 0.0]), (4, 1)))
    model = init_model(3, "linear", attention_enabled=False, seed=0)
    neighbors = top_k_neighbors(bank, np.array([1.0, 1.0, 0.0]), 2)
    aligned = forward(model, np.array([1.0, 1.0, 0.0]), neighbors)
    assert abs(similarity_loss([aligned]) - 0.0) <= 1e-12
    orthogonal = forward(model, np.array([0.0, 0.0, 5.0]), neighbors)
    assert abs(similarity_loss([orthogonal]) - 1.0) <= 1e-12
    opposite = forward(model, np.array([-1.0, -1.0, 0.0]), neighbors)
    assert abs(similarity_loss([opposite]) - 2.0) <= 1e-12


def test_similarity_loss_scale_invariant_in_z_normal():
    rng = np.random.default_rng(42)
    model, queries, neighbor_rows = _random_case(rng)
    outputs = [
        forward(model, q, ns)
        for q, ns in _pairs(model, queries, neighbor_rows, None)
    ]
    base = similarity_loss(outputs)
    scaled = [
        type(out)(
            z=out.z,
            z_hat=out.z_hat,
            m_hat=out.m_hat,
            attention_matrix=out.attention_matrix,
            z_normal=10.0 * out.z_normal,
            mix_weights=out.mix_weights,
        )
        for out in outputs
    ]
    assert abs(similarity_loss(scaled) - base) <= 1e-9


def test_constraint_term_frozen_values():
    z = np.array([[1.0, 0.0]])
    assert abs(constraint_term(z, z) - 0.0) <= 1e-12
    assert abs(constraint_term(z, np.array([[0.0, 1.0]])) - 3.0) <= 1e-12
    assert abs(constraint_term(z, np.array([[2.0, 0.0]])) - 1.0) <= 1e-12


def test_constraint_term_zero_iff_equal():
    rng = np.random.default_rng(43)
    for _ in range(50):
        z = rng.standard_normal((4, 6)) + 1.5
        assert constraint_term(z, z.copy()) <= 1e-15
        bumped = z.copy()
        bumped[1, 2] += 1e-3
        assert constraint_term(z, bumped) > 0


def test_total_loss_composition():
    breakdown = total_loss(0.1, 0.05, 2.0)
    assert abs(breakdown.total - 0.2) <= 1e-12
    assert abs(total_loss(0.3, 123.0, 0.0).total - 0.3) <= 1e-12
    assert abs(total_loss(0.3, 0.0, 100.0).total - 0.3) <= 1e-12
    with pytest.raises(DataError):
        total_loss(0.1, 0.1, -1.0)


def test_gradient_of_constraint_zero_at_identity():
    rng = np.random.default_rng(44)
    d, k = 4, 3
    bank = build_bank(rng.standard_normal((8, d)) + 2.0)
    model = init_model(d, "linear", attention_enabled=False, seed=1)
    queries = rng.standard_normal((3, d)) + 2.0
    rows = np.stack([top_k_neighbors(bank, q, k).matrix for q in queries])
    # The similarity term is excluded by differencing lambda values.
    _, grads_low = batch_gradients(model, queries, rows, 0.0)
    _, grads_high = batch_gradients(model, queries, rows, 7.0)
    for name in grads_low.names():
        if name.startswith("head"):
            assert np.allclose(grads_low[name], grads_high[name], atol=1e-9)


def test_gradients_match_finite_differences_random():
    rng = np.random.default_rng(45)
    for variant in ("linear", "linear-relu", "linear-relu-linear"):
        for attention in (True, False):
            model, queries, neighbor_rows = _random_case(
                rng, variant=variant, attention=attention
            )
            lam = float(rng.uniform(0.0, 3.0))
            _, analytic = batch_gradients(model, queries, neighbor_rows, lam)
            numeric = finite_difference_oracle(model, queries, neighbor_rows, lam)
            for name in analytic.names():
                a = analytic[name]
                f = numeric[name]
                scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
                assert float((np.abs(a - f) / scale).max()) < 1e-4


def test_gradients_batch_duplication_mean_semantics():
    rng = np.random.default_rng(46)
    model, queries, neighbor_rows = _random_case(rng, batch=2)
    loss_once, grads_once = batch_gradients(model, queries, neighbor_rows, 1.5)
    doubled_q = np.concatenate([queries, queries])
    doubled_rows = np.concatenate([neighbor_rows, neighbor_rows])
    loss_twice, grads_twice = batch_gradients(model, doubled_q, doubled_rows, 1.5)
    assert abs(loss_once.total - loss_twice.total) <= 1e-12
    for name in grads_once.names():
        assert np.allclose(grads_once[name], grads_twice[name], atol=1e-12)


def test_gradients_pairs_wrapper_agrees_with_batch():
    rng = np.random.default_rng(47)
    model, queries, neighbor_rows = _random_case(rng)
    loss_a, grads_a = batch_gradients(model, queries, neighbor_rows, 0.7)
    loss_b, grads_b = gradients(model, _pairs(model, queries, neighbor_rows, None), 0.7)
    assert abs(loss_a.total - loss_b.total) <= 1e-12
    for name in grads_a.names():
        assert np.allclose(grads_a[name], grads_b[name], atol=1e-12)


def test_finite_difference_near_zero_at_stationary_point():
    # Identity head, no attention, every query equals all its neighbors:
    # z_hat is parallel to z_normal and the constraint is exactly zero.
    d = 3
    row = np.array([1.0, 2.0, 2.0])
    model = init_model(d, "linear", attention_enabled=False, seed=0)
    queries = np.tile(row, (2, 1))
    rows = np.tile(row, (2, 4, 1))
    numeric = finite_difference_oracle(model, queries, rows, 2.0, step=1e-5)
    for name in numeric.names():
        assert float(np.abs(numeric[name]).max()) < 1e-6


def test_finite_difference_second_order_convergence():
    rng = np.random.default_rng(48)
    model, queries, neighbor_rows = _random_case(rng, d=4, k=2)
    _, analytic = batch_gradients(model, queries, neighbor_rows, 1.0)

    def disagreement(step):
        numeric = finite_difference_oracle(model, queries, neighbor_rows, 1.0, step=step)
        return max(
            float(np.abs(analytic[name] - numeric[name]).max())
            for name in numeric.names()
        )

    coarse = disagreement(2e-3)
    fine = disagreement(1e-3)
    # Central differences are second order: halving the step should
    # shrink the truncation error by roughly four.
    assert fine < coarse
    assert coarse / fine > 2.0


def test_batch_loss_matches_gradient_loss():
    rng = np.random.default_rng(49)
    model, queries, neighbor_rows = _random_case(rng)
    forward_only = batch_loss(model, queries, neighbor_rows, 1.3)
    with_grads, _ = batch_gradients(model, queries, neighbor_rows, 1.3)
    assert abs(forward_only.total - with_grads.total) <= 1e-12
    assert forward_only.similarity >= 0
    assert forward_only.constraint >= 0
    assert abs(
        forward_only.total - (forward_only.similarity + 1.3 * forward_only.constraint)
    ) <= 1e-9 * max(1.0, forward_only.total)
