"""Training loop: config, Adam, neighbor table, determinism, dynamics."""

import numpy as np
import pytest

from cap.bank import build_bank, top_k_neighbors
from cap.errors import ConfigError
from cap.model import init_model, param_items, with_params
from cap.objective import GradientSet
from cap.trainer import (
    PRESETS,
    TrainingConfig,
    adam_step,
    collapse_diagnostics,
    init_optimizer,
    precompute_neighbors,
    preset,
    train,
)


def test_config_defaults_and_validation():
    config = TrainingConfig()
    config.validate()
    assert config.beta1 == 0.9
    assert config.beta2 == 0.999
    assert config.epsilon == 1e-8
    for bad in (
        {"k": 0},
        {"lam": -0.5},
        {"learning_rate": 0.0},
        {"batch_size": 0},
        {"epochs": -1},
        {"head_variant": "cubic"},
        {"beta1": 1.0},
        {"epsilon": 0.0},
    ):
        with pytest.raises(ConfigError):
            TrainingConfig(**bad).validate()


def test_presets_pin_reference_settings():
    cifar = preset("cifar")
    assert (cifar.k, cifar.lam, cifar.batch_size, cifar.learning_rate) == (32, 2.0, 64, 5e-4)
    mvtec = preset("mvtec")
    assert (mvtec.k, mvtec.lam, mvtec.batch_size, mvtec.learning_rate) == (4, 0.1, 16, 1e-4)
    assert set(PRESETS) == {"cifar", "mvtec"}
    with pytest.raises(ConfigError):
        preset("imagenet")


def test_precompute_neighbors_orthogonal_exclusion():
    bank = build_bank(np.array([[1.0, 0.05, 0.0], [1.0, 0.0, 0.05], [0.05, 1.0, 0.0]]))
    table = precompute_neighbors(bank, 1)
    # Rows 0 and 1 are near-parallel; row 2 points elsewhere.
    assert table.indices[0][0] == 1
    assert table.indices[1][0] == 0
    assert table.indices[2][0] in (0, 1)
    for i in range(3):
        assert i not in table.indices[i]


def test_precompute_neighbors_matches_on_the_fly_oracle():
    rng = np.random.default_rng(51)
    rows = rng.standard_normal((40, 6)) + 2.0
    bank = build_bank(rows)
    table = precompute_neighbors(bank, 5)
    for i in range(40):
        # Addressing happens in the stored (float32) bank space.
        stored = bank.items[i].astype(np.float64)
        direct = top_k_neighbors(bank, stored, 5, exclude_index=i)
        assert np.array_equal(table.indices[i], direct.indices)
        assert np.array_equal(table.similarities[i], direct.similarities)


def test_precompute_neighbors_exhaustive_when_k_is_n_minus_one():
    rng = np.random.default_rng(52)
    bank = build_bank(rng.standard_normal((9, 4)) + 2.0)
    table = precompute_neighbors(bank, 8)
    for i in range(9):
        assert sorted(table.indices[i]) == sorted(set(range(9)) - {i})


def test_adam_zero_gradient_leaves_parameters():
    model = init_model(3, "linear", attention_enabled=False, seed=0)
    state = init_optimizer(model)
    zeros = GradientSet(by_name={"head0": np.zeros((3, 3))})
    new_state, new_model = adam_step(state, model, zeros, TrainingConfig())
    assert new_state.step == 1
    assert np.array_equal(new_model.head.matrices[0], model.head.matrices[0])


def test_adam_first_step_magnitude_is_learning_rate():
    model = init_model(2, "linear", attention_enabled=False, seed=0)
    state = init_optimizer(model)
    config = TrainingConfig(learning_rate=1e-2)
    grads = GradientSet(by_name={"head0": np.array([[3.0, -1.0], [0.5, 2.0]])})
    _, stepped = adam_step(state, model, grads, config)
    delta = stepped.head.matrices[0] - model.head.matrices[0]
    expected = -config.learning_rate * np.sign(np.array([[3.0, -1.0], [0.5, 2.0]]))
    assert np.allclose(delta, expected, atol=1e-4)


def test_adam_matches_scalar_reference_trace():
    # Hand-rolled scalar Adam on a fixed gradient sequence.
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    grads_sequence = [1.7, -0.4, 0.9]
    w_ref, m, v = 5.0, 0.0, 0.0
    for t, g in enumerate(grads_sequence, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        w_ref -= lr * m_hat / (np.sqrt(v_hat) + eps)

    model = init_model(1, "linear", attention_enabled=False, seed=0)
    model = with_params(model, {"head0": np.array([[5.0]])})
    state = init_optimizer(model)
    config = TrainingConfig(learning_rate=lr)
    for g in grads_sequence:
        state, model = adam_step(
            state, model, GradientSet(by_name={"head0": np.array([[g]])}), config
        )
    assert abs(float(model.head.matrices[0][0, 0]) - w_ref) <= 1e-12


def _small_instance(seed=0, n=60, d=6):
    rng = np.random.default_rng(seed)
    train_rows = rng.standard_normal((n, d)) + 3.0
    holdout = rng.standard_normal((20, d)) + 3.0
    labels = np.zeros(20, dtype=np.int64)
    labels[10:] = 1
    holdout[10:] += 2.0
    return build_bank(train_rows), holdout, labels


def test_train_zero_epochs_returns_init_model():
    bank, _, _ = _small_instance()
    config = TrainingConfig(k=4, epochs=0, seed=9)
    model, trace = train(bank, config)
    reference = init_model(bank.dim, "linear", attention_enabled=True, seed=9)
    for (_, trained), (_, initial) in zip(param_items(model), param_items(reference)):
        assert np.array_equal(trained, initial)
    assert len(trace.records) == 0


def test_train_rejects_bank_not_larger_than_k():
    bank, _, _ = _small_instance(n=5)
    with pytest.raises(ConfigError):
        train(bank, TrainingConfig(k=5, epochs=1))


def test_train_deterministic_across_runs():
    bank, holdout, labels = _small_instance()
    config = TrainingConfig(k=4, epochs=3, batch_size=16, seed=2)
    model_a, trace_a = train(bank, config, holdout=(holdout, labels))
    model_b, trace_b = train(bank, config, holdout=(holdout, labels))
    for (_, mat_a), (_, mat_b) in zip(param_items(model_a), param_items(model_b)):
        assert np.array_equal(mat_a, mat_b)
    assert trace_a.to_csv() == trace_b.to_csv()


def test_train_trace_has_one_record_per_epoch():
    bank, holdout, labels = _small_instance()
    config = TrainingConfig(k=4, epochs=5, batch_size=16, seed=1)
    model, trace = train(bank, config, holdout=(holdout, labels))
    assert [r.epoch for r in trace.records] == list(range(5))
    csv = trace.to_csv()
    header = csv.splitlines()[0]
    assert header == (
        "epoch,l_s,omega,total,head_frobenius,"
        "holdout_normal_mean,holdout_anomaly_mean"
    )
    assert len(csv.splitlines()) == 6
    assert model.metadata["k"] == 4
    assert model.metadata["epochs"] == 5


def test_train_loss_decreases_with_constraint_active():
    bank, holdout, labels = _small_instance(seed=5, n=80)
    config = TrainingConfig(k=4, lam=2.0, epochs=8, batch_size=16, seed=5)
    _, trace = train(bank, config, holdout=(holdout, labels))
    assert trace.records[-1].total < trace.records[1].total


def test_train_metadata_echoes_config():
    bank, _, _ = _small_instance()
    config = TrainingConfig(k=3, lam=0.5, epochs=1, seed=11, attention_enabled=False)
    model, _ = train(bank, config)
    assert model.metadata["lambda"] == 0.5
    assert model.metadata["seed"] == 11
    assert model.metadata["attention_enabled"] is False


def test_collapse_diagnostics_zero_and_identity_heads():
    bank, _, _ = _small_instance(d=8)
    model = init_model(8, "linear", attention_enabled=False, seed=0)
    identity = collapse_diagnostics(model, bank, k=2)
    assert abs(identity["head_frobenius"] - np.sqrt(8.0)) <= 1e-12
    zeroed = with_params(model, {"head0": np.zeros((8, 8))})
    collapsed = collapse_diagnostics(zeroed, bank, k=2)
    assert collapsed["head_frobenius"] == 0.0
    assert collapsed["head_sparsity"] == 1.0
    assert collapsed["adapted_norm_mean"] == 0.0


def test_collapse_diagnostics_identity_d64_frobenius_eight():
    rng = np.random.default_rng(53)
    bank = build_bank(rng.standard_normal((10, 64)) + 2.0)
    model = init_model(64, "linear", attention_enabled=False, seed=0)
    diag = collapse_diagnostics(model, bank, k=2)
    assert abs(diag["head_frobenius"] - 8.0) <= 1e-12
