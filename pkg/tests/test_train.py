import math

import numpy as np
import pytest

from deepmstm import tensorcore as tc
from deepmstm.data import WindowBatch
from deepmstm.errors import ContractError, NumericalError
from deepmstm.model import DeepMstmParams, ModelConfig, init_params
from deepmstm.train import (
    AdamState,
    adam_step,
    fit,
    mae_loss,
    random_batch,
    verify_gradients,
)


def test_mae_examples():
    assert mae_loss(np.array([1.0, 2.0]), np.array([1.0, 4.0])).data == 1.0
    assert mae_loss(np.array([3.0]), np.array([3.0])).data == 0.0


def test_mae_gradient_is_sign_over_n():
    with tc.using_tape():
        p = tc.Tensor(np.array([2.0, -1.0, 5.0, 0.0]), requires_grad=True)
        tc.backward(mae_loss(p, np.array([1.0, 1.0, 5.0, -2.0])))
    np.testing.assert_array_equal(p.grad, [0.25, -0.25, 0.0, 0.25])


def test_mae_empty_rejected():
    with pytest.raises(ContractError):
        mae_loss(np.zeros(0), np.zeros(0))


# -- Adam ------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    # the bias-corrected first step is lr * g/|g| (up to eps)
    theta = {"w": np.array([0.3, -2.0, 7.0])}
    grads = {"w": np.array([4.0, -0.01, 1e3])}
    new, _ = adam_step(theta, grads, AdamState(lr=0.05, eps=0.0))
    np.testing.assert_allclose(new["w"] - theta["w"], [-0.05, 0.05, -0.05], rtol=1e-14)


def test_adam_zero_gradient_is_no_op():
    theta = {"w": np.array([1.0, 2.0])}
    new, state = adam_step(theta, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(new["w"], theta["w"])
    assert state.step == 1


def test_adam_three_scalar_steps_match_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    gs = [1.0, -2.0, 0.5]
    theta, m, v = 1.0, 0.0, 0.0
    for k, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    arrays = {"x": np.array(1.0)}
    for g in gs:
        arrays, state = adam_step(arrays, {"x": np.array(g)}, state)
    assert float(arrays["x"]) == pytest.approx(theta, rel=1e-14)


# -- fit -------------------------------------------------------------------------


def small_batch(config, seed=0, size=24, target_fn=None):
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(size, config.M, config.N))
    targets = target_fn(inputs) if target_fn else rng.normal(size=size)
    return WindowBatch(inputs, targets, np.arange(size), np.zeros((size, config.L)), ())


def test_zero_lr_leaves_params_unchanged():
    cfg = ModelConfig(M=2, N=5, H=3)
    report = fit(small_batch(cfg), cfg, seed=1, epochs=4, lr=0.0)
    assert report.params.equal(init_params(cfg, 1))
    assert len(set(report.epoch_mae)) == 1


def test_fit_is_deterministic():
    cfg = ModelConfig(M=2, N=5, H=3, L=1)
    batch = random_batch(cfg, 3, size=16)
    a = fit(batch, cfg, seed=2, epochs=15)
    b = fit(batch, cfg, seed=2, epochs=15)
    assert a.same_result(b)
    c = fit(batch, cfg, seed=3, epochs=15)
    assert not a.params.equal(c.params)


def constant_series_batch(config, level, size=30):
    return WindowBatch(
        np.full((size, config.M, config.N), level), np.full(size, level), np.arange(size), np.zeros((size, 0)), ()
    )


@pytest.mark.parametrize("level", [0.8, 5.0, -3.0])
def test_constant_series_loss_falls(level):
    cfg = ModelConfig(M=1, N=14, use_seasonal=False)
    mae = fit(constant_series_batch(cfg, level), cfg, seed=0, epochs=50, lr=0.01).epoch_mae
    assert mae[-1] < mae[0] / 10
    # strictly downhill until the first time the loss reaches a tenth of its start
    reached = next(i for i, v in enumerate(mae) if v < mae[0] / 10)
    assert all(b < a for a, b in zip(mae[:reached], mae[1 : reached + 1]))


@pytest.mark.xfail(strict=True, reason="Adam on an L1 loss overshoots near the optimum; see decisions ledger")
def test_constant_series_loss_monotone_for_all_50_epochs():
    cfg = ModelConfig(M=1, N=14, use_seasonal=False)
    mae = fit(constant_series_batch(cfg, 0.8), cfg, seed=0, epochs=50, lr=0.01).epoch_mae
    assert all(b <= a for a, b in zip(mae, mae[1:]))


def test_every_head_is_updated():
    cfg = ModelConfig(M=2, N=5, H=3, L=1)
    init = init_params(cfg, 0)
    report = fit(random_batch(cfg, 0, size=12), cfg, seed=0, epochs=3)
    for name in init.names():
        assert not np.array_equal(report.params[name], init[name]), name


def test_patience_stops_early():
    cfg = ModelConfig(M=1, N=4, H=2)
    report = fit(small_batch(cfg), cfg, seed=0, epochs=200, lr=0.0, patience=3)
    assert report.stopped_early and report.epochs_run == 4


def test_nan_input_reports_epoch_and_window():
    cfg = ModelConfig(M=1, N=4, H=2)
    batch = small_batch(cfg)
    batch.inputs[7, 0, 2] = np.nan
    with pytest.raises(NumericalError, match="epoch 1, window index 7"):
        fit(batch, cfg, epochs=2)


def test_epoch_lines_are_json(tmp_path):
    cfg = ModelConfig(M=1, N=4, H=2)
    report = fit(small_batch(cfg), cfg, epochs=3)
    report.write(tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith('{"epoch": 1, "mae": ')


# -- gradient verification -------------------------------------------------------


def test_verify_gradients_small_config():
    result = verify_gradients(ModelConfig(M=2, N=5, K1=2, K2=2, H=3, fourier=((7, 2),), L=1), seed=0)
    assert result.passed and result.max_rel_error < 1e-4
    assert result.n_params > 100


@pytest.mark.parametrize("variant", [1, 2, 3])
def test_verify_gradients_each_variant(variant):
    cfg = ModelConfig(M=3, N=6, K1=2, K2=3, H=2, fourier=((7, 1),), L=2).variant(variant)
    assert verify_gradients(cfg, seed=variant).passed


def test_verify_gradients_at_zero_loss():
    # targets equal to the predictions put every residual on the kink of |r|;
    # with zero parameters both sides see a zero (sub)gradient
    cfg = ModelConfig(M=1, N=4, H=2, use_seasonal=False)
    batch = small_batch(cfg, target_fn=lambda x: np.zeros(len(x)))
    result = verify_gradients(cfg, batch=batch, params=DeepMstmParams.zeros(cfg))
    assert result.passed


def test_verify_gradients_catches_corrupted_backward(monkeypatch):
    def bad_tanh(a):
        a = tc.as_tensor(a)
        y = np.tanh(a.data)
        return tc._emit("tanh", (a,), y, lambda g: (g * (1.0 + y * y),))

    monkeypatch.setattr(tc, "tanh", bad_tanh)
    cfg = ModelConfig(M=2, N=5, K1=2, K2=2, H=3, fourier=((7, 2),), L=1)
    result = verify_gradients(cfg, seed=0)
    assert not result.passed
    assert result.worst_param.startswith("season.")
