from __future__ import annotations

import numpy as np
import pytest

from fastbat.autodiff import Tensor
from fastbat.errors import ContractViolation
from fastbat.models import (
    LossPair,
    ModelSpec,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)


def test_parameter_count_and_layout():
    spec = ModelSpec(4, 3, (5, 2))
    theta = init_params(spec)
    assert spec.num_params == theta.size == 4 * 5 + 5 + 5 * 2 + 2 + 2 * 3 + 3
    assert [s.name for s in theta.segments][:2] == ["layer0.weight", "layer0.bias"]


def test_init_is_seeded_and_bounded():
    spec = ModelSpec(9, 2, (4,), seed=3)
    a, b = init_params(spec), init_params(spec)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(np.abs(a.to_dict()["layer0.weight"]) <= 1 / 3)
    assert not np.array_equal(a.values, init_params(ModelSpec(9, 2, (4,), seed=4)).values)


def test_linear_model_forward_is_affine():
    spec = ModelSpec(3, 2, ())
    theta = init_params(spec)
    x = np.random.default_rng(0).uniform(size=(4, 3))
    p = theta.to_dict()
    np.testing.assert_allclose(forward(spec, theta.to_dict(), x).data, x @ p["layer0.weight"] + p["layer0.bias"])


def test_forward_rejects_wrong_width():
    spec = ModelSpec(3, 2, ())
    with pytest.raises(ContractViolation):
        forward(spec, init_params(spec).to_dict(), np.zeros((2, 4)))
    with pytest.raises(ContractViolation):
        ModelSpec(3, 2, (4,), activation="tanh")


def test_default_attack_loss_is_negated_training_loss(small_mlp):
    pair, theta, x, y = small_mlp
    d = np.full_like(x, 0.05)
    assert pair.attack_loss(theta, x, Tensor(d), y).data == -pair.train_loss(theta, x, Tensor(d), y).data


def test_predict_breaks_ties_towards_lowest_index():
    spec = ModelSpec(2, 4, ())
    theta = init_params(spec)
    theta = theta.like(np.zeros_like(theta.values))
    np.testing.assert_array_equal(predict(spec, theta, np.ones((3, 2))), [0, 0, 0])


def test_checkpoint_round_trip_is_float32_exact(tmp_path):
    spec = ModelSpec(3, 2, (4,))
    theta = init_params(spec)
    path = tmp_path / "m.fbat"
    save_checkpoint(path, theta)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.values, theta.values.astype(np.float32).astype(np.float64))
    assert [s.name for s in back.segments] == [s.name for s in theta.segments]
    raw = path.read_bytes()
    assert raw[:5] == b"FBAT\x01"


def test_checkpoint_rejects_corruption(tmp_path):
    spec = ModelSpec(3, 2, ())
    path = tmp_path / "m.fbat"
    save_checkpoint(path, init_params(spec))
    raw = path.read_bytes()
    (tmp_path / "bad.fbat").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.fbat").write_bytes(raw[:-3])
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / "bad.fbat")
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / "short.fbat")


def test_softplus_approaches_relu_for_large_preactivations():
    from fastbat.autodiff import relu, softplus

    t = Tensor(np.array([50.0]))
    assert 0.0 <= softplus(t).data[0] - relu(t).data[0] <= 1e-8


def test_forward_matches_a_hand_rolled_network():
    spec = ModelSpec(5, 3, (6, 4), "swish", seed=9)
    theta = init_params(spec)
    p = theta.to_dict()
    x = np.random.default_rng(2).uniform(size=(7, 5))
    swish = lambda a: a / (1.0 + np.exp(-a))
    h = swish(x @ p["layer0.weight"] + p["layer0.bias"])
    h = swish(h @ p["layer1.weight"] + p["layer1.bias"])
    ref = h @ p["layer2.weight"] + p["layer2.bias"]
    np.testing.assert_allclose(forward(spec, p, x).data, ref, rtol=1e-13, atol=1e-14)


def test_one_gradient_step_lowers_the_clean_loss(small_mlp):
    from fastbat.autodiff.functional import value_and_grad

    pair, theta, x, y = small_mlp
    f = pair.train_fn(x, y)
    before, (g,) = value_and_grad(f, theta.to_dict(), np.zeros_like(x), wrt=(0,))
    stepped = theta.like(theta.values - 1e-2 * theta.flatten(g))
    after = float(f(stepped.to_dict(), np.zeros_like(x)).data)
    assert after < before
