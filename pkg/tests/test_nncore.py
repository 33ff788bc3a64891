import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import affine_model, random_mlp
from robusteval.dataset import LabeledDataset, synthetic_dataset
from robusteval.errors import ConfigurationError, ModelStateError, NumericError
from robusteval.nncore import (
    Dense,
    Dropout,
    Flatten,
    Model,
    ModelSpec,
    ReLU,
    build_model,
    evaluate,
    forward,
    load_model,
    logit_jacobian,
    loss_and_gradients,
    save_model,
    train,
)

H = 1e-4
GRAD_CASES = 20


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)


def _pattern(model, x):
    # ReLU masks and max-pool winners: the piece of the piecewise-smooth map x lies on
    _, caches = model._forward(np.asarray(x)[None])
    parts = []
    for c in caches:
        if isinstance(c, np.ndarray) and c.dtype == bool:
            parts.append(c.tobytes())
        elif isinstance(c, tuple) and len(c) == 2 and isinstance(c[1], np.ndarray):
            parts.append(c[1].tobytes())
    return b"".join(parts)


def central_difference(model, f, x, i, h=H):
    """Central difference of ``f`` along flat coordinate ``i`` of ``x``.

    Starts at ``h`` and halves it while the two probes straddle a ReLU or
    max-pool switch, so the quotient is taken on one smooth piece.
    """
    flat = x.reshape(-1)
    while True:
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        up, down = up.reshape(x.shape), down.reshape(x.shape)
        if h < 1e-9 or _pattern(model, up) == _pattern(model, down):
            return (f(up) - f(down)) / (2 * h)
        h /= 2


def fd_input(model, x, y, h=H):
    loss = lambda v: loss_and_gradients(model, v, y).loss
    return np.array([central_difference(model, loss, x, i, h) for i in range(x.size)]).reshape(x.shape)


def fd_param(model, x, y, p, idx, h=H):
    orig = p[idx]
    while True:
        p[idx] = orig + h
        lu, pu = loss_and_gradients(model, x, y).loss, _pattern(model, x)
        p[idx] = orig - h
        ld, pd = loss_and_gradients(model, x, y).loss, _pattern(model, x)
        p[idx] = orig
        if h < 1e-9 or pu == pd:
            return (lu - ld) / (2 * h)
        h /= 2


def random_cnn(seed, shape=(18, 18, 1), classes=3):
    model = build_model(ModelSpec("cnn", num_classes=classes, seed=seed), shape)
    rng = np.random.default_rng(seed + 500)
    for layer in model.layers:
        for p in layer.params.values():
            p += rng.normal(scale=0.05, size=p.shape)
    model.trained = True
    return model


@pytest.mark.parametrize("seed", range(GRAD_CASES))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = random_mlp(seed, input_shape=(3, 4, 2), hidden=7, classes=4)
    x = rng.uniform(0, 1, size=model.input_shape)
    y = int(rng.integers(4))
    bundle = loss_and_gradients(model, x, y)
    assert rel_err(bundle.input_gradient, fd_input(model, x, y)).max() < 1e-4
    for p, g in zip(model.parameters(), bundle.parameter_gradients):
        assert g.shape == p.shape
        for idx in np.ndindex(p.shape):
            assert rel_err(g[idx], fd_param(model, x, y, p, idx)) < 1e-4


@pytest.mark.parametrize("seed", range(GRAD_CASES))
def test_cnn_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = random_cnn(seed)
    x = rng.uniform(0, 1, size=model.input_shape)
    y = int(rng.integers(3))
    bundle = loss_and_gradients(model, x, y)
    assert rel_err(bundle.input_gradient, fd_input(model, x, y)).max() < 1e-4
    # every bias entry plus a random subset of each weight tensor
    for p, g in zip(model.parameters(), bundle.parameter_gradients):
        flat_idx = rng.choice(p.size, size=min(p.size, 12), replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, p.shape)
            assert rel_err(g[idx], fd_param(model, x, y, p, idx)) < 1e-4


def test_mlp_parameter_count():
    model = build_model(ModelSpec(), (28, 28, 1))
    assert model.parameter_count() == 784 * 128 + 128 + 128 * 10 + 10 == 101770


def test_cnn_logits_length_rgb():
    model = build_model(ModelSpec("cnn", num_classes=10), (32, 32, 3))
    assert model.logits(np.zeros((32, 32, 3))).shape == (10,)


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"dropout_rate": -0.3}, "dropout_rate"),
        ({"dropout_rate": 1.0}, "dropout_rate"),
        ({"hidden_neurons": None}, "hidden_neurons"),
        ({"hidden_neurons": 0}, "hidden_neurons"),
        ({"num_classes": 1}, "num_classes"),
        ({"optimizer": None}, "optimizer"),
        ({"optimizer": "lbfgs"}, "optimizer"),
        ({"architecture": "rnn"}, "architecture"),
        ({"epochs": 0}, "epochs"),
    ],
)
def test_invalid_spec_names_field(changes, field):
    with pytest.raises(ConfigurationError) as info:
        build_model(ModelSpec(**changes), (8, 8, 1))
    assert info.value.field == field


def test_cnn_rejects_small_inputs():
    with pytest.raises(ConfigurationError) as info:
        build_model(ModelSpec("cnn"), (17, 30, 1))
    assert info.value.field == "input_shape"
    build_model(ModelSpec("cnn"), (18, 18, 1))


def test_optimizer_name_is_case_insensitive():
    build_model(ModelSpec(optimizer="RMSProp"), (4, 4, 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(seed, shift):
    model = random_mlp(seed % 97)
    x = np.random.default_rng(seed).uniform(0, 1, size=(5,) + model.input_shape)
    p = forward(model, x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    model.layers[-1].params["b"] += shift
    np.testing.assert_array_equal(model.predict(x), p.argmax(axis=1))


def test_zero_weights_give_uniform_output_and_log_nb_loss():
    model = affine_model(np.zeros((16, 10)), np.zeros(10), (4, 4, 1))
    x = np.full((4, 4, 1), 0.3)
    np.testing.assert_allclose(forward(model, x), np.full(10, 0.1), rtol=1e-12)
    assert loss_and_gradients(model, x, 3).loss == pytest.approx(np.log(10), abs=1e-12)
    labels = np.arange(10) % 10
    ds = LabeledDataset(np.full((10, 4, 4, 1), 0.3), labels, 10)
    loss, _ = evaluate(model, ds)
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_hand_computed_two_two_two_mlp():
    W1 = np.array([[1.0, -2.0], [0.5, 1.5]])
    b1 = np.array([0.1, -0.2])
    W2 = np.array([[2.0, -1.0], [-0.5, 0.25]])
    b2 = np.array([0.0, 0.3])
    model = Model([Flatten(), Dense(W1, b1), ReLU(), Dropout(0.5), Dense(W2, b2)], (1, 2, 1), 2, trained=True)
    x = np.array([0.4, 0.8])
    # hand evaluation
    h0 = 0.4 * 1.0 + 0.8 * 0.5 + 0.1  # 0.9
    h1 = max(0.4 * -2.0 + 0.8 * 1.5 - 0.2, 0.0)  # 0.2
    z0 = h0 * 2.0 + h1 * -0.5 + 0.0  # 1.7
    z1 = h0 * -1.0 + h1 * 0.25 + 0.3  # -0.55
    p0 = 1.0 / (1.0 + np.exp(z1 - z0))
    np.testing.assert_allclose(forward(model, x.reshape(1, 2, 1)), [p0, 1 - p0], rtol=0, atol=1e-12)


def test_affine_jacobian_is_weight_matrix():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(12, 5))
    model = affine_model(W, rng.normal(size=5), (2, 3, 2))
    x = rng.uniform(size=(2, 3, 2))
    np.testing.assert_array_equal(logit_jacobian(model, x), W.T)


def test_jacobian_rows_match_logit_gradients_and_fd():
    model = random_mlp(4, input_shape=(3, 3, 1), hidden=5, classes=3)
    x = np.random.default_rng(1).uniform(size=(3, 3, 1))
    jac = logit_jacobian(model, x)
    for c in range(3):
        np.testing.assert_allclose(jac[c], model.logit_gradient(x, c).reshape(-1), rtol=0, atol=1e-14)
        num = np.array([central_difference(model, lambda v: model.logits(v)[c], x, i) for i in range(9)])
        assert rel_err(jac[c], num).max() < 1e-4


def test_dead_relu_kills_jacobian():
    W1 = -np.ones((4, 3))
    model = Model(
        [Flatten(), Dense(W1, -np.ones(3)), ReLU(), Dense(np.ones((3, 2)), np.zeros(2))], (2, 2, 1), 2, trained=True
    )
    np.testing.assert_array_equal(logit_jacobian(model, np.full((2, 2, 1), 0.5)), 0.0)


def test_duplicate_inputs_give_identical_bundles():
    model = random_mlp(2)
    x = np.random.default_rng(3).uniform(size=model.input_shape)
    a, b = loss_and_gradients(model, x, 1), loss_and_gradients(model, x.copy(), 1)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.input_gradient, b.input_gradient)
    for ga, gb in zip(a.parameter_gradients, b.parameter_gradients):
        np.testing.assert_array_equal(ga, gb)


def test_loss_floor_keeps_gradients_finite():
    model = affine_model(np.zeros((4, 2)), np.array([0.0, 1000.0]), (2, 2, 1))
    bundle = loss_and_gradients(model, np.zeros((2, 2, 1)), 0)
    assert bundle.loss == pytest.approx(-np.log(1e-12))
    assert np.all(np.isfinite(bundle.input_gradient))


def test_shape_mismatch_is_argument_error():
    model = random_mlp(0)
    with pytest.raises(ValueError):
        forward(model, np.zeros((5, 5, 1)))


def test_dropout_masks():
    layer = Dropout(0.25)
    x = np.ones((200, 50))
    out, _ = layer.forward(x, "infer")
    np.testing.assert_array_equal(out, x)
    a, _ = layer.forward(x, "train", np.random.default_rng(0))
    b, _ = layer.forward(x, "train", np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) == {0.0, 1.0 / 0.75}
    assert abs((a == 0).mean() - 0.25) < 0.02


def test_training_reaches_high_accuracy_on_blobs():
    ds = synthetic_dataset(11, 200, shape=(8, 8, 1), num_classes=2)
    model = build_model(ModelSpec(hidden_neurons=16, num_classes=2, seed=0), ds.shape)
    log = train(model, ds, epochs=5)
    assert len(log) == 5
    # frozen from one seeded run; the training log lags because of dropout
    assert log[-1]["accuracy"] > log[0]["accuracy"]
    assert log[-1]["loss"] < log[0]["loss"]
    assert evaluate(model, ds)[1] >= 0.95


def test_training_is_deterministic():
    ds = synthetic_dataset(1, 60, shape=(4, 4, 1), num_classes=3)
    spec = ModelSpec(hidden_neurons=8, num_classes=3, optimizer="adam", epochs=2, seed=5)
    a, b = build_model(spec, ds.shape), build_model(spec, ds.shape)
    train(a, ds)
    train(b, ds)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_training_argument_errors():
    ds = synthetic_dataset(1, 10, shape=(4, 4, 1), num_classes=2)
    model = build_model(ModelSpec(num_classes=2), ds.shape)
    with pytest.raises(ValueError):
        train(model, ds, epochs=0)
    with pytest.raises(ValueError):
        evaluate(model, ds.take([]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_aborts():
    ds = synthetic_dataset(1, 10, shape=(4, 4, 1), num_classes=2)
    model = build_model(ModelSpec(num_classes=2, optimizer="sgd", learning_rate=1e308), ds.shape)
    with pytest.raises(NumericError):
        train(model, ds, epochs=3)


def test_evaluate_perfect_labels():
    model = random_mlp(7)
    x = np.random.default_rng(0).uniform(size=(30,) + model.input_shape)
    ds = LabeledDataset(x, model.predict(x), 3)
    assert evaluate(model, ds)[1] == 1.0


def test_untrained_model_flag():
    model = build_model(ModelSpec(num_classes=2), (4, 4, 1))
    with pytest.raises(ModelStateError):
        model.require_trained()


@pytest.mark.parametrize("arch, shape", [("mlp", (5, 5, 2)), ("cnn", (18, 20, 3))])
def test_save_load_round_trip_is_bit_exact(tmp_path, arch, shape):
    model = build_model(ModelSpec(arch, hidden_neurons=9, num_classes=4, seed=3), shape)
    model.trained = True
    path = tmp_path / "m.npz"
    save_model(model, path)
    back = load_model(path)
    assert back.input_shape == model.input_shape and back.num_classes == 4 and back.trained
    assert back.spec == model.spec
    for pa, pb in zip(model.parameters(), back.parameters()):
        np.testing.assert_array_equal(pa, pb)
    x = np.random.default_rng(0).uniform(size=(3,) + shape)
    np.testing.assert_array_equal(model.logits(x), back.logits(x))
