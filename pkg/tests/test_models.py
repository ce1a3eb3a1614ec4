"""
Test suite for the attacked-model zoo and client gradients.
"""

import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ShapeError, ValidationError
from src.models import (
    ARCHITECTURES,
    ArchitectureSpec,
    batch_gradient,
    build_model,
    client_gradient,
    from_params,
    gradient_jacobian,
    load_model,
    projected_gradient,
    save_model,
)


def _input(n, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=n))


class TestArchitectures:
    @pytest.mark.parametrize("name", ARCHITECTURES)
    def test_zoo_builds_and_runs(self, name):
        """
        Test that every architecture builds and produces one logit per class.
        """
        model = build_model(name, seed=0)
        logits = model.forward(ad.leaf(_input(64)), model.param_nodes())
        assert logits.shape == (10,), f"{name} should output 10 logits"
        assert len(client_gradient(model, _input(64))) == model.parameter_count, \
            f"{name} gradient length should equal the parameter count"

    def test_parameter_layout(self):
        """
        Test the flattening order and sizes of mlp-2 and cnn-tiny.
        """
        mlp = ArchitectureSpec("mlp-2")
        assert [n for n, _ in mlp.parameter_shapes()] == [
            "layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias"
        ], "mlp-2 parameters should be listed layer by layer"
        assert mlp.parameter_count == 32 * 64 + 32 + 10 * 32 + 10, "mlp-2 parameter count"
        cnn = ArchitectureSpec("cnn-tiny")
        assert cnn.parameter_shapes()[0] == ("layer1.weight", (4, 9)), "Convolution kernel comes first"
        assert cnn.parameter_count == 4 * 9 + 4 + 10 * 144 + 10, "cnn-tiny parameter count"

    def test_hidden_layers_use_relu_with_he_scale(self):
        """
        Test that MLP hidden layers are relu layers initialised with std sqrt(2 / fan_in).
        """
        assert ArchitectureSpec("mlp-3").relu_layers == ("layer1", "layer2"), "Every hidden layer is relu"
        assert ArchitectureSpec("linear-1").relu_layers == (), "linear-1 has no hidden layer"
        assert ArchitectureSpec("cnn-tiny").relu_layers == (), "cnn-tiny keeps sigmoid feature maps"
        model = build_model("mlp-2", seed=0)
        hidden, output = model.params[0].data, model.params[2].data
        assert hidden.std() == pytest.approx(np.sqrt(2.0 / 64), rel=0.1), "He scale on the hidden layer"
        assert output.std() == pytest.approx(np.sqrt(1.0 / 32), rel=0.2), "Plain scale on the logits"
        first, last = np.zeros((32, 2)), np.zeros((2, 32))
        first[0, 0] = first[1, 1] = last[0, 0] = last[1, 1] = 1.0
        relu_net = from_params(ArchitectureSpec("mlp-2", input_dim=2, num_classes=2),
                               [first, np.zeros(32), last, np.zeros(2)])
        logits = relu_net.forward(ad.leaf([1.5, -2.0]), relu_net.param_nodes())
        assert np.allclose(logits.data, [1.5, 0.0]), "Negative pre-activations should be cut to zero"

    def test_invalid_specs_raise(self):
        """
        Test that bad names, losses and non-square cnn inputs are rejected.
        """
        with pytest.raises(ValidationError):
            ArchitectureSpec("resnet")
        with pytest.raises(ValidationError):
            ArchitectureSpec("mlp-2", loss="hinge")
        with pytest.raises(ValidationError):
            ArchitectureSpec("cnn-tiny", input_dim=10)

    def test_label_checks(self):
        """
        Test label validation per loss kind.
        """
        with pytest.raises(ValidationError):
            build_model("mlp-2", seed=0, label=10)
        with pytest.raises(ShapeError):
            build_model("linear-1", seed=0, label=Tensor(np.zeros(3)), loss="half-squared-error")

    def test_build_is_deterministic(self):
        """
        Test that equal seeds give equal parameters and different seeds differ.
        """
        first = build_model("mlp-3", seed=5)
        second = build_model("mlp-3", seed=5)
        other = build_model("mlp-3", seed=6)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(first.params, second.params)), \
            "Same seed should give identical parameters"
        assert not np.array_equal(first.params[0].data, other.params[0].data), \
            "Different seeds should give different parameters"
        assert first.model_id == "mlp-3-n64-c10-cross-entropy-s5", "Model id should encode the settings"


class TestClientGradient:
    def test_matches_finite_differences_over_weights(self):
        """
        Test the mlp-2 client gradient against finite differences of the loss.
        """
        model = build_model("mlp-2", seed=1, input_dim=6, num_classes=3)
        x = _input(6, seed=2)
        analytic = client_gradient(model, x).values.data
        flat = np.concatenate([p.data.reshape(-1) for p in model.params])
        shapes = [p.shape for p in model.params]

        def loss_at(values):
            parts, start = [], 0
            for shape in shapes:
                size = int(np.prod(shape))
                parts.append(ad.leaf(values[start:start + size].reshape(shape)))
                start += size
            return float(model.client_loss(ad.leaf(x), parts).data)

        numeric = ad.finite_difference_gradient(loss_at, flat)
        assert ad.relative_error(analytic, numeric) < 1e-6, "Client gradient should match finite differences"

    def test_half_squared_error_closed_form(self):
        """
        Test linear-1 with half-squared-error against (Wx - y) x^T and (Wx - y).
        """
        rng = np.random.default_rng(3)
        weight, bias = rng.normal(size=(3, 5)), rng.normal(size=3)
        y = rng.normal(size=3)
        spec = ArchitectureSpec("linear-1", input_dim=5, num_classes=3, loss="half-squared-error")
        model = from_params(spec, [weight, bias], label=Tensor(y))
        x = rng.normal(size=5)
        residual = weight @ x + bias - y
        expected = np.concatenate([np.outer(residual, x).reshape(-1), residual])
        got = client_gradient(model, Tensor(x)).values.data
        assert np.allclose(got, expected, atol=1e-12, rtol=0), "Gradient should equal the closed form"

    def test_batch_gradient_is_mean(self):
        """
        Test that a batch gradient equals the mean of per-sample gradients.
        """
        model = build_model("mlp-2", seed=0)
        xs = [_input(64, seed=s) for s in range(3)]
        batch = batch_gradient(model, xs)
        mean = np.mean([client_gradient(model, x).values.data for x in xs], axis=0)
        assert batch.batch_size == 3, "Batch size metadata should be the list length"
        assert np.allclose(batch.values.data, mean, atol=1e-12, rtol=0), "Batch gradient should be the mean"
        single = batch_gradient(model, xs[:1])
        assert np.array_equal(single.values.data, client_gradient(model, xs[0]).values.data), \
            "Batch of one should equal the client gradient"

    def test_gradient_is_differentiable_in_input(self):
        """
        Test grad_x ||g(x)|| through a create_graph gradient against finite differences.
        """
        model = build_model("mlp-2", seed=4, input_dim=5, num_classes=3)

        def gradient_norm(x):
            return ad.l2_norm(client_gradient(model, x, create_graph=True).as_node())

        error = ad.grad_check(gradient_norm, _input(5, seed=1))
        assert error < 1e-4, f"double backward through the client gradient: error {error:.3g}"

    def test_rejects_wrong_input_size(self):
        """
        Test that a mis-sized input raises ShapeError.
        """
        with pytest.raises(ShapeError):
            client_gradient(build_model("linear-1", seed=0), _input(10))


class TestJacobian:
    def test_jacobian_matches_projected_gradients(self):
        """
        Test that each Jacobian row agrees with grad_x of a basis projection.
        """
        model = build_model("mlp-2", seed=2, input_dim=4, num_classes=2)
        x = _input(4, seed=3)
        jac = gradient_jacobian(model, x)
        assert jac.shape == (model.parameter_count, 4), "Jacobian should be (P, n)"
        for p in (0, 7, model.parameter_count - 1):
            basis = np.zeros(model.parameter_count)
            basis[p] = 1.0
            node = ad.leaf(x)
            (row,) = ad.backward(projected_gradient(model, node, None, Tensor(basis)), [node])
            assert np.allclose(jac[p], row.data, atol=1e-12), f"Row {p} should match its projection"

    def test_linear_score_jacobian_is_constant(self):
        """
        Test that linear-score on linear-1 has an input-independent Jacobian.
        """
        model = build_model("linear-1", seed=0, input_dim=4, num_classes=3, loss="linear-score")
        first = gradient_jacobian(model, _input(4, seed=0))
        second = gradient_jacobian(model, _input(4, seed=9))
        assert np.allclose(first, second, atol=1e-12), "Affine gradient map has a constant Jacobian"


class TestCheckpoint:
    def test_save_and_load(self, tmp_path):
        """
        Test that a saved model restores the same parameters.
        """
        model = build_model("cnn-tiny", seed=3)
        path = save_model(model, tmp_path / "model.ckpt")
        restored = load_model(model.spec, path)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(model.params, restored.params)), \
            "Checkpoint should preserve every parameter exactly"

    def test_load_rejects_other_architecture(self, tmp_path):
        """
        Test that a checkpoint of another architecture is refused.
        """
        path = save_model(build_model("mlp-2", seed=0), tmp_path / "mlp.ckpt")
        with pytest.raises(ValidationError):
            load_model(ArchitectureSpec("mlp-3"), path)
