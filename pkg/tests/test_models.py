import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dial.autodiff import Tape, Tensor, add_bias, matmul, sigmoid, softmax, total_sum
from dial.errors import DimensionError, SpecError
from dial.models import (
    MlpSpec,
    ModelParams,
    ModelSpec,
    classify,
    discriminate,
    encode,
    init_params,
    mlp_forward,
    predict,
)


def zero_params(spec: ModelSpec) -> ModelParams:
    params = init_params(spec, 0)
    for t in params.named().values():
        t.value = np.zeros_like(t.value)
    return params


def test_spec_validation():
    with pytest.raises(SpecError):
        MlpSpec((4,))
    with pytest.raises(SpecError):
        MlpSpec((4, 0, 2))
    bad = ModelSpec(MlpSpec((4, 8)), MlpSpec((6, 3)))
    with pytest.raises(SpecError):
        bad.validate()
    with pytest.raises(SpecError):
        ModelSpec(MlpSpec((4, 8)), MlpSpec((8, 5, 3))).validate()
    with pytest.raises(SpecError):
        ModelSpec(MlpSpec((4, 8)), MlpSpec((8, 3)), MlpSpec((8, 2))).validate()


def test_build_shapes():
    spec = ModelSpec.build(8, 3, feature_dim=16, encoder_hidden=(32,), disc_hidden=(16, 16))
    assert spec.encoder.widths == (8, 32, 16)
    assert spec.classifier.widths == (16, 3)
    assert spec.discriminator.widths == (16, 16, 16, 1)
    assert ModelSpec.build(8, 3, with_discriminator=False).discriminator is None


def test_init_is_deterministic():
    spec = ModelSpec.build(5, 3, 4, (6,), (7,))
    a, b = init_params(spec, 11), init_params(spec, 11)
    for (na, ta), (nb, tb) in zip(a.named().items(), b.named().items()):
        assert na == nb
        assert ta.value.tobytes() == tb.value.tobytes()
    c = init_params(spec, 12)
    assert not np.array_equal(a.encoder[0][0].value, c.encoder[0][0].value)


def test_init_biases_zero_and_named():
    params = init_params(ModelSpec.build(5, 3, 4, (6,), (7,)), 1)
    for name, t in params.named().items():
        assert t.name == name
        assert t.requires_grad
        if name.endswith(".b"):
            assert not t.value.any()


def test_init_weight_scale():
    fan_in = 50
    params = init_params(ModelSpec(MlpSpec((fan_in, 200)), MlpSpec((200, 2))), 4)
    w = params.encoder[0][0].value  # 10^4 draws
    assert w.size == 10_000
    assert abs(w.std() / np.sqrt(2 / fan_in) - 1) < 0.10
    assert abs(w.mean()) < 0.01


def test_parameter_count():
    spec = ModelSpec.build(5, 3, 4, (6,), (7,))
    params = init_params(spec, 0)
    expected = spec.encoder.parameter_count() + spec.classifier.parameter_count() + spec.discriminator.parameter_count()
    assert params.parameter_count() == expected == (5 * 6 + 6 + 6 * 4 + 4) + (4 * 3 + 3) + (4 * 7 + 7 + 7 + 1)
    assert params.spec() == spec


def test_named_groups():
    params = init_params(ModelSpec.build(5, 3, 4, (6,), (7,)), 0)
    assert list(params.named("classifier")) == ["classifier.0.W", "classifier.0.b"]
    assert set(params.named("discriminator")) == {"discriminator.0.W", "discriminator.0.b",
                                                  "discriminator.1.W", "discriminator.1.b"}


def test_zero_encoder_gives_zero_features():
    params = zero_params(ModelSpec.build(5, 3, 4, (6,), (7,)))
    assert not encode(params, Tensor(np.random.default_rng(0).normal(size=(3, 5)))).value.any()


def test_single_layer_is_affine():
    params = init_params(ModelSpec(MlpSpec((4, 3)), MlpSpec((3, 2))), 2)
    x = Tensor(np.random.default_rng(1).normal(size=(5, 4)))
    w, b = params.encoder[0]
    assert np.array_equal(encode(params, x).value, add_bias(matmul(x, w), b).value)


def test_relu_only_between_layers():
    params = init_params(ModelSpec(MlpSpec((2, 3, 2)), MlpSpec((2, 2))), 0)
    x = Tensor(np.random.default_rng(3).normal(size=(50, 2)) * 5)
    out = encode(params, x).value
    assert (out < 0).any()  # linear output layer keeps negatives


def test_shared_encoder_same_rows_same_features():
    params = init_params(ModelSpec.build(5, 3, 4, (6,), (7,)), 0)
    x = np.random.default_rng(2).normal(size=(4, 5))
    assert np.array_equal(encode(params, Tensor(x)).value, encode(params, Tensor(x.copy())).value)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30))
def test_logit_shapes(n):
    params = init_params(ModelSpec.build(5, 3, 4, (6,), (7,)), 0)
    f = encode(params, Tensor(np.ones((n, 5))))
    assert classify(params, f).shape == (n, 3)
    assert discriminate(params, f).shape == (n, 1)


def test_zero_classifier_uniform_and_zero_discriminator_half():
    params = zero_params(ModelSpec.build(5, 3, 4, (6,), (7,)))
    f = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    assert np.allclose(softmax(classify(params, f).value), 1 / 3)
    assert np.allclose(sigmoid(discriminate(params, f).value), 0.5)


def test_hand_built_classifier_follows_sign():
    params = init_params(ModelSpec(MlpSpec((2, 2)), MlpSpec((2, 2))), 0)
    params.encoder[0] = (Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))
    params.classifier = (Tensor([[-1.0, 1.0], [0.0, 0.0]]), Tensor(np.zeros((1, 2))))
    x = np.array([[2.0, 5.0], [-3.0, 1.0], [0.5, -4.0], [-0.1, 0.0]])
    assert predict(params, x).tolist() == [1, 0, 1, 0]


def test_frozen_discriminator_passes_gradient_to_features_only():
    params = init_params(ModelSpec.build(5, 3, 4, (6,), (7,)), 0)
    f = Tensor(np.random.default_rng(4).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        out = total_sum(discriminate(params, f, frozen=True))
    tape.backward(out)
    assert f.grad is not None and f.grad.any()
    assert all(t.grad is None for t in params.named("discriminator").values())


def test_missing_discriminator():
    params = init_params(ModelSpec.build(5, 3, with_discriminator=False), 0)
    with pytest.raises(SpecError):
        discriminate(params, Tensor(np.ones((1, 16))))


def test_width_mismatch():
    params = init_params(ModelSpec.build(5, 3), 0)
    with pytest.raises(DimensionError):
        mlp_forward(params.encoder, Tensor(np.ones((2, 4))))
