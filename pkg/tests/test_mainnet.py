import numpy as np
import pytest

from hfs import numerics as nx
from hfs.errors import ConfigError, ContractError, DomainError
from hfs.mainnet import (BetaParams, build_arch, evaluate, features, forward, init_beta, init_conv_weights,
                         validate_arch)
from hfs.numerics import Tensor


@pytest.mark.parametrize("preset,n_convs", [("desk", 3), ("mnist", 7), ("fmnist", 37), ("cifar10", 37),
                                            ("cifar100", 37)])
def test_preset_layer_counts(preset, n_convs):
    arch = build_arch(preset, num_classes=10, basic=(16, 16))
    assert len(arch.convs) == n_convs
    assert arch.conv_shapes()[-1][0] == arch.in_features


def test_desk_counts():
    arch = build_arch("desk", num_classes=4)
    assert arch.conv_param_count() == 16 * 3 * 9 + 16 * 16 * 9 + 32 * 16 * 9
    assert arch.classifier_param_count() == 4 * 32 + 4


def test_cifar100_widths():
    arch = build_arch("cifar100", num_classes=100)
    assert arch.convs[0].c_out == 32 and arch.in_features == 128
    assert sum(c.stride == 2 for c in arch.convs) == 2


def test_tiling_rule_rejects_bad_basic():
    with pytest.raises(ConfigError, match="multiple"):
        build_arch("desk", basic=(16, 12))
    with pytest.raises(ConfigError):
        build_arch({"convs": [{"c_in": 16, "c_out": 16}, {"c_in": 16, "c_out": 24}], "num_classes": 2},
                   basic=(16, 16))


def test_channel_chain_validation():
    with pytest.raises(ConfigError, match="emits"):
        build_arch({"convs": [{"c_in": 3, "c_out": 16}, {"c_in": 8, "c_out": 16}]})
    with pytest.raises(ConfigError):
        build_arch("nope")


def test_residual_must_be_closed():
    with pytest.raises(ConfigError, match="residual"):
        build_arch({"convs": [{"c_in": 3, "c_out": 16, "residual": True}]})


def test_to_dict_round_trip():
    arch = build_arch("mnist")
    assert build_arch(arch.to_dict()) == arch


def test_forward_shapes_and_loss():
    arch = build_arch("desk", num_classes=4)
    rng = np.random.default_rng(0)
    theta = init_conv_weights(arch, rng)
    beta = init_beta(arch, rng)
    x = rng.normal(size=(5, 3, 8, 8))
    logits, loss = forward(arch, theta, beta, x, np.array([0, 1, 2, 3, 0]))
    assert logits.shape == (5, 4)
    assert np.isfinite(loss.item())
    _, none = forward(arch, theta, beta, x)
    assert none is None


def test_zero_theta_gives_bias_only_logits():
    arch = build_arch("desk", num_classes=3)
    theta = [Tensor(np.zeros(s)) for s in arch.conv_shapes()]
    beta = BetaParams(Tensor(np.ones((3, 32))), Tensor(np.array([0.1, -0.2, 0.3])))
    logits, _ = forward(arch, theta, beta, np.random.default_rng(1).normal(size=(2, 3, 8, 8)))
    np.testing.assert_array_equal(logits.data, [[0.1, -0.2, 0.3]] * 2)


def test_residual_block_adds_shortcut():
    # A single residual block with zero kernels reduces to relu(relu(0) + x) = relu(x).
    arch = build_arch({"convs": [{"c_in": 2, "c_out": 2, "residual": True}, {"c_in": 2, "c_out": 2}],
                       "num_classes": 2})
    x = np.random.default_rng(2).normal(size=(1, 2, 4, 4))
    theta = [Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros((2, 2, 3, 3)))]
    feats = features(arch, theta, Tensor(x)).data
    np.testing.assert_allclose(feats, np.maximum(x, 0).mean(axis=(2, 3)))


def test_strided_shortcut_pads_channels():
    arch = build_arch({"convs": [{"c_in": 1, "c_out": 2, "stride": 2, "residual": True},
                                 {"c_in": 2, "c_out": 2}], "num_classes": 2})
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    theta = [Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros((2, 2, 3, 3)))]
    feats = features(arch, theta, Tensor(x)).data
    np.testing.assert_allclose(feats, [[x[0, 0, ::2, ::2].mean(), 0.0]])


def test_kernel_shape_contract():
    arch = build_arch("desk", num_classes=2)
    theta = init_conv_weights(arch, np.random.default_rng(0))
    with pytest.raises(ContractError):
        features(arch, theta[:2], Tensor(np.zeros((1, 3, 8, 8))))
    with pytest.raises(ContractError):
        forward(arch, theta, init_beta(arch, np.random.default_rng(0)), np.zeros((1, 1, 8, 8)))


def test_evaluate_ties_and_empty():
    arch = build_arch("desk", num_classes=3)
    theta = [Tensor(np.zeros(s)) for s in arch.conv_shapes()]
    beta = BetaParams(Tensor(np.zeros((3, 32))), Tensor(np.zeros(3)))
    x = np.zeros((4, 3, 8, 8))
    # All logits tie, so every prediction is class 0.
    assert evaluate(arch, theta, beta, x, np.array([0, 0, 1, 2])) == 0.5
    with pytest.raises(DomainError):
        evaluate(arch, theta, beta, x[:0], np.array([], dtype=int))


def test_evaluate_batches_agree():
    arch = build_arch("desk", num_classes=4)
    rng = np.random.default_rng(3)
    theta, beta = init_conv_weights(arch, rng), init_beta(arch, rng)
    x, y = rng.normal(size=(9, 3, 8, 8)), rng.integers(0, 4, 9)
    assert evaluate(arch, theta, beta, x, y, batch_size=2) == evaluate(arch, theta, beta, x, y)


def test_gradients_theta_and_beta():
    arch = build_arch({"convs": [{"c_in": 2, "c_out": 2, "residual": True}, {"c_in": 2, "c_out": 2}],
                       "num_classes": 3})
    rng = np.random.default_rng(4)
    theta = init_conv_weights(arch, rng)
    beta = init_beta(arch, rng)
    x, y = rng.normal(size=(3, 2, 5, 5)), np.array([0, 2, 1])

    def f(w1, w2, W, b):
        return forward(arch, [w1, w2], BetaParams(W, b), x, y)[1]

    assert nx.gradient_check(f, theta + beta.params(), samples=80) < 1e-4


def test_validate_arch_direct():
    arch = build_arch("desk")
    validate_arch(arch, (16, 16))
    with pytest.raises(ConfigError):
        validate_arch(arch, (16, 32))
