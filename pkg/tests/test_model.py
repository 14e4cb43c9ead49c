import numpy as np
import pytest

from dynprune.errors import DimensionError
from dynprune.model import (
    BatchNormSpec,
    ConvLayerSpec,
    LinearSpec,
    MaxPoolSpec,
    Model,
    NetworkSpec,
    ReLUSpec,
    build_toy_net,
    count_dense_params_flops,
)


def test_toy_net_layout():
    spec = build_toy_net()
    convs = [spec.layers[i] for i in spec.conv_indices()]
    assert [c.out_channels for c in convs] == [8, 8]
    assert spec.grouped_layers() == ["conv4"]
    assert all(isinstance(spec.layers[i + 1], BatchNormSpec) for i in spec.conv_indices())
    assert isinstance(spec.layers[-1], LinearSpec) and spec.layers[-1].out_features == 10


def test_forward_zero_image_is_finite():
    m = Model.init(build_toy_net(), np.random.default_rng(0))
    out = m.forward(np.zeros((1, 1, 28, 28)), "eval")
    assert out.shape == (1, 10) and np.all(np.isfinite(out.data))


def test_eval_is_deterministic_and_train_updates_stats(rng):
    m = Model.init(build_toy_net(), rng)
    x = rng.standard_normal((4, 1, 28, 28))
    a, b = m.forward(x, "eval").data, m.forward(x, "eval").data
    assert a.tobytes() == b.tobytes()
    before = m.buffers["bn1.running_mean"].copy()
    m.forward(x, "train")
    assert not np.array_equal(before, m.buffers["bn1.running_mean"])


def test_forward_shape_mismatch():
    m = Model.init(build_toy_net(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        m.forward(np.zeros((1, 1, 27, 28)))


def test_spec_composition_checked():
    with pytest.raises(DimensionError):
        NetworkSpec((ConvLayerSpec(4, 2), BatchNormSpec(3)), 10, (2, 8, 8))


def test_param_count_closed_form():
    # conv0 1*8*9, conv4 8*8*9 (both bias-free before batchnorm), linear 8*7*7*10 + 10
    counts = count_dense_params_flops(build_toy_net())
    assert counts.params == 72 + 576 + 3920 + 10
    # FLOPs: 2 * MACs; conv0 at 28x28, conv4 at 14x14
    assert counts.macs == 72 * 784 + 576 * 196 + 3920
    assert counts.flops == 2 * counts.macs == 346528


def test_single_pixel_conv_counts():
    spec = NetworkSpec((ConvLayerSpec(1, 1, (1, 1), padding=0, has_bias=True), LinearSpec(1, 1)), 1, (1, 1, 1))
    c = count_dense_params_flops(spec)
    # conv: 1 weight + 1 bias, 2 FLOPs; linear: 1 weight + 1 bias, 2 FLOPs
    assert c.params == 4 and c.flops == 4


def test_conv_flops_scale_with_area():
    def net(h):
        return NetworkSpec(
            (ConvLayerSpec(4, 2), ReLUSpec(), MaxPoolSpec(h, h), LinearSpec(4, 3)), 3, (2, h, h)
        )

    small, big = count_dense_params_flops(net(6)), count_dense_params_flops(net(12))
    lin = 2 * 4 * 3
    assert big.flops - lin == 4 * (small.flops - lin)
    assert big.params == small.params


@pytest.mark.slow
def test_trained_toy_net_accuracy(mnist):
    from dynprune.model import accuracy
    from dynprune.training import train

    data = mnist.subset(20000, 2000, 1000)
    m = Model.init(build_toy_net(), np.random.default_rng(0))
    m, _ = train(m, data, epochs=1, lr=0.1, rng=np.random.default_rng(0))
    assert accuracy(m, data.test_x, data.test_y) > 90.0
