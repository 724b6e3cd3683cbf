import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from wxrestore.config import NetworkConfig
from wxrestore.errors import ConfigError, NumericError, ShapeError
from wxrestore.model import (
    FFC,
    ParameterStore,
    RestorationNet,
    SpectralTransform,
    TaskIntraPatchBlock,
    TaskQueryFuse,
    TaskSequenceGenerator,
    adaptive_mixup,
    build_network,
    crop_to_record,
    init_parameters,
    network_forward,
    record_attention,
    reflect_pad_to_multiple,
    restore,
    scaled_dot_attention,
)


def _randomize(module, std=0.3, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def _identity_kernel(channels, k):
    w = torch.zeros(channels, channels, k, k)
    for c in range(channels):
        w[c, c, k // 2, k // 2] = 1.0
    return w


# ---------------------------------------------------------------- attention


def test_attention_zero_query_gives_mean_of_values():
    out = scaled_dot_attention(torch.tensor([[0.0]]), torch.tensor([[5.0], [9.0]]),
                               torch.tensor([[1.0], [3.0]]))
    assert out.tolist() == [[2.0]]


def test_attention_identical_keys_give_uniform_weights():
    q = torch.randn(1, 4, dtype=torch.float64)
    k = torch.ones(3, 4, dtype=torch.float64) * 0.7
    v = torch.tensor([[1.0, 0.0]] * 3, dtype=torch.float64)
    torch.testing.assert_close(scaled_dot_attention(q, k, v),
                               torch.tensor([[1.0, 0.0]], dtype=torch.float64))


def test_attention_two_key_case_matches_hand_softmax():
    q = torch.tensor([[10.0]], dtype=torch.float64)
    k = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    v = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    e1, e2 = math.exp(10.0), math.exp(-10.0)
    expected = e1 / (e1 + e2)
    assert scaled_dot_attention(q, k, v).item() == pytest.approx(expected, rel=1e-15)


def test_attention_shape_errors_name_operand():
    with pytest.raises(ShapeError, match="keys"):
        scaled_dot_attention(torch.zeros(2, 3), torch.zeros(4, 2), torch.zeros(4, 1))
    with pytest.raises(ShapeError, match="values"):
        scaled_dot_attention(torch.zeros(2, 3), torch.zeros(4, 3), torch.zeros(5, 1))
    with pytest.raises(ConfigError):
        scaled_dot_attention(torch.zeros(2, 0), torch.zeros(4, 0), torch.zeros(4, 1))


def test_attention_rows_sum_to_one():
    q, k, v = torch.randn(7, 5), torch.randn(11, 5) * 4, torch.randn(11, 3)
    with record_attention() as weights:
        scaled_dot_attention(q, k, v)
    (w,) = weights
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(7), atol=1e-6, rtol=0)


# ---------------------------------------------------------------- TIPB


def test_tipb_preserves_shape():
    block = TaskIntraPatchBlock(4, heads=2, query_len=48, expansion=2)
    assert block(torch.randn(1, 4, 8, 8)).shape == (1, 4, 8, 8)


def test_tipb_zero_value_and_ffn_reduces_to_residual():
    block = _randomize(TaskIntraPatchBlock(4, heads=1, query_len=6, expansion=2))
    with torch.no_grad():
        block.to_v.weight.zero_()
        block.to_v.bias.zero_()
        block.ffn.fc2.weight.zero_()
        block.ffn.fc2.bias.zero_()
        block.proj.bias.zero_()
    x = torch.randn(2, 4, 8, 6)
    # V = 0 -> task tokens 0 -> read-back 0 -> proj(0) = 0; FFN(.) = 0
    torch.testing.assert_close(block(x), x, atol=0, rtol=0)


def test_tipb_constant_patch_gives_constant_output_per_patch():
    block = _randomize(TaskIntraPatchBlock(4, heads=2, query_len=5, expansion=2))
    x = torch.zeros(1, 4, 8, 8)
    vals = torch.randn(2, 2, 4)
    for i in range(2):
        for j in range(2):
            x[0, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4] = vals[i, j][:, None, None]
    out = block(x)
    for i in range(2):
        for j in range(2):
            patch = out[0, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
            torch.testing.assert_close(patch, patch[:, :1, :1].expand_as(patch),
                                       atol=1e-6, rtol=1e-6)


def test_tipb_patches_are_independent():
    block = _randomize(TaskIntraPatchBlock(4, heads=2, query_len=5, expansion=2))
    x = torch.randn(1, 4, 8, 8)
    y = x.clone()
    y[0, :, 4:, 4:] += 1.0  # perturb bottom-right patch only
    a, b = block(x), block(y)
    torch.testing.assert_close(a[..., :4, :], b[..., :4, :])
    torch.testing.assert_close(a[..., 4:, :4], b[..., 4:, :4])
    assert not torch.allclose(a[..., 4:, 4:], b[..., 4:, 4:])


def test_tipb_odd_dims_raise():
    block = TaskIntraPatchBlock(4, heads=2, query_len=4, expansion=2)
    with pytest.raises(ShapeError):
        block(torch.randn(1, 4, 7, 8))


def test_learnable_query_is_trainable_parameter():
    block = TaskIntraPatchBlock(4, heads=2, query_len=4, expansion=2)
    names = dict(block.named_parameters())
    assert "query" in names and names["query"].requires_grad
    block(torch.randn(1, 4, 8, 8)).sum().backward()
    assert block.query.grad is not None and block.query.grad.abs().sum() > 0


# ---------------------------------------------------------------- encoder stage


@pytest.mark.parametrize("shape,stage,expected", [
    ((1, 16, 64, 64), 0, (1, 32, 32, 32)),
    ((1, 32, 32, 32), 1, (1, 64, 16, 16)),
])
def test_encoder_stage_shapes(shape, stage, expected):
    net = build_network(NetworkConfig(), 0)
    assert net.encoder_stage(torch.randn(shape), stage).shape == expected


def test_encoder_stage_zero_in_zero_out():
    # initialised biases are zero, so a zero map stays zero
    net = build_network(NetworkConfig(), 0)
    out = net.encoder_stage(torch.zeros(1, 16, 64, 64), 0)
    assert torch.count_nonzero(out) == 0


def test_encoder_stage_index_out_of_range():
    net = build_network(NetworkConfig(), 0)
    with pytest.raises(ConfigError):
        net.encoder_stage(torch.zeros(1, 16, 8, 8), 4)


# ---------------------------------------------------------------- task query fuse


def test_task_query_zero_inputs_give_zero():
    fuse = TaskQueryFuse((32, 64, 128), 32)
    with torch.no_grad():
        for m in (fuse.conv7, fuse.conv5, fuse.conv3, fuse.out):
            m.bias.zero_()
    t = [torch.zeros(1, 32, 32, 32), torch.zeros(1, 64, 16, 16), torch.zeros(1, 128, 8, 8)]
    q = fuse(t)
    assert q.shape == (1, 32, 8, 8)
    assert torch.count_nonzero(q) == 0


def test_task_query_identity_kernels_reproduce_t3():
    fuse = TaskQueryFuse((4, 6, 5), 5)
    with torch.no_grad():
        fuse.conv7.weight.zero_()
        fuse.conv5.weight.zero_()
        fuse.conv3.weight.copy_(_identity_kernel(5, 3))
        fuse.out.weight.copy_(_identity_kernel(5, 3))
        for m in (fuse.conv7, fuse.conv5, fuse.conv3, fuse.out):
            m.bias.zero_()
    t3 = torch.randn(2, 5, 8, 8)
    q = fuse([torch.randn(2, 4, 32, 32), torch.randn(2, 6, 16, 16), t3])
    # a centred one-hot kernel is the identity under zero padding
    torch.testing.assert_close(q, t3, atol=1e-6, rtol=0)


def test_task_query_requires_three_stages():
    fuse = TaskQueryFuse((4, 4, 4), 4)
    with pytest.raises(ConfigError):
        fuse([torch.zeros(1, 4, 8, 8)] * 2)


def test_network_config_rejects_fewer_than_three_stages():
    with pytest.raises(ConfigError, match="stages"):
        NetworkConfig(stages=2).validate()


# ---------------------------------------------------------------- TSG


def test_tsg_shape():
    tsg = TaskSequenceGenerator(32, 16, heads=2, window=8, expansion=2)
    out = tsg(torch.randn(1, 32, 8, 8), torch.randn(1, 16, 8, 8))
    assert out.shape == (1, 32, 8, 8)


def test_tsg_resamples_task_map():
    tsg = TaskSequenceGenerator(8, 16, heads=2, window=8, expansion=2)
    out = tsg(torch.randn(1, 8, 32, 32), torch.randn(1, 16, 8, 8))
    assert out.shape == (1, 8, 32, 32)


def test_tsg_zero_value_and_ffn_is_pure_residual():
    tsg = _randomize(TaskSequenceGenerator(8, 16, heads=2, window=4, expansion=2))
    with torch.no_grad():
        tsg.to_v.weight.zero_()
        tsg.to_v.bias.zero_()
        tsg.proj.bias.zero_()
        tsg.ffn.fc2.weight.zero_()
        tsg.ffn.fc2.bias.zero_()
    x = torch.randn(1, 8, 8, 8)
    torch.testing.assert_close(tsg(x, torch.randn(1, 16, 8, 8)), x, atol=0, rtol=0)


def test_tsg_constant_features_give_constant_attention_output():
    tsg = _randomize(TaskSequenceGenerator(8, 16, heads=2, window=8, expansion=2))
    x = torch.ones(1, 8, 8, 8) * torch.randn(1, 8, 1, 1)
    out1 = tsg(x, torch.randn(1, 16, 8, 8))
    out2 = tsg(x, torch.randn(1, 16, 8, 8) * 5)
    flat = out1.reshape(8, -1)
    torch.testing.assert_close(flat, flat[:, :1].expand_as(flat), atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(out1, out2, atol=1e-5, rtol=1e-5)


def test_tsg_channel_mismatch():
    tsg = TaskSequenceGenerator(8, 16, heads=2, window=8, expansion=2)
    with pytest.raises(ShapeError):
        tsg(torch.randn(1, 8, 8, 8), torch.randn(1, 12, 8, 8))


# ---------------------------------------------------------------- spectral / FFC


@pytest.mark.parametrize("h,w", [(8, 8), (16, 16), (17, 16), (16, 17)])
def test_spectral_identity_round_trip(h, w):
    st_ = SpectralTransform(3)
    st_.set_identity()
    x = torch.randn(2, 3, h, w)
    out = st_(x)
    assert (out - x).abs().max() <= 1e-5 * x.abs().max()


def test_spectral_constant_input_doubles_with_dc_gain_two():
    c = 0.37
    x = torch.full((1, 2, 8, 8), c, dtype=torch.float64)
    # direct DFT of a constant: only the DC bin is non-zero, equal to c * sqrt(HW) (ortho)
    freq = np.fft.rfft2(x.numpy(), norm="ortho")
    assert abs(freq[0, 0, 0, 0] - c * 8) < 1e-12
    freq[..., 0, 0] = 0
    assert np.abs(freq).max() < 1e-12

    st_ = SpectralTransform(2).double()
    st_.set_identity(scale=2.0)
    torch.testing.assert_close(st_(x), torch.full_like(x, 2 * c), rtol=1e-5, atol=0)


def test_spectral_shape_and_non_finite():
    st_ = SpectralTransform(8)
    assert st_(torch.randn(1, 8, 16, 16)).shape == (1, 8, 16, 16)
    x = torch.randn(1, 8, 16, 16)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        st_(x)


@pytest.mark.parametrize("h,w", [(8, 8), (16, 16), (17, 16), (9, 7)])
def test_parseval_with_hermitian_weights(h, w):
    x = torch.randn(3, h, w, dtype=torch.float64)
    freq = torch.fft.rfft2(x, norm="ortho")
    weight = torch.full((freq.shape[-1],), 2.0, dtype=torch.float64)
    weight[0] = 1.0
    if w % 2 == 0:
        weight[-1] = 1.0
    spectral = float((freq.abs() ** 2 * weight).sum())
    spatial = float((x ** 2).sum())
    assert abs(spectral - spatial) <= 1e-4 * spatial


def test_ffc_shape():
    assert FFC(8, 0.5)(torch.randn(1, 8, 16, 16)).shape == (1, 8, 16, 16)


def test_ffc_ratio_zero_is_local_conv():
    ffc = _randomize(FFC(8, 0.0))
    x = torch.randn(1, 8, 16, 16)
    expected = F.conv2d(x, ffc.l2l.weight, ffc.l2l.bias, padding=1)
    torch.testing.assert_close(ffc(x), expected)


def test_ffc_identity_branches_give_identity():
    ffc = _randomize(FFC(8, 0.5))
    with torch.no_grad():
        ffc.l2l.weight.copy_(_identity_kernel(4, 3))
        ffc.l2l.bias.zero_()
        ffc.l2g.weight.zero_()
        ffc.g2l.weight.zero_()
    ffc.g2g.set_identity()
    x = torch.randn(2, 8, 16, 16)
    out = ffc(x)
    assert (out - x).abs().max() <= 1e-5 * x.abs().max()


def test_ffc_empty_branch_is_config_error():
    with pytest.raises(ConfigError):
        FFC(4, 0.1)


# ---------------------------------------------------------------- mixup


def test_mixup_theta_zero_is_exact_mean():
    a, b = torch.randn(3, 4, 5, 5), torch.randn(3, 4, 5, 5)
    assert torch.equal(adaptive_mixup(a, b, 0.0), 0.5 * a + 0.5 * b)


def test_mixup_saturates():
    a = torch.rand(2, 3, 4, 4, dtype=torch.float64) + 0.5
    b = torch.rand(2, 3, 4, 4, dtype=torch.float64) + 0.5
    torch.testing.assert_close(adaptive_mixup(a, b, 30.0), a, rtol=1e-9, atol=0)
    torch.testing.assert_close(adaptive_mixup(a, b, -30.0), b, rtol=1e-9, atol=0)


@settings(max_examples=60, deadline=None)
@given(theta=st.floats(-50, 50), seed=st.integers(0, 2**31 - 1))
def test_mixup_convex_and_equal_points(theta, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
    out = adaptive_mixup(a, b, theta)
    assert (out >= torch.minimum(a, b)).all() and (out <= torch.maximum(a, b)).all()
    assert torch.equal(adaptive_mixup(a, a, theta), a)


def test_mixup_shape_mismatch():
    with pytest.raises(ShapeError):
        adaptive_mixup(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5), 0.0)


# ---------------------------------------------------------------- padding


def test_reflect_pad_to_multiple_example():
    x = torch.rand(1, 3, 60, 60)
    padded, record = reflect_pad_to_multiple(x, 32)
    assert padded.shape == (1, 3, 64, 64)
    assert record == (60, 60)
    # reflection without edge repeat
    torch.testing.assert_close(padded[..., 60, :60], x[..., 58, :])
    assert torch.equal(crop_to_record(padded, record), x)


def test_reflect_pad_identity_case():
    x = torch.rand(1, 3, 64, 32)
    padded, record = reflect_pad_to_multiple(x, 32)
    assert padded is x and record == (64, 32)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), m=st.integers(1, 33),
       minimum=st.integers(0, 70))
def test_reflect_pad_round_trip(h, w, m, minimum):
    x = torch.rand(1, 2, h, w)
    padded, record = reflect_pad_to_multiple(x, m, minimum)
    assert padded.shape[-2] % m == 0 and padded.shape[-1] % m == 0
    assert padded.shape[-2] >= minimum and padded.shape[-1] >= minimum
    assert torch.equal(crop_to_record(padded, record), x)


# ---------------------------------------------------------------- network


def test_network_forward_shape_and_range():
    cfg = NetworkConfig()
    store = init_parameters(cfg, seed=3)
    x = torch.rand(1, 3, 64, 64)
    out = network_forward(x, store, cfg)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_network_forward_is_deterministic():
    cfg = NetworkConfig()
    x = torch.rand(1, 3, 64, 64)
    a = network_forward(x, init_parameters(cfg, 11), cfg)
    b = network_forward(x, init_parameters(cfg, 11), cfg)
    assert torch.equal(a, b)


def test_network_rejects_unpadded_sizes():
    net = build_network(NetworkConfig(), 0).eval()
    with pytest.raises(ShapeError, match="pad"):
        net(torch.rand(1, 3, 60, 64))


@pytest.mark.parametrize("h,w", [(8, 8), (13, 21), (60, 60), (33, 40)])
def test_restore_closes_arbitrary_sizes(h, w):
    net = build_network(NetworkConfig(stages=3, base_channels=8, query_len=8), 0)
    out = restore(net, torch.rand(1, 3, h, w))
    assert out.shape == (1, 3, h, w)


def test_bottleneck_only_ffc_variant_runs():
    cfg = NetworkConfig(stages=3, base_channels=8, query_len=8, ffc_bottleneck_only=True)
    net = build_network(cfg, 0)
    assert len(net.ffcs) == 1
    assert net(torch.rand(1, 3, 32, 32)).shape == (1, 3, 32, 32)


def test_stage_outputs_pyramid():
    net = build_network(NetworkConfig(), 0)
    _, skips, t_list = net.encode(torch.rand(1, 3, 64, 64))
    assert [t.shape[-1] for t in t_list] == [32, 16, 8, 4]
    assert [t.shape[1] for t in t_list] == [32, 64, 128, 256]
    assert [s.shape[-1] for s in skips] == [64, 32, 16, 8]


# ---------------------------------------------------------------- parameters


def test_init_parameters_deterministic_and_seed_sensitive():
    cfg = NetworkConfig(stages=3, base_channels=8, query_len=8)
    a, b, c = init_parameters(cfg, 5), init_parameters(cfg, 5), init_parameters(cfg, 6)
    assert a.equal(b)
    assert not a.equal(c)


def test_init_parameters_distributions():
    cfg = NetworkConfig()
    store = init_parameters(cfg, 0)
    net = store.load_into(RestorationNet(cfg))
    assert torch.equal(net.gate_values(), torch.full((cfg.mixup_count,), 0.5))
    w = net.stem.weight
    assert w.abs().max() <= 0.04 and torch.count_nonzero(net.stem.bias) == 0
    q = torch.cat([t.query.detach().flatten() for t in net.tipbs])
    assert 0.01 < q.std().item() < 0.03
    assert {n for n in store.trainable if n.endswith("query")} == {
        f"tipbs.{i}.query" for i in range(cfg.stages)}


def test_init_accepts_64_bit_seed():
    cfg = NetworkConfig(stages=3, base_channels=8, query_len=8)
    assert init_parameters(cfg, 2**64 - 1).equal(init_parameters(cfg, 2**64 - 1))


def test_invalid_config_lists_field():
    with pytest.raises(ConfigError, match="head_count"):
        init_parameters(NetworkConfig(base_channels=6, head_count=4), 0)


def test_parameter_store_rejects_mismatched_module():
    store = init_parameters(NetworkConfig(stages=3, base_channels=8, query_len=8), 0)
    with pytest.raises(ShapeError):
        store.load_into(RestorationNet(NetworkConfig(stages=3, base_channels=8, query_len=4)))


def test_parameter_store_names_unique():
    store = init_parameters(NetworkConfig(), 0)
    assert len(set(store.tensors)) == len(store)
    assert isinstance(store, ParameterStore)
