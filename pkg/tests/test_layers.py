import numpy as np
import pytest

from phecg import autodiff as ad
from phecg import ndtensor as nd
from phecg.autodiff import Variable
from phecg.errors import ConfigError, ShapeError
from phecg.layers import (
    PHC,
    PHM,
    BatchNorm1d,
    Context,
    Conv1d,
    Dropout,
    Linear,
    SEBlock,
    init_he,
    reduction_ratio,
)


def kron_sum_oracle(a, b):
    n = a.shape[0]
    out = None
    for i in range(n):
        term = nd.kron(a[i], b[i])
        out = term if out is None else out + term
    return out


def make(layer, seed=0, dtype=np.float64):
    layer.astype(dtype)
    init_he(layer, np.random.default_rng(seed))
    return layer


# --- build_weight ------------------------------------------------------------


def test_build_weight_shape_example():
    # n=2, 8 input channels, 6 output channels, kernel 1
    layer = make(PHC(n=2, d_in=8, d_out=6, kernel=1))
    h = layer.build_weight()
    assert h.value.shape == (6, 8, 1)
    assert layer.algebra.value.shape == (2, 2, 2)
    assert layer.blocks.value.shape == (2, 3, 4, 1)


def test_build_weight_n1_is_scaled_dense():
    layer = make(PHM(n=1, d_in=5, d_out=4))
    h = layer.build_weight()
    np.testing.assert_allclose(
        h.value, layer.algebra.value[0, 0, 0] * layer.blocks.value[0], atol=1e-12
    )


def test_build_weight_matches_elementwise_oracle():
    layer = make(PHM(n=3, d_in=9, d_out=6), seed=3)
    h = layer.build_weight()
    oracle = kron_sum_oracle(layer.algebra.value, layer.blocks.value)
    np.testing.assert_array_equal(h.value, oracle)


def test_build_weight_random_configurations():
    rng = np.random.default_rng(17)
    for _ in range(25):
        n = int(rng.integers(1, 5))
        p, q = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        layer = make(PHC(n=n, d_in=n * q, d_out=n * p, kernel=k), seed=int(rng.integers(1e6)))
        oracle = kron_sum_oracle(layer.algebra.value, layer.blocks.value)
        np.testing.assert_array_equal(layer.build_weight().value, oracle)


def test_divisibility_enforced():
    with pytest.raises(ConfigError):
        PHM(n=3, d_in=4, d_out=6)
    with pytest.raises(ConfigError):
        PHC(n=4, d_in=8, d_out=6, kernel=3)


# --- phm_forward -------------------------------------------------------------


def test_phm_n1_reproduces_dense_layer():
    rng = np.random.default_rng(5)
    phm = make(PHM(n=1, d_in=6, d_out=4), seed=5)
    phm.algebra.value[0, 0, 0] = 1.0
    fc = Linear(6, 4, dtype=np.float64)
    fc.weight.value[...] = phm.blocks.value[0]
    fc.bias.value[...] = rng.normal(size=4)
    phm.bias.value[...] = fc.bias.value
    x = Variable(rng.normal(size=(6, 7)))
    np.testing.assert_allclose(phm(x).value, fc(x).value, atol=1e-12)


def test_phm_zero_bias_zero_input():
    phm = make(PHM(n=2, d_in=4, d_out=6))
    y = phm(Variable(np.zeros((4, 3))))
    np.testing.assert_array_equal(y.value, np.zeros((6, 3)))


def test_phm_matches_materialised_weight_oracle():
    rng = np.random.default_rng(6)
    phm = make(PHM(n=2, d_in=4, d_out=4), seed=6)
    phm.bias.value[...] = rng.normal(size=4)
    x = rng.normal(size=(4, 5))
    h = kron_sum_oracle(phm.algebra.value, phm.blocks.value)
    expected = h @ x + phm.bias.value[:, None]
    np.testing.assert_allclose(phm(Variable(x)).value, expected, atol=1e-12)


def test_phm_channel_mismatch():
    phm = make(PHM(n=2, d_in=4, d_out=4))
    with pytest.raises(ShapeError):
        phm(Variable(np.zeros((5, 3))))


# --- phc_forward -------------------------------------------------------------


def test_phc_n1_reproduces_conv():
    rng = np.random.default_rng(7)
    phc = make(PHC(n=1, d_in=3, d_out=4, kernel=5, padding=2), seed=7)
    conv = Conv1d(3, 4, 5, padding=2, dtype=np.float64)
    conv.weight.value[...] = phc.algebra.value[0, 0, 0] * phc.blocks.value[0]
    conv.bias.value[...] = phc.bias.value
    x = Variable(rng.normal(size=(3, 11)))
    np.testing.assert_allclose(phc(x).value, conv(x).value, atol=1e-12)


def test_phc_k1_equals_phm_per_time_step():
    rng = np.random.default_rng(8)
    phc = make(PHC(n=2, d_in=4, d_out=6, kernel=1), seed=8)
    phm = PHM(n=2, d_in=4, d_out=6, dtype=np.float64)
    phm.algebra.value[...] = phc.algebra.value
    phm.blocks.value[...] = phc.blocks.value[..., 0]
    phm.bias.value[...] = phc.bias.value
    x = rng.normal(size=(4, 9))
    np.testing.assert_allclose(phc(Variable(x)).value, phm(Variable(x)).value, atol=1e-6)


def test_phc_matches_materialised_conv_oracle():
    rng = np.random.default_rng(9)
    phc = make(PHC(n=2, d_in=4, d_out=6, kernel=3, padding=1), seed=9)
    phc.bias.value[...] = rng.normal(size=6)
    x = rng.normal(size=(4, 10))
    h = kron_sum_oracle(phc.algebra.value, phc.blocks.value)
    expected = nd.conv1d(x, h, bias=phc.bias.value, padding=1)
    np.testing.assert_allclose(phc(Variable(x)).value, expected, atol=1e-12)


def test_phc_batched_forward():
    rng = np.random.default_rng(10)
    phc = make(PHC(n=2, d_in=4, d_out=4, kernel=3, padding=1), seed=10)
    xb = rng.normal(size=(3, 4, 8))
    out = phc(Variable(xb))
    for i in range(3):
        np.testing.assert_allclose(out.value[i], phc(Variable(xb[i])).value, atol=1e-12)


# --- SE block ----------------------------------------------------------------


def test_se_zero_weights_halves_input():
    se = SEBlock(16)
    se.astype(np.float64)  # weights stay zero
    x = np.random.default_rng(11).normal(size=(2, 16, 8))
    out = se(Variable(x))
    np.testing.assert_allclose(out.value, x / 2, atol=1e-12)


def test_se_squeeze_of_constant_channels():
    se = make(SEBlock(16), seed=12)
    x = np.tile(np.arange(16.0)[None, :, None], (1, 1, 5))
    squeezed = ad.global_avgpool(Variable(x))
    np.testing.assert_allclose(squeezed.value[0], np.arange(16.0), atol=1e-12)


def test_se_matches_step_by_step_oracle():
    rng = np.random.default_rng(13)
    se = make(SEBlock(16), seed=13)
    x = rng.normal(size=(1, 16, 8))
    z = x.mean(axis=2)
    h = np.maximum(se.reduce.weight.value @ z[0] + se.reduce.bias.value, 0)
    s = nd.sigmoid(se.expand.weight.value @ h + se.expand.bias.value)
    expected = x * s[None, :, None]
    np.testing.assert_allclose(se(Variable(x)).value, expected, atol=1e-12)


def test_se_gate_never_amplifies():
    rng = np.random.default_rng(14)
    for seed in range(5):
        se = make(SEBlock(16, n=2), seed=seed)
        x = rng.normal(size=(2, 16, 6))
        out = se(Variable(x))
        assert (np.abs(out.value) <= np.abs(x) + 1e-12).all()


def test_se_rejects_indivisible_widths():
    with pytest.raises(ConfigError):
        SEBlock(18, n=12)  # hidden 18//8=2 not divisible by 12
    with pytest.raises(ConfigError):
        SEBlock(4)  # hidden 0


def test_se_ph_uses_phm_layers():
    se = SEBlock(16, n=2)
    assert isinstance(se.reduce, PHM) and isinstance(se.expand, PHM)
    assert isinstance(SEBlock(16, n=1).reduce, Linear)


# --- parameter counting ------------------------------------------------------


def test_param_count_dense_fc():
    assert Linear(64, 64).param_count() == 4160


def test_param_count_phm_and_ratio():
    phm = PHM(n=4, d_in=64, d_out=64)
    assert phm.param_count() == 64 + 1024 + 64 == 1152
    assert abs(reduction_ratio(phm, Linear(64, 64)) - 0.277) < 0.001


def test_param_count_phc_and_ratio():
    phc = PHC(n=2, d_in=16, d_out=32, kernel=11)
    conv = Conv1d(16, 32, 11)
    assert phc.param_count() == 8 + 16 * 32 * 11 // 2 + 32 == 2856
    assert conv.param_count() == 5664
    assert abs(reduction_ratio(phc, conv) - 0.504) < 0.001


def test_param_count_closed_forms_random():
    rng = np.random.default_rng(15)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        d_in = n * int(rng.integers(1, 9))
        d_out = n * int(rng.integers(1, 9))
        k = int(rng.integers(1, 12))
        assert PHM(n, d_in, d_out).param_count() == n**3 + d_out * d_in // n + d_out
        assert (
            PHC(n, d_in, d_out, k).param_count()
            == n**3 + d_out * d_in * k // n + d_out
        )


def test_ratio_bound_in_mild_regime():
    # for d_out*d_in >= n^4 the PHM/FC ratio sits in (1/n, 1/n + 2n^3/(d_out*d_in)]
    for n, d in [(2, 16), (2, 64), (4, 64), (4, 128), (3, 81)]:
        assert d * d >= n**4
        ratio = reduction_ratio(PHM(n, d, d), Linear(d, d))
        assert 1 / n < ratio <= 1 / n + 2 * n**3 / (d * d)


# --- initialisation ----------------------------------------------------------


def test_he_init_std():
    fc = Linear(200, 500)
    init_he(fc, np.random.default_rng(16))
    std = fc.weight.value.std()
    assert abs(std - np.sqrt(2 / 200)) < 0.05 * np.sqrt(2 / 200)


def test_he_init_bias_zero_and_algebra_range():
    layer = PHC(n=2, d_in=8, d_out=8, kernel=3)
    init_he(layer, np.random.default_rng(17))
    np.testing.assert_array_equal(layer.bias.value, np.zeros(8))
    assert (layer.algebra.value >= -1).all() and (layer.algebra.value <= 1).all()
    # PH blocks use the full-layer fan-in d_in * k
    std = PHC(n=2, d_in=128, d_out=128, kernel=9)
    init_he(std, np.random.default_rng(18))
    expected = np.sqrt(2 / (128 * 9))
    assert abs(std.blocks.value.std() - expected) < 0.05 * expected


def test_init_deterministic_per_seed():
    a = make(PHC(n=2, d_in=8, d_out=8, kernel=3), seed=99)
    b = make(PHC(n=2, d_in=8, d_out=8, kernel=3), seed=99)
    np.testing.assert_array_equal(a.blocks.value, b.blocks.value)
    np.testing.assert_array_equal(a.algebra.value, b.algebra.value)


# --- gradients through layers ------------------------------------------------


def test_all_ph_parameters_receive_gradients():
    rng = np.random.default_rng(19)
    for layer in [
        make(PHM(n=2, d_in=4, d_out=6), seed=20),
        make(PHC(n=2, d_in=4, d_out=6, kernel=3, padding=1), seed=21),
    ]:
        x = Variable(rng.normal(size=(1, 4, 5)) if isinstance(layer, PHC) else rng.normal(size=(4, 5)))
        loss = ad.vsum(ad.tanh(layer(x)))
        ad.backward(loss)
        for name, p in layer.named_parameters():
            assert p.grad is not None, name
            assert np.abs(p.grad).max() > 0, f"dead parameter {name}"


def test_grad_check_phm_and_se_and_bn():
    rng = np.random.default_rng(22)
    phm = make(PHM(n=2, d_in=4, d_out=4), seed=23)
    x = Variable(rng.normal(size=(4, 3)), requires_grad=False)
    assert (
        ad.grad_check(lambda *_: ad.vsum(ad.tanh(phm(x))), [phm.algebra, phm.blocks, phm.bias])
        < 1e-4
    )
    se = make(SEBlock(8, n=2), seed=24)
    xs = Variable(rng.normal(size=(2, 8, 4)), requires_grad=False)
    params = [p for _, p in se.named_parameters()]
    assert ad.grad_check(lambda *_: ad.vsum(se(xs)), params) < 1e-4
    bn = BatchNorm1d(3).astype(np.float64)
    xb = Variable(rng.normal(size=(2, 3, 4)), requires_grad=True)
    ctx = Context(training=True)

    def f(v):
        bn.running_mean[...] = 0
        bn.running_var[...] = 1
        return ad.vsum(ad.tanh(bn(v, ctx)))

    assert ad.grad_check(f, [xb]) < 1e-4


# --- dropout layer -----------------------------------------------------------


def test_dropout_layer_modes():
    x = Variable(np.ones((4, 4)))
    drop = Dropout(0.5)
    assert drop(x, Context(training=False)) is x
    out = drop(x, Context(training=True, rng=np.random.default_rng(1)))
    kept = out.value != 0
    np.testing.assert_allclose(out.value[kept], 2.0)


def test_dropout_expectation_preserved():
    rng = np.random.default_rng(2)
    x = Variable(np.full(100_000, 3.0))
    out = ad.dropout(x, 0.2, training=True, rng=rng)
    assert abs(out.value.mean() - 3.0) < 0.02 * 3.0


def test_dropout_invalid_p():
    with pytest.raises(ConfigError):
        Dropout(1.0)
