import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quaddyn import models as mz
from quaddyn import quat
from quaddyn.autodiff import Tensor
from quaddyn.nn import TCNEncoder, receptive_field, tcn_schedule


def toy_config(arch, head, history=4, hidden=8, mask=(True, True, True)):
    enc = mz.EncoderConfig(kind=arch, layer_sizes=(hidden, hidden), kernel=2,
                           history=history, feature_mask=mask)
    return mz.ModelConfig(head=head, encoder=enc, decoder_sizes=(hidden,))


def random_inputs(rng, batch, history):
    states = np.empty((batch, history, 10))
    states[..., :6] = rng.standard_normal((batch, history, 6))
    states[..., 6:] = quat.random(rng, (batch, history))
    actions = rng.uniform(8, 16, (batch, history, 4))
    return states, actions


def randomize(model, rng, scale=0.3):
    for _, p in model.named_parameters():
        p.data = scale * rng.standard_normal(p.shape)
    return model


def test_full_size_defaults():
    assert mz.EncoderConfig("mlp").layer_sizes == (1024, 512, 512)
    assert mz.EncoderConfig("lstm").layer_sizes == (512, 512, 512)
    assert mz.EncoderConfig("gru").layer_sizes == (512, 512, 512)
    tcn = mz.EncoderConfig("tcn")
    assert tcn.layer_sizes == (512, 256, 256) and tcn.kernel == 3 and tcn.dilation_base == 2
    assert mz.ModelConfig().decoder_sizes == (512, 256, 256)


@pytest.mark.parametrize("head", mz.HEADS)
def test_zero_initialized_model_predicts_no_change(head):
    rng = np.random.default_rng(0)
    model = mz.PredictorModel(toy_config("mlp", head), seed=1)
    states, actions = random_inputs(rng, 5, 4)
    out = mz.predict_one_step(model, states, actions)
    assert np.array_equal(out[:, :6], states[:, -1, :6])
    if head == "decoupled":
        # identity increment reproduces q_t exactly
        assert np.array_equal(out[:, 6:], states[:, -1, 6:])
    else:
        np.testing.assert_allclose(out[:, 6:], states[:, -1, 6:], atol=1e-15)


@pytest.mark.parametrize("arch", mz.ARCHS)
@pytest.mark.parametrize("head", mz.HEADS)
def test_output_quaternion_is_unit(arch, head):
    rng = np.random.default_rng(2)
    model = randomize(mz.PredictorModel(toy_config(arch, head)), rng)
    states, actions = random_inputs(rng, 16, 4)
    out = mz.predict_one_step(model, states, actions)
    assert np.abs(np.linalg.norm(out[:, 6:], axis=1) - 1).max() < 1e-9
    # deterministic forward pass
    assert np.array_equal(out, mz.predict_one_step(model, states, actions))


def test_decoupled_networks_are_independent():
    rng = np.random.default_rng(3)
    model = randomize(mz.PredictorModel(toy_config("tcn", "decoupled")), rng).eval()
    states, actions = random_inputs(rng, 8, 4)
    base = mz.predict_one_step(model, states, actions)
    names_v = {id(p) for p in model.velocity.parameters()}
    assert names_v.isdisjoint(id(p) for p in model.attitude.parameters())
    for p in model.attitude.parameters():
        p.data = p.data + rng.standard_normal(p.shape)
    pert = mz.predict_one_step(model, states, actions)
    assert np.array_equal(pert[:, :6], base[:, :6])
    assert not np.array_equal(pert[:, 6:], base[:, 6:])
    for p in model.velocity.parameters():
        p.data = p.data + rng.standard_normal(p.shape)
    pert2 = mz.predict_one_step(model, states, actions)
    assert np.array_equal(pert2[:, 6:], pert[:, 6:])


def test_multi_head_shares_one_encoder():
    model = mz.PredictorModel(toy_config("gru", "multi_head"))
    assert hasattr(model, "encoder") and hasattr(model, "velocity_decoder")
    assert hasattr(model, "attitude_decoder")


@pytest.mark.parametrize("arch", mz.ARCHS)
def test_single_row_history_accepted(arch):
    rng = np.random.default_rng(4)
    model = mz.PredictorModel(toy_config(arch, "decoupled", history=1))
    states, actions = random_inputs(rng, 3, 1)
    assert mz.predict_one_step(model, states, actions).shape == (3, 10)


def test_input_errors():
    rng = np.random.default_rng(5)
    model = mz.PredictorModel(toy_config("mlp", "decoupled", history=4))
    states, actions = random_inputs(rng, 2, 5)
    with pytest.raises(mz.HistoryLengthError):
        mz.predict_one_step(model, states, actions)
    states, actions = random_inputs(rng, 2, 4)
    states[0, 1, 6:] *= 1 + 1e-5
    with pytest.raises(mz.NonUnitQuaternionError):
        mz.predict_one_step(model, states, actions)
    states[0, 1, 6:] /= 1 + 1e-5
    states[0, 1, 6:] *= 1 + 5e-7  # within tolerance
    mz.predict_one_step(model, states, actions)


def test_feature_mask_hides_inputs():
    rng = np.random.default_rng(6)
    cfg = toy_config("lstm", "full_state", mask=(True, False, True))
    model = randomize(mz.PredictorModel(cfg), rng)
    assert cfg.encoder.n_features == 11
    states, actions = random_inputs(rng, 4, 4)
    base = mz.predict_one_step(model, states, actions)
    # only the last row's omega feeds the residual; earlier rows are hidden
    states[:, :-1, 3:6] += 5.0
    assert np.array_equal(mz.predict_one_step(model, states, actions), base)


def _leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def _conv_direct(x, w, d):
    b, length, _ = x.shape
    k = w.shape[0]
    y = np.zeros((b, length, w.shape[2]))
    for t in range(length):
        for j in range(k):
            src = t - d * (k - 1 - j)
            if src >= 0:
                y[:, t] += x[:, src] @ w[j]
    return y


def _bn_eval(x, bn):
    return (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data


def test_tcn_matches_hand_unrolled_convolutions():
    rng = np.random.default_rng(7)
    enc = TCNEncoder(5, 4, (6, 6), kernel=2, dilation_base=2, rng=rng)
    assert enc.schedule == [(2, 1), (2, 2)]
    enc.eval()
    for block in enc.blocks:
        for bn in (block.bn1, block.bn2):
            bn.running_mean[:] = rng.standard_normal(6)
            bn.running_var[:] = rng.uniform(0.5, 2.0, 6)
            bn.gamma.data = rng.uniform(0.5, 1.5, 6)
            bn.beta.data = rng.standard_normal(6)
    x = rng.standard_normal((3, 4, 5))
    h = x
    for block in enc.blocks:
        y = _leaky(_bn_eval(_conv_direct(h, block.conv1.data, block.dilation), block.bn1))
        y = _leaky(_bn_eval(_conv_direct(y, block.conv2.data, block.dilation), block.bn2))
        res = h if block.downsample is None else h @ block.downsample.weight.data + block.downsample.bias.data
        h = _leaky(y + res)
    np.testing.assert_allclose(enc(Tensor(x)).data, h[:, -1], rtol=0, atol=1e-12)


def test_tcn_receptive_field_covers_history():
    sched = tcn_schedule(20, 3, 3, 2)
    assert sched == [(3, 1), (3, 2), (3, 4)]
    assert receptive_field(sched) >= 20
    with pytest.raises(ValueError, match="receptive field"):
        TCNEncoder(4, 40, (8, 8), kernel=2, dilation_base=2, rng=np.random.default_rng(0))


@given(seed=st.integers(0, 10_000), t=st.integers(0, 9))
@settings(max_examples=25, deadline=None)
def test_tcn_features_are_causal(seed, t):
    rng = np.random.default_rng(seed)
    enc = TCNEncoder(3, 10, (4, 4, 4), kernel=3, dilation_base=2, rng=rng).eval()
    x = rng.standard_normal((2, 10, 3))
    y0 = enc.features(Tensor(x)).data
    x[:, t] += 10 * rng.standard_normal((2, 3))
    y1 = enc.features(Tensor(x)).data
    assert np.array_equal(y0[:, :t], y1[:, :t])


def test_rollout_base_case_and_fixed_point():
    rng = np.random.default_rng(8)
    model = randomize(mz.PredictorModel(toy_config("gru", "multi_head")), rng).eval()
    states, actions = random_inputs(rng, 4, 4)
    future = rng.uniform(8, 16, (4, 5, 4))
    one = mz.rollout(model, states, actions, future, 1)
    assert np.array_equal(one[:, 0], mz.predict_one_step(model, states, actions))
    zero = mz.PredictorModel(toy_config("tcn", "decoupled")).eval()
    path = mz.rollout(zero, states, actions, future, 6)
    assert np.array_equal(path, np.repeat(states[:, -1:], 6, axis=1))


def linear_toy_model(a, shift=100.0):
    """Decoupled MLP model hand-set so that z_{k+1} = a * z_k exactly in
    exact arithmetic: a large bias keeps every LeakyReLU in its linear part."""
    enc = mz.EncoderConfig(kind="mlp", layer_sizes=(6, 6), history=1)
    model = mz.PredictorModel(mz.ModelConfig("decoupled", enc, (6,)))
    net = model.velocity
    first = net.encoder.mlp.layers[0]
    first.weight.data = np.zeros((14, 6))
    first.weight.data[:6, :6] = np.eye(6)
    first.bias.data = np.full(6, shift)
    for layer in net.encoder.mlp.layers[1:] + net.decoder.layers:
        layer.weight.data = np.eye(6)
        layer.bias.data = np.zeros(6)
    net.decoder.out.weight.data = (a - 1.0) * np.eye(6)
    net.decoder.out.bias.data = np.full(6, -(a - 1.0) * shift)
    return model.eval()


def test_rollout_of_linear_system_matches_closed_form():
    a, T = 0.97, 60
    model = linear_toy_model(a)
    z0 = np.array([0.5, -1.0, 2.0, 0.1, -0.3, 0.7])
    states = np.concatenate([z0, quat.IDENTITY])[None, None, :]
    actions = np.full((1, 1, 4), 12.0)
    future = np.full((1, T, 4), 12.0)
    path = mz.rollout(model, states, actions, future, T)
    expected = z0[None, :] * a ** np.arange(1, T + 1)[:, None]
    assert np.abs(path[0, :, :6] - expected).max() < 1e-10
    assert np.array_equal(path[0, :, 6:], np.tile(quat.IDENTITY, (T, 1)))


def test_parameter_counts():
    rng = np.random.default_rng(0)
    from quaddyn.nn import LSTMLayer, Linear

    assert mz.count_parameters(Linear(7, 5, rng)) == 7 * 5 + 5
    assert mz.count_parameters(LSTMLayer(14, 32, rng)) == 4 * (14 * 32 + 32 * 32 + 32)

    def mlp(sizes):
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        full = mz.PredictorModel(mz.model_config("mlp", 20, "full_state"))
        dec = mz.PredictorModel(mz.model_config("mlp", 20, "decoupled"))
    enc = mlp([20 * 14, 1024, 512, 512])
    assert mz.count_parameters(full) == enc + mlp([512, 512, 256, 256, 10])
    assert mz.count_parameters(dec) == 2 * enc + mlp([512, 512, 256, 256, 6]) + mlp(
        [512, 512, 256, 256, 4])


def test_parameter_bound_warns():
    with pytest.warns(UserWarning, match="real-time bound"):
        mz.PredictorModel(mz.model_config("lstm", 20, "full_state"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mz.PredictorModel(mz.model_config("tcn", 20, "full_state", preset="desk"))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    model = randomize(mz.PredictorModel(toy_config("tcn", "multi_head"), seed=3), rng)
    states, actions = random_inputs(rng, 6, 4)
    model.train()
    mz.predict_one_step(model, states, actions)  # moves the batch-norm running stats
    model.eval()
    mz.save_checkpoint(model, tmp_path / "ck")
    back = mz.load_checkpoint(tmp_path / "ck")
    assert back.config == model.config
    assert mz.params_hash(back) == mz.params_hash(model)
    assert np.array_equal(mz.predict_one_step(back, states, actions),
                          mz.predict_one_step(model, states, actions))
