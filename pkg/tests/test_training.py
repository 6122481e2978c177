import math

import mpmath
import numpy as np
import pytest

from wsdc import nn
from wsdc.channel import ChannelConfig
from wsdc.codebook import Codebook, quantize
from wsdc.data import gen_gmm
from wsdc.errors import ConfigError, ContractError
from wsdc.training import (TrainConfig, evaluate, forward_pass, grad_check, init_state, loss_and_grads,
                           straight_through, straight_through_grad, task_loss, train, train_step)


def small_cfg(**kw):
    base = dict(K=16, D=4, Q=2, enc_hidden=(16,), head_hidden=(16,), batch_size=4, epochs=1)
    base.update(kw)
    return TrainConfig(**base)


def small_data(n_per_class=4, seed=0):
    return gen_gmm(4, 6, 4.0, n_per_class, seed=seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(batch_size=0)
    with pytest.raises(ConfigError):
        small_cfg(alpha=1.5)
    with pytest.raises(ConfigError):
        small_cfg(K=32)  # no square QAM for 32
    small_cfg(K=32, channel_in_loop=False)


def test_infinite_snr_decodes_to_quantized():
    ds = small_data()
    st = init_state(small_cfg(), ds.dim, ds.n_classes)
    fw = forward_pass(st, ds.inputs, ChannelConfig(math.inf))
    np.testing.assert_array_equal(fw.z_d, fw.z_c)
    np.testing.assert_array_equal(fw.rx_indices, fw.indices)


def test_channel_off_keeps_indices():
    ds = small_data()
    cfg = small_cfg(channel_in_loop=False, snr_train_db=-10.0)
    st = init_state(cfg, ds.dim, ds.n_classes)
    _, _, info = loss_and_grads(st, ds.inputs, ds.labels)
    np.testing.assert_array_equal(info["fw"].rx_indices, info["fw"].indices)


def test_noisy_channel_uses_demodulated_indices():
    ds = small_data(50)
    cfg = small_cfg(snr_train_db=0.0)
    st = init_state(cfg, ds.dim, ds.n_classes)
    _, _, info = loss_and_grads(st, ds.inputs, ds.labels)
    fw = info["fw"]
    assert np.any(fw.rx_indices != fw.indices)
    np.testing.assert_array_equal(fw.z_d, st.codebook.codewords[fw.rx_indices])


def test_forward_is_deterministic():
    ds = small_data()
    cfg = small_cfg(K=16, Q=2, batch_size=4)
    outs = []
    for _ in range(2):
        st = init_state(cfg, ds.dim, ds.n_classes)
        _, _, info = loss_and_grads(st, ds.inputs[:4], ds.labels[:4])
        outs.append(info["fw"])
    for name in ("z_e", "indices", "z_c", "rx_indices", "z_d", "logits"):
        assert getattr(outs[0], name).tobytes() == getattr(outs[1], name).tobytes()


def test_straight_through_forward_and_backward():
    rng = np.random.default_rng(0)
    z_e, z_d = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
    np.testing.assert_array_equal(straight_through(z_e, z_d), z_d)
    d_e, d_d = straight_through_grad(np.ones_like(z_e))
    np.testing.assert_array_equal(d_e, 1.0)
    np.testing.assert_array_equal(d_d, 0.0)
    with pytest.raises(ContractError):
        straight_through(z_e, z_d[:, :1])


def test_task_loss_uniform_logits():
    loss, _ = task_loss(np.zeros((5, 10)), np.arange(5))
    assert loss == pytest.approx(math.log(10), rel=1e-14)


def test_task_loss_confident_logits():
    y = np.array([0, 2, 1])
    loss, grad = task_loss(100.0 * np.eye(3)[y], y)
    assert loss < 1e-40
    np.testing.assert_allclose(grad, 0.0, atol=1e-40)


def test_task_loss_extended_precision():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 3)) * 3
    y = rng.integers(0, 3, size=6)
    mpmath.mp.dps = 40
    ref = mpmath.mpf(0)
    for row, c in zip(logits, y):
        z = [mpmath.mpf(float(v)) for v in row]
        ref += mpmath.log(sum(mpmath.e ** v for v in z)) - z[c]
    ref /= 6
    loss, grad = task_loss(logits, y)
    assert loss == pytest.approx(float(ref), rel=1e-14)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(grad, (p - np.eye(3)[y]) / 6, atol=1e-15)


def test_task_loss_rejects_bad_labels():
    with pytest.raises(ContractError):
        task_loss(np.zeros((2, 3)), np.array([0, 3]))


def test_lambda_zero_descent_on_fixed_batch():
    ds = small_data(8)
    cfg = small_cfg(lam=0.0, lr=1e-3, channel_in_loop=False)
    st = init_state(cfg, ds.dim, ds.n_classes)
    losses = []
    for _ in range(20):
        _, m = train_step(st, ds.inputs, ds.labels)
        losses.append(m["task_loss"])
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_zero_learning_rate_leaves_parameters():
    ds = small_data()
    st = init_state(small_cfg(lr=0.0), ds.dim, ds.n_classes)
    before = {k: v.copy() for k, v in st.params.items()}
    for _ in range(3):
        train_step(st, ds.inputs, ds.labels)
    assert st.step == 3
    for k, v in before.items():
        assert st.params[k].tobytes() == v.tobytes()


def test_seeded_steps_are_bit_identical():
    ds = small_data()
    runs = []
    for _ in range(2):
        st = init_state(small_cfg(), ds.dim, ds.n_classes)
        ms = []
        for _ in range(5):
            _, m = train_step(st, ds.inputs[:4], ds.labels[:4])
            ms.append((m["loss"], m["ws_value"], m["distortion"]))
        runs.append((ms, {k: v.tobytes() for k, v in st.params.items()}))
    assert runs[0] == runs[1]


def test_one_epoch_step_count_and_history_length():
    ds = gen_gmm(2, 4, 4.0, 5, seed=0)
    counted = []
    cfg = small_cfg(batch_size=5, epochs=3)
    st, hist = train(cfg, ds, callback=lambda s, r: counted.append(s.step))
    assert counted == [2, 4, 6]
    assert len(hist) == 3 and [r.epoch for r in hist] == [0, 1, 2]


def test_all_parameters_finite_and_shapes_fixed():
    ds = small_data(10)
    cfg = small_cfg(epochs=2, lam=1.0)
    st0 = init_state(cfg, ds.dim, ds.n_classes)
    shapes = {k: v.shape for k, v in st0.params.items()}
    st, _ = train(cfg, ds)
    for k, v in st.params.items():
        assert v.shape == shapes[k]
        assert np.all(np.isfinite(v))


def test_gmm_reaches_high_train_accuracy_noiseless():
    ds = gen_gmm(10, 32, 6.0, 200, seed=0)
    cfg = TrainConfig(K=16, D=8, Q=4, epochs=50, channel_in_loop=False, seed=0)
    _, hist = train(cfg, ds)
    assert max(r.accuracy for r in hist) >= 0.95


def test_noiseless_lambda_zero_matches_plain_vq_classifier():
    ds = small_data(8)
    a = small_cfg(lam=0.0, epochs=3, channel_in_loop=True, snr_train_db=math.inf)
    b = small_cfg(lam=0.0, epochs=3, channel_in_loop=False)
    sa, ha = train(a, ds)
    sb, hb = train(b, ds)
    assert [r.accuracy for r in ha] == [r.accuracy for r in hb]
    for k in sa.params:
        assert sa.params[k].tobytes() == sb.params[k].tobytes()


def test_single_step_matches_hand_written_vq_classifier():
    ds = small_data(2)
    cfg = small_cfg(lam=0.0, channel_in_loop=False, lr=1e-2)
    st = init_state(cfg, ds.dim, ds.n_classes)
    ref = {k: v.copy() for k, v in st.params.items()}
    x, y = ds.inputs, ds.labels
    train_step(st, x, y)

    z, enc_cache = nn.mlp_forward(ref, "enc", x)
    _, z_c, _ = quantize(Codebook(ref["codebook"], ref["logits"], cfg.Q), z.reshape(len(x), cfg.Q, cfg.D))
    logits, head_cache = nn.mlp_forward(ref, "head", z_c.reshape(len(x), -1))
    _, dlogits = nn.softmax_xent(logits, y)
    grads, dz = nn.mlp_backward(ref, "head", head_cache, dlogits)
    enc_grads, _ = nn.mlp_backward(ref, "enc", enc_cache, dz)
    grads.update(enc_grads)
    opt = nn.Adam(lr=1e-2)
    opt.step(ref, grads)
    for k in grads:
        np.testing.assert_allclose(st.params[k], ref[k], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(st.params["codebook"], ref["codebook"])


def test_grad_check_linear_encoder_task_only():
    ds = small_data()
    cfg = small_cfg(lam=0.0, enc_hidden=())
    st = init_state(cfg, ds.dim, ds.n_classes)
    assert grad_check(st, ds.inputs, ds.labels) < 1e-6


@pytest.mark.parametrize("per_q", [False, True])
def test_grad_check_full_objective(per_q):
    ds = small_data()
    cfg = small_cfg(K=4, D=2, lam=1.0, per_q=per_q, commitment=0.25)
    st = init_state(cfg, ds.dim, ds.n_classes)
    assert grad_check(st, ds.inputs, ds.labels) < 1e-3


def test_grad_check_constant_blocks_are_exact():
    # with lambda = 0 the loss does not depend on codewords or logits at all
    ds = small_data()
    st = init_state(small_cfg(lam=0.0), ds.dim, ds.n_classes)
    assert grad_check(st, ds.inputs, ds.labels, keys=["codebook", "logits"]) == 0.0


def test_evaluate_infinite_snr_has_no_index_errors():
    ds = small_data(10)
    cfg = small_cfg(epochs=1)
    st, _ = train(cfg, ds)
    rec = evaluate(st, ds, math.inf)
    assert rec.index_error_rate == 0.0 and rec.delta_mi_bits == 0.0
    assert 0.0 <= rec.accuracy <= 1.0 and rec.perplexity >= 1.0
