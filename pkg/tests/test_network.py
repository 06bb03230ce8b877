import numpy as np
import pytest

from ocdc.errors import NonFiniteLoss, ShapeMismatch
from ocdc.network import (
    DomainMode,
    ErrorInjection,
    Network,
    TrainConfig,
    backward,
    conv_forward,
    forward,
    image_error_std,
    infer_with_injection,
    loss,
    mini_automap,
    train,
)
from ocdc.optics import ideal_chip

MODES = ["cbd", "cid", "ncbd", "inon"]


def tiny_net(seed=0, channels=2, image=6):
    net = mini_automap(10, image_size=image, hidden=7, channels=channels, conv_kernel=3, deconv_kernel=3,
                       seed=seed)
    rng = np.random.default_rng(seed + 100)
    for layer in net.layers:
        layer.b = rng.normal(0, 0.1, layer.b.shape)
    return net


def tiny_batch(seed=0, n=3, image=6):
    rng = np.random.default_rng(seed + 200)
    return rng.normal(size=(n, 10)), rng.normal(size=(n, image, image))


def fd_relative_error(net, x, y, lam, mode, samples=12, h=1e-6):
    _, grads = backward(net, x, y, lam, mode)
    rng = np.random.default_rng(0)
    worst = 0.0
    for layer, (dW, db) in zip(net.layers, grads):
        for arr, g in ((layer.W, dW), (layer.b, db)):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            fd = np.empty(idx.size)
            for t, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                lp = _loss(net, x, y, lam, mode)
                flat[i] = old - h
                lm = _loss(net, x, y, lam, mode)
                flat[i] = old
                fd[t] = (lp - lm) / (2 * h)
            scale = max(np.linalg.norm(fd), 1e-8)
            worst = max(worst, np.linalg.norm(gflat[idx] - fd) / scale)
    return worst


def _loss(net, x, y, lam, mode):
    fr = forward(net, x, mode=mode)
    return loss(fr.output, y, fr.h, lam)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(2))
def test_backward_matches_finite_differences(mode, seed):
    net = tiny_net(seed)
    x, y = tiny_batch(seed)
    assert fd_relative_error(net, x, y, 1e-2, mode) < 1e-4


def test_zero_input_zero_output():
    net = mini_automap(10, image_size=6, hidden=7, channels=2, conv_kernel=3, deconv_kernel=3)
    assert np.all(forward(net, np.zeros(10)).output == 0)


def test_exact_matches_ideal_chip():
    net = tiny_net(1)
    x, _ = tiny_batch(1, n=2)
    exact = forward(net, x).output
    chip = forward(net, x, backend="chip", chip=ideal_chip()).output
    assert np.allclose(exact, chip, atol=1e-6)


def test_mode_soundness():
    net = tiny_net(2)
    x, _ = tiny_batch(2)
    for mode in ("cid", "inon"):
        fr = forward(net, x, mode=mode, keep_cache=True)
        for _, _, _, zm, out, _ in fr.cache:
            assert np.all(zm >= 0) and np.all(out >= 0)
    fr = forward(net, x, mode="ncbd", keep_cache=True)
    for i in (0, 1):
        assert np.all(fr.cache[i][4] >= 0)


def test_loss_examples():
    img = np.zeros((2, 2))
    h0 = np.zeros((2, 2, 1))
    assert loss(img, img, h0, 1e-4) == 0
    assert loss(img + 0.1, img, h0, 0.0) == pytest.approx(0.01)
    assert loss(img, img, np.ones((2, 2, 1)), 1e-4) == pytest.approx(1e-4)
    with pytest.raises(ShapeMismatch):
        loss(img, np.zeros((3, 3)), h0, 0.0)


def test_loss_decomposition():
    rng = np.random.default_rng(0)
    o, t, h = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4, 2))
    base = loss(o, t, h, 0.0)
    assert base == pytest.approx(np.mean(np.sum((o - t) ** 2, axis=(1, 2)) / 16))
    p1 = loss(o, t, h, 1.0) - base
    assert loss(o, t, h, 3.0) - base == pytest.approx(3 * p1)


def test_perfect_fit_zero_gradients():
    net = tiny_net(3)
    x, _ = tiny_batch(3)
    y = forward(net, x).output
    _, grads = backward(net, x, y, 0.0)
    assert all(np.allclose(g, 0.0) for pair in grads for g in pair)


def test_penalty_only_gradient_of_second_conv():
    net = tiny_net(4, channels=1)
    x, _ = tiny_batch(4, n=1)
    fr = forward(net, x, keep_cache=True)
    lam = 0.5
    _, grads = backward(net, x, fr.output, lam)
    a_in, _, z, _, out, _ = fr.cache[3]
    k = net.layers[3].spec.kernel_size
    xp = np.pad(a_in, ((0, 0), (1, 1), (1, 1), (0, 0)))
    n2 = out.shape[1] * out.shape[2]
    g = lam / n2 * np.sign(out) * (z > 0)
    expected = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            expected[a, b] = np.sum(g[0, :, :, 0] * xp[0, a:a + out.shape[1], b:b + out.shape[2], 0])
    assert np.allclose(grads[3][0][:, :, 0, 0], expected, atol=1e-12)


def test_injection_zero_is_exact_and_deterministic():
    net = tiny_net(5)
    x, _ = tiny_batch(5)
    exact = forward(net, x).output
    assert np.array_equal(forward(net, x, injection=ErrorInjection(0.0, seed=3)).output, exact)
    assert np.array_equal(infer_with_injection(net, x, 0.0), exact)
    a = infer_with_injection(net, x, 0.05, seed=9)
    b = infer_with_injection(net, x, 0.05, seed=9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, exact)


def test_injection_per_kind():
    inj = ErrorInjection({"fc": 0.1, "conv": 0.2})
    from ocdc.network import LayerKind
    assert inj.std_for(LayerKind.FC) == 0.1
    assert inj.std_for(LayerKind.DECONV) == 0.0


def test_conv_forward_shapes():
    z, xp = conv_forward(np.ones((2, 5, 5, 3)), np.ones((3, 3, 3, 4)), (1, 1, 1, 1))
    assert z.shape == (2, 5, 5, 4)
    assert z[0, 2, 2, 0] == 27


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(tiny_net(), np.zeros(11))


def test_training_decreases_and_is_deterministic():
    net_a, net_b = tiny_net(6), tiny_net(6)
    x, y = tiny_batch(6, n=40)
    cfg = TrainConfig(learning_rate=3e-3, decay_epoch=8, decayed_rate=3e-4, epochs=10, batch_size=8, seed=1)
    log_a = train(net_a, (x[:32], y[:32]), (x[32:], y[32:]), cfg)
    log_b = train(net_b, (x[:32], y[:32]), (x[32:], y[32:]), cfg)
    assert all(b < a for a, b in zip(log_a.train_loss, log_a.train_loss[1:]))
    assert log_a.val_loss == log_b.val_loss
    assert log_a.lr[7] == 3e-3 and log_a.lr[8] == 3e-4


def test_zero_learning_rate_constant_loss():
    net = tiny_net(7)
    x, y = tiny_batch(7, n=20)
    cfg = TrainConfig(learning_rate=0.0, decayed_rate=0.0, epochs=3, batch_size=5)
    log = train(net, (x[:15], y[:15]), (x[15:], y[15:]), cfg)
    assert len(set(log.val_loss)) == 1


def test_nonfinite_loss_aborts():
    net = tiny_net(8)
    x, y = tiny_batch(8, n=10)
    y[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train(net, (x, y), (x, y), TrainConfig(epochs=1, batch_size=10))


def test_checkpoint_round_trip(tmp_path):
    net = tiny_net(9)
    net.save(tmp_path / "n.ocdw")
    back = Network.load(tmp_path / "n.ocdw")
    x, _ = tiny_batch(9)
    assert np.array_equal(forward(back, x).output, forward(net, x).output)
    assert back.checksum() == net.checksum()


def test_identical_seed_identical_init():
    assert mini_automap(20, 8, 6, 2, seed=4).checksum() == mini_automap(20, 8, 6, 2, seed=4).checksum()


def test_image_error_std():
    assert image_error_std(np.ones((2, 3, 3)), np.zeros((2, 3, 3))).tolist() == [0.0, 0.0]
