import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hjsampler.models import SdeModel, TimeGrid, simulate_forward
from hjsampler.priors import GaussianComponent
from hjsampler.score_net import (Adam, MlpScoreNetwork, TrainConfig, TrainingDiverged, divergence,
                                 fit_normalization, forward, load_checkpoint, loss_implicit,
                                 loss_sliced, save_checkpoint, score_control, train,
                                 write_loss_history)


def minus_identity(n):
    W = np.hstack([-np.eye(n), np.zeros((n, 1))])
    return MlpScoreNetwork([n + 1, n], [W], [np.zeros(n)])


def zero_net(n, hidden=(5,)):
    widths = [n + 1, *hidden, n]
    Ws = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
    return MlpScoreNetwork(widths, Ws, [np.zeros(o) for o in widths[1:]])


def random_net(n=2, hidden=(8, 8), seed=3):
    net = MlpScoreNetwork([n + 1, *hidden, n], seed=seed)
    # nonzero normalisation so the chain rule through it is exercised
    net.input_shift = np.linspace(0.1, 0.3, n + 1)
    net.input_scale = np.linspace(0.8, 1.4, n + 1)
    net.output_scale = np.linspace(0.7, 1.3, n)
    return net


def batch(n=2, N=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 1.2, (N, n)), rng.uniform(0.05, 1.0, N)


def test_zero_and_identity_nets():
    x, t = batch(3, 10)
    np.testing.assert_array_equal(forward(zero_net(3), x, t), 0.0)
    np.testing.assert_array_equal(forward(minus_identity(3), x, t), -x)
    np.testing.assert_array_equal(divergence(zero_net(3), x, t), 0.0)
    np.testing.assert_array_equal(divergence(minus_identity(4), *batch(4, 7)), -4.0)


def test_divergence_matches_central_differences():
    net = random_net()
    x, t = batch()
    h = 1e-4
    fd = np.zeros(len(x))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd += (forward(net, x + e, t)[:, i] - forward(net, x - e, t)[:, i]) / (2 * h)
    np.testing.assert_allclose(divergence(net, x, t), fd, rtol=1e-5)


def test_loss_examples():
    net = minus_identity(1)
    loss, grads = loss_implicit(net, [[0.0]], [0.5])
    assert loss == -1.0
    assert loss_implicit(net, [[2.0]], [0.5])[0] == 1.0
    loss, grads = loss_implicit(zero_net(2), *batch(2, 5))
    assert loss == 0.0
    # at s = 0 the squared-norm term has no gradient: output bias only feeds it
    np.testing.assert_array_equal(grads[-1], 0.0)


def test_sliced_equals_implicit_in_one_dimension():
    net = random_net(1, (6, 6))
    x, t = batch(1, 20)
    li, gi = loss_implicit(net, x, t)
    ls, gs = loss_sliced(net, x, t, directions=np.ones((1, 1)))
    assert li == ls
    for a, b in zip(gi, gs):
        np.testing.assert_array_equal(a, b)


def test_sliced_term_for_linear_field():
    net = minus_identity(3)
    x, t = batch(3, 4)
    v = np.array([[1.0, -2.0, 0.5]])
    loss, _ = loss_sliced(net, x, t, directions=v)
    expected = np.mean(0.5 * np.sum(x * x, axis=1)) - np.sum(v * v)
    assert loss == pytest.approx(expected, rel=1e-14)


def test_sliced_divergence_is_unbiased():
    net = random_net()
    x, t = batch(2, 1)
    V = np.random.default_rng(11).standard_normal((100_000, 1, 2))
    u = net._inputs(x, t)
    _, out_dot, _ = net._run(u, V)
    est = np.einsum("kno,kno->k", V, out_dot)
    exact = divergence(net, x, t)[0]
    se = est.std() / np.sqrt(est.size)
    assert abs(est.mean() - exact) <= 3 * se


def _fd_gradients(net, loss_fn, h=1e-5):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn(net)[0]
            p[idx] = old - h
            down = loss_fn(net)[0]
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("kind", ["implicit", "sliced"])
def test_gradients_match_finite_differences(kind):
    net = random_net(2, (8, 8))
    x, t = batch(2, 16)
    V = np.random.default_rng(5).standard_normal((3, 16, 2))
    if kind == "implicit":
        fn = lambda m: loss_implicit(m, x, t)
    else:
        fn = lambda m: loss_sliced(m, x, t, directions=V)
    _, grads = fn(net)
    for g, fd in zip(grads, _fd_gradients(net, fn)):
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_non_finite_loss_is_an_error():
    net = minus_identity(1)
    with pytest.raises(FloatingPointError):
        loss_implicit(net, [[np.inf]], [0.5])


def test_score_control_examples():
    net = minus_identity(1)
    ctl = score_control(net, 2.0)
    for tau in (0.0, 0.3, 0.9):
        assert ctl([[1.0]], tau)[0, 0] == -2.0
    np.testing.assert_array_equal(score_control(zero_net(2), 1.5)(*batch(2, 3)), 0.0)


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, 0.1)
    opt.step(p, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [0.9, -1.9], rtol=1e-6)


def _ensemble(N=2000, seed=0):
    model = SdeModel.brownian(1, 1.0, 1.0)
    prior = GaussianComponent([0.0], [[1.0]]).sample(N, seed)
    return simulate_forward(model, prior, TimeGrid.covering(1.0, 0.05), seed + 1)


def test_zero_epochs_leaves_network_unchanged():
    net = random_net(1, (4,))
    before = [p.copy() for p in net.parameters()]
    out, hist = train(net, _ensemble(), TrainConfig(batch_size=50, epochs=0))
    assert hist == []
    for a, b in zip(before, out.parameters()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic():
    ens = _ensemble()
    cfg = TrainConfig(batch_size=64, epochs=30, learning_rate=1e-2, seed=4)
    a, ha = train(fit_normalization(MlpScoreNetwork([2, 6, 1], seed=1), ens), ens, cfg)
    b, hb = train(fit_normalization(MlpScoreNetwork([2, 6, 1], seed=1), ens), ens, cfg)
    assert ha == hb
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)
    assert ha[-1] < ha[0]


def test_divergent_training_keeps_history():
    ens = _ensemble()
    net = MlpScoreNetwork([2, 4, 1], seed=0)
    net.output_scale = np.array([1e6])
    with pytest.raises(TrainingDiverged) as info:
        train(net, ens, TrainConfig(batch_size=20, epochs=5, learning_rate=10.0))
    assert isinstance(info.value.history, list)


def test_checkpoint_round_trip(tmp_path):
    net = random_net()
    net.horizon = 2.5
    path = tmp_path / "net.json"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    x, t = batch()
    np.testing.assert_array_equal(forward(back, x, t), forward(net, x, t))
    assert back.horizon == 2.5 and back.widths == net.widths
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")


def test_loss_history_csv(tmp_path):
    write_loss_history([0.5, -0.25], tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,loss\n0,0.5\n1,-0.25\n"


def test_invalid_configurations():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        MlpScoreNetwork([3, 5, 1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_implicit_divergence_equals_trace_of_jacobian(seed, n):
    net = MlpScoreNetwork([n + 1, 5, n], seed=seed)
    x, t = batch(n, 3, seed)
    h = 1e-6
    fd = sum((forward(net, x + h * e, t)[:, i] - forward(net, x - h * e, t)[:, i]) / (2 * h)
             for i, e in enumerate(np.eye(n)))
    np.testing.assert_allclose(divergence(net, x, t), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.slow
def test_brownian_gaussian_training_recovers_score():
    from hjsampler.experiments import build_model, build_prior, builtin_experiment, train_network
    cfg = builtin_experiment("bm1d_gauss", backend="sgm")
    net, history = train_network(cfg, build_model(cfg), build_prior(cfg))
    xs = np.linspace(-3, 3, 61)
    errs = []
    for t in (0.1, 0.5, 1.0):
        errs.append(forward(net, xs, t)[:, 0] + xs / (1 + t))
    assert np.sqrt(np.mean(np.square(errs))) <= 0.05
    ctl = score_control(net, 1.0)
    x2 = np.linspace(-2, 2, 41)
    for tau in (0.0, 0.5, 0.9):
        assert np.max(np.abs(ctl(x2, tau)[:, 0] + x2 / (2 - tau))) <= 0.1
    # after warm-up, averages over tenths of the run stay within a 5% band of their running minimum
    blocks = np.asarray(history).reshape(10, -1).mean(axis=1)[1:]
    running = np.minimum.accumulate(blocks)
    assert np.all(blocks <= running + 0.05 * np.abs(running))
