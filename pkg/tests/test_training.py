import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_rel_err, numeric_grad
from hdcgan.model import NetworkConfig, build_discriminator, build_generator
from hdcgan.rng import RngStream
from hdcgan.tensor import Tensor
from hdcgan.training import (
    Adam,
    CheckpointError,
    ToyDistribution,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    d_loss,
    epoch_order,
    g_loss,
    init_state,
    inject_noise,
    load_checkpoint,
    optimal_discriminator,
    read_checkpoint_header,
    read_loss_log,
    run_training,
    save_checkpoint,
    train_step,
    write_loss_log,
)

LN2 = math.log(2.0)


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# --- losses ------------------------------------------------------------------------


def test_d_loss_reference_values():
    assert d_loss(T([0.5, 0.5]), T([0.5, 0.5])).item() == pytest.approx(LN2, abs=1e-12)
    assert d_loss(T([0.9]), T([0.2])).item() == pytest.approx(-0.5 * math.log(0.9) - 0.5 * math.log(0.8), abs=1e-12)
    assert abs(d_loss(T([0.9]), T([0.2])).item() - 0.164252) < 1e-6
    assert d_loss(T([1.0]), T([0.0])).item() < 1e-6


def test_g_loss_reference_values():
    assert g_loss(T([1.0])).item() < 1e-6
    assert g_loss(T([0.5])).item() == pytest.approx(LN2, abs=1e-12)
    assert abs(g_loss(T([0.25, 0.75])).item() - 0.836988) < 1e-6


def test_losses_reject_empty():
    with pytest.raises(ValueError):
        d_loss(T([]), T([0.5]))
    with pytest.raises(ValueError):
        g_loss(T([]))


def test_losses_finite_at_saturation():
    assert math.isfinite(d_loss(T([0.0]), T([1.0])).item())
    assert math.isfinite(g_loss(T([0.0])).item())


def _param_gradcheck(net_params, loss_fn, tol):
    names = list(net_params)
    arrays = [net_params[k].data.copy() for k in names]

    def set_all(arrs):
        for k, a in zip(names, arrs):
            net_params[k].data = np.array(a)
            net_params[k].data.flags.writeable = False

    def f(*arrs):
        set_all(arrs)
        return loss_fn().item()

    num = numeric_grad(f, arrays)
    set_all(arrays)
    for p in net_params.values():
        p.zero_grad()
    loss_fn().backward()
    ana = [net_params[k].grad for k in names]
    worst = max(max_rel_err(a, n) for a, n in zip(ana, num))
    assert worst < tol, worst
    return worst


@pytest.fixture
def tiny_nets():
    cfg = NetworkConfig(base_size=8, latent_dim=3, n_filters=2, channels=1)
    g = build_generator(cfg, RngStream(0, 2), np.float64)
    d = build_discriminator(cfg, RngStream(0, 3), np.float64)
    r = RngStream(9)
    real = np.tanh(r.normal((3, 1, 8, 8)))
    z = r.normal((3, 3))
    return g, d, real, z


def test_d_loss_gradient_through_network(tiny_nets):
    g, d, real, z = tiny_nets
    fake = g(Tensor(z)).data
    _param_gradcheck(d.parameters(), lambda: d_loss(d(Tensor(real)), d(Tensor(fake))), 1e-4)


def test_g_loss_gradient_through_both_networks(tiny_nets):
    g, d, _, z = tiny_nets
    _param_gradcheck(g.parameters(), lambda: g_loss(d(g(Tensor(z)))), 1e-4)


# --- noise, optimum, Adam -------------------------------------------------------------


def test_inject_noise():
    x = np.zeros(1_000_000)
    assert inject_noise(x, 0.0, 1) is x
    out = inject_noise(x, 1.0, RngStream(4))
    assert abs(out.mean()) < 0.004
    assert np.array_equal(inject_noise(x[:10], 0.5, RngStream(4)), inject_noise(x[:10], 0.5, RngStream(4)))
    t = inject_noise(Tensor(np.ones(3), requires_grad=True), 0.1, 0)
    assert isinstance(t, Tensor) and t.requires_grad
    with pytest.raises(ValueError):
        inject_noise(x, -1.0, 0)


def test_noise_preserves_batch_mean():
    x = np.linspace(-1, 1, 100_000)
    sigma = 0.1
    shift = abs(inject_noise(x, sigma, RngStream(8)).mean() - x.mean())
    assert shift < 4 * sigma / math.sqrt(x.size)


def test_optimal_discriminator():
    assert optimal_discriminator(0.3, 0.3) == 0.5
    assert optimal_discriminator(0.4, 0.0) == 1.0
    assert optimal_discriminator(0.2, 0.6) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        optimal_discriminator(0.0, 0.0)


def _adam_oracle(theta, grads, lr, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_first_step_and_zero_grad():
    p, m, v = adam_step([np.zeros(1)], [np.ones(1)], [np.zeros(1)], [np.zeros(1)], 1)
    assert p[0][0] == pytest.approx(-0.0002 / (1 + 1e-8), rel=1e-12)
    p, _, _ = adam_step([np.full(2, 3.0)], [np.zeros(2)], [np.zeros(2)], [np.zeros(2)], 1)
    assert np.all(p[0] == 3.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12))
def test_adam_matches_scalar_oracle(grads):
    theta, m, v = np.array([0.3]), np.zeros(1), np.zeros(1)
    for t, g in enumerate(grads, start=1):
        (theta,), (m,), (v,) = adam_step([theta], [np.array([g])], [m], [v], t)
    assert theta[0] == pytest.approx(_adam_oracle(0.3, grads, 0.0002, 0.5, 0.999, 1e-8), abs=1e-12)


@pytest.mark.parametrize("g", [1e-3, 1.0, 1e3])
def test_adam_step_size_tends_to_lr(g):
    theta, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    prev = 0.0
    for t in range(1, 101):
        (theta,), (m,), (v,) = adam_step([theta], [np.array([g])], [m], [v], t)
        step = prev - theta[0]
        prev = theta[0]
    assert step == pytest.approx(0.0002, rel=1e-4)


def test_adam_errors():
    with pytest.raises(ValueError):
        adam_step([np.zeros(1)], [np.ones(1)], [np.zeros(1)], [np.zeros(1)], 0)
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.ones(3)], [np.zeros(2)], [np.zeros(2)], 1)
    with pytest.raises(ValueError):
        adam_step([np.zeros(1)], [np.array([np.nan])], [np.zeros(1)], [np.zeros(1)], 1)


def test_adam_class_updates_tensors():
    w = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    (w * w).sum().backward()
    opt.step({"w": w})
    assert opt.t == 1 and np.allclose(w.data, 0.9)


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(batch_size=1), dict(beta1=1.0), dict(noise_amplitude=-0.1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- training state ----------------------------------------------------------------


NET = NetworkConfig(base_size=16, latent_dim=8, n_filters=4)
CFG = TrainConfig(batch_size=4, seed=11)


def _batch(seed=0, n=4):
    return np.tanh(RngStream(seed).normal((n, 3, 16, 16))).astype(np.float32)


def _params(state):
    return {f"{r}/{k}": v.data.copy() for r, net in (("g", state.generator), ("d", state.discriminator)) for k, v in net.parameters().items()}


def test_train_step_is_deterministic_and_updates():
    a, b = init_state(NET, CFG), init_state(NET, CFG)
    before = _params(a)
    _, da, ga = train_step(a, _batch())
    _, db, gb = train_step(b, _batch())
    assert (da, ga) == (db, gb)
    after = _params(a)
    assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("g/"))
    assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("d/"))
    assert a.history == [(0, 0, da, ga)] and a.step == 1


def test_train_step_rejects_wrong_shape():
    with pytest.raises(ValueError):
        train_step(init_state(NET, CFG), np.zeros((4, 3, 8, 8), dtype=np.float32))


def test_train_step_names_diverged_network():
    state = init_state(NET, CFG)
    p = state.discriminator.parameters()["blocks.0.weight"]
    bad = p.data.copy()
    bad[0, 0, 0, 0] = np.nan
    p.data = bad
    with pytest.raises(TrainingDivergedError, match="discriminator"):
        train_step(state, _batch())


def test_epoch_order_is_a_seeded_permutation():
    o = epoch_order(10, 3, 2)
    assert sorted(o) == list(range(10))
    assert np.array_equal(o, epoch_order(10, 3, 2))
    assert not np.array_equal(o, epoch_order(10, 3, 3))


def test_run_training_resume_matches_uninterrupted(tmp_path):
    images = _batch(1, 12)
    full = run_training(init_state(NET, CFG), images, steps=6)
    part = run_training(init_state(NET, CFG), images, steps=4)
    save_checkpoint(part, tmp_path / "mid.hdck")
    resumed = run_training(load_checkpoint(tmp_path / "mid.hdck"), images, steps=6)
    assert resumed.history == full.history
    pa, pb = _params(full), _params(resumed)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    state = init_state(NET, CFG)
    train_step(state, _batch())
    path = tmp_path / "c.hdck"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.step == state.step and loaded.history == state.history
    z = Tensor(RngStream(3).normal((2, 8)), dtype=np.float32)
    assert np.array_equal(state.generator(z, training=False).data, loaded.generator(z, training=False).data)
    _, d1, g1 = train_step(state, _batch(2))
    _, d2, g2 = train_step(loaded, _batch(2))
    assert (d1, g1) == (d2, g2)
    pa, pb = _params(state), _params(loaded)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    save_checkpoint(loaded, tmp_path / "again.hdck")
    save_checkpoint(state, tmp_path / "orig.hdck")
    assert (tmp_path / "again.hdck").read_bytes() == (tmp_path / "orig.hdck").read_bytes()


def test_checkpoint_header_layer_count(tmp_path):
    state = init_state(NetworkConfig(base_size=32, latent_dim=4, n_filters=1), CFG)
    save_checkpoint(state, tmp_path / "c.hdck")
    header = read_checkpoint_header(tmp_path / "c.hdck")
    assert header["layer_count"] == 4
    assert header["network"]["base_size"] == [32, 32]


def _rewrite_header(raw: bytes, edit) -> bytes:
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n])
    edit(header)
    blob = json.dumps(header, sort_keys=True).encode()
    return raw[:8] + struct.pack("<I", len(blob)) + blob + raw[12 + n :]


def test_checkpoint_corruption_detected(tmp_path):
    state = init_state(NET, CFG)
    path = tmp_path / "c.hdck"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 99) + raw[8:],
        "truncated": raw[:-7],
        "trailing": raw + b"\0",
        "shape": _rewrite_header(raw, lambda h: h["network"].update(n_filters=8)),
        "layer_count": _rewrite_header(raw, lambda h: h.update(layer_count=9)),
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.hdck"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_loss_log_roundtrip_and_errors(tmp_path):
    hist = [(0, 0, 0.5, 0.25), (1, 0, 1 / 3, 2 / 3)]
    write_loss_log(hist, tmp_path / "l.csv")
    assert read_loss_log(tmp_path / "l.csv") == hist
    (tmp_path / "bad.csv").write_text("step,epoch,d_loss,g_loss\n0,0,0.1,0.2\n1,0,oops,0.3\n")
    with pytest.raises(ValueError, match=":3:"):
        read_loss_log(tmp_path / "bad.csv")


def test_toy_distribution_validation():
    with pytest.raises(ValueError):
        ToyDistribution.discrete([0.5, 0.6])
    with pytest.raises(ValueError):
        ToyDistribution("gaussian-mixture-1d", means=[0.0], variances=[0.0], weights=[1.0])
    mix = ToyDistribution("gaussian-mixture-2d", means=[[0, 0], [3, 3]], variances=[[1, 1], [1, 1]], weights=[0.5, 0.5])
    assert mix.sample(RngStream(0), 5).shape == (5, 2)
    assert mix.pdf([[0.0, 0.0]])[0] == pytest.approx(0.5 / (2 * math.pi) + 0.5 * math.exp(-9) / (2 * math.pi))
