import math

import numpy as np
import pytest

from draftflow import flowcore as fc
from draftflow.errors import (
    ConfigError,
    EmptyBatchError,
    NumericInputError,
    ShapeMismatchError,
)


def tiny_net(seed=0, width=8, shape=(4, 4, 1), cond_dim=4):
    return fc.init_model(width, shape, cond_dim, seed=seed)


def rand_batch(rng, shape=(4, 4, 1), cond_dim=4, n=3):
    return [
        (
            rng.standard_normal(shape),
            rng.standard_normal(shape),
            float(rng.uniform()),
            rng.standard_normal(cond_dim),
        )
        for _ in range(n)
    ]


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_deterministic_in_seed():
    a, b = tiny_net(seed=0), tiny_net(seed=0)
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)


def test_init_seed_sensitivity():
    a, b = tiny_net(seed=0), tiny_net(seed=1)
    assert any(not np.array_equal(pa, pb) for pa, pb in zip(a.params(), b.params()))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(width=0, image_shape=(4, 4, 1), cond_dim=4),
        dict(width=8, image_shape=(0, 4, 1), cond_dim=4),
        dict(width=8, image_shape=(4, 4, 1), cond_dim=-1),
    ],
)
def test_init_rejects_bad_dims(kwargs):
    with pytest.raises(ConfigError):
        fc.init_model(seed=0, **kwargs)


# ---------------------------------------------------------------------------
# velocity
# ---------------------------------------------------------------------------

def test_zero_weights_zero_velocity():
    net = tiny_net()
    for p in net.params():
        p[...] = 0.0
    rng = np.random.default_rng(0)
    v = fc.velocity(net, rng.standard_normal((4, 4, 1)), 0.4, rng.standard_normal(4))
    assert np.all(v == 0.0)


def test_velocity_pure_function():
    net = tiny_net()
    rng = np.random.default_rng(1)
    x, cond = rng.standard_normal((4, 4, 1)), rng.standard_normal(4)
    v1 = fc.velocity(net, x, 0.3, cond)
    v2 = fc.velocity(net, x, 0.3, cond)
    assert np.array_equal(v1, v2)


def test_velocity_shape_and_finiteness():
    net = tiny_net()
    rng = np.random.default_rng(2)
    v = fc.velocity(net, rng.standard_normal((4, 4, 1)), 0.9, rng.standard_normal(4))
    assert v.shape == (4, 4, 1)
    assert np.all(np.isfinite(v))


def test_velocity_rejects_nan_input():
    net = tiny_net()
    x = np.full((4, 4, 1), np.nan)
    with pytest.raises(NumericInputError):
        fc.velocity(net, x, 0.2, np.zeros(4))


def test_velocity_rejects_bad_cond_length():
    net = tiny_net()
    with pytest.raises(ShapeMismatchError):
        fc.velocity(net, np.zeros((4, 4, 1)), 0.2, np.zeros(3))


def _reference_forward(net, x, t, cond):
    """Hand-rolled forward pass with explicit loops (independent oracle)."""
    inp = list(x.reshape(-1)) + list(fc.time_embedding(t)[0]) + list(cond)
    h = inp
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            out.append(acc if layer == len(net.weights) - 1 else math.tanh(acc))
        h = out
    phi = fc.gate_features(t)[0]
    s = sum(phi[i] * net.gate_out[i] for i in range(len(phi)))
    g = sum(phi[i] * net.gate_skip[i] for i in range(len(phi)))
    flat = x.reshape(-1)
    return np.array([s * h[i] + g * flat[i] for i in range(len(h))]).reshape(x.shape)


def test_velocity_matches_handrolled_forward():
    net = fc.init_model(4, (2, 2, 1), 3, seed=5)
    # make the gates non-trivial so the oracle covers them
    rng = np.random.default_rng(6)
    net.gate_out[:] = rng.standard_normal(fc.GATE_DIM) * 0.1
    net.gate_skip[:] = rng.standard_normal(fc.GATE_DIM) * 0.1
    x, cond = rng.standard_normal((2, 2, 1)), rng.standard_normal(3)
    got = fc.velocity(net, x, 0.63, cond)
    want = _reference_forward(net, x, 0.63, cond)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# flow loss
# ---------------------------------------------------------------------------

def test_flow_loss_zero_when_prediction_exact():
    # rig: s(t)=0 everywhere, g=0, output biases equal to the target velocity
    net = tiny_net()
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 4, 1))
    x1 = rng.standard_normal((4, 4, 1))
    for p in net.params():
        p[...] = 0.0
    net.gate_out[fc.TIME_EMBED_DIM] = 1.0  # s(t) = 1
    net.biases[-1][:] = (x1 - x0).reshape(-1)
    assert fc.flow_loss(net, x0, x1, 0.3, np.zeros(4)) == 0.0


def test_flow_loss_closed_form_ones():
    net = tiny_net()
    for p in net.params():
        p[...] = 0.0
    x0 = np.zeros((4, 4, 1))
    x1 = np.ones((4, 4, 1))
    assert fc.flow_loss(net, x0, x1, 0.5, np.zeros(4)) == pytest.approx(1.0)


def test_flow_loss_matches_arithmetic_oracle():
    net = tiny_net(seed=7)
    rng = np.random.default_rng(8)
    x0, x1 = rng.standard_normal((4, 4, 1)), rng.standard_normal((4, 4, 1))
    t, cond = 0.41, rng.standard_normal(4)
    x_t = (1 - t) * x0 + t * x1
    v = fc.velocity(net, x_t, t, cond)
    want = float(np.mean((v - (x1 - x0)) ** 2))
    assert fc.flow_loss(net, x0, x1, t, cond) == pytest.approx(want, rel=1e-12)


def test_flow_loss_shape_mismatch():
    net = tiny_net()
    with pytest.raises(ShapeMismatchError):
        fc.flow_loss(net, np.zeros((4, 4, 1)), np.zeros((2, 2, 1)), 0.5, np.zeros(4))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _fd_check(net, batch, eps=1e-4):
    _, grads = fc.backward(net, batch)

    def mean_loss():
        return float(
            np.mean([fc.flow_loss(net, b[0], b[1], b[2], b[3]) for b in batch])
        )

    worst = 0.0
    for pi, p in enumerate(net.params()):
        flat = p.reshape(-1)
        gflat = grads[pi].reshape(-1)
        for ix in range(flat.size):
            orig = flat[ix]
            flat[ix] = orig + eps
            lp = mean_loss()
            flat[ix] = orig - eps
            lm = mean_loss()
            flat[ix] = orig
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(gflat[ix]) + abs(fd), 1e-7)
            worst = max(worst, abs(gflat[ix] - fd) / denom)
    return worst


def test_gradients_match_finite_differences():
    net = fc.init_model(4, (3, 3, 1), 3, seed=11)
    rng = np.random.default_rng(12)
    # non-trivial gates so their gradients are exercised
    net.gate_skip[:] = rng.standard_normal(fc.GATE_DIM) * 0.05
    batch = rand_batch(rng, shape=(3, 3, 1), cond_dim=3, n=2)
    assert _fd_check(net, batch) < 1e-4


def test_duplicated_batch_same_gradients():
    net = tiny_net(seed=13)
    rng = np.random.default_rng(14)
    sample = rand_batch(rng, n=1)[0]
    _, g1 = fc.backward(net, [sample])
    _, g2 = fc.backward(net, [sample, sample])
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_zero_loss_means_zero_gradients():
    net = tiny_net()
    rng = np.random.default_rng(15)
    x0 = rng.standard_normal((4, 4, 1))
    x1 = rng.standard_normal((4, 4, 1))
    for p in net.params():
        p[...] = 0.0
    net.gate_out[fc.TIME_EMBED_DIM] = 1.0
    net.biases[-1][:] = (x1 - x0).reshape(-1)
    loss, grads = fc.backward(net, [(x0, x1, 0.3, np.zeros(4))])
    assert loss == 0.0
    for g in grads:
        assert np.all(g == 0.0)


def test_backward_rejects_empty_batch():
    with pytest.raises(EmptyBatchError):
        fc.backward(tiny_net(), [])


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

def test_train_step_rejects_nonpositive_lr():
    net = tiny_net()
    batch = rand_batch(np.random.default_rng(16), n=1)
    with pytest.raises(ConfigError):
        fc.train_step(net, batch, 0.0)
    with pytest.raises(ConfigError):
        fc.train_step(net, batch, -1.0)


def test_overfit_single_sample():
    """Overfit-one-sample oracle: loss envelope decreases monotonically after
    warmup (per-window minima, since heavy-ball momentum rings step to step)
    and ends below 1e-3."""
    rng = np.random.default_rng(17)
    x0 = rng.standard_normal((4, 4, 1))
    x1 = rng.uniform(0, 1, (4, 4, 1))
    sample = (x0, x1, 0.37, rng.standard_normal(4))
    net = tiny_net(seed=0)
    state = None
    losses = []
    for step in range(500):
        _, loss, state = fc.train_step(
            net, [sample], fc.warmup_lr(step, 0.05, 500), state
        )
        losses.append(loss)
    warm = max(1, round(0.05 * 500))
    window = 25
    mins = [
        min(losses[i : i + window]) for i in range(warm, 500 - window, window)
    ]
    assert all(b < a for a, b in zip(mins, mins[1:]))
    assert losses[-1] < 1e-3


def test_training_trajectory_deterministic():
    def run():
        rng = np.random.default_rng(18)
        net = tiny_net(seed=4)
        state = None
        for step in range(20):
            batch = rand_batch(rng, n=2)
            _, loss, state = fc.train_step(net, batch, 0.02, state)
        return net

    a, b = run(), run()
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

def _constant_field_net(c, shape):
    net = fc.init_model(4, shape, 0, seed=1)
    for p in net.params():
        p[...] = 0.0
    net.biases[-1][:] = c
    net.gate_out[fc.TIME_EMBED_DIM] = 1.0  # s(t) = 1
    return net


def test_euler_constant_velocity_field():
    c = 0.35
    net = _constant_field_net(c, (2, 2, 1))
    fn = lambda n, x, t: fc.velocity(n, x, t, np.zeros(0))
    out = fc.euler_sample(net, fn, (2, 2, 1), steps=10, seed=7)
    x0 = np.random.default_rng(7).standard_normal((2, 2, 1))
    assert np.allclose(out, np.clip(x0 + c, 0.0, 1.0), atol=1e-12)


def test_euler_rejects_zero_steps():
    net = _constant_field_net(0.1, (2, 2, 1))
    fn = lambda n, x, t: fc.velocity(n, x, t, np.zeros(0))
    with pytest.raises(ConfigError):
        fc.euler_sample(net, fn, (2, 2, 1), steps=0, seed=0)


def test_euler_deterministic_in_seed():
    net = _constant_field_net(0.2, (2, 2, 1))
    fn = lambda n, x, t: fc.velocity(n, x, t, np.zeros(0))
    a = fc.euler_sample(net, fn, (2, 2, 1), steps=5, seed=3)
    b = fc.euler_sample(net, fn, (2, 2, 1), steps=5, seed=3)
    assert np.array_equal(a, b)


def _train_toy_flow(steps=800, width=64, lr=0.05, seed=0):
    net = fc.init_model(width, (1, 2), 0, seed=seed)
    rng = np.random.default_rng(seed)
    state = None
    for step in range(steps):
        x1 = fc.eight_gaussians(rng, 64)
        batch = [
            (rng.standard_normal((1, 2)), x1[i], float(rng.uniform()), np.zeros(0))
            for i in range(64)
        ]
        _, _, state = fc.train_step(net, batch, fc.warmup_lr(step, lr, steps), state)
    return net


def test_step_refinement_on_trained_net():
    """Doubling the step count moves the output less and less (the Euler
    integration error shrinks monotonically on a smooth trained field)."""
    net = _train_toy_flow(steps=500)
    fn = lambda n, x, t: fc.velocity(n, x, t, np.zeros(0))
    outs = {
        steps: np.stack(
            [fc.euler_sample(net, fn, (1, 2), steps=steps, seed=100 + i) for i in range(32)]
        )
        for steps in (25, 50, 100)
    }
    d_coarse = float(np.mean(np.abs(outs[50] - outs[25])))
    d_fine = float(np.mean(np.abs(outs[100] - outs[50])))
    assert d_fine < d_coarse


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = tiny_net(seed=21)
    rng = np.random.default_rng(22)
    for p in net.params():
        p[...] = rng.standard_normal(p.shape)
    path = tmp_path / "model.drcf"
    fc.save_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DRCF"
    assert int.from_bytes(raw[4:8], "little") == fc.CHECKPOINT_VERSION
    loaded = fc.load_checkpoint(path)
    assert loaded.image_shape == net.image_shape
    assert loaded.cond_dim == net.cond_dim
    for pa, pb in zip(net.params(), loaded.params()):
        # weights are serialized as little-endian float32
        assert np.array_equal(pa.astype(np.float32).astype(np.float64), pb)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.drcf"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ConfigError):
        fc.load_checkpoint(path)


# ---------------------------------------------------------------------------
# toy distribution helpers
# ---------------------------------------------------------------------------

def test_energy_distance_zero_for_identical_sets():
    rng = np.random.default_rng(23)
    xs = rng.standard_normal((100, 2))
    assert fc.energy_distance(xs, xs) == pytest.approx(0.0, abs=1e-9)


def test_energy_distance_detects_shift():
    rng = np.random.default_rng(24)
    xs = rng.standard_normal((500, 2))
    ys = rng.standard_normal((500, 2)) + 3.0
    near = fc.energy_distance(xs, rng.standard_normal((500, 2)))
    far = fc.energy_distance(xs, ys)
    assert far > 10 * abs(near)
