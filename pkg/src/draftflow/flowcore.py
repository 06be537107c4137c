"""From-scratch rectified flow core.

A small fully-connected velocity-field network with hand-written forward and
backward passes, the flow-matching regression loss, an SGD-with-momentum
training step, and a deterministic Euler ODE sampler.

Conventions: ``x0`` is standard Gaussian noise at t=0, ``x1`` is data at t=1,
and the interpolant is ``x_t = (1-t)*x0 + t*x1``.  The network regresses the
constant path velocity ``x1 - x0``:

    loss = mean || net(x_t, t, cond) - (x1 - x0) ||^2

Sampling integrates ``dx/dt = net(x, t, cond)`` from t=0 to t=1 with a fixed
Euler step and clamps to [0, 1] only at the very end.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    EmptyBatchError,
    ModelStateError,
    NumericInputError,
    ShapeMismatchError,
)

TIME_EMBED_DIM = 32
N_HIDDEN = 3

CHECKPOINT_MAGIC = b"DRCF"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# dense-network core (shared with the verifier head)
# ---------------------------------------------------------------------------

def mlp_forward(weights, biases, x):
    """Forward pass of a tanh MLP (linear output layer).

    Returns (output, caches) where caches holds the per-layer activations
    needed by :func:`mlp_backward`.
    """
    h = x
    caches = [h]
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        caches.append(h)
    return h, caches

def mlp_backward(weights, caches, d_out):
    """Gradients of a scalar loss through :func:`mlp_forward`.

    ``d_out`` is dL/d(output).  Returns (d_weights, d_biases, d_input).
    """
    d_ws = [None] * len(weights)
    d_bs = [None] * len(weights)
    grad = d_out
    for i in range(len(weights) - 1, -1, -1):
        h_in = caches[i]
        if i != len(weights) - 1:
            # undo tanh: caches[i + 1] holds tanh(z)
            grad = grad * (1.0 - caches[i + 1] ** 2)
        d_ws[i] = h_in.T @ grad
        d_bs[i] = grad.sum(axis=0)
        grad = grad @ weights[i].T
    return d_ws, d_bs, grad


def time_embedding(t):
    """Sinusoidal embedding of t in [0,1], shape (len(t), TIME_EMBED_DIM)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(TIME_EMBED_DIM // 2)
    freqs = 2.0 * math.pi * (2.0 ** (k / 2.0))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


GATE_DIM = TIME_EMBED_DIM + 3
# Gate parameters multiply whole-image sums, so their gradients run several
# orders of magnitude hotter than individual matrix weights; they get a
# scaled-down learning rate in train_step.
GATE_LR_FACTOR = 0.3


def gate_features(t):
    """Time features for the two scalar gates: the sinusoidal embedding plus
    a constant, the raw time, and a (normalized) rational term that lets the
    gates track the 1/(1-t) growth of the straight-path velocity near t=1."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    rational = 1.0 / (50.0 * (1.0 - 0.98 * t))
    extra = np.stack([np.ones_like(t), t, rational], axis=1)
    return np.concatenate([time_embedding(t), extra], axis=1)


# ---------------------------------------------------------------------------
# velocity network
# ---------------------------------------------------------------------------

@dataclass
class VelocityNet:
    """Feed-forward velocity field m(x_t, t, cond).

    Input is the flattened noisy image, a sinusoidal time embedding and the
    conditioning vector.  The dense tanh stack produces a raw image-shaped
    output which is combined with the noisy input through two learned scalar
    time-gates:

        velocity = s(t) * mlp(x_t, t, cond) + g(t) * x_t

    The identity-skip gate lets a narrow network express the full-rank
    -x_t/(1-t) component of the straight-path velocity; without it the
    regression stalls at the noise floor.  At init s = 1 and g = 0, so the
    net starts as a plain MLP.  ``eval_count`` is test instrumentation, not
    model state.
    """

    image_shape: tuple
    width: int
    cond_dim: int
    weights: list = field(repr=False)
    biases: list = field(repr=False)
    gate_out: np.ndarray = field(repr=False, default=None)
    gate_skip: np.ndarray = field(repr=False, default=None)
    eval_count: int = 0

    @property
    def data_dim(self):
        return int(np.prod(self.image_shape))

    @property
    def input_dim(self):
        return self.data_dim + TIME_EMBED_DIM + self.cond_dim

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.gate_out)
        out.append(self.gate_skip)
        return out


def init_model(width, image_shape, cond_dim, seed):
    """Create a VelocityNet with Glorot-uniform weights, deterministic in seed."""
    image_shape = tuple(int(d) for d in np.atleast_1d(image_shape))
    if width < 1:
        raise ConfigError(f"width must be >= 1, got {width}")
    if cond_dim < 0:
        raise ConfigError(f"cond_dim must be >= 0, got {cond_dim}")
    if any(d < 1 for d in image_shape):
        raise ConfigError(f"image dims must be >= 1, got {image_shape}")
    data_dim = int(np.prod(image_shape))
    in_dim = data_dim + TIME_EMBED_DIM + cond_dim
    dims = [in_dim] + [width] * N_HIDDEN + [data_dim]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    gate_out = np.zeros(GATE_DIM)
    gate_out[TIME_EMBED_DIM] = 1.0  # the constant feature: s(t) = 1 at init
    gate_skip = np.zeros(GATE_DIM)
    return VelocityNet(image_shape, width, cond_dim, weights, biases, gate_out, gate_skip)


def _assemble_input(net, x_t, t, cond):
    x_t = np.asarray(x_t, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if x_t.ndim == len(net.image_shape):  # single sample
        x_t = x_t[None]
        cond = cond[None] if net.cond_dim else cond.reshape(1, 0)
        t = np.atleast_1d(t)
        single = True
    else:
        single = False
        t = np.asarray(t, dtype=np.float64)
    b = x_t.shape[0]
    if x_t.shape[1:] != net.image_shape:
        raise ShapeMismatchError(f"image shape {x_t.shape[1:]} != {net.image_shape}")
    if cond.shape != (b, net.cond_dim):
        raise ShapeMismatchError(f"cond shape {cond.shape} != {(b, net.cond_dim)}")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(cond)) and np.all(np.isfinite(t))):
        raise NumericInputError("non-finite values in velocity inputs")
    inp = np.concatenate(
        [x_t.reshape(b, -1), time_embedding(t), cond], axis=1
    )
    return inp, single


def _gated_output(net, inp, t):
    raw, caches = mlp_forward(net.weights, net.biases, inp)
    phi = gate_features(t)
    s = phi @ net.gate_out
    g = phi @ net.gate_skip
    x_flat = inp[:, : net.data_dim]
    out = s[:, None] * raw + g[:, None] * x_flat
    return out, raw, phi, s, caches


def velocity(net, x_t, t, cond):
    """Evaluate the velocity field; output has the same shape as ``x_t``."""
    inp, single = _assemble_input(net, x_t, t, cond)
    out, _, _, _, _ = _gated_output(net, inp, t)
    net.eval_count += 1
    if single:
        return out[0].reshape(net.image_shape)
    return out.reshape((-1,) + net.image_shape)


def velocity_batch(net, x_t, t, cond):
    """Batched velocity evaluation; counts one network evaluation per row."""
    inp, _ = _assemble_input(net, x_t, t, cond)
    out, _, _, _, _ = _gated_output(net, inp, t)
    net.eval_count += inp.shape[0]
    return out.reshape((-1,) + net.image_shape)


def flow_loss(net, x0, x1, t, cond):
    """Mean squared error between predicted and target velocity at x_t."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeMismatchError(f"x0 {x0.shape} vs x1 {x1.shape}")
    x_t = (1.0 - t) * x0 + t * x1
    v = velocity(net, x_t, t, cond)
    return float(np.mean((v - (x1 - x0)) ** 2))


def _batch_arrays(net, batch):
    if len(batch) == 0:
        raise EmptyBatchError("backward needs a non-empty batch")
    x0 = np.stack([np.asarray(s[0], dtype=np.float64) for s in batch])
    x1 = np.stack([np.asarray(s[1], dtype=np.float64) for s in batch])
    t = np.asarray([float(s[2]) for s in batch])
    if net.cond_dim:
        cond = np.stack([np.asarray(s[3], dtype=np.float64) for s in batch])
    else:
        cond = np.zeros((len(batch), 0))
    if x0.shape != x1.shape:
        raise ShapeMismatchError(f"x0 {x0.shape} vs x1 {x1.shape}")
    return x0, x1, t, cond


def backward(net, batch):
    """Gradient of the mean flow loss over a batch w.r.t. every weight.

    ``batch`` is a list of (x0, x1, t, cond) tuples.  Returns (loss, grads)
    with grads shaped like ``net.params()``.
    """
    x0, x1, t, cond = _batch_arrays(net, batch)
    b = x0.shape[0]
    tcol = t.reshape((b,) + (1,) * len(net.image_shape))
    x_t = (1.0 - tcol) * x0 + tcol * x1
    inp, _ = _assemble_input(net, x_t, t, cond)
    out, raw, phi, s, caches = _gated_output(net, inp, t)
    target = (x1 - x0).reshape(b, -1)
    diff = out - target
    loss = float(np.mean(diff**2))
    d_out = (2.0 / diff.size) * diff
    x_flat = inp[:, : net.data_dim]
    d_gate_out = phi.T @ (d_out * raw).sum(axis=1)
    d_gate_skip = phi.T @ (d_out * x_flat).sum(axis=1)
    d_raw = s[:, None] * d_out
    d_ws, d_bs, _ = mlp_backward(net.weights, caches, d_raw)
    grads = []
    for dw, db in zip(d_ws, d_bs):
        grads.append(dw)
        grads.append(db)
    grads.append(d_gate_out)
    grads.append(d_gate_skip)
    return loss, grads


@dataclass
class MomentumState:
    """Heavy-ball buffers for SGD with momentum."""

    buffers: list
    momentum: float = 0.9

    @classmethod
    def for_net(cls, net, momentum=0.9):
        return cls([np.zeros_like(p) for p in net.params()], momentum)


def warmup_lr(step, base_lr, total_steps, warmup_frac=0.05):
    """Linear warmup over the first ``warmup_frac`` of steps, then constant."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    return base_lr * min(1.0, (step + 1) / warm)


def train_step(net, batch, lr, state=None):
    """One SGD-with-momentum update on the mean flow loss over ``batch``.

    Updates weights in place and returns (net, pre-step loss, state).  The
    caller owns the learning-rate schedule (see :func:`warmup_lr`).
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if state is None:
        state = MomentumState.for_net(net)
    loss, grads = backward(net, batch)
    params = net.params()
    n_dense = len(params) - 2  # trailing two params are the time-gates
    for i, (p, buf, g) in enumerate(zip(params, state.buffers, grads)):
        buf *= state.momentum
        buf += g
        p -= (lr if i < n_dense else lr * GATE_LR_FACTOR) * buf
    for p in net.params():
        s = float(np.sum(p))
        if not math.isfinite(s):
            raise ModelStateError("non-finite weights after training step")
    return net, loss, state


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def euler_sample(net, guidance, shape, steps, seed):
    """Integrate the velocity ODE from Gaussian noise at t=0 to t=1.

    ``guidance`` is either a GuidanceSpec (dispatched through the guidance
    module) or a callable ``(net, x_t, t) -> velocity``.  The state is
    clamped to [0, 1] only after the final step.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    shape = tuple(int(d) for d in shape)
    if callable(guidance):
        velocity_fn = guidance
    else:
        from . import guidance as guidance_mod

        velocity_fn = lambda n, x, t: guidance_mod.guided_velocity(n, x, t, guidance)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * velocity_fn(net, x, i * dt)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints: magic "DRCF", version, shape header, little-endian f32 weights
# ---------------------------------------------------------------------------

def save_checkpoint(net, path):
    """Write the versioned binary checkpoint format."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(net.image_shape)))
        for d in net.image_shape:
            f.write(struct.pack("<I", d))
        f.write(struct.pack("<III", net.width, net.cond_dim, TIME_EMBED_DIM))
        for p in net.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (ndim,) = struct.unpack("<I", f.read(4))
        image_shape = tuple(
            struct.unpack("<I", f.read(4))[0] for _ in range(ndim)
        )
        width, cond_dim, time_dim = struct.unpack("<III", f.read(12))
        if time_dim != TIME_EMBED_DIM:
            raise ConfigError(f"checkpoint time-embedding dim {time_dim} unsupported")
        net = init_model(width, image_shape, cond_dim, seed=0)
        for p in net.params():
            raw = f.read(p.size * 4)
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            p[...] = arr.reshape(p.shape)
    return net


# ---------------------------------------------------------------------------
# 2-D toy distribution used by the distribution-recovery checks and demos
# ---------------------------------------------------------------------------

EIGHT_GAUSSIANS_RADIUS = 0.3
EIGHT_GAUSSIANS_SIGMA = 0.03


def eight_gaussians(rng, n):
    """Draw n points from the 8-mode ring mixture, as (n, 1, 2) 'images'."""
    angles = 2.0 * math.pi * rng.integers(0, 8, size=n) / 8.0
    centers = 0.5 + EIGHT_GAUSSIANS_RADIUS * np.stack(
        [np.cos(angles), np.sin(angles)], axis=1
    )
    pts = centers + EIGHT_GAUSSIANS_SIGMA * rng.standard_normal((n, 2))
    return pts.reshape(n, 1, 2)


def energy_distance(xs, ys):
    """Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| between sample sets."""
    xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
    ys = np.asarray(ys, dtype=np.float64).reshape(len(ys), -1)

    def mean_dist(a, b):
        d2 = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :]
        d2 -= 2.0 * (a @ b.T)
        return float(np.mean(np.sqrt(np.maximum(d2, 0.0))))

    return 2.0 * mean_dist(xs, ys) - mean_dist(xs, xs) - mean_dist(ys, ys)
