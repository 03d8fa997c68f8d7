"""Laplace representation: an embedding in which temporally close states are close.

The encoder is a small ReLU perceptron trained on an attractive term (a state and
a state a few steps later in the same trajectory) plus a repulsive term over random
pairs of logged states. Its output is the distance metric of the calibration model.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from hypercal.seeding import as_generator

ENCODER_MAGIC = b"HCLE"
ENCODER_VERSION = 1


@dataclass(frozen=True)
class LaplaceTrainConfig:
    kappa: float = 0.8
    beta: float = 5.0
    zeta: float = 0.5
    lr: float = 3e-5
    batch_size: int = 128
    window: int = 20
    max_steps: int = 30000
    check_interval: int = 1000
    patience: int = 3
    hidden: tuple = (128, 128)
    out_dim: int = 32

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        for name in ("beta", "zeta", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.window < 1 or self.check_interval < 1 or self.patience < 1:
            raise ValueError("batch_size, window, check_interval and patience must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


# Per-environment loss constants and optimiser settings.
PRESETS = {
    "acrobot": LaplaceTrainConfig(kappa=0.8, beta=5.0, zeta=0.5, lr=3e-5, window=20),
    "acrobot-changed": LaplaceTrainConfig(kappa=0.8, beta=5.0, zeta=0.5, lr=3e-5, window=20),
    "puddleworld": LaplaceTrainConfig(kappa=0.8, beta=5.0, zeta=0.05, lr=3e-4, window=10),
    "puddleworld-small": LaplaceTrainConfig(kappa=0.8, beta=5.0, zeta=0.05, lr=1e-4, window=5),
    "cartpole": LaplaceTrainConfig(kappa=0.8, beta=5.0, zeta=0.05, lr=3e-5, window=50),
}


def preset(name: str, **overrides) -> LaplaceTrainConfig:
    if name not in PRESETS:
        raise ValueError(f"no Laplace preset named {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


class LaplaceEncoder:
    """Two hidden ReLU layers, linear output. Inputs are rescaled to [-1, 1] first."""

    def __init__(self, weights, biases, in_low, in_high):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.in_low = np.asarray(in_low, dtype=float)
        self.in_high = np.asarray(in_high, dtype=float)
        span = self.in_high - self.in_low
        self._scale = np.where(span > 0, 2.0 / np.where(span > 0, span, 1.0), 0.0)

    @classmethod
    def init(cls, in_dim: int, hidden=(128, 128), out_dim: int = 32, rng=None,
             in_low=None, in_high=None) -> "LaplaceEncoder":
        """Uniform fan-in initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = as_generator(rng)
        sizes = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        lo = -np.ones(in_dim) if in_low is None else in_low
        hi = np.ones(in_dim) if in_high is None else in_high
        return cls(weights, biases, lo, hi)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def set_params(self, params) -> None:
        self.weights = [np.array(p, dtype=float) for p in params[0::2]]
        self.biases = [np.array(p, dtype=float) for p in params[1::2]]

    def copy(self) -> "LaplaceEncoder":
        return LaplaceEncoder([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.in_low.copy(), self.in_high.copy())

    def _scaled(self, x):
        return (np.asarray(x, dtype=float) - self.in_low) * self._scale - np.where(self._scale > 0, 1.0, 0.0)

    def _forward(self, x):
        acts = [self._scaled(x)]
        h = acts[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def __call__(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=float)
        out = self._forward(np.atleast_2d(x))[-1]
        return out[0] if x.ndim == 1 else out

    def _backward(self, acts, grad_out):
        grads = []
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(g.sum(axis=0))  # bias
            grads.append(acts[i].T @ g)  # weight
            if i > 0:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        grads.reverse()
        return grads

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in [*self.params(), self.in_low, self.in_high]:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        sizes = [self.in_dim, *[w.shape[1] for w in self.weights]]
        with open(path, "wb") as f:
            f.write(ENCODER_MAGIC)
            f.write(struct.pack("<HI", ENCODER_VERSION, len(sizes)))
            f.write(struct.pack(f"<{len(sizes)}I", *sizes))
            for arr in [self.in_low, self.in_high, *self.params()]:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LaplaceEncoder":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != ENCODER_MAGIC:
            raise ValueError(f"{path}: not an encoder file (bad magic)")
        version, n_sizes = struct.unpack_from("<HI", blob, 4)
        if version != ENCODER_VERSION:
            raise ValueError(f"{path}: unsupported encoder version {version}")
        off = 10
        sizes = struct.unpack_from(f"<{n_sizes}I", blob, off)
        off += 4 * n_sizes

        def take(shape):
            nonlocal off
            n = int(np.prod(shape))
            if off + 8 * n > len(blob):
                raise ValueError(f"{path}: truncated encoder file")
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
            off += 8 * n
            return arr

        lo, hi = take((sizes[0],)), take((sizes[0],))
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(take((a, b)))
            biases.append(take((b,)))
        return cls(weights, biases, lo, hi)


def _loss_terms(a, c, r, beta, zeta):
    attract = ((a - c) ** 2).sum(axis=1)
    dot = (a * r).sum(axis=1)
    repel = dot ** 2 - zeta * (a ** 2).sum(axis=1) - zeta * (r ** 2).sum(axis=1)
    return attract + beta * repel


def laplace_loss(encoder: LaplaceEncoder, anchors, closes, randoms, beta: float, zeta: float) -> float:
    a, c, r = encoder(np.atleast_2d(anchors)), encoder(np.atleast_2d(closes)), encoder(np.atleast_2d(randoms))
    return float(_loss_terms(a, c, r, beta, zeta).mean())


def laplace_grad(encoder: LaplaceEncoder, anchors, closes, randoms, beta: float, zeta: float):
    """Loss and its gradient w.r.t. ``encoder.params()`` (same order and shapes)."""
    anchors, closes, randoms = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (anchors, closes, randoms))
    n = len(anchors)
    acts = encoder._forward(np.concatenate([anchors, closes, randoms]))
    out = acts[-1]
    a, c, r = out[:n], out[n:2 * n], out[2 * n:]
    loss = float(_loss_terms(a, c, r, beta, zeta).mean())
    dot = (a * r).sum(axis=1, keepdims=True)
    ga = 2 * (a - c) + beta * (2 * dot * r - 2 * zeta * a)
    gc = -2 * (a - c)
    gr = beta * (2 * dot * a - 2 * zeta * r)
    grad_out = np.concatenate([ga, gc, gr]) / n
    return loss, encoder._backward(acts, grad_out)


class PairSampler:
    """Draws (anchor, close, random) state batches from trajectory-structured states.

    ``trajectories`` is a list of state arrays, one row per visited state in order.
    The close state sits ``u`` steps after the anchor with P(u) proportional to
    ``kappa ** u`` for ``u`` in ``1..min(window, steps remaining)``.
    """

    def __init__(self, trajectories, kappa: float, window: int):
        trajs = [np.asarray(t, dtype=float) for t in trajectories if len(t) >= 2]
        if not trajs:
            raise ValueError("need at least one trajectory with two or more states")
        self.states = np.concatenate(trajs)
        offsets = np.cumsum([0] + [len(t) for t in trajs])
        anchors, remaining = [], []
        for start, t in zip(offsets[:-1], trajs):
            anchors.append(np.arange(start, start + len(t) - 1))
            remaining.append(np.arange(len(t) - 1, 0, -1))
        self.anchor_idx = np.concatenate(anchors)
        self.support = np.minimum(np.concatenate(remaining), window)
        self.kappa = kappa
        self.window = window

    def offsets(self, support, u):
        """Inverse-CDF draw of the truncated geometric offset for each anchor."""
        k = self.kappa
        mass = 1.0 - k ** support
        off = np.ceil(np.log1p(-u * mass) / math.log(k)).astype(np.int64)
        return np.clip(off, 1, support)

    def sample(self, n: int, rng):
        pick = rng.integers(len(self.anchor_idx), size=n)
        anchor = self.anchor_idx[pick]
        close = anchor + self.offsets(self.support[pick], rng.random(n))
        rand = rng.integers(len(self.states), size=n)
        return self.states[anchor], self.states[close], self.states[rand]


def sample_pair(trajectories, kappa: float, window: int, rng):
    """One (state, close_state) pair."""
    a, c, _ = PairSampler(trajectories, kappa, window).sample(1, as_generator(rng))
    return a[0], c[0]


def train_laplace(trajectories, config: LaplaceTrainConfig, rng=None, encoder=None,
                  history: list | None = None) -> LaplaceEncoder:
    """Adam descent on the Laplace loss with a patience-based convergence cutoff.

    The mean training loss over each ``check_interval`` window is compared with the
    best seen so far; training stops after ``patience`` consecutive checks without
    improvement (or at ``max_steps``). The parameters at the best check are returned.
    """
    rng = as_generator(rng)
    sampler = PairSampler(trajectories, config.kappa, config.window)
    states = sampler.states
    if encoder is None:
        encoder = LaplaceEncoder.init(states.shape[1], config.hidden, config.out_dim, rng,
                                      states.min(axis=0), states.max(axis=0))
    if np.all(states == states[0]):
        warnings.warn("all logged states are identical; the representation is degenerate")
    params = encoder.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_loss, best_params, stale = math.inf, [p.copy() for p in params], 0
    window_loss = 0.0
    for step in range(1, config.max_steps + 1):
        a, c, r = sampler.sample(config.batch_size, rng)
        loss, grads = laplace_grad(encoder, a, c, r, config.beta, config.zeta)
        window_loss += loss
        bc1, bc2 = 1 - b1 ** step, 1 - b2 ** step
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= config.lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        if step % config.check_interval == 0:
            mean = window_loss / config.check_interval
            window_loss = 0.0
            if history is not None:
                history.append((step, mean))
            if mean < best_loss:
                best_loss, best_params, stale = mean, [p.copy() for p in params], 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if config.max_steps >= config.check_interval:
        encoder.set_params(best_params)
    return encoder


def dynamics_awareness(encoder: LaplaceEncoder, states, next_states, rng=None, n: int | None = None) -> float:
    """(sum of random-pair distances - sum of successor distances) / sum of random-pair distances."""
    rng = as_generator(rng)
    states = np.asarray(states, dtype=float)
    next_states = np.asarray(next_states, dtype=float)
    idx = np.arange(len(states)) if n is None else rng.integers(len(states), size=n)
    partners = rng.integers(len(states), size=len(idx))
    phi = encoder(states[idx])
    far = np.linalg.norm(phi - encoder(states[partners]), axis=1).sum()
    near = np.linalg.norm(phi - encoder(next_states[idx]), axis=1).sum()
    if far == 0:
        warnings.warn("dynamics awareness undefined for a constant embedding; reporting 0")
        return 0.0
    return float((far - near) / far)
