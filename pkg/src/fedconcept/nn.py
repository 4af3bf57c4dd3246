"""Minimal dense-network engine: forward/backward, losses, Adam, DP gradients.

Everything runs in float64. Backward passes require the cache left behind by
the most recent forward on the same batch; caches are per-instance, so a net
must not be shared across threads mid-step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "identity", "sigmoid", "softmax")
MISSING = -1
_TINY = 1e-300


class DimensionError(ValueError):
    """Shape-incompatible input rejected."""


class MissingCacheError(RuntimeError):
    """backward() called without a matching forward() cache."""


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if name == "softmax":
        return _softmax(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_backward(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    """d loss / d pre-activation, given d loss / d post-activation."""
    if name == "identity":
        return da
    if name == "leaky_relu":
        return da * np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return da * a * (1.0 - a)
    if name == "softmax":
        return a * (da - (da * a).sum(axis=1, keepdims=True))
    raise ValueError(f"unknown activation {name!r}")


def softmax_rows_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of a row-wise softmax (used outside DenseNet)."""
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


@dataclass
class ParamVector:
    """Flat parameter values plus the (name, shape) layout they came from."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.size != expected:
            raise DimensionError(f"values size {self.values.size} != layout size {expected}")


def init_weight(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Fan-based uniform init in +-sqrt(6 / (in + out))."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class DenseNet:
    """A stack of affine layers, each followed by a fixed activation."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], activations: list[str]):
        if not (len(weights) == len(biases) == len(activations)):
            raise DimensionError("layer lists must have equal length")
        for i, act in enumerate(activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if weights[i].shape[0] != biases[i].shape[0]:
                raise DimensionError(f"layer {i}: weight rows != bias length")
            if i > 0 and weights[i].shape[1] != weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i}: input dim != previous output dim")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)
        self._cache: dict | None = None

    @classmethod
    def create(cls, dims: list[int], activations: list[str], rng: np.random.Generator) -> "DenseNet":
        """Build a net with layer sizes dims[0] -> dims[1] -> ... -> dims[-1].

        Weights are fan-based uniform; biases are uniform in +-1/sqrt(fan_in)
        so a reinitialized net differs in every parameter almost surely.
        """
        if len(dims) < 2 or len(activations) != len(dims) - 1:
            raise DimensionError("need len(dims) >= 2 and one activation per layer")
        weights, biases = [], []
        for i in range(len(dims) - 1):
            weights.append(init_weight(rng, dims[i + 1], dims[i]))
            if dims[i] > 0:
                bound = 1.0 / np.sqrt(dims[i])
                biases.append(rng.uniform(-bound, bound, size=dims[i + 1]))
            else:
                biases.append(np.zeros(dims[i + 1]))
        return cls(weights, biases, activations)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"expected input [n, {self.n_in}], got {x.shape}")
        pre, post = [], []
        a = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w.T + b
            a = _apply_activation(act, z)
            pre.append(z)
            post.append(a)
        self._cache = {"x": x, "pre": pre, "post": post}
        return a

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> tuple[ParamVector, np.ndarray]:
        """Gradients of sum(upstream * output) w.r.t. params and input.

        Requires a forward() cache for the same batch. Returns the flattened
        parameter gradient and d loss / d input of shape [n, n_in].
        """
        cache = self._cache
        if cache is None or not (cache["x"] is x or np.array_equal(cache["x"], x)):
            raise MissingCacheError("no forward cache for this batch")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache["post"][-1].shape:
            raise DimensionError("upstream gradient shape mismatch")
        grads_w: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        grads_b: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        da = upstream
        for i in reversed(range(len(self.weights))):
            z, a = cache["pre"][i], cache["post"][i]
            dz = _activation_backward(self.activations[i], z, a, da)
            inp = cache["x"] if i == 0 else cache["post"][i - 1]
            grads_w[i] = dz.T @ inp
            grads_b[i] = dz.sum(axis=0)
            da = dz @ self.weights[i]
        return flatten_grads(self, grads_w, grads_b), da

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        entries = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            entries.append((f"w{i}", w.shape))
            entries.append((f"b{i}", b.shape))
        return tuple(entries)


def flatten(net: DenseNet) -> ParamVector:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return ParamVector(np.concatenate(parts) if parts else np.zeros(0), net.layout())


def flatten_grads(net: DenseNet, grads_w: list[np.ndarray], grads_b: list[np.ndarray]) -> ParamVector:
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb.ravel())
    return ParamVector(np.concatenate(parts), net.layout())


def unflatten(net: DenseNet, values: np.ndarray | ParamVector) -> DenseNet:
    """New net with the same shape/activations and parameters from `values`."""
    vec = values.values if isinstance(values, ParamVector) else np.asarray(values, dtype=np.float64)
    if vec.size != flatten(net).values.size:
        raise DimensionError("parameter vector length mismatch")
    out = net.copy()
    pos = 0
    for i, (w, b) in enumerate(zip(out.weights, out.biases)):
        out.weights[i] = vec[pos : pos + w.size].reshape(w.shape).copy()
        pos += w.size
        out.biases[i] = vec[pos : pos + b.size].copy()
        pos += b.size
    return out


def loss_ce(probs: np.ndarray, targets: np.ndarray, missing: int = MISSING) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over rows whose target is not `missing`.

    Returns (loss, d loss / d probs). All-missing batches contribute zero loss
    and a zero gradient (empty-sum convention).
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise DimensionError("probs must be [n, k] and targets [n]")
    observed = targets != missing
    grad = np.zeros_like(probs)
    if not observed.any():
        return 0.0, grad
    obs_targets = targets[observed]
    if obs_targets.min() < 0 or obs_targets.max() >= probs.shape[1]:
        raise DimensionError("target class index out of range")
    rows = np.flatnonzero(observed)
    picked = np.maximum(probs[rows, obs_targets], _TINY)
    loss = float(-np.log(picked).mean())
    grad[rows, obs_targets] = -1.0 / (picked * rows.size)
    return loss, grad


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries, with gradient w.r.t. pred."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((diff**2).mean()), 2.0 * diff / diff.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n_params: int, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update with bias correction; mutates `state`, returns new params."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise DimensionError("parameter/gradient/state length mismatch")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_and_noise(
    per_sample_grads: list[np.ndarray],
    clip_norm: float,
    noise_multiplier: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """DP-SGD gradient aggregation: per-sample l2 clipping, mean, Gaussian noise.

    Each gradient g_i is scaled by min(1, clip_norm / ||g_i||), the scaled
    gradients are averaged, and noise with per-coordinate std
    noise_multiplier * clip_norm / n is added. sigma == 0 skips the draw so
    the RNG stream is untouched.
    """
    if not per_sample_grads:
        raise ValueError("empty gradient list")
    if clip_norm <= 0 or noise_multiplier < 0:
        raise ValueError("need clip_norm > 0 and noise_multiplier >= 0")
    n = len(per_sample_grads)
    total = np.zeros_like(per_sample_grads[0])
    for g in per_sample_grads:
        norm = np.linalg.norm(g)
        total += g * min(1.0, clip_norm / max(norm, _TINY))
    mean = total / n
    if noise_multiplier > 0:
        mean = mean + rng.normal(0.0, noise_multiplier * clip_norm / n, size=mean.shape)
    return mean
