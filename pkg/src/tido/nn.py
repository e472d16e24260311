"""Dense numeric core: MLPs with exact reverse-mode gradients, losses, Adam.

Everything runs on float64 numpy arrays. Networks are plain multilayer
perceptrons (tanh on hidden layers, identity on the output layer) with
hand-rolled backpropagation, so every gradient can be checked against
central finite differences to tight tolerances. No GPU, no general
autodiff graph: the fixed MLP family is all the downstream training
loops need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12


def _as_array(x, name="array") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def softmax_temp(z, tau: float) -> np.ndarray:
    """Temperature softmax exp(z_i/tau) / sum_j exp(z_j/tau).

    Works on a single logit vector or a batch (softmax over the last
    axis). Max-subtraction keeps the exponentials in range, so outputs
    are always finite and sum to 1 along the last axis.
    """
    if not (isinstance(tau, (int, float, np.floating)) and math.isfinite(float(tau)) and tau > 0):
        raise ValueError(f"temperature must be a positive finite real, got {tau!r}")
    z = _as_array(z, "logits")
    if z.size == 0:
        raise ValueError("softmax_temp: empty logit vector")
    scaled = z / float(tau)
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    """Negative log probability of ``label``, clamped below at 1e-12."""
    p = _as_array(probs, "probs")
    if p.ndim != 1 or p.size == 0:
        raise ValueError("cross_entropy expects a non-empty probability vector")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum():.8f}, not 1")
    label = int(label)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(float(p[label]), PROB_FLOOR)))


def mse(a, b) -> float:
    """Mean squared element difference."""
    a = _as_array(a, "a")
    b = _as_array(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b) -> tuple[float, np.ndarray]:
    """mse(a, b) and its gradient with respect to ``a``."""
    a = _as_array(a, "a")
    b = _as_array(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff**2)), (2.0 / a.size) * diff


def softmax_ce_grad(logits, labels, tau: float = 1.0, total_weight: float | None = None):
    """Fused temperature softmax + cross entropy over a batch.

    loss = sum_i w * ce_i with w = 1/n unless ``total_weight`` overrides
    it (used to average jointly over several batches). Returns the loss
    and its gradient with respect to the logits. Samples whose true-class
    probability hit the 1e-12 clamp sit on the flat part of the clamped
    loss, so their logit gradient is zero.
    """
    z = _as_array(logits, "logits")
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError("softmax_ce_grad expects a (batch, classes) logit matrix")
    y = np.asarray(labels, dtype=np.int64)
    n, k = z.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch {n}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    w = (1.0 / n) if total_weight is None else float(total_weight)
    p = softmax_temp(z, tau)
    rows = np.arange(n)
    py = p[rows, y]
    clamped = py < PROB_FLOOR
    loss = float(w * (-np.log(np.maximum(py, PROB_FLOOR))).sum())
    d = p.copy()
    d[rows, y] -= 1.0
    d *= w / float(tau)
    d[clamped] = 0.0
    return loss, d


@dataclass
class MlpCache:
    """Activations recorded by a forward pass, consumed by backward."""

    version: int
    activations: list


class Mlp:
    """Fixed-architecture fully connected network.

    ``layer_dims`` lists the widths [d_in, h_1, ..., d_out]; hidden
    layers use tanh, the output layer is linear. Weights are drawn as
    N(0, 1/sqrt(fan_in)) from the given seed; ``identity_init`` instead
    builds a single linear layer at the exact identity (square dims
    only), handy for latent-to-latent maps that should start as no-ops.

    ``version`` counts parameter updates; a cache from before an update
    is stale and rejected by :meth:`backward`.
    """

    def __init__(self, layer_dims, seed: int = 0, identity_init: bool = False):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2:
            raise ValueError("need at least an input and an output width")
        if any(d < 0 for d in dims) or any(d == 0 for d in dims[:-1]):
            raise ValueError(f"invalid layer dims {dims}")
        self.dims = dims
        self.version = 0
        if identity_init:
            if len(dims) != 2 or dims[0] != dims[1]:
                raise ValueError("identity_init requires a single square linear layer")
            self.weights = [np.eye(dims[0], dtype=np.float64)]
            self.biases = [np.zeros(dims[1], dtype=np.float64)]
            return
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 / math.sqrt(max(fan_in, 1))
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out, dtype=np.float64))

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self) -> list[np.ndarray]:
        """Live parameter arrays, interleaved [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.dims = list(self.dims)
        new.version = 0
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        a = _as_array(x, "input")
        was_1d = a.ndim == 1
        if was_1d:
            a = a[None, :]
        if a.ndim != 2 or a.shape[1] != self.dims[0]:
            raise ValueError(
                f"input feature dim {a.shape[-1] if a.ndim else '?'} does not match "
                f"first layer width {self.dims[0]}"
            )
        return a, was_1d

    def forward(self, x) -> np.ndarray:
        """Batch forward pass; rows are processed independently."""
        a, was_1d = self._check_input(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = np.tanh(z) if i < last else z
        return a[0] if was_1d else a

    def forward_cached(self, x) -> tuple[np.ndarray, MlpCache]:
        """Forward pass on a (batch, d_in) matrix, keeping activations."""
        a = _as_array(x, "input")
        if a.ndim != 2 or a.shape[1] != self.dims[0]:
            raise ValueError(
                f"input shape {a.shape} does not match (batch, {self.dims[0]})"
            )
        acts = [a]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = np.tanh(z) if i < last else z
            acts.append(a)
        return a, MlpCache(version=self.version, activations=acts)

    def backward(self, cache: MlpCache, upstream) -> tuple[list, np.ndarray]:
        """Reverse-mode pass.

        ``upstream`` is dLoss/dOutput for the batch the cache came from.
        Returns ([(dW, db) per layer], dLoss/dInput).
        """
        if cache.version != self.version:
            raise RuntimeError(
                "stale forward cache: parameters changed since the forward pass"
            )
        acts = cache.activations
        d = np.asarray(upstream, dtype=np.float64)
        if d.shape != acts[-1].shape:
            raise ValueError(
                f"upstream gradient shape {d.shape} does not match output {acts[-1].shape}"
            )
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            grads[i] = (acts[i].T @ d, d.sum(axis=0))
            d = d @ self.weights[i].T
            if i > 0:
                d = d * (1.0 - acts[i] ** 2)  # acts[i] is the tanh output feeding layer i
        return grads, d

    def apply_adam(self, layer_grads, state: "AdamState") -> None:
        """Adam-update all parameters from per-layer (dW, db) gradients."""
        flat = []
        for dw, db in layer_grads:
            flat.append(dw)
            flat.append(db)
        adam_step(self.params(), flat, state)
        self.version += 1

    def widen_output(self, n_new: int, rng: np.random.Generator, keep_last_column_last: bool = False) -> None:
        """Append ``n_new`` output units to the final layer.

        Existing units keep their weights. With ``keep_last_column_last``
        the current final unit (a reserved rejection class) stays at the
        end and new units are inserted just before it.
        """
        if n_new < 0:
            raise ValueError("n_new must be >= 0")
        if n_new == 0:
            return
        w, b = self.weights[-1], self.biases[-1]
        fan_in = w.shape[0]
        new_w = rng.normal(0.0, 1.0 / math.sqrt(max(fan_in, 1)), size=(fan_in, n_new))
        new_b = np.zeros(n_new, dtype=np.float64)
        if keep_last_column_last:
            if w.shape[1] < 1:
                raise ValueError("no reserved final unit to keep last")
            self.weights[-1] = np.concatenate([w[:, :-1], new_w, w[:, -1:]], axis=1)
            self.biases[-1] = np.concatenate([b[:-1], new_b, b[-1:]])
        else:
            self.weights[-1] = np.concatenate([w, new_w], axis=1)
            self.biases[-1] = np.concatenate([b, new_b])
        self.dims[-1] += n_new
        self.version += 1


def standardize_first_layer(m: Mlp, mean, std) -> None:
    """Fold input standardization into the first layer's initialization.

    Rescales weights by 1/std per input feature and centers the biases so
    initial pre-activations are O(1) regardless of the raw input scale;
    without this, far-from-origin inputs start deep in tanh saturation.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (m.dims[0],) or std.shape != (m.dims[0],):
        raise ValueError("mean/std must match the input width")
    if (std <= 0).any():
        raise ValueError("std entries must be positive")
    m.weights[0] = m.weights[0] / std[:, None]
    m.biases[0] = m.biases[0] - mean @ m.weights[0]
    m.version += 1


def near_identity_init(m: Mlp, mean, std, eps: float = 0.05, seed: int = 0) -> None:
    """Initialize a single-hidden-layer square MLP close to the identity map.

    Uses the small-signal linearity of tanh: unit j reads eps*(x_j-mu_j)/std_j
    and the output layer scales it back up, so the net starts as x plus an
    O(eps^2) distortion. Spare hidden units get small random input weights
    and exactly zero output weights, leaving them free for training without
    perturbing the initial map. Requires dims [d, h, d] with h >= d.
    """
    if len(m.dims) != 3 or m.dims[0] != m.dims[2] or m.dims[1] < m.dims[0]:
        raise ValueError("near-identity init needs dims [d, h, d] with h >= d")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    d, h = m.dims[0], m.dims[1]
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (d,) or std.shape != (d,) or (std <= 0).any():
        raise ValueError("mean/std must be positive-scale vectors of the input width")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    w1 = np.zeros((d, h))
    b1 = np.zeros(h)
    for j in range(d):
        w1[j, j] = eps / std[j]
        b1[j] = -eps * mean[j] / std[j]
    if h > d:
        w1[:, d:] = rng.normal(0.0, 0.01 / math.sqrt(d), size=(d, h - d))
    w2 = np.zeros((h, d))
    for j in range(d):
        w2[j, j] = std[j] / eps
    m.weights = [w1, w2]
    m.biases = [b1, mean.copy()]
    m.version += 1


def mlp_forward(m: Mlp, x) -> tuple[np.ndarray, MlpCache]:
    """Forward pass returning (output batch, activation cache)."""
    return m.forward_cached(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def mlp_backward(m: Mlp, cache: MlpCache, upstream) -> tuple[list, np.ndarray]:
    """Parameter gradients and input gradient for a cached forward pass."""
    return m.backward(cache, upstream)


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for one parameter group."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        st = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
        st.first_moment = [np.zeros_like(p) for p in params]
        st.second_moment = [np.zeros_like(p) for p in params]
        return st


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; mutates ``params`` in place.

    ``params`` and ``grads`` are parallel lists of arrays. Moment tensors
    are created lazily on first use and must shape-match thereafter.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("optimizer state does not match parameter group")
    for p, g, m in zip(params, grads, state.first_moment):
        g = np.asarray(g)
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def sum_layer_grads(a, b):
    """Elementwise sum of two per-layer [(dW, db)] gradient lists."""
    if a is None:
        return b
    if b is None:
        return a
    return [(ga[0] + gb[0], ga[1] + gb[1]) for ga, gb in zip(a, b)]


def scale_layer_grads(grads, factor: float):
    return [(dw * factor, db * factor) for dw, db in grads]


def zero_layer_grads(m: Mlp):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(m.weights, m.biases)]


def grads_finite(grads) -> bool:
    return all(np.isfinite(dw).all() and np.isfinite(db).all() for dw, db in grads)
