"""Differentiable building blocks with hand-wired backward passes.

Layers cache whatever the backward pass needs during forward; backward is
only valid for the most recent forward. Gradients accumulate into
Parameter.grad so shared blocks can receive multiple contributions; call
zero_grads() once per optimizer step. All math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, ShapeMismatch

TRAIN_MODE = "TRAIN"
INFER_MODE = "INFER"


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class DenseLayer:
    """Affine map Y = X W^T + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "dense"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = Parameter(f"{name}.W", he_uniform(rng, (out_dim, in_dim), in_dim))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim))
        self._x = None

    @property
    def params(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, X: np.ndarray) -> np.ndarray:
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ShapeMismatch(f"{self.W.name}: expected (B, {self.in_dim}), got {X.shape}")
        self._x = X
        return X @ self.W.value.T + self.b.value

    def backward(self, dY: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ShapeMismatch("backward before forward")
        self.W.grad += dY.T @ self._x
        self.b.grad += dY.sum(axis=0)
        return dY @ self.W.value


class ReluLayer:
    def __init__(self):
        self._mask = None

    params: list[Parameter] = []

    def forward(self, X: np.ndarray) -> np.ndarray:
        self._mask = X > 0
        return X * self._mask

    def backward(self, dY: np.ndarray) -> np.ndarray:
        return dY * self._mask


class BatchNormLayer:
    """Per-feature batch normalization with running statistics.

    TRAIN normalizes by batch moments (batch size >= 2) and updates the
    running estimates; INFER uses the running estimates only.
    """

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._cache = None

    @property
    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, X: np.ndarray, mode: str) -> np.ndarray:
        if mode == TRAIN_MODE:
            if X.shape[0] < 2:
                raise BatchTooSmall("batchnorm needs batch >= 2 in TRAIN mode")
            mu = X.mean(axis=0)
            var = X.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (X - mu) * inv_std
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            self._cache = (xhat, inv_std, TRAIN_MODE)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (X - self.running_mean) * inv_std
            self._cache = (xhat, inv_std, INFER_MODE)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dY: np.ndarray) -> np.ndarray:
        xhat, inv_std, mode = self._cache
        self.gamma.grad += (dY * xhat).sum(axis=0)
        self.beta.grad += dY.sum(axis=0)
        dxhat = dY * self.gamma.value
        if mode == INFER_MODE:
            return dxhat * inv_std
        n = dY.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


class DropoutLayer:
    """Inverted dropout: survivors scale by 1/(1-rate); INFER is identity."""

    def __init__(self, rate: float):
        if not (0.0 <= rate < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    params: list[Parameter] = []

    def forward(
        self,
        X: np.ndarray,
        mode: str,
        rng: np.random.Generator | None = None,
        mask: np.ndarray | None = None,
    ) -> np.ndarray:
        if mode != TRAIN_MODE or self.rate == 0.0:
            self._mask = None
            return X
        if mask is None:
            mask = rng.random(X.shape) >= self.rate
        self._mask = mask
        return X * mask / (1.0 - self.rate)

    def backward(self, dY: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dY
        return dY * self._mask / (1.0 - self.rate)


# -- softmax / loss -----------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax: dz = p * (dp - sum(dp * p))."""
    inner = (dp * p).sum(axis=axis, keepdims=True)
    return p * (dp - inner)


def cross_entropy(p: np.ndarray, target_index: int) -> tuple[float, np.ndarray]:
    """Loss -ln p[target] and its combined softmax+CE gradient with
    respect to the logits, p - one_hot(target)."""
    p = np.asarray(p, dtype=np.float64)
    loss = -np.log(max(p[target_index], 1e-300))
    grad = p.copy()
    grad[target_index] -= 1.0
    return float(loss), grad


# -- cross attention ------------------------------------------------------

class AttentionBlock:
    """Single-head scaled dot-product cross attention.

    Queries and key/values are projected to a shared dimension d_a. Inputs
    are pooled vectors, i.e. length-1 token sequences, where the softmax is
    constant and the block degenerates to a gated value projection; a
    (B, T, dim) key/value tensor exercises the general path.
    """

    def __init__(self, query_dim: int, kv_dim: int, d_a: int, rng: np.random.Generator,
                 name: str = "attn"):
        self.query_dim = query_dim
        self.kv_dim = kv_dim
        self.d_a = d_a
        self.scale = 1.0 / np.sqrt(d_a)
        self.W_q = Parameter(f"{name}.W_q", he_uniform(rng, (d_a, query_dim), query_dim))
        self.W_k = Parameter(f"{name}.W_k", he_uniform(rng, (d_a, kv_dim), kv_dim))
        self.W_v = Parameter(f"{name}.W_v", he_uniform(rng, (d_a, kv_dim), kv_dim))
        self._cache = None

    @property
    def params(self) -> list[Parameter]:
        return [self.W_q, self.W_k, self.W_v]

    def forward(self, x_q: np.ndarray, x_kv: np.ndarray) -> np.ndarray:
        if x_q.ndim != 2 or x_q.shape[1] != self.query_dim:
            raise ShapeMismatch(f"query: expected (B, {self.query_dim}), got {x_q.shape}")
        squeeze = x_kv.ndim == 2
        if squeeze:
            x_kv = x_kv[:, None, :]
        if x_kv.shape[2] != self.kv_dim:
            raise ShapeMismatch(f"key/value: expected (..., {self.kv_dim}), got {x_kv.shape}")
        q = x_q @ self.W_q.value.T                      # (B, d_a)
        k = x_kv @ self.W_k.value.T                     # (B, T, d_a)
        v = x_kv @ self.W_v.value.T                     # (B, T, d_a)
        scores = np.einsum("bd,btd->bt", q, k) * self.scale
        attn = softmax(scores, axis=-1)
        out = np.einsum("bt,btd->bd", attn, v)
        self._cache = (x_q, x_kv, q, k, v, attn)
        return out

    def attention_weights(self) -> np.ndarray:
        return self._cache[5]

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x_q, x_kv, q, k, v, attn = self._cache
        d_attn = np.einsum("bd,btd->bt", d_out, v)
        d_v = attn[:, :, None] * d_out[:, None, :]
        d_scores = softmax_backward(attn, d_attn, axis=-1) * self.scale
        d_q = np.einsum("bt,btd->bd", d_scores, k)
        d_k = d_scores[:, :, None] * q[:, None, :]
        self.W_q.grad += d_q.T @ x_q
        self.W_k.grad += np.einsum("bta,btk->ak", d_k, x_kv)
        self.W_v.grad += np.einsum("bta,btk->ak", d_v, x_kv)
        d_xq = d_q @ self.W_q.value
        d_xkv = d_k @ self.W_k.value + d_v @ self.W_v.value
        return d_xq, d_xkv


# -- Adam -------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over an ordered parameter list."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- finite-difference oracle ------------------------------------------------

def grad_check(loss_fn, params: list[Parameter], h: float = 1e-5) -> dict:
    """Compare analytic gradients against central differences.

    Callers must have populated param.grad for the current loss before
    calling. Relative error per element is |a - n| / max(|a|, |n|, 1e-6);
    the floor sits above the central-difference noise scale (~eps/h), so
    coordinates whose true derivative is structurally zero (e.g. a bias
    feeding batchnorm) do not read as spurious mismatches.
    Returns the max error and a per-parameter breakdown.
    """
    report = {}
    worst = 0.0
    for p in params:
        analytic = p.grad
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        err = float((np.abs(analytic - numeric) / denom).max()) if flat.size else 0.0
        report[p.name] = err
        worst = max(worst, err)
    return {"max_rel_err": worst, "per_param": report}
