"""Dense neural-network substrate with hand-derived gradients.

Arrays are float32 row-major; reductions that feed losses or statistics
accumulate in float64. There is no computation graph: each layer caches
what its backward pass needs during ``forward`` and exposes parameters and
gradients as name -> ndarray dicts, which keeps the dependency surface at
plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input dimensions disagree with a layer's declared sizes."""


class NumericError(FloatingPointError):
    """A non-finite value reached a place that must stay finite."""


def kaiming_uniform(rng: np.random.Generator, out_dim: int, in_dim: int,
                    dtype=np.float32) -> np.ndarray:
    # gain sqrt(2) for ReLU stacks; bound = gain * sqrt(3 / fan_in)
    bound = np.sqrt(6.0 / in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)


class Linear:
    """Affine map y = x @ W.T + b with cached input for backward."""

    def __init__(self, in_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            self.weight = np.zeros((out_dim, in_dim), dtype=dtype)
            self.bias = np.zeros(out_dim, dtype=dtype)
        else:
            self.weight = kaiming_uniform(rng, out_dim, in_dim, dtype)
            bb = 1.0 / np.sqrt(in_dim)
            self.bias = rng.uniform(-bb, bb, size=out_dim).astype(dtype)
        self._x: np.ndarray | None = None
        self.gweight = np.zeros_like(self.weight)
        self.gbias = np.zeros_like(self.bias)

    def astype(self, dtype) -> "Linear":
        out = Linear(self.in_dim, self.out_dim)
        out.weight = self.weight.astype(dtype)
        out.bias = self.bias.astype(dtype)
        out.gweight = np.zeros_like(out.weight)
        out.gbias = np.zeros_like(out.bias)
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear expects [B x {self.in_dim}], got {x.shape}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward before forward")
        self.gweight = dout.T @ self._x
        self.gbias = dout.sum(axis=0)
        return dout @ self.weight


class BatchNorm:
    """1-D batch normalization over the leading (row) axis.

    Train mode normalizes with batch statistics (biased variance) and
    updates the running estimates; eval mode is a fixed affine map of the
    running statistics. Train mode refuses batches of size 1, whose
    variance is undefined.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim, dtype=dtype)
        self.beta = np.zeros(dim, dtype=dtype)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache: tuple | None = None

    def astype(self, dtype) -> "BatchNorm":
        out = BatchNorm(self.dim, self.momentum, self.eps, dtype=dtype)
        out.gamma = self.gamma.astype(dtype)
        out.beta = self.beta.astype(dtype)
        out.running_mean = self.running_mean.astype(dtype)
        out.running_var = self.running_var.astype(dtype)
        return out

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm expects [B x {self.dim}], got {x.shape}")
        if train:
            n = x.shape[0]
            if n < 2:
                raise ShapeError("train-mode batchnorm needs batch size >= 2")
            mu = x.mean(axis=0, dtype=np.float64)
            var = x.var(axis=0, dtype=np.float64)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = ((x - mu) * inv).astype(x.dtype)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu).astype(self.running_mean.dtype)
            # running variance keeps the unbiased estimate
            self.running_var = ((1 - m) * self.running_var
                                + m * var * n / (n - 1)).astype(self.running_var.dtype)
            self._cache = ("train", xhat, inv.astype(x.dtype))
        else:
            inv = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
            inv = inv.astype(x.dtype)
            xhat = (x - self.running_mean) * inv
            self._cache = ("eval", xhat, inv)
        return self.gamma * xhat + self.beta

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before forward")
        mode, xhat, inv = self._cache
        self.gbeta = dout.sum(axis=0)
        if mode == "eval":
            # eval output is a fixed affine map of x
            self.ggamma = (dout * xhat).sum(axis=0)
            return dout * (self.gamma * inv)
        n = dout.shape[0]
        self.ggamma = (dout * xhat).sum(axis=0)
        dxhat = dout * self.gamma
        dx = (inv / n) * (n * dxhat
                          - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
        return dx.astype(dout.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator,
            train: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout; returns (output, keep mask). Eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p)
    return x * mask / (1.0 - p), mask


def cross_entropy(logits: np.ndarray,
                  labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross entropy and its gradient w.r.t. the logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B x C], got {logits.shape}")
    b, c = logits.shape
    if b == 0:
        raise ValueError("cross entropy over an empty batch")
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError("labels must align with the batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label outside [0, num_classes)")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -float(np.mean(logp[np.arange(b), labels], dtype=np.float64))
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule_free: bool = False


class Adam:
    """Adam with decoupled weight decay, plus a schedule-free variant.

    Parameters are registered as name -> array and updated in place. In
    schedule-free mode the optimizer keeps a base iterate z and an
    averaged iterate x per parameter; the arrays visible to the model hold
    the interpolated gradient-evaluation point during training, and
    ``swap_in_eval_params`` / ``swap_in_train_params`` switch between the
    averaged and training views. In plain mode both swaps are no-ops.
    """

    def __init__(self, params: dict[str, np.ndarray], cfg: AdamConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        if cfg.schedule_free:
            self.z = {k: v.copy() for k, v in params.items()}
            self.x = {k: v.copy() for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name in self.params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
        self.t += 1
        cfg = self.cfg
        if cfg.schedule_free:
            self._step_schedule_free(grads)
            return
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m += (1 - cfg.beta1) * (g - m)
            v += (1 - cfg.beta2) * (g * g - v)
            if cfg.weight_decay:
                p -= (cfg.lr * cfg.weight_decay) * p
            p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def _step_schedule_free(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        bc2 = 1.0 - cfg.beta2 ** self.t
        c = 1.0 / (self.t + 1)
        for name, p in self.params.items():
            g = grads[name]
            v = self.v[name]
            v += (1 - cfg.beta2) * (g * g - v)
            denom = np.sqrt(v / bc2) + cfg.eps
            z = self.z[name]
            z -= cfg.lr * g / denom
            if cfg.weight_decay:
                z -= (cfg.lr * cfg.weight_decay) * p  # decay at the eval point y
            x = self.x[name]
            x += c * (z - x)
            p[...] = (1 - cfg.beta1) * z + cfg.beta1 * x

    def swap_in_eval_params(self) -> None:
        if self.cfg.schedule_free:
            for name, p in self.params.items():
                p[...] = self.x[name]

    def swap_in_train_params(self) -> None:
        if self.cfg.schedule_free:
            for name, p in self.params.items():
                p[...] = (1 - self.cfg.beta1) * self.z[name] \
                    + self.cfg.beta1 * self.x[name]


def gradcheck(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              h: float = 1e-3, max_coords: int = 0,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter
    values; it must be deterministic (dropout off, batchnorm in eval).
    ``max_coords`` > 0 subsamples coordinates per parameter for large
    models.
    """
    worst = 0.0
    for name, p in params.items():
        g = grads[name]
        flat = p.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = g.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            rel = abs(num - gflat[i]) / max(1.0, abs(num), abs(gflat[i]))
            worst = max(worst, float(rel))
    return worst
