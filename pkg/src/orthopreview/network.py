"""Residual code-difference MLP: Linear -> BatchNorm -> ReLU -> Dropout -> Linear.

Forward and backward passes are written out by hand; parameters live in
plain numpy arrays so checkpoints are a flat list of floats.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from os import PathLike

import numpy as np

BN_EPS = 1e-5
PARAM_ORDER = ("W1", "b1", "gamma", "beta", "running_mean", "running_var", "W2", "b2")
TRAINABLE = ("W1", "b1", "gamma", "beta", "W2", "b2")


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def n_modes(self):
        return self.W1.shape[1]

    @property
    def hidden(self):
        return self.W1.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(*(getattr(self, f.name).copy() for f in fields(self)))

    def check(self):
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise ValueError(f"parameter {f.name} is not finite")
        if np.any(self.running_var <= 0):
            raise ValueError("running variance must be positive")


def init_params(n_modes, hidden=100, rng=None) -> MlpParams:
    """Glorot-uniform first layer; the output layer starts at zero so the
    predictor begins as the identity map."""
    rng = np.random.default_rng(rng)
    lim = np.sqrt(6.0 / (n_modes + hidden))
    return MlpParams(
        W1=rng.uniform(-lim, lim, (hidden, n_modes)),
        b1=np.zeros(hidden),
        gamma=np.ones(hidden),
        beta=np.zeros(hidden),
        running_mean=np.zeros(hidden),
        running_var=np.ones(hidden),
        W2=np.zeros((n_modes, hidden)),
        b2=np.zeros(n_modes),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    pre_relu: np.ndarray
    mask: np.ndarray | None
    hidden: np.ndarray
    batch_stats: bool
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    train: bool = True


def forward(params: MlpParams, codes, mode="eval", rng=None, dropout=0.5):
    """Code difference for a batch of codes (b, K). Returns ``(delta, cache)``.

    Train mode normalises with batch statistics (running statistics when
    the batch holds a single sample) and applies inverted dropout.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    z = x @ params.W1.T + params.b1
    train = mode == "train"
    batch_stats = train and len(x) > 1
    if batch_stats:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    y = params.gamma * xhat + params.beta
    h = np.maximum(y, 0.0)
    mask = None
    if train and dropout > 0.0:
        rng = np.random.default_rng(rng)
        keep = 1.0 - dropout
        mask = (rng.random(h.shape) < keep) / keep if keep > 0 else np.zeros_like(h)
        h = h * mask
    delta = h @ params.W2.T + params.b2
    cache = ForwardCache(x, xhat, inv_std, y, mask, h, batch_stats,
                         mean if batch_stats else None, var if batch_stats else None, train)
    return delta, cache


def backward(params: MlpParams, cache: ForwardCache, grad_delta):
    """Gradients of a scalar loss wrt every trainable parameter and the input codes."""
    if not cache.train:
        raise ValueError("backward needs a cache from a train-mode forward pass")
    g = np.atleast_2d(np.asarray(grad_delta, dtype=np.float64))
    grads = {"W2": g.T @ cache.hidden, "b2": g.sum(axis=0)}
    dh = g @ params.W2
    if cache.mask is not None:
        dh = dh * cache.mask
    dy = dh * (cache.pre_relu > 0.0)
    grads["gamma"] = (dy * cache.xhat).sum(axis=0)
    grads["beta"] = dy.sum(axis=0)
    dxhat = dy * params.gamma
    if cache.batch_stats:
        n = len(dxhat)
        dz = (cache.inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0)
        )
    else:
        dz = dxhat * cache.inv_std
    grads["W1"] = dz.T @ cache.x
    grads["b1"] = dz.sum(axis=0)
    return grads, dz @ params.W1


def predict_codes(params: MlpParams, codes):
    """Residual prediction: input code plus the eval-mode code difference."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    return codes + forward(params, codes, "eval")[0]


def update_running_stats(params: MlpParams, cache: ForwardCache, momentum=0.1):
    if not cache.batch_stats:
        return
    n = len(cache.x)
    unbiased = cache.batch_var * n / (n - 1)
    params.running_mean[:] = (1.0 - momentum) * params.running_mean + momentum * cache.batch_mean
    params.running_var[:] = (1.0 - momentum) * params.running_var + momentum * unbiased


class Adam:
    def __init__(self, params: MlpParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(getattr(params, k)) for k in TRAINABLE}
        self.v = {k: np.zeros_like(getattr(params, k)) for k in TRAINABLE}
        self.t = 0

    def step(self, params: MlpParams, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in TRAINABLE:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p = getattr(params, k)
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: MlpParams):
        pass

    def step(self, params: MlpParams, grads, lr):
        for k in TRAINABLE:
            getattr(params, k)[...] -= lr * grads[k]


def save_params(params: MlpParams, path: str | PathLike) -> None:
    """Text checkpoint: ``MLP1 K hidden`` then one parameter per line in fixed order."""
    lines = [f"MLP1 {params.n_modes} {params.hidden}\n"]
    for name in PARAM_ORDER:
        vals = getattr(params, name).ravel().tolist()
        lines.append(f"{name} " + " ".join(repr(float(v)) for v in vals) + "\n")
    with open(path, "w") as fh:
        fh.write("".join(lines))


def load_params(path: str | PathLike) -> MlpParams:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != "MLP1":
        raise ValueError(f"{path}: not an MLP1 checkpoint")
    k, hidden = int(head[1]), int(head[2])
    shapes = {"W1": (hidden, k), "W2": (k, hidden), "b2": (k,)}
    vals = {}
    for line in lines[1:]:
        name, *nums = line.split()
        vals[name] = np.array([float(x) for x in nums]).reshape(shapes.get(name, (hidden,)))
    missing = [n for n in PARAM_ORDER if n not in vals]
    if missing:
        raise ValueError(f"{path}: missing parameters {missing}")
    return MlpParams(**{n: vals[n] for n in PARAM_ORDER})
