"""A small dense-network toolkit in numpy (float64).

Only what the GAN and the open-set classifier need: affine layers, ReLU, batch
normalization, RMSProp, weight clipping, a finite-difference gradient checker and
a JSON-friendly serialization. Gradients accumulate into ``layer.grads`` until
``zero_grad`` is called, which lets a network be used twice in one update (the
generator sees both encoded and prior latents).
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator

import numpy as np

from powerprof.errors import DataError

NET_FORMAT_VERSION = 1


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in, self.n_out = n_in, n_out
        if rng is None:
            W = np.zeros((n_out, n_in))
        else:
            limit = np.sqrt(6.0 / n_in)
            W = rng.uniform(-limit, limit, size=(n_out, n_in))
        self.params = {"W": W, "b": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x, training=False, update_stats=True):
        W, b = self.params["W"], self.params["b"]
        if training:
            self._x = x
            return x @ W.T + b
        # one matrix-vector product per row: a batched product may round a
        # row differently depending on how many rows travel with it
        out = np.empty((len(x), self.n_out))
        for i, row in enumerate(x):
            out[i] = W @ row
        return out + b

    def backward(self, g):
        x = self._x
        self._x = None
        self.grads["W"] += g.T @ x
        self.grads["b"] += g.sum(axis=0)
        return g @ self.params["W"]


class ReLU:
    kind = "relu"

    def __init__(self, dim: int):
        self.n_in = self.n_out = dim
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._mask = None

    def forward(self, x, training=False, update_stats=True):
        mask = x > 0
        if training:
            self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, g):
        mask = self._mask
        self._mask = None
        return np.where(mask, g, 0.0)


class BatchNorm:
    """Batch normalization over the batch axis.

    Training mode normalizes with the (biased) batch variance and, when
    ``update_stats`` is set, folds the batch statistics into the running
    estimates: ``running = momentum * running + (1 - momentum) * batch``.
    """

    kind = "batchnorm"

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        self.n_in = self.n_out = dim
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(dim), "beta": np.zeros(dim)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._cache = None

    def forward(self, x, training=False, update_stats=True):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            return gamma * xhat + beta
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std)
        if update_stats:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu
            self.running_var = m * self.running_var + (1 - m) * var
        return gamma * xhat + beta

    def backward(self, g):
        xhat, inv_std = self._cache
        self._cache = None
        n = g.shape[0]
        self.grads["gamma"] += (g * xhat).sum(axis=0)
        self.grads["beta"] += g.sum(axis=0)
        gx = g * self.params["gamma"]
        return (inv_std / n) * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))


class Network:
    """An ordered chain of layers."""

    def __init__(self, layers: list):
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer dims do not chain: {a.kind} out {a.n_out} -> {b.kind} in {b.n_in}")
        self.layers = layers
        self._has_cache = False

    @classmethod
    def mlp(
        cls,
        dims: list[int],
        rng: np.random.Generator,
        batchnorm: bool = False,
        momentum: float = 0.9,
        eps: float = 1e-5,
    ) -> "Network":
        """Dense layers over ``dims`` with ReLU (and optionally batchnorm) between them."""
        layers: list = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            layers.append(Dense(a, b, rng))
            if i < len(dims) - 2:
                if batchnorm:
                    layers.append(BatchNorm(b, momentum, eps))
                layers.append(ReLU(b))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].n_out

    def forward(self, x, training: bool = False, update_stats: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DataError(f"dimension mismatch: network expects width {self.in_dim}, got shape {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, training, update_stats)
        self._has_cache = training
        return x

    def __call__(self, x):
        return self.forward(x, training=False)

    def backward(self, g):
        if not self._has_cache:
            raise RuntimeError("backward called without a preceding training-mode forward pass")
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._has_cache = False
        return g

    def parameters(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for layer in self.layers:
            for k in layer.params:
                yield layer.params[k], layer.grads[k]

    def zero_grad(self) -> None:
        for _, g in self.parameters():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(p.size for p, _ in self.parameters())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p, _ in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            entry = {
                "kind": layer.kind,
                "dims": [layer.n_in, layer.n_out],
                "params": {k: v.tolist() for k, v in layer.params.items()},
            }
            if isinstance(layer, BatchNorm):
                entry["momentum"] = layer.momentum
                entry["eps"] = layer.eps
                entry["buffers"] = {
                    "running_mean": layer.running_mean.tolist(),
                    "running_var": layer.running_var.tolist(),
                }
            layers.append(entry)
        return {"version": NET_FORMAT_VERSION, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("version") != NET_FORMAT_VERSION:
            raise DataError(f"unsupported version {d.get('version')}")
        layers: list = []
        for entry in d["layers"]:
            n_in, n_out = entry["dims"]
            kind = entry["kind"]
            if kind == "dense":
                layer = Dense(n_in, n_out)
            elif kind == "relu":
                layer = ReLU(n_in)
            elif kind == "batchnorm":
                layer = BatchNorm(n_in, entry["momentum"], entry["eps"])
                layer.running_mean = np.array(entry["buffers"]["running_mean"], dtype=np.float64)
                layer.running_var = np.array(entry["buffers"]["running_var"], dtype=np.float64)
            else:
                raise DataError(f"unknown layer kind {kind!r}")
            for k, v in entry["params"].items():
                layer.params[k] = np.array(v, dtype=np.float64).reshape(layer.params[k].shape)
                layer.grads[k] = np.zeros_like(layer.params[k])
            layers.append(layer)
        return cls(layers)


class RMSProp:
    """s <- rho*s + (1-rho)*g^2 ;  p <- p - lr * g / (sqrt(s) + eps)."""

    def __init__(self, lr: float = 5e-5, rho: float = 0.9, eps: float = 1e-8):
        if lr <= 0 or not 0 < rho < 1:
            raise ValueError("RMSProp needs lr > 0 and 0 < rho < 1")
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state: list[np.ndarray] = []

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.state:
            self.state = [np.zeros_like(p) for p in params]
        for p, g, s in zip(params, grads, self.state):
            if p.shape != g.shape:
                raise ValueError("parameter/gradient shape mismatch")
            s *= self.rho
            s += (1 - self.rho) * g * g
            p -= self.lr * g / (np.sqrt(s) + self.eps)

    def step_networks(self, nets: list[Network]) -> None:
        params, grads = [], []
        for net in nets:
            for p, g in net.parameters():
                params.append(p)
                grads.append(g)
        self.step(params, grads)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps}


def clip_weights(net: Network, c: float) -> None:
    for p, _ in net.parameters():
        np.clip(p, -c, c, out=p)


def projection_loss(weights: np.ndarray) -> Callable:
    """Loss ``sum(out * weights)``; a generic scalar objective for gradient checks."""

    def loss(out):
        return float((out * weights).sum()), weights

    return loss


def grad_check(
    net: Network,
    loss_fn: Callable,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    h: float = 1e-4,
    max_params: int = 1000,
    floor: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn(out) -> (loss, dloss/dout)``. The forward passes run in training
    mode without touching batchnorm running statistics. Up to ``max_params``
    entries are sampled from the parameters plus the input batch. Relative error
    is ``|a - n| / max(|a| + |n|, floor)``; ``floor`` sits well above the
    ~1e-10 roundoff of a central difference at h=1e-4, so exactly-zero
    gradients (a bias feeding batchnorm) do not register as failures. Entries
    whose perturbation flips a ReLU mask straddle a kink and are skipped.
    """
    rng = rng or np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    relus = [layer for layer in net.layers if isinstance(layer, ReLU)]

    def f():
        out = net.forward(x, training=True, update_stats=False)
        masks = [layer._mask for layer in relus]
        return loss_fn(out)[0], masks

    net.zero_grad()
    out = net.forward(x, training=True, update_stats=False)
    base_masks = [layer._mask.copy() for layer in relus]
    _, dout = loss_fn(out)
    gx = net.backward(dout)
    analytic = [g.copy() for _, g in net.parameters()]
    net.zero_grad()

    targets = [(p, a) for (p, _), a in zip(net.parameters(), analytic)] + [(x, gx)]
    sizes = np.array([p.size for p, _ in targets])
    total = int(sizes.sum())
    picks = np.arange(total) if total <= max_params else np.sort(rng.choice(total, max_params, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in picks:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, a = targets[t]
        idx = np.unravel_index(flat - offsets[t], p.shape)
        old = p[idx]
        p[idx] = old + h
        lp, mp = f()
        p[idx] = old - h
        lm, mm = f()
        p[idx] = old
        if any((m1 != m0).any() or (m2 != m0).any() for m1, m2, m0 in zip(mp, mm, base_masks)):
            continue
        num = (lp - lm) / (2 * h)
        ana = a[idx]
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), floor))
    return worst
