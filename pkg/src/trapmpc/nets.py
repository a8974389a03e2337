"""Minimal feedforward-network substrate.

Multilayer perceptrons with LeakyReLU hidden activations, exact reverse-mode
gradients computed by hand, and an adaptive-moment (Adam) optimizer. All
math is float64 numpy; sizes here are tiny so precision is cheap.
"""

from __future__ import annotations

import json

import numpy as np


class Mlp:
    """Fully connected net: affine + LeakyReLU per hidden layer, affine output."""

    def __init__(self, widths, slope=0.01, rng=None):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(int(w) for w in widths)
        self.slope = float(slope)
        self.weights = []
        self.biases = []
        rng = rng if rng is not None else np.random.default_rng()
        for fi, fo in zip(self.widths[:-1], self.widths[1:]):
            limit = np.sqrt(6.0 / (fi + fo))
            self.weights.append(rng.uniform(-limit, limit, size=(fi, fo)))
            self.biases.append(np.zeros(fo))

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum((fi + 1) * fo for fi, fo in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {a.shape[-1]} != {self.widths[0]}")
        last = self.n_layers - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W + b
            if l != last:
                a = np.where(a >= 0, a, self.slope * a)
        return a[0] if single else a

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre-activations for backward()."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x[None, :] if single else x
        acts = [a]       # post-activation inputs to each layer
        pre = []         # pre-activations per hidden layer
        last = self.n_layers - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            if l != last:
                pre.append(z)
                a = np.where(z >= 0, z, self.slope * z)
            else:
                a = z
            acts.append(a)
        out = acts[-1][0] if single else acts[-1]
        return out, (acts, pre, single)

    def backward(self, cache, upstream: np.ndarray):
        """Exact gradients of sum(upstream * output) w.r.t. params and input.

        Returns (grads, dinput) where grads is a list of (dW, db) per layer.
        """
        acts, pre, single = cache
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g[None, :]
        grads = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            dW = acts[l].T @ g
            db = g.sum(axis=0)
            grads[l] = (dW, db)
            g = g @ self.weights[l].T
            if l > 0:
                z = pre[l - 1]
                g = g * np.where(z >= 0, 1.0, self.slope)
        return grads, (g[0] if single else g)

    def zero_grads(self):
        return [(np.zeros_like(W), np.zeros_like(b))
                for W, b in zip(self.weights, self.biases)]

    # -- flat parameter views (checkpointing, finite differences) ----------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b])
                               for W, b in zip(self.weights, self.biases)])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        i = 0
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            n = W.size
            self.weights[l] = flat[i:i + n].reshape(W.shape).copy()
            i += n
            self.biases[l] = flat[i:i + b.size].copy()
            i += b.size
        if i != flat.size:
            raise ValueError("flat parameter size mismatch")

    def params(self):
        return list(zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        m = Mlp(self.widths, slope=self.slope, rng=np.random.default_rng(0))
        m.set_flat(self.get_flat())
        return m


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, x, upstream):
    """Convenience wrapper: run forward then reverse-mode on one input."""
    _, cache = net.forward_cached(x)
    return net.backward(cache, upstream)


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        """Update a list of arrays in place given matching gradients."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def net_params_flatlist(nets):
    """All weight/bias arrays of several nets as one flat list (shared refs)."""
    out = []
    for n in nets:
        for W, b in zip(n.weights, n.biases):
            out.append(W)
            out.append(b)
    return out


def grads_flatlist(nets, grads_per_net):
    out = []
    for g in grads_per_net:
        for dW, db in g:
            out.append(dW)
            out.append(db)
    return out


CHECKPOINT_VERSION = 1


def save_mlp(net: Mlp) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "widths": net.widths,
        "slope": net.slope,
        "params": net.get_flat().tolist(),
    }


def load_mlp(d: dict) -> Mlp:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {d.get('version')}")
    net = Mlp(d["widths"], slope=d["slope"], rng=np.random.default_rng(0))
    net.set_flat(np.array(d["params"]))
    return net


def save_mlp_file(net: Mlp, path):
    with open(path, "w") as f:
        json.dump(save_mlp(net), f)


def load_mlp_file(path) -> Mlp:
    with open(path) as f:
        return load_mlp(json.load(f))
