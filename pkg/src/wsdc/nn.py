"""Minimal reverse-mode machinery for fully-connected networks.

Parameters live in a flat dict keyed ``"<prefix>.<layer>.W"`` / ``".b"``.
Each forward call returns a cache that its matching backward call consumes.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("relu", "tanh")


def init_mlp(sizes, rng, prefix):
    """He-style initialization for relu stacks (also fine for tanh at this depth)."""
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.W"] = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        params[f"{prefix}.{i}.b"] = np.zeros(n_out)
    return params


def n_layers(params, prefix):
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(pre, post, kind):
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    return 1.0 - post * post


def mlp_forward(params, prefix, x, activation="relu"):
    """Affine layers with ``activation`` between them; the last layer is linear."""
    L = n_layers(params, prefix)
    cache = []
    h = x
    for i in range(L):
        pre = h @ params[f"{prefix}.{i}.W"] + params[f"{prefix}.{i}.b"]
        post = _act(pre, activation) if i < L - 1 else pre
        cache.append((h, pre, post))
        h = post
    return h, cache


def mlp_backward(params, prefix, cache, dout, activation="relu"):
    """Returns ``(grads, dx)`` for upstream gradient ``dout``."""
    grads = {}
    L = len(cache)
    g = dout
    for i in reversed(range(L)):
        h, pre, post = cache[i]
        if i < L - 1:
            g = g * _act_grad(pre, post, activation)
        grads[f"{prefix}.{i}.W"] = h.T @ g
        grads[f"{prefix}.{i}.b"] = g.sum(axis=0)
        g = g @ params[f"{prefix}.{i}.W"].T
    return grads, g


def softmax_xent(logits, labels):
    """Mean cross-entropy (nats) and its gradient in the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    loss = float(-logp[np.arange(B), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


class Adam:
    """Adam with bias correction; moments keyed like the parameter dict."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr:
                params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
