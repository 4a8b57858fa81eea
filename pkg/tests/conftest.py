"""Shared fixtures and slow-but-obvious reference implementations."""
from __future__ import annotations

import numpy as np
import pytest

from sgc_influence.datasets import generate_synthetic
from sgc_influence.graph import AttributedGraph, LabeledSplit


def dense_operator(n: int, edges) -> np.ndarray:
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def dense_propagate(n: int, edges, x: np.ndarray, k: int) -> np.ndarray:
    s = dense_operator(n, edges)
    z = np.array(x, dtype=float)
    for _ in range(k):
        z = s @ z
    return z


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_loss(theta, z, y, K, lam, normalizer=None):
    """Mean cross-entropy plus lam/2 ||theta||^2; theta holds [w_c; b_c] per class."""
    n, d = z.shape
    a = np.hstack([z, np.ones((n, 1))])
    Theta = theta.reshape(K, d + 1).T
    logits = a @ Theta
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    ce = lse - logits[np.arange(n), y]
    norm = n if normalizer is None else normalizer
    return ce.sum() / norm + 0.5 * lam * theta @ theta


def ref_grad_hess(theta, z, y, K, lam, normalizer=None):
    """Gradient and Hessian built from explicit Kronecker products."""
    n, d = z.shape
    a = np.hstack([z, np.ones((n, 1))])
    Theta = theta.reshape(K, d + 1).T
    p = softmax(a @ Theta)
    dim = K * (d + 1)
    g = np.zeros(dim)
    h = np.zeros((dim, dim))
    for i in range(n):
        e = np.zeros(K)
        e[y[i]] = 1.0
        g += np.kron(p[i] - e, a[i])
        h += np.kron(np.diag(p[i]) - np.outer(p[i], p[i]), np.outer(a[i], a[i]))
    norm = n if normalizer is None else normalizer
    return g / norm + lam * theta, h / norm + lam * np.eye(dim)


def ref_newton(z, y, K, lam, normalizer=None, tol=1e-13, iters=200):
    """Plain damped Newton with backtracking; independent of the package trainer."""
    theta = np.zeros(K * (z.shape[1] + 1))
    for _ in range(iters):
        g, h = ref_grad_hess(theta, z, y, K, lam, normalizer)
        if np.linalg.norm(g) < tol:
            break
        step = np.linalg.solve(h, g)
        t, f0 = 1.0, ref_loss(theta, z, y, K, lam, normalizer)
        while ref_loss(theta - t * step, z, y, K, lam, normalizer) > f0 - 0.25 * t * (g @ step) and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    return theta


def path3() -> AttributedGraph:
    return AttributedGraph(3, [(0, 1), (1, 2)], np.eye(3))


def random_graph(rng, n: int, p: float, d: int) -> AttributedGraph:
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return AttributedGraph(n, np.stack([iu[keep], ju[keep]], axis=1), rng.normal(size=(n, d)))


def small_instance(seed: int = 0, n_per_block: int = 6, p_in: float = 0.5, p_out: float = 0.05,
                   feature_dim: int = 3, train_frac: float = 0.5):
    ds = generate_synthetic(seed=seed, blocks=2, nodes_per_block=n_per_block, p_in=p_in, p_out=p_out,
                            noise_rate=0.1, feature_dim=feature_dim, train_frac=train_frac, val_frac=0.25)
    return ds.graph, ds.split


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_split(labels, train, val=(), test=(), num_classes=0) -> LabeledSplit:
    return LabeledSplit(np.asarray(labels), list(train), list(val), list(test), num_classes)
