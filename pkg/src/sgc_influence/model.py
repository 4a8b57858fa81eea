"""L2-regularized softmax regression on propagated features (the SGC head).

Parameters are kept as a ``(D + 1) x K`` matrix ``Theta`` whose first ``D``
rows are ``W`` and whose last row is ``b``. The flat vector ``theta`` is
``Theta`` read column by column, i.e. for each class ``c`` the block
``[W[:, c], b[c]]``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.special import log_softmax, softmax

from .errors import NonConvergence, SolverStall, ValidationError

log = logging.getLogger(__name__)

FLATTEN_ORDER = "class-major: theta[c*(D+1):(c+1)*(D+1)] = [W[:, c], b[c]]"
DENSE_NEWTON_LIMIT = 3000


@dataclass(frozen=True)
class ModelParams:
    W: np.ndarray
    b: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([self.W, self.b[None, :]])

    @property
    def theta(self) -> np.ndarray:
        return self.matrix.ravel(order="F")

    @classmethod
    def from_theta(cls, theta, feature_dim: int, num_classes: int) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != (feature_dim + 1) * num_classes:
            raise ValueError(f"theta has {theta.size} entries, expected "
                             f"{(feature_dim + 1) * num_classes}")
        mat = theta.reshape(feature_dim + 1, num_classes, order="F")
        return cls(mat[:-1].copy(), mat[-1].copy())

    @classmethod
    def zeros(cls, feature_dim: int, num_classes: int) -> "ModelParams":
        return cls(np.zeros((feature_dim, num_classes)), np.zeros(num_classes))


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    grad_tol: float = 1e-8
    max_iters: int = 100

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be > 0")
        if not self.grad_tol > 0:
            raise ValidationError("grad_tol must be > 0")


def augment(z: np.ndarray) -> np.ndarray:
    """Append the constant bias coordinate: ``a = [z; 1]``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return np.hstack([z, np.ones((z.shape[0], 1))])


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _mat(theta: np.ndarray, dim: int, num_classes: int) -> np.ndarray:
    return np.asarray(theta, dtype=np.float64).reshape(dim, num_classes, order="F")


def per_sample_gradients(theta, z, y, num_classes: int) -> np.ndarray:
    """Rows are ``vec((p - e_y) outer a)`` for each sample, in theta order."""
    a = augment(z)
    mat = _mat(theta, a.shape[1], num_classes)
    r = softmax(a @ mat, axis=1) - one_hot(y, num_classes)
    # per-sample outer product a r^T, flattened column-major
    return np.einsum("nd,nc->ncd", a, r).reshape(a.shape[0], -1)


def sample_gradient(params: ModelParams, z, y: int) -> np.ndarray:
    """Gradient of softmax cross-entropy at a single ``(z, y)``."""
    return per_sample_gradients(params.theta, np.reshape(z, (1, -1)), [y], params.num_classes)[0]


def cross_entropy(theta, z, y, num_classes: int) -> np.ndarray:
    a = augment(z)
    logp = log_softmax(a @ _mat(theta, a.shape[1], num_classes), axis=1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    return -logp[np.arange(y.size), y]


class Objective:
    """``(1/N) sum_i w_i l(z_i, y_i) + (lam/2) ||theta||^2``.

    ``weights`` defaults to all ones and ``normalizer`` to the number of
    samples; both exist so that downweighted or reduced retraining problems
    share the exact code path of the original fit.
    """

    def __init__(self, z, y, num_classes: int, lam: float, weights=None, normalizer=None):
        self.a = augment(z)
        self.y = np.asarray(y, dtype=np.int64).reshape(-1)
        self.num_classes = int(num_classes)
        self.lam = float(lam)
        self.onehot = one_hot(self.y, self.num_classes)
        n = self.a.shape[0]
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        self.normalizer = float(n if normalizer is None else normalizer)

    @property
    def dim(self) -> int:
        return self.a.shape[1] * self.num_classes

    def _probs(self, theta) -> np.ndarray:
        return softmax(self.a @ _mat(theta, self.a.shape[1], self.num_classes), axis=1)

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        logp = log_softmax(self.a @ _mat(theta, self.a.shape[1], self.num_classes), axis=1)
        nll = -logp[np.arange(self.y.size), self.y]
        return float(self.weights @ nll) / self.normalizer + 0.5 * self.lam * float(theta @ theta)

    def data_grad(self, theta) -> np.ndarray:
        r = (self._probs(theta) - self.onehot) * self.weights[:, None]
        return (self.a.T @ r).ravel(order="F") / self.normalizer

    def grad(self, theta) -> np.ndarray:
        return self.data_grad(theta) + self.lam * np.asarray(theta, dtype=np.float64)

    def data_hvp(self, theta, v, probs=None) -> np.ndarray:
        p = self._probs(theta) if probs is None else probs
        vm = _mat(v, self.a.shape[1], self.num_classes)
        u = self.a @ vm
        # (diag(p) - p p^T) u per sample, via the factored form
        w = p * (u - np.sum(p * u, axis=1, keepdims=True))
        w *= self.weights[:, None]
        return (self.a.T @ w).ravel(order="F") / self.normalizer

    def hvp(self, theta, v, probs=None) -> np.ndarray:
        return self.data_hvp(theta, v, probs) + self.lam * np.asarray(v, dtype=np.float64)

    def hessian(self, theta) -> np.ndarray:
        """Dense Hessian; only sensible for a few thousand parameters."""
        p = self._probs(theta)
        dim_a, k = self.a.shape[1], self.num_classes
        h = np.zeros((self.dim, self.dim))
        scale = self.weights / self.normalizer
        for c in range(k):
            for d in range(c, k):
                coef = p[:, c] * ((c == d) - p[:, d]) * scale
                block = self.a.T @ (self.a * coef[:, None])
                h[c * dim_a:(c + 1) * dim_a, d * dim_a:(d + 1) * dim_a] = block
                if d != c:
                    h[d * dim_a:(d + 1) * dim_a, c * dim_a:(c + 1) * dim_a] = block.T
        h[np.diag_indices_from(h)] += self.lam
        return h


def conjugate_gradient(matvec, g, tol: float = 1e-10, max_iters: int | None = None) -> np.ndarray:
    """Solve ``M x = g`` for symmetric positive-definite ``M`` given as a matvec.

    Stops when ``||M x - g|| <= tol * ||g||`` (checked on the true residual);
    raises :class:`SolverStall` if that is not reached.
    """
    g = np.asarray(g, dtype=np.float64)
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        return np.zeros_like(g)
    max_iters = 10 * g.size if max_iters is None else max_iters
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rs = r @ r
    target = tol * gnorm
    for it in range(max_iters):
        mp = matvec(p)
        alpha = rs / (p @ mp)
        x += alpha * p
        r -= alpha * mp
        rs_new = r @ r
        if np.sqrt(rs_new) <= target:
            # recurrence residual drifts; confirm against the true one
            r = g - matvec(x)
            rs_new = r @ r
            if np.sqrt(rs_new) <= target:
                return x
            p = r.copy()
            rs = rs_new
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new
    res = np.linalg.norm(g - matvec(x)) / gnorm
    raise SolverStall(f"CG stopped at relative residual {res:.3e} after {max_iters} iterations")


@dataclass(frozen=True, eq=False)
class SgcModel:
    """A fitted SGC head together with the training data it was fitted on."""

    k: int
    config: TrainConfig
    params: ModelParams
    z_train: np.ndarray = field(repr=False)
    y_train: np.ndarray = field(repr=False)
    iterations: int = 0
    grad_norm: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.params.num_classes

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @property
    def num_train(self) -> int:
        return self.z_train.shape[0]

    @property
    def lam(self) -> float:
        return self.config.lam

    def objective(self) -> Objective:
        return Objective(self.z_train, self.y_train, self.num_classes, self.lam)

    def hvp(self, v) -> np.ndarray:
        return self.objective().hvp(self.theta, v)

    def solve(self, g) -> np.ndarray:
        obj = self.objective()
        theta = self.theta
        probs = obj._probs(theta)
        return conjugate_gradient(lambda v: obj.hvp(theta, v, probs), g)

    def gradients(self, z, y) -> np.ndarray:
        return per_sample_gradients(self.theta, z, y, self.num_classes)

    def logits(self, z) -> np.ndarray:
        return augment(z) @ self.params.matrix

    def predict(self, z) -> np.ndarray:
        return np.argmax(self.logits(z), axis=1)

    def accuracy(self, z, y) -> float:
        y = np.asarray(y).reshape(-1)
        if y.size == 0:
            return float("nan")
        return float(np.mean(self.predict(z) == y))

    def total_loss(self, z, y) -> float:
        return float(cross_entropy(self.theta, z, y, self.num_classes).sum())


def minimize_objective(obj: Objective, config: TrainConfig, theta0=None) -> tuple[np.ndarray, int, float]:
    """Damped Newton iteration to ``||grad|| <= grad_tol``.

    Small problems use a dense Cholesky step, larger ones an inexact CG
    step on Hessian-vector products.
    """
    theta = np.zeros(obj.dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    f = obj.loss(theta)
    g = obj.grad(theta)
    gnorm = np.linalg.norm(g)
    for it in range(config.max_iters):
        if gnorm <= config.grad_tol:
            return theta, it, gnorm
        if obj.dim <= DENSE_NEWTON_LIMIT:
            step = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(obj.hessian(theta)), g)
        else:
            probs = obj._probs(theta)
            forcing = min(0.5, np.sqrt(gnorm))
            try:
                step = -conjugate_gradient(lambda v: obj.hvp(theta, v, probs), g, tol=forcing)
            except SolverStall:
                step = -g / obj.lam
        t = 1.0
        slope = g @ step
        while True:
            cand = theta + t * step
            f_new = obj.loss(cand)
            g_new = obj.grad(cand)
            gn_new = np.linalg.norm(g_new)
            # near the optimum f stops resolving progress; a shrinking gradient is enough
            if f_new <= f + 1e-4 * t * slope or (t == 1.0 and gn_new < 0.5 * gnorm):
                break
            t *= 0.5
            if t < 1e-12:
                raise NonConvergence(f"line search failed at iteration {it}, |grad|={gnorm:.3e}")
        theta, f, g, gnorm = cand, f_new, g_new, gn_new
    if gnorm <= config.grad_tol:
        return theta, config.max_iters, gnorm
    raise NonConvergence(f"|grad|={gnorm:.3e} > {config.grad_tol:.1e} after {config.max_iters} iterations")


def train(z, split, config: TrainConfig, k: int = 0, theta0=None) -> SgcModel:
    """Fit the head on the training rows of ``z``.

    ``z`` is the full propagated matrix; ``k`` is recorded on the model only.
    """
    train_ids = split.train
    if train_ids.size == 0:
        raise ValidationError("training set is empty")
    z_train = np.asarray(z, dtype=np.float64)[train_ids]
    y_train = split.labels[train_ids]
    return fit(z_train, y_train, split.num_classes, config, k=k, theta0=theta0)


def fit(z_train, y_train, num_classes: int, config: TrainConfig, k: int = 0, theta0=None,
        weights=None, normalizer=None) -> SgcModel:
    obj = Objective(z_train, y_train, num_classes, config.lam, weights, normalizer)
    theta, iters, gnorm = minimize_objective(obj, config, theta0)
    params = ModelParams.from_theta(theta, obj.a.shape[1] - 1, num_classes)
    log.debug("fit converged in %d iterations, |grad|=%.2e", iters, gnorm)
    return SgcModel(k, config, params, np.asarray(z_train, dtype=np.float64),
                    np.asarray(y_train, dtype=np.int64), iters, gnorm)


def hessian_vector_product(params: ModelParams, z_train, y_train, lam: float, v) -> np.ndarray:
    """``H v`` with ``H = (1/N) sum_i hess l(z_i, y_i) + lam I``, never forming ``H``."""
    obj = Objective(z_train, y_train, params.num_classes, lam)
    return obj.hvp(params.theta, v)


def solve_hessian_system(params: ModelParams, z_train, y_train, lam: float, g,
                         tol: float = 1e-10) -> np.ndarray:
    obj = Objective(z_train, y_train, params.num_classes, lam)
    theta = params.theta
    probs = obj._probs(theta)
    return conjugate_gradient(lambda v: obj.hvp(theta, v, probs), g, tol=tol)


def per_sample_hessian_sigma_min(params: ModelParams, z_train, y_train=None) -> float:
    """Smallest eigenvalue over the per-sample loss Hessians ``(diag(p) - pp^T) kron aa^T``.

    ``aa^T`` has rank one, so with any real feature (``D >= 1``) a zero
    eigenvalue always exists and the answer is exactly 0.
    """
    z_train = np.atleast_2d(np.asarray(z_train, dtype=np.float64))
    if z_train.shape[0] == 0:
        return 0.0
    if params.feature_dim >= 1:
        return 0.0
    a = augment(z_train)
    p = softmax(a @ params.matrix, axis=1)
    best = np.inf
    for a_i, p_i in zip(a, p):
        cov = np.diag(p_i) - np.outer(p_i, p_i)
        best = min(best, float(a_i @ a_i) * float(np.linalg.eigvalsh(cov)[0]))
    return max(best, 0.0)


def save_model(model: SgcModel, path) -> None:
    payload = {
        "k": model.k,
        "lambda": model.lam,
        "num_classes": model.num_classes,
        "feature_dim": model.params.feature_dim,
        "flatten_order": FLATTEN_ORDER,
        "grad_tol": model.config.grad_tol,
        "theta": [float(t) for t in model.theta],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_checkpoint(path) -> tuple[int, TrainConfig, ModelParams]:
    try:
        raw = json.loads(Path(path).read_text())
        k = int(raw["k"])
        num_classes = int(raw["num_classes"])
        theta = np.asarray(raw["theta"], dtype=np.float64)
        config = TrainConfig(float(raw["lambda"]), float(raw.get("grad_tol", 1e-8)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad model checkpoint {path}: {exc}") from exc
    if raw.get("flatten_order", FLATTEN_ORDER) != FLATTEN_ORDER:
        raise ValidationError(f"unsupported flatten_order {raw['flatten_order']!r}")
    dim = theta.size // num_classes
    params = ModelParams.from_theta(theta, dim - 1, num_classes)
    return k, config, params


def with_training_data(k: int, config: TrainConfig, params: ModelParams, z, split) -> SgcModel:
    """Rebuild an :class:`SgcModel` around checkpointed parameters."""
    ids = split.train
    obj = Objective(z[ids], split.labels[ids], params.num_classes, config.lam)
    gnorm = float(np.linalg.norm(obj.grad(params.theta)))
    return SgcModel(k, config, params, np.asarray(z[ids], dtype=np.float64),
                    split.labels[ids].copy(), 0, gnorm)

