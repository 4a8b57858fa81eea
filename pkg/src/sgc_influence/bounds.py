"""Error bounds on estimated influence, Lipschitz estimation, and the regularization sweep."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateDenominator, SgcInfluenceError
from .graph import AttributedGraph, LabeledSplit
from .model import SgcModel, TrainConfig, per_sample_hessian_sigma_min
from .oracle import (ActualInfluence, observed_error, sample_targets, spearman, validate_influence)
from .influence import InfluenceEstimate
from .perturbation import EdgeRemoval

log = logging.getLogger(__name__)


@dataclass
class ErrorBoundReport:
    lam: float
    N: int
    affected_count: int
    sigma_min: float
    sigma_min_prime: float
    lipschitz: float
    lipschitz_source: str
    grad_diff_norm: float
    term1: float
    term2: float
    bound: float
    m: float | None = None
    own_grad_norm: float | None = None
    term3: float | None = None
    term4: float | None = None
    a_priori: bool = False
    observed_err: float | None = None

    @property
    def terms(self) -> list:
        return [t for t in (self.term1, self.term2, self.term3, self.term4) if t is not None]


def _ratio(numerator, denominator, what: str):
    if numerator == 0:
        return 0 * numerator
    if not denominator > 0:
        raise DegenerateDenominator(f"{what} denominator is {denominator}")
    return numerator / denominator


def edge_error_bound(lam, N, affected_count, sigma_min, sigma_min_prime, lipschitz, grad_diff_norm,
                     lipschitz_source: str = "user", observed_err=None) -> ErrorBoundReport:
    """Upper bound on ``||I* - I||_2`` for one edge removal.

    ``term1 = N^3 C / (N lam + (N-|L|) s + s' |L|)^3 * g^2`` bounds the gap to
    the one-step Newton solution, ``term2 = N / (N lam + (N-|L|) s +
    min(s, s') |L|) * g`` the gap between Newton and the estimate, where ``g``
    is the norm of the summed gradient change. Arithmetic is done in the
    input types, so ``fractions.Fraction`` inputs give exact results.

    Passing ``sigma_min_prime=None`` (no retrained model) substitutes
    ``sigma_min`` and marks the report a-priori.
    """
    a_priori = sigma_min_prime is None
    if a_priori:
        sigma_min_prime = sigma_min
    n, size = N, affected_count
    if not (n >= size >= 0 and lam > 0 and lipschitz >= 0 and sigma_min >= 0 and sigma_min_prime >= 0):
        raise ValueError("need N >= |L| >= 0, lambda > 0, C >= 0 and non-negative sigmas")
    base = n * lam + (n - size) * sigma_min
    term1 = _ratio(n ** 3 * lipschitz * grad_diff_norm ** 2,
                   (base + sigma_min_prime * size) ** 3, "Newton-gap")
    term2 = _ratio(n * grad_diff_norm, base + min(sigma_min, sigma_min_prime) * size, "estimate-gap")
    return ErrorBoundReport(lam, n, size, sigma_min, sigma_min_prime, lipschitz, lipschitz_source,
                            grad_diff_norm, term1, term2, term1 + term2, a_priori=a_priori,
                            observed_err=observed_err)


def node_error_bound(lam, N, affected_count, sigma_min, sigma_min_prime, lipschitz, m, own_grad_norm,
                     lipschitz_source: str = "user", observed_err=None) -> ErrorBoundReport:
    """Four-term upper bound on ``||I* - I||_2`` for a node removal.

    ``m`` is the norm of the summed gradient change including the removed
    node's own gradient; ``own_grad_norm`` is the norm of that own gradient
    (0 when the removed node does not train).
    """
    a_priori = sigma_min_prime is None
    if a_priori:
        sigma_min_prime = sigma_min
    n, size = N, affected_count
    if not (n >= size >= 0 and lam > 0 and lipschitz >= 0 and sigma_min >= 0
            and sigma_min_prime >= 0 and m >= 0 and own_grad_norm >= 0):
        raise ValueError("need N >= |S| >= 0, lambda > 0 and non-negative C, sigmas, m")
    shared = (n - size) * sigma_min
    term1 = _ratio(n ** 3 * m ** 2 * lipschitz,
                   ((n - 1) * lam + shared + sigma_min_prime * size) ** 3, "first")
    term2 = _ratio((n - 1) * m, n * lam + shared + min(sigma_min, sigma_min_prime) * size, "second")
    term3 = _ratio(n ** 3 * lipschitz * own_grad_norm ** 2,
                   (n * lam + (n - 1) * sigma_min) ** 3, "third")
    term4 = _ratio(n * own_grad_norm, n * lam + n * sigma_min, "fourth")
    report = ErrorBoundReport(lam, n, size, sigma_min, sigma_min_prime, lipschitz, lipschitz_source,
                              m, term1, term2, term1 + term2 + term3 + term4, m=m,
                              own_grad_norm=own_grad_norm, term3=term3, term4=term4,
                              a_priori=a_priori, observed_err=observed_err)
    return report


def lipschitz_from_hvp(hvp: Callable[[np.ndarray, np.ndarray], np.ndarray], theta: np.ndarray,
                       num_probes: int = 20, radius: float = 1.0, seed: int = 0,
                       pair_step: float = 1e-2, power_iters: int = 30) -> float:
    """Largest sampled ``||H(t1) - H(t2)||_op / ||t1 - t2||`` inside a ball around ``theta``.

    ``t1`` is uniform in the ball and ``t2`` sits ``pair_step * radius``
    away in a random direction, so each probe approximates a directional
    derivative of the Hessian. Operator norms come from power iteration on
    ``w -> hvp(t1, w) - hvp(t2, w)``. Sampling can only under-estimate the
    supremum, so this is a lower estimate of the true local constant.
    Probes are drawn sequentially from one seeded stream, hence the result
    never decreases when ``num_probes`` grows.
    """
    if num_probes < 2:
        raise ValueError("num_probes must be >= 2")
    theta = np.asarray(theta, dtype=np.float64)
    dim = theta.size
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(num_probes):
        u = rng.normal(size=dim)
        u *= radius * rng.random() ** (1.0 / dim) / np.linalg.norm(u)
        d = rng.normal(size=dim)
        d *= pair_step * radius / np.linalg.norm(d)
        t1 = theta + u
        t2 = t1 + d if np.linalg.norm(u + d) <= radius else t1 - d
        x = rng.normal(size=dim)
        x /= np.linalg.norm(x)
        norm = 0.0
        for _ in range(power_iters):
            y = hvp(t1, x) - hvp(t2, x)
            norm = np.linalg.norm(y)
            if norm == 0.0:
                break
            x = y / norm
        best = max(best, norm / np.linalg.norm(t1 - t2))
    return float(best)


def estimate_lipschitz_C(model: SgcModel, num_probes: int = 20, radius: float = 1.0, seed: int = 0,
                         hvp=None, **kwargs) -> float:
    """Lipschitz estimate for the Hessian of the mean training loss near the fitted parameters.

    ``hvp(theta, v)`` overrides the loss curvature (used to test the
    estimator on losses with a known constant).
    """
    if hvp is None:
        obj = model.objective()
        hvp = obj.data_hvp
    return lipschitz_from_hvp(hvp, model.theta, num_probes, radius, seed, **kwargs)


def bound_for_removal(model: SgcModel, estimate: InfluenceEstimate, lipschitz: float,
                      actual: ActualInfluence | None = None, lipschitz_source: str = "user",
                      own_grad_norm: float | None = None) -> ErrorBoundReport:
    """Fill an :class:`ErrorBoundReport` from a fitted model, an estimate and optionally its retrain."""
    sigma = per_sample_hessian_sigma_min(model.params, model.z_train)
    sigma_prime = None
    obs = None
    if actual is not None:
        obs = observed_error(estimate, actual)
        if actual.model is not None:
            sigma_prime = per_sample_hessian_sigma_min(actual.model.params, actual.model.z_train)
        else:
            # sigma' is structurally 0 whenever features exist
            sigma_prime = 0.0 if model.params.feature_dim >= 1 else None
    g = float(np.linalg.norm(estimate.gradient_diff))
    affected = 0 if estimate.affected is None else int(len(estimate.affected))
    if isinstance(estimate.target, EdgeRemoval) or own_grad_norm is None:
        return edge_error_bound(model.lam, model.num_train, affected, sigma, sigma_prime, lipschitz, g,
                                lipschitz_source, obs)
    return node_error_bound(model.lam, model.num_train, affected, sigma, sigma_prime, lipschitz, g,
                            own_grad_norm, lipschitz_source, obs)


@dataclass
class SweepRecord:
    lam: float
    rho: float | None
    mean_observed_err: float | None
    mean_bound: float | None
    lipschitz: float | None = None
    rows: list = field(default_factory=list)
    error: str | None = None


def lambda_sweep(graph: AttributedGraph, split: LabeledSplit, k: int, lambdas: Sequence[float],
                 edge_sample, seed: int = 0, eval_set="val", lipschitz=None,
                 grad_tol: float = 1e-8, max_iters: int = 200, lipschitz_probes: int = 20) -> list[SweepRecord]:
    """Retrain, estimate and bound a fixed edge sample at each regularization strength.

    ``edge_sample`` is either a list of edges or a count to draw with
    ``seed``. ``lipschitz`` is a number, ``"estimate"`` (probe around each
    fit, with a radius covering the observed parameter changes), or
    ``None`` to skip bounds. Failures at one strength are recorded and the
    sweep moves on.
    """
    if isinstance(edge_sample, int):
        edges = sample_targets(graph, split, "edges", edge_sample, seed)
    else:
        edges = [e if isinstance(e, EdgeRemoval) else EdgeRemoval(*e) for e in edge_sample]
    degrees = graph.degrees
    records = []
    for lam in lambdas:
        try:
            cfg = TrainConfig(float(lam), grad_tol, max_iters)
            report = validate_influence(graph, split, k, cfg, edges, eval_set, keep_models=True)
            base = report.model
            errs = [observed_error(e, a) for e, a in zip(report.estimates, report.actuals)]
            c_value, c_source = None, None
            if lipschitz == "estimate":
                radius = max([np.linalg.norm(a.param_change) for a in report.actuals] + [1e-3]) * 2.0
                c_value = estimate_lipschitz_C(base, lipschitz_probes, radius, seed)
                c_source = "estimated"
            elif lipschitz is not None:
                c_value, c_source = float(lipschitz), "user"
            rows, bounds = [], []
            for est, act, err in zip(report.estimates, report.actuals, errs):
                t = est.target
                row = {"lambda": float(lam), "edge_i": t.i, "edge_j": t.j,
                       "degree_sum": int(degrees[t.i] + degrees[t.j]),
                       "estimated": est.eval_change, "actual": act.eval_change,
                       "observed_err": err, "bound": None, "term1": None, "term2": None}
                if c_value is not None:
                    b = bound_for_removal(base, est, c_value, act, c_source)
                    row.update(bound=float(b.bound), term1=float(b.term1), term2=float(b.term2))
                    bounds.append(float(b.bound))
                rows.append(row)
            records.append(SweepRecord(float(lam), report.rho, float(np.mean(errs)) if errs else None,
                                       float(np.mean(bounds)) if bounds else None, c_value, rows,
                                       report.rho_error))
        except SgcInfluenceError as exc:
            log.warning("sweep at lambda=%g failed: %s", lam, exc)
            records.append(SweepRecord(float(lam), None, None, None, error=f"{type(exc).__name__}: {exc}"))
    return records


def high_degree_flags(rows: list[dict], top_fraction: float = 0.1) -> list[bool]:
    """Mark rows whose endpoint-degree sum is in the top ``top_fraction``."""
    if not rows:
        return []
    sums = np.array([r["degree_sum"] for r in rows])
    cutoff = np.quantile(sums, 1.0 - top_fraction)
    return [bool(s >= cutoff) for s in sums]
