"""Gaussian mixture prior over the latent space.

EM fitting with k-means++ seeding, log-sum-exp likelihoods through Cholesky
factors, analytic gradients of the negative log-likelihood, and JSON
persistence.  Fitted models are immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

log = logging.getLogger(__name__)

GMM_FORMAT_VERSION = 1

_LOG_2PI = float(np.log(2.0 * np.pi))


class GmmFitError(RuntimeError):
    """EM failed (repeated component collapse or invalid inputs)."""


@dataclass(frozen=True)
class GmmModel:
    """K-component full-covariance Gaussian mixture over D-dim latent codes."""

    weights: np.ndarray      # (K,), simplex
    means: np.ndarray        # (K, D)
    covariances: np.ndarray  # (K, D, D), symmetric positive definite
    _chols: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise ValueError("bad GMM field shapes")
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ValueError("inconsistent GMM field shapes")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite GMM parameters")
        if abs(w.sum() - 1.0) > 1e-12 or w.min() <= 0.0:
            raise ValueError("weights must be a strictly positive simplex")
        if np.abs(cov - cov.transpose(0, 2, 1)).max() > 1e-9:
            raise ValueError("covariances must be symmetric")
        chols = []
        for j in range(k):
            try:
                chols.append(cholesky(cov[j], lower=True))
            except np.linalg.LinAlgError as e:
                raise ValueError(f"covariance {j} is not positive definite") from e
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "_chols", tuple(chols))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class EmConfig:
    n_components: int
    max_iter: int = 200
    tol: float = 1e-7
    cov_floor: float | None = None  # None -> 1e-6 * mean latent variance
    covariance_type: str = "full"   # "full" | "diag"
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.cov_floor is not None and self.cov_floor <= 0:
            raise ValueError("cov_floor must be positive")
        if self.covariance_type not in ("full", "diag"):
            raise ValueError(f"unknown covariance_type {self.covariance_type!r}")


@dataclass
class GmmFit:
    model: GmmModel
    log_likelihood_trace: list[float]
    n_iter: int
    converged: bool


# ---------------------------------------------------------------------------
# likelihood machinery


def _component_log_densities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """log N(x | mu_j, Sigma_j) for each component, via Cholesky solves."""
    out = np.empty(model.n_components)
    d = model.dim
    for j in range(model.n_components):
        chol = model._chols[j]
        diff = x - model.means[j]
        y = solve_triangular(chol, diff, lower=True)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[j] = -0.5 * (d * _LOG_2PI + logdet + y @ y)
    return out


def gmm_nll(model: GmmModel, code: np.ndarray) -> float:
    """Negative log mixture density at ``code`` (may be negative)."""
    x = np.asarray(code, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"expected ({model.dim},) code, got {x.shape}")
    logs = np.log(model.weights) + _component_log_densities(model, x)
    return float(-logsumexp(logs))


def gmm_nll_grad(model: GmmModel, code: np.ndarray) -> np.ndarray:
    """Gradient of the NLL: sum_j r_j(x) * Sigma_j^{-1} (x - mu_j)."""
    x = np.asarray(code, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"expected ({model.dim},) code, got {x.shape}")
    logs = np.log(model.weights) + _component_log_densities(model, x)
    resp = np.exp(logs - logsumexp(logs))
    grad = np.zeros(model.dim)
    for j in range(model.n_components):
        diff = x - model.means[j]
        grad += resp[j] * cho_solve((model._chols[j], True), diff)
    return grad


def likelihood_profile(model: GmmModel, a: np.ndarray, b: np.ndarray,
                       steps: int) -> list[tuple[float, float]]:
    """NLL along the straight line from ``a`` to ``b`` at ``steps`` even points."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        out.append((float(t), gmm_nll(model, (1.0 - t) * a + t * b)))
    return out


def mahalanobis(model: GmmModel, x: np.ndarray, component: int) -> float:
    """Mahalanobis distance of ``x`` under the given component."""
    diff = np.asarray(x, dtype=np.float64) - model.means[component]
    y = solve_triangular(model._chols[component], diff, lower=True)
    return float(np.sqrt(y @ y))


# ---------------------------------------------------------------------------
# fitting


def _kmeanspp_means(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    means = np.empty((k, x.shape[1]))
    means[0] = x[rng.integers(n)]
    d2 = ((x - means[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            means[j] = x[rng.integers(n)]
        else:
            means[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - means[j]) ** 2).sum(axis=1))
    return means


def _floored(cov: np.ndarray, floor: float, diag_only: bool) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    if diag_only:
        cov = np.diag(np.diag(cov))
    return cov + floor * np.eye(cov.shape[0])


def _log_likelihood_matrix(x, weights, means, covs):
    """(n, K) matrix of log pi_j + log N(x_i | mu_j, Sigma_j)."""
    n, d = x.shape
    k = len(weights)
    out = np.empty((n, k))
    for j in range(k):
        chol = cholesky(covs[j], lower=True)
        diff = x - means[j]
        y = solve_triangular(chol, diff.T, lower=True)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[:, j] = np.log(weights[j]) - 0.5 * (d * _LOG_2PI + logdet + (y * y).sum(axis=0))
    return out


def fit_gmm(latents: np.ndarray, cfg: EmConfig) -> GmmFit:
    """Fit a GMM by EM.

    Initialization is k-means++ seeding of the means with cluster covariances
    and uniform weights; iterations stop when the per-sample log-likelihood
    improvement drops below ``cfg.tol`` or ``cfg.max_iter`` is reached.
    A component whose responsibility mass falls below one sample-equivalent is
    reseeded from the worst-explained datum (logged); four collapses of the
    same component abort the fit.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"latents must be (n, D), got {x.shape}")
    n, d = x.shape
    k = cfg.n_components
    if n < k:
        raise ValueError(f"need at least {k} samples, got {n}")
    floor = cfg.cov_floor
    if floor is None:
        floor = max(1e-6 * float(x.var(axis=0).mean()), 1e-12)
    diag_only = cfg.covariance_type == "diag"
    rng = np.random.default_rng(cfg.seed)

    means = _kmeanspp_means(x, k, rng)
    assign = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
    weights = np.full(k, 1.0 / k)
    global_cov = np.cov(x.T, bias=True).reshape(d, d)
    covs = np.empty((k, d, d))
    for j in range(k):
        members = x[assign == j]
        cov = np.cov(members.T, bias=True).reshape(d, d) if len(members) > 1 else global_cov
        covs[j] = _floored(cov, floor, diag_only)

    trace: list[float] = []
    collapses = np.zeros(k, dtype=int)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        logp = _log_likelihood_matrix(x, weights, means, covs)
        log_norm = logsumexp(logp, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        resp = np.exp(logp - log_norm[:, None])

        nk = resp.sum(axis=0)
        dead = np.flatnonzero(nk < 1.0)
        if dead.size:
            for j in dead:
                collapses[j] += 1
                if collapses[j] > 3:
                    raise GmmFitError(f"component {j} collapsed repeatedly")
                worst = int(np.argmin(log_norm))
                log.warning("reseeding collapsed GMM component %d from datum %d", j, worst)
                means[j] = x[worst]
                covs[j] = _floored(global_cov, floor, diag_only)
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            continue  # redo E-step with reseeded parameters

        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            cov = (resp[:, j, None] * diff).T @ diff / nk[j]
            covs[j] = _floored(cov, floor, diag_only)

        if len(trace) >= 2 and trace[-1] - trace[-2] < cfg.tol * n:
            converged = True
            break

    model = GmmModel(weights, means, covs)
    return GmmFit(model, trace, it, converged)


# ---------------------------------------------------------------------------
# persistence


def _hex_list(a: np.ndarray) -> list[str]:
    return [float.hex(float(v)) for v in np.ravel(a)]


def save_gmm(path: str | Path, model: GmmModel, latent_model_hash: str = "") -> None:
    doc = {
        "format_version": GMM_FORMAT_VERSION,
        "n_components": model.n_components,
        "dim": model.dim,
        "weights": _hex_list(model.weights),
        "means": _hex_list(model.means),
        "covariances": _hex_list(model.covariances),
        "latent_model_hash": latent_model_hash,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_gmm(path: str | Path) -> GmmModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != GMM_FORMAT_VERSION:
        raise ValueError(f"unsupported GMM format version {doc.get('format_version')!r}")
    k, d = doc["n_components"], doc["dim"]
    fromhex = np.vectorize(float.fromhex, otypes=[np.float64])
    weights = fromhex(doc["weights"]).reshape(k)
    means = fromhex(doc["means"]).reshape(k, d)
    covs = fromhex(doc["covariances"]).reshape(k, d, d)
    return GmmModel(weights, means, covs)  # constructor re-validates PD-ness
