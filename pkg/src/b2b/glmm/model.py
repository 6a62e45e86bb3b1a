"""Bundle add-to-cart models: pooled, aisle fixed effects, and mixed logistic.

All four specifications share one linear predictor

    eta = alpha_k + beta_b_k * comp + beta_s_k * sub + gamma' W

and differ only in how the aisle terms are tied together:

``pooled``             one intercept and one slope pair for every aisle
``fixed_aisle``        a free intercept per aisle, common slopes
``varying_intercept``  intercepts drawn from N(mu_alpha, sigma^2)
``varying_slopes``     (alpha, beta_b, beta_s) drawn from N(mu, Sigma)

Outcomes are bundle-level binomial counts (users who added to cart vs users
who only viewed).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize
from scipy.special import expit, gammaln

from ..bundles import COVARIATES, BundleCandidate, candidate_from_row, read_candidate_rows
from .kernels import build_L, laplace_loglik

logger = logging.getLogger(__name__)

SPECS = ("pooled", "fixed_aisle", "varying_intercept", "varying_slopes")
HIERARCHICAL = ("varying_intercept", "varying_slopes")
SCORES = ("comp_score", "sub_score")
MODEL_FORMAT_VERSION = 1
THETA_FLOOR = -12.0
SEPARATION_ETA = 30.0
GRAD_TOL = 1e-3


class SeparationError(RuntimeError):
    pass


class NonNestedError(ValueError):
    pass


@dataclass
class BundleObservation:
    candidate: BundleCandidate
    aisle: str
    successes: int
    failures: int

    def __post_init__(self):
        if self.successes < 0 or self.failures < 0:
            raise ValueError("successes and failures must be non-negative")
        if self.successes + self.failures < 1:
            raise ValueError("a bundle observation needs at least one view")

    @property
    def cluster(self) -> str:
        return self.candidate.focal_id


@dataclass
class Design:
    X: np.ndarray
    names: List[str]
    y: np.ndarray
    m: np.ndarray
    group: np.ndarray
    aisles: List[str]
    clusters: List[str]
    # position of each row in the caller's observation sequence
    source: Optional[np.ndarray] = None

    @property
    def starts(self) -> np.ndarray:
        return np.searchsorted(self.group, np.arange(len(self.aisles) + 1)).astype(np.int64)


def _covariate_row(c: BundleCandidate, covariates: Sequence[str]) -> List[float]:
    if covariates and c.standardized is None:
        raise ValueError(f"candidate ({c.focal_id}, {c.addon_id}) is not featurized")
    row = []
    for name in covariates:
        if name not in c.standardized:
            raise ValueError(f"unknown covariate {name!r}")
        row.append(float(c.standardized[name]))
    return row


def build_design(
    observations: Sequence[BundleObservation],
    spec: str,
    covariates: Sequence[str] = COVARIATES,
    include_scores: bool = True,
) -> Design:
    """Rows sorted by aisle (stable), as the group kernels expect."""
    if spec not in SPECS:
        raise ValueError(f"unknown spec {spec!r}; choose from {SPECS}")
    if not observations:
        raise ValueError("no observations")
    aisles = sorted({o.aisle for o in observations})
    gidx = {a: k for k, a in enumerate(aisles)}
    order = sorted(range(len(observations)), key=lambda i: gidx[observations[i].aisle])
    obs = [observations[i] for i in order]
    scores = [[o.candidate.comp_score, o.candidate.sub_score] for o in obs] if include_scores else [[] for _ in obs]
    cov = [_covariate_row(o.candidate, covariates) for o in obs]
    group = np.array([gidx[o.aisle] for o in obs], dtype=np.int64)
    if spec == "fixed_aisle":
        lead = np.zeros((len(obs), len(aisles)))
        lead[np.arange(len(obs)), group] = 1.0
        lead_names = [f"aisle[{a}]" for a in aisles]
    else:
        lead = np.ones((len(obs), 1))
        lead_names = ["(Intercept)"]
    X = np.column_stack([lead, np.array(scores, dtype=float).reshape(len(obs), -1), np.array(cov, dtype=float).reshape(len(obs), -1)])
    if not np.isfinite(X).all():
        raise ValueError("non-finite values in the design matrix (missing scores or covariates?)")
    names = lead_names + (list(SCORES) if include_scores else []) + list(covariates)
    y = np.array([o.successes for o in obs], dtype=float)
    m = np.array([o.successes + o.failures for o in obs], dtype=float)
    return Design(X, names, y, m, group, aisles, [o.cluster for o in obs], np.array(order, dtype=np.int64))


def _binomial_const(y, m) -> float:
    return float(np.sum(gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)))


def _bernoulli_ll(eta, y, m) -> float:
    return float(np.sum(y * eta - m * np.logaddexp(0.0, eta)))


def irls(X: np.ndarray, y: np.ndarray, m: np.ndarray, names: Sequence[str], tol: float = 1e-10, max_iter: int = 100):
    """Binomial logistic regression by iteratively reweighted least squares.

    Returns ``(beta, loglik_without_constant, iterations, converged)``.
    """
    n, p = X.shape
    beta = np.zeros(p)
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        w = np.maximum(m * mu * (1.0 - mu), 1e-300)
        z = eta + (y - m * mu) / w
        XtW = X.T * w
        try:
            beta = np.linalg.solve(XtW @ X, XtW @ z)
        except np.linalg.LinAlgError:
            beta = np.linalg.lstsq(XtW @ X, XtW @ z, rcond=None)[0]
        ll = _bernoulli_ll(X @ beta, y, m)
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            converged = True
            break
        prev = ll
    eta = X @ beta
    if np.max(np.abs(eta)) > SEPARATION_ETA or not np.isfinite(beta).all():
        contrib = np.abs(beta) * np.max(np.abs(X), axis=0)
        culprits = [names[j] for j in np.argsort(-contrib) if contrib[j] > 10.0] or [names[int(np.argmax(contrib))]]
        raise SeparationError(f"separation detected; unbounded coefficients for: {', '.join(culprits)}")
    return beta, _bernoulli_ll(eta, y, m), it, converged


def _n_theta(q: int, diagonal: bool) -> int:
    return q if diagonal else q * (q + 1) // 2


def _theta_to_sigma(theta: np.ndarray, q: int, diagonal: bool) -> np.ndarray:
    L = build_L(np.asarray(theta, dtype=float), q, diagonal)
    return L @ L.T


@dataclass
class HierarchicalFit:
    spec: str
    aisles: List[str]
    covariates: List[str]
    include_scores: bool
    gamma: Dict[str, float]
    mu: np.ndarray
    Sigma: np.ndarray
    varying: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    n_obs: int
    n_params: int
    coef: Dict[str, float] = field(default_factory=dict)
    theta: Optional[np.ndarray] = None
    diagonal: bool = False
    data_key: str = ""
    standardizer: Optional[dict] = None
    modes: Optional[np.ndarray] = None
    # negative Hessian of the log-likelihood in (beta, theta); seeds quasi-Newton refits
    information: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def deviance(self) -> float:
        return -2.0 * self.loglik

    @property
    def aisle_index(self) -> Dict[str, int]:
        return {a: k for k, a in enumerate(self.aisles)}

    def aisle_coefficients(self, aisle: Optional[str]) -> np.ndarray:
        """``(alpha, beta_b, beta_s)`` for an aisle; unseen aisles get ``mu``."""
        k = self.aisle_index.get(aisle) if aisle is not None else None
        return self.mu.copy() if k is None else self.varying[k].copy()

    def linear_predictor(self, candidate: BundleCandidate, aisle: Optional[str]) -> float:
        alpha, bb, bs = self.aisle_coefficients(aisle)
        eta = alpha
        if self.include_scores:
            eta += bb * candidate.comp_score + bs * candidate.sub_score
        if self.covariates:
            if candidate.standardized is None:
                raise ValueError("candidate has no standardized covariates")
            for name in self.covariates:
                if name not in candidate.standardized:
                    raise ValueError(f"unknown covariate layout: {name!r} missing from candidate")
                eta += self.gamma[name] * candidate.standardized[name]
        return eta

    def predict(self, candidate: BundleCandidate, aisle: Optional[str]) -> float:
        return float(expit(self.linear_predictor(candidate, aisle)))

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "spec": self.spec,
            "aisles": self.aisles,
            "covariates": self.covariates,
            "include_scores": self.include_scores,
            "gamma": self.gamma,
            "mu": {"alpha": self.mu[0], "beta_comp": self.mu[1], "beta_sub": self.mu[2]},
            "Sigma": self.Sigma.tolist(),
            "varying": {a: self.varying[k].tolist() for k, a in enumerate(self.aisles)},
            "coef": self.coef,
            "theta": None if self.theta is None else self.theta.tolist(),
            "diagonal": self.diagonal,
            "diagnostics": {
                "loglik": self.loglik,
                "deviance": self.deviance,
                "iterations": self.iterations,
                "converged": self.converged,
                "n_obs": self.n_obs,
                "n_params": self.n_params,
                "data_key": self.data_key,
            },
            "standardizer": self.standardizer,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HierarchicalFit":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
        diag = d["diagnostics"]
        aisles = list(d["aisles"])
        return cls(
            spec=d["spec"],
            aisles=aisles,
            covariates=list(d["covariates"]),
            include_scores=bool(d["include_scores"]),
            gamma={k: float(v) for k, v in d["gamma"].items()},
            mu=np.array([d["mu"]["alpha"], d["mu"]["beta_comp"], d["mu"]["beta_sub"]], dtype=float),
            Sigma=np.array(d["Sigma"], dtype=float),
            varying=np.array([d["varying"][a] for a in aisles], dtype=float).reshape(len(aisles), 3),
            loglik=float(diag["loglik"]),
            iterations=int(diag["iterations"]),
            converged=bool(diag["converged"]),
            n_obs=int(diag["n_obs"]),
            n_params=int(diag["n_params"]),
            coef={k: float(v) for k, v in d.get("coef", {}).items()},
            theta=None if d.get("theta") is None else np.array(d["theta"], dtype=float),
            diagonal=bool(d.get("diagonal", False)),
            data_key=diag.get("data_key", ""),
            standardizer=d.get("standardizer"),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HierarchicalFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _data_key(design: Design) -> str:
    h = hashlib.sha256()
    for arr in (design.y, design.m, design.group):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("\x1f".join(design.aisles).encode())
    h.update("\x1f".join(design.clusters).encode())
    return h.hexdigest()[:16]


def fit(
    observations: Sequence[BundleObservation],
    spec: str = "varying_slopes",
    covariates: Sequence[str] = COVARIATES,
    include_scores: bool = True,
    diagonal: bool = False,
    method: str = "laplace",
    max_iter: int = 200,
    tol: float = 1e-8,
    start: Optional[HierarchicalFit] = None,
    standardizer: Optional[dict] = None,
) -> HierarchicalFit:
    """Fit one specification by maximum (marginal) likelihood.

    Mixed specs integrate the aisle effects with a Laplace approximation
    (``method="aghq"`` refines with 5-point adaptive Gauss-Hermite per
    dimension) and optimize with L-BFGS-B.  ``start`` warm-starts from a
    previous fit of the same spec.
    """
    design = build_design(observations, spec, covariates, include_scores)
    return fit_design(design, spec, list(covariates), include_scores, diagonal, method, max_iter, tol, start, standardizer)


def fit_design(
    design: Design,
    spec: str,
    covariates: List[str],
    include_scores: bool,
    diagonal: bool = False,
    method: str = "laplace",
    max_iter: int = 200,
    tol: float = 1e-8,
    start: Optional[HierarchicalFit] = None,
    standardizer: Optional[dict] = None,
) -> HierarchicalFit:
    X, y, m = design.X, design.y, design.m
    K = len(design.aisles)
    const = _binomial_const(y, m)
    n_cov = len(covariates)
    nsc = 2 if include_scores else 0
    gamma_slice = slice(X.shape[1] - n_cov, X.shape[1])

    if spec in ("pooled", "fixed_aisle"):
        beta, ll, iters, conv = irls(X, y, m, design.names, tol=min(tol, 1e-10), max_iter=max_iter)
        gamma = {c: float(b) for c, b in zip(covariates, beta[gamma_slice])}
        slopes = beta[K : K + nsc] if spec == "fixed_aisle" else beta[1 : 1 + nsc]
        bb, bs = (float(slopes[0]), float(slopes[1])) if include_scores else (0.0, 0.0)
        if spec == "pooled":
            mu = np.array([beta[0], bb, bs])
            varying = np.tile(mu, (K, 1))
        else:
            varying = np.column_stack([beta[:K], np.full(K, bb), np.full(K, bs)])
            mu = np.array([float(np.mean(beta[:K])), bb, bs])
        return HierarchicalFit(
            spec=spec, aisles=list(design.aisles), covariates=list(covariates), include_scores=include_scores,
            gamma=gamma, mu=mu, Sigma=np.zeros((3, 3)), varying=varying, loglik=ll + const, iterations=iters,
            converged=conv, n_obs=len(y), n_params=X.shape[1], coef=dict(zip(design.names, map(float, beta))),
            data_key=_data_key(design), standardizer=standardizer,
        )

    if spec not in HIERARCHICAL:
        raise ValueError(f"unknown spec {spec!r}")
    if K < 2:
        raise ValueError("hierarchical specs need at least two aisles")
    if spec == "varying_slopes" and not include_scores:
        raise ValueError("varying_slopes needs the score terms")
    q = 1 if spec == "varying_intercept" else 3
    zcols = np.arange(q, dtype=np.int64)
    nt = _n_theta(q, diagonal)
    p = X.shape[1]
    starts = design.starts

    if start is not None and start.spec == spec and start.theta is not None and len(start.coef) == p and start.diagonal == diagonal:
        beta0 = np.array([start.coef[nm] for nm in design.names])
        theta0 = start.theta.copy()
    else:
        beta0 = irls(X, y, m, design.names, max_iter=50)[0]
        theta0 = np.zeros(nt)
        idx = 0
        for a in range(q):
            for b in range(a + 1):
                if diagonal and a != b:
                    continue
                if a == b:
                    theta0[idx] = math.log(0.2)
                idx += 1
    U = np.zeros((K, q))
    diag_idx = [a for a in range(q)] if diagonal else [a * (a + 1) // 2 + a for a in range(q)]
    bounds = [(None, None)] * p + [((THETA_FLOOR, None) if j in diag_idx else (None, None)) for j in range(nt)]

    nfev = [0]

    def objective(x):
        nfev[0] += 1
        val, gb, gt, _ = laplace_loglik(x[:p], x[p:], X, zcols, y, m, starts, U, diagonal, True)
        if not math.isfinite(val):
            return 1e300, np.zeros_like(x)
        return -val, -np.concatenate([gb, gt])

    x0 = np.concatenate([beta0, theta0])
    floor_cols = np.array([p + j for j in diag_idx], dtype=np.int64)

    def check(x, success):
        val, gb, gt, failed = laplace_loglik(x[:p], x[p:], X, zcols, y, m, starts, U, diagonal, True)
        g = np.concatenate([gb, gt])
        at_floor = np.zeros(p + nt, dtype=bool)
        at_floor[floor_cols] = x[floor_cols] <= THETA_FLOOR + 1e-9
        # a variance pinned at the floor with the gradient pushing down is optimal
        proj = np.where(at_floor & (g < 0), 0.0, g)
        return val, bool(failed == 0 and (success or np.max(np.abs(proj)) < GRAD_TOL))

    res = None
    info = start.information if start is not None and start.spec == spec else None
    if info is not None and info.shape == (p + nt, p + nt) and start.diagonal == diagonal:
        # quasi-Newton seeded with the curvature of a nearby fit (bootstrap refits)
        w, V = np.linalg.eigh(info)
        if w.min() > 0:
            H0 = (V / w) @ V.T
            res = optimize.minimize(objective, x0, jac=True, method="BFGS",
                                    options={"maxiter": max_iter, "gtol": 1e-7, "hess_inv0": (H0 + H0.T) / 2})
            if np.any(res.x[floor_cols] < THETA_FLOOR):
                res = None
            else:
                val, converged = check(res.x, False)
                if not converged:
                    x0, res = res.x, None
    if res is None:
        res = optimize.minimize(
            objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-7, "maxcor": 20},
        )
        val, converged = check(res.x, res.success)
    x = res.x
    loglik = val
    if method == "aghq":
        x, loglik, converged = _refine_aghq(design, x, p, q, zcols, diagonal, bounds, U, max_iter)
    elif method != "laplace":
        raise ValueError(f"unknown method {method!r}")
    beta, theta = x[:p], x[p:]
    L = build_L(theta, q, diagonal)
    modes = U @ L.T
    Sigma = np.zeros((3, 3))
    Sigma[:q, :q] = L @ L.T
    w, V = np.linalg.eigh(Sigma)
    if w.min() < -1e-10:
        warnings.warn("projecting random-effect covariance onto the PSD cone")
        Sigma = (V * np.maximum(w, 0.0)) @ V.T
    mu = np.zeros(3)
    mu[: 1 + nsc] = beta[: 1 + nsc]
    varying = np.tile(mu, (K, 1))
    varying[:, :q] += modes
    return HierarchicalFit(
        spec=spec, aisles=list(design.aisles), covariates=list(covariates), include_scores=include_scores,
        gamma={c: float(b) for c, b in zip(covariates, beta[gamma_slice])}, mu=mu, Sigma=Sigma, varying=varying,
        loglik=float(loglik) + const, iterations=int(res.nit), converged=converged, n_obs=len(y),
        n_params=p + nt, coef=dict(zip(design.names, map(float, beta))), theta=theta.copy(), diagonal=diagonal,
        data_key=_data_key(design), standardizer=standardizer, modes=U.copy(),
    )


def observed_information(design: Design, fit: HierarchicalFit, h: float = 1e-5) -> np.ndarray:
    """Negative Hessian of the Laplace log-likelihood at a hierarchical fit.

    Central differences of the analytic gradient over ``(beta, theta)``.
    """
    if fit.spec not in HIERARCHICAL or fit.theta is None:
        raise ValueError("observed information needs a hierarchical fit")
    q = 1 if fit.spec == "varying_intercept" else 3
    zcols = np.arange(q, dtype=np.int64)
    x0 = np.concatenate([[fit.coef[nm] for nm in design.names], fit.theta])
    p = design.X.shape[1]
    U = np.zeros((len(design.aisles), q))

    def grad(x):
        _, gb, gt, _ = laplace_loglik(x[:p], x[p:], design.X, zcols, design.y, design.m, design.starts, U,
                                      fit.diagonal, True)
        return np.concatenate([gb, gt])

    n = x0.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad(x0 + e) - grad(x0 - e)) / (2 * h)
    return -(H + H.T) / 2


def aghq_loglik(design: Design, beta, theta, q: int, diagonal: bool, order: int = 5, U=None) -> float:
    """Adaptive Gauss-Hermite marginal log-likelihood (without binomial constants)."""
    X, y, m = design.X, design.y, design.m
    starts = design.starts
    K = len(design.aisles)
    zcols = np.arange(q, dtype=np.int64)
    if U is None:
        U = np.zeros((K, q))
    laplace_loglik(np.asarray(beta, float), np.asarray(theta, float), X, zcols, y, m, starts, U, diagonal, False)
    L = build_L(np.asarray(theta, float), q, diagonal)
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    grid = np.array(np.meshgrid(*([nodes] * q), indexing="ij")).reshape(q, -1).T
    lw = np.sum(np.log(np.array(np.meshgrid(*([weights] * q), indexing="ij")).reshape(q, -1).T), axis=1)
    eta0 = X @ beta
    M = X[:, :q] @ L
    total = 0.0
    for k in range(K):
        s, e = starts[k], starts[k + 1]
        u_hat = U[k]
        Mk = M[s:e]
        pk = expit(eta0[s:e] + Mk @ u_hat)
        A = np.eye(q) + (Mk * (m[s:e] * pk * (1 - pk))[:, None]).T @ Mk
        C = np.linalg.cholesky(A)
        B = np.linalg.inv(C).T
        us = u_hat + math.sqrt(2.0) * grid @ B.T
        eta = eta0[s:e][None, :] + us @ Mk.T
        g = (y[s:e] * eta - m[s:e] * np.logaddexp(0.0, eta)).sum(axis=1) - 0.5 * np.sum(us * us, axis=1)
        terms = lw + g + np.sum(grid * grid, axis=1)
        top = terms.max()
        log_int = top + math.log(np.exp(terms - top).sum())
        # order 1 reduces this exactly to the Laplace value
        total += log_int - np.sum(np.log(np.diag(C))) + 0.5 * q * math.log(2.0) - 0.5 * q * math.log(2.0 * math.pi)
    return float(total)


def _refine_aghq(design, x, p, q, zcols, diagonal, bounds, U, max_iter):
    def negll(v):
        return -aghq_loglik(design, v[:p], v[p:], q, diagonal, U=U.copy())

    res = optimize.minimize(negll, x, method="L-BFGS-B", bounds=bounds, options={"maxiter": max_iter, "ftol": 1e-12})
    laplace_loglik(res.x[:p], res.x[p:], design.X, zcols, design.y, design.m, design.starts, U, diagonal, False)
    return res.x, -res.fun, bool(res.success)


# ---------------------------------------------------------------- IO


def observations_from_rows(rows: Sequence[Mapping[str, str]]) -> List[BundleObservation]:
    """Rows carry candidate columns plus ``aisle_k``, ``successes``, ``failures``."""
    out = []
    for row in rows:
        cand = candidate_from_row(row)
        aisle = row.get("aisle_k") or row.get("focal_aisle")
        if not aisle:
            raise ValueError("observation row without aisle_k")
        out.append(BundleObservation(cand, aisle, int(row["successes"]), int(row["failures"])))
    return out


def read_observations(path: Union[str, Path]) -> List[BundleObservation]:
    return observations_from_rows(read_candidate_rows(path))


def write_observations(observations: Sequence[BundleObservation], path: Union[str, Path], header: Optional[str] = None) -> None:
    cols = ["focal_id", "addon_id", "strategy", "aisle_k", "comp_score", "sub_score", "co_purchase_count", "discount_pct"]
    cols += [f"std_{n}" for n in COVARIATES] + ["successes", "failures"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for o in observations:
            c = o.candidate
            std = c.standardized or {}
            w.writerow(
                [c.focal_id, c.addon_id, c.strategy, o.aisle, repr(c.comp_score), repr(c.sub_score),
                 c.co_purchase_count, repr(c.discount_pct)]
                + [repr(std[n]) if n in std else "" for n in COVARIATES]
                + [o.successes, o.failures]
            )
