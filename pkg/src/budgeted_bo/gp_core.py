"""Exact Gaussian-process regression with a Matern 5/2 ARD kernel.

Models live in normalized input coordinates (the unit box). Targets may be
standardized internally; every public query returns values in the original
target units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

NOISE_FLOOR = 1e-6
MAX_JITTER = 1e-2
SQRT5 = math.sqrt(5.0)


class GpFitError(RuntimeError):
    """Raised when the training covariance stays singular after jitter escalation."""


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def log_density(self, value: float) -> float:
        # normalization constant dropped: it does not move the MAP estimate
        return (self.shape - 1.0) * math.log(value) - self.rate * value

    def dlog_dlogvalue(self, value: float) -> float:
        return (self.shape - 1.0) - self.rate * value

    @property
    def mode(self) -> float:
        return max(self.shape - 1.0, 0.0) / self.rate


@dataclass(frozen=True)
class PriorConfig:
    lengthscale: GammaPrior = GammaPrior(3.0, 6.0)
    outputscale: GammaPrior = GammaPrior(2.0, 0.15)
    noise: GammaPrior = GammaPrior(1.1, 0.05)
    learn_noise: bool = False
    n_restarts: int = 8
    max_iter: int = 200
    seed: int = 0
    lengthscale_bounds: tuple[float, float] = (5e-3, 20.0)
    outputscale_bounds: tuple[float, float] = (1e-4, 1e3)
    noise_bounds: tuple[float, float] = (NOISE_FLOOR, 10.0)


@dataclass(frozen=True)
class KernelParams:
    lengthscales: np.ndarray
    outputscale: float
    noise_variance: float = NOISE_FLOOR

    def __post_init__(self):
        ls = np.array(self.lengthscales, dtype=float).reshape(-1)
        ls.flags.writeable = False
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or self.outputscale <= 0:
            raise ValueError("lengthscales and outputscale must be positive")
        if self.noise_variance < NOISE_FLOOR * (1 - 1e-12):
            raise ValueError(f"noise_variance below floor {NOISE_FLOOR}")


def matern52(x1: np.ndarray, x2: np.ndarray, params: KernelParams) -> np.ndarray:
    """Cross-covariance matrix ``k(x1, x2)`` of shape (n1, n2)."""
    diff = (np.atleast_2d(x1)[:, None, :] - np.atleast_2d(x2)[None, :, :]) / params.lengthscales
    r = np.sqrt(np.sum(diff**2, axis=2))
    sr = SQRT5 * r
    return params.outputscale * (1.0 + sr + sr**2 / 3.0) * np.exp(-sr)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _cholesky_with_jitter(k: np.ndarray, base: float) -> tuple[np.ndarray, float]:
    """Cholesky of ``k + noise*I``; noise grows x10 from ``base`` up to MAX_JITTER."""
    noise = base
    eye = np.eye(k.shape[0])
    while True:
        try:
            return np.linalg.cholesky(k + noise * eye), noise
        except np.linalg.LinAlgError:
            if noise >= MAX_JITTER:
                raise GpFitError("training covariance is singular after jitter escalation")
            noise = min(max(noise, NOISE_FLOOR) * 10.0, MAX_JITTER)


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    stddev: float


@dataclass(frozen=True)
class GpModel:
    """Immutable fitted GP.

    ``mean_constant`` and ``params.outputscale`` are expressed in standardized
    target units; ``y_offset`` and ``y_scale`` map them back.
    """

    train_inputs: np.ndarray
    train_targets: np.ndarray
    mean_constant: float
    params: KernelParams
    cholesky_factor: np.ndarray
    y_offset: float = 0.0
    y_scale: float = 1.0
    alpha: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(
        cls,
        inputs,
        targets,
        params: KernelParams,
        mean_constant: float,
        y_offset: float = 0.0,
        y_scale: float = 1.0,
    ) -> GpModel:
        x = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(targets, dtype=float).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise ValueError("inputs and targets differ in length")
        k = matern52(x, x, params)
        chol, noise = _cholesky_with_jitter(k, params.noise_variance)
        if noise != params.noise_variance:
            params = replace(params, noise_variance=noise)
        resid = (y - y_offset) / y_scale - mean_constant
        alpha = cho_solve((chol, True), resid)
        return cls(_frozen(x), _frozen(y), float(mean_constant), params, _frozen(chol),
                   float(y_offset), float(y_scale), _frozen(alpha))

    @property
    def dim(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def prior_stddev(self) -> float:
        return self.y_scale * math.sqrt(self.params.outputscale)

    def standardize(self, y):
        return (np.asarray(y, dtype=float) - self.y_offset) / self.y_scale


def posterior_batch(model: GpModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Latent posterior mean and stddev at each row of ``x`` (original units)."""
    xq = np.atleast_2d(np.asarray(x, dtype=float))
    ks = matern52(xq, model.train_inputs, model.params)
    mean = model.mean_constant + ks @ model.alpha
    v = solve_triangular(model.cholesky_factor, ks.T, lower=True)
    var = model.params.outputscale - np.sum(v**2, axis=0)
    std = np.sqrt(np.maximum(var, 0.0))
    return model.y_offset + model.y_scale * mean, model.y_scale * std


def posterior(model: GpModel, x) -> PosteriorSummary:
    mean, std = posterior_batch(model, np.asarray(x, dtype=float).reshape(1, -1))
    return PosteriorSummary(float(mean[0]), float(std[0]))


def posterior_covariance(model: GpModel, x1, x2) -> np.ndarray:
    """Latent posterior cross-covariance (original units squared)."""
    a = np.atleast_2d(np.asarray(x1, dtype=float))
    b = np.atleast_2d(np.asarray(x2, dtype=float))
    va = solve_triangular(model.cholesky_factor, matern52(a, model.train_inputs, model.params).T, lower=True)
    vb = solve_triangular(model.cholesky_factor, matern52(b, model.train_inputs, model.params).T, lower=True)
    return model.y_scale**2 * (matern52(a, b, model.params) - va.T @ vb)


def condition(model: GpModel, x, y: float) -> GpModel:
    """Bayes update on one extra observation with frozen hyperparameters.

    The cached Cholesky factor is extended by one row; if the new pivot
    breaks down the whole factor is recomputed.
    """
    xn = np.asarray(x, dtype=float).reshape(1, -1)
    p = model.params
    x_all = np.vstack([model.train_inputs, xn])
    y_all = np.append(model.train_targets, float(y))
    kx = matern52(model.train_inputs, xn, p)[:, 0]
    l_row = solve_triangular(model.cholesky_factor, kx, lower=True)
    pivot = p.outputscale + p.noise_variance - l_row @ l_row
    if pivot <= 1e-12 * p.outputscale:
        return GpModel.build(x_all, y_all, p, model.mean_constant, model.y_offset, model.y_scale)
    n = model.n_train
    chol = np.zeros((n + 1, n + 1))
    chol[:n, :n] = model.cholesky_factor
    chol[n, :n] = l_row
    chol[n, n] = math.sqrt(pivot)
    resid = (y_all - model.y_offset) / model.y_scale - model.mean_constant
    alpha = cho_solve((chol, True), resid)
    return GpModel(_frozen(x_all), _frozen(y_all), model.mean_constant, p, _frozen(chol),
                   model.y_offset, model.y_scale, _frozen(alpha))


def sample_reparam(summary: PosteriorSummary, base_noise: float) -> float:
    return summary.mean + summary.stddev * base_noise


# --- MAP fitting -----------------------------------------------------------


def _unpack(theta: np.ndarray, d: int, learn_noise: bool, fixed_noise: float):
    ls = np.exp(theta[:d])
    os_ = math.exp(theta[d])
    if learn_noise:
        noise = math.exp(theta[d + 1])
        m = theta[d + 2]
    else:
        noise = fixed_noise
        m = theta[d + 1]
    return ls, os_, noise, m


def _neg_log_posterior(theta, x, y, diffs_sq, prior: PriorConfig, fixed_noise: float):
    n, d = x.shape
    ls, os_, noise, m = _unpack(theta, d, prior.learn_noise, fixed_noise)
    scaled = diffs_sq / ls**2  # (n, n, d)
    r = np.sqrt(np.sum(scaled, axis=2))
    sr = SQRT5 * r
    e = np.exp(-sr)
    k = os_ * (1.0 + sr + sr**2 / 3.0) * e
    try:
        chol = np.linalg.cholesky(k + noise * np.eye(n))
    except np.linalg.LinAlgError:
        return 1e10, np.zeros_like(theta)
    resid = y - m
    alpha = cho_solve((chol, True), resid)
    lml = -0.5 * resid @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2 * math.pi)
    lp = sum(prior.lengthscale.log_density(v) for v in ls) + prior.outputscale.log_density(os_)
    if prior.learn_noise:
        lp += prior.noise.log_density(noise)

    c_inv = cho_solve((chol, True), np.eye(n))
    w = np.outer(alpha, alpha) - c_inv
    grad = np.empty_like(theta)
    # d k / d log(l_i) = os * 5/3 * (1 + sr) * exp(-sr) * diff_i^2 / l_i^2
    base = os_ * (5.0 / 3.0) * (1.0 + sr) * e
    for i in range(d):
        dk = base * scaled[:, :, i]
        grad[i] = 0.5 * np.sum(w * dk) + prior.lengthscale.dlog_dlogvalue(ls[i])
    grad[d] = 0.5 * np.sum(w * k) + prior.outputscale.dlog_dlogvalue(os_)
    j = d + 1
    if prior.learn_noise:
        grad[j] = 0.5 * noise * np.trace(w) + prior.noise.dlog_dlogvalue(noise)
        j += 1
    grad[j] = np.sum(alpha)
    return -(lml + lp), -grad


def fit_map(inputs, targets, prior_config: PriorConfig | None = None, standardize: bool = False) -> GpModel:
    """MAP estimate of lengthscales, outputscale, constant mean (and noise if learned).

    Training data are put into a canonical order first, so the result does not
    depend on how the observations were listed.
    """
    prior = prior_config or PriorConfig()
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y_raw = np.asarray(targets, dtype=float).reshape(-1)
    n, d = x.shape
    if n < 2:
        raise ValueError("fit_map needs at least 2 observations")
    if n != y_raw.shape[0]:
        raise ValueError("inputs and targets differ in length")
    order = np.lexsort(np.column_stack([x, y_raw]).T[::-1])
    x, y_raw = x[order], y_raw[order]

    y_offset, y_scale = 0.0, 1.0
    if standardize:
        y_offset = float(np.mean(y_raw))
        sd = float(np.std(y_raw))
        y_scale = sd if sd > 1e-12 * max(1.0, abs(y_offset)) else 1.0
    y = (y_raw - y_offset) / y_scale

    diffs_sq = (x[:, None, :] - x[None, :, :]) ** 2
    lo_ls, hi_ls = np.log(prior.lengthscale_bounds)
    lo_os, hi_os = np.log(prior.outputscale_bounds)
    y_span = max(float(np.ptp(y)), 1.0)
    bounds = [(lo_ls, hi_ls)] * d + [(lo_os, hi_os)]
    if prior.learn_noise:
        bounds.append(tuple(np.log(prior.noise_bounds)))
    bounds.append((float(y.min()) - 10 * y_span, float(y.max()) + 10 * y_span))

    ymean = float(np.mean(y))
    yvar = float(np.var(y))
    rng = np.random.default_rng(prior.seed)
    starts = []
    first = [math.log(1.0 / 3.0)] * d + [math.log(min(max(yvar, 0.1), 10.0))]
    if prior.learn_noise:
        first.append(math.log(1e-3))
    starts.append(first + [ymean])
    for _ in range(prior.n_restarts - 1):
        s = list(rng.uniform(math.log(0.05), math.log(2.0), size=d))
        s.append(rng.uniform(math.log(0.1), math.log(10.0)))
        if prior.learn_noise:
            s.append(rng.uniform(math.log(1e-5), math.log(1e-1)))
        starts.append(s + [ymean])

    fixed_noise = NOISE_FLOOR
    best = None
    for s in starts:
        res = minimize(
            _neg_log_posterior,
            np.clip(np.array(s), [b[0] for b in bounds], [b[1] for b in bounds]),
            args=(x, y, diffs_sq, prior, fixed_noise),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": prior.max_iter},
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None or best.fun >= 1e10:
        raise GpFitError("no restart produced a finite marginal likelihood")
    ls, os_, noise, m = _unpack(best.x, d, prior.learn_noise, fixed_noise)
    params = KernelParams(ls, os_, max(noise, NOISE_FLOOR))
    return GpModel.build(x, y_raw, params, m, y_offset, y_scale)


def log_marginal_likelihood(model: GpModel) -> float:
    y = model.standardize(model.train_targets) - model.mean_constant
    n = model.n_train
    return float(-0.5 * y @ model.alpha - np.sum(np.log(np.diag(model.cholesky_factor)))
                 - 0.5 * n * math.log(2 * math.pi))


__all__ = [
    "GammaPrior", "GpFitError", "GpModel", "KernelParams", "NOISE_FLOOR", "PosteriorSummary",
    "PriorConfig", "condition", "fit_map", "log_marginal_likelihood", "matern52", "posterior",
    "posterior_batch", "posterior_covariance", "sample_reparam",
]
