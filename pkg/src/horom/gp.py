"""Gaussian-process regression from parameter values to latent coefficients.

One independent GP per coefficient entry, Matérn kernel with nu = 1.5.
Inputs are standardized per dimension and targets per component before
fitting; the signal variance is 1 on the standardized targets and the only
hyperparameter, the length scale, is picked from a fixed log-spaced grid by
maximizing the log marginal likelihood. All components share the training
inputs, so the kernel matrix and its Cholesky factor are computed once per
grid point and reused for every component.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import ConditioningError, InsufficientPointsError, InvalidArgumentError, ShapeError
from .latent import LatentCoefficients

LENGTH_SCALE_GRID = np.logspace(-2, 2, 25)
JITTER = 1e-8
SQRT3 = np.sqrt(3.0)


def matern_kernel(x, y, length_scale):
    """Matérn nu=1.5 covariance (1 + sqrt(3) d/l) exp(-sqrt(3) d/l), d = |x - y|."""
    if length_scale <= 0:
        raise InvalidArgumentError("length scale must be positive")
    d = np.linalg.norm(np.atleast_1d(np.asarray(x, float)) - np.atleast_1d(np.asarray(y, float)))
    r = SQRT3 * d / length_scale
    return float((1.0 + r) * np.exp(-r))


def matern_matrix(A, B, length_scale):
    d = np.sqrt(np.maximum(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1), 0.0))
    r = SQRT3 * d / length_scale
    return (1.0 + r) * np.exp(-r)


@dataclass
class GPModel:
    """A fitted GP for one target; arrays are in standardized units."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    X: np.ndarray
    y_mean: float
    y_scale: float
    length_scale: float
    chol: np.ndarray  # lower Cholesky factor of K + jitter I
    alpha: np.ndarray
    log_marginal_likelihood: float
    jitter: float = JITTER

    @property
    def inputs(self):
        return self.X * self.x_scale + self.x_mean

    @property
    def targets(self):
        # K alpha recovers the standardized targets (up to jitter)
        Kxx = matern_matrix(self.X, self.X, self.length_scale) + self.jitter * np.eye(len(self.X))
        return Kxx @ self.alpha * self.y_scale + self.y_mean


def _standardize_inputs(inputs):
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    mean = inputs.mean(axis=0)
    scale = inputs.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return inputs, mean, scale, (inputs - mean) / scale


def _check_duplicates(inputs, targets):
    _, inverse, counts = np.unique(inputs, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.all(counts == 1):
        return np.arange(len(inputs))
    keep = []
    for g in range(len(counts)):
        rows = np.nonzero(inverse == g)[0]
        if len(rows) > 1 and np.ptp(targets[rows], axis=0).max() > 0:
            raise ConditioningError(f"duplicate input {inputs[rows[0]].tolist()} with conflicting targets")
        keep.append(rows[0])
    return np.sort(np.array(keep))


def fit_many(inputs, targets, grid=LENGTH_SCALE_GRID, jitter=JITTER):
    """Fit one GP per column of ``targets`` (n, m) on shared ``inputs`` (n, p)."""
    inputs, x_mean, x_scale, Xs = _standardize_inputs(inputs)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if targets.shape[0] != inputs.shape[0]:
        raise ShapeError("inputs and targets need the same number of rows")
    if not np.all(np.isfinite(targets)):
        raise InvalidArgumentError("GP targets must be finite")
    keep = _check_duplicates(inputs, targets)
    if len(keep) < 2:
        raise InsufficientPointsError("a GP fit needs at least two distinct inputs")
    Xs, targets = Xs[keep], targets[keep]
    n, m = targets.shape
    y_mean = targets.mean(axis=0)
    # constant targets fit a zero GP and unscale by std 0, so they carry no variance
    y_scale = targets.std(axis=0)
    Y = (targets - y_mean) / np.where(y_scale > 0, y_scale, 1.0)

    best_lml = np.full(m, -np.inf)
    best_idx = np.zeros(m, dtype=int)
    factors = []
    for gi, l in enumerate(grid):
        Kxx = matern_matrix(Xs, Xs, l) + jitter * np.eye(n)
        try:
            c, low = cho_factor(Kxx, lower=True)
        except np.linalg.LinAlgError:
            factors.append(None)
            continue
        factors.append(c)
        A = cho_solve((c, low), Y)
        lml = -0.5 * np.sum(Y * A, axis=0) - np.sum(np.log(np.diag(c))) - 0.5 * n * np.log(2 * np.pi)
        better = lml > best_lml
        best_lml[better] = lml[better]
        best_idx[better] = gi
    if all(f is None for f in factors):
        raise ConditioningError("kernel matrix is not positive definite for any length scale")

    models = []
    for j in range(m):
        c = np.tril(factors[best_idx[j]])
        alpha = cho_solve((c, True), Y[:, j])
        models.append(GPModel(x_mean, x_scale, Xs, float(y_mean[j]), float(y_scale[j]),
                              float(grid[best_idx[j]]), c, alpha, float(best_lml[j]), jitter))
    return models


def fit(inputs, targets, grid=LENGTH_SCALE_GRID, jitter=JITTER):
    return fit_many(inputs, np.asarray(targets, dtype=float).reshape(-1, 1), grid, jitter)[0]


def posterior_batch(model, thetas):
    """Posterior means and variances at several points (Q, p)."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[:, None] if model.X.shape[1] == 1 else thetas[None]
    Q = (thetas - model.x_mean) / model.x_scale
    Ks = matern_matrix(Q, model.X, model.length_scale)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)
    return mean * model.y_scale + model.y_mean, var * model.y_scale**2


def posterior(model, theta):
    mean, var = posterior_batch(model, np.atleast_1d(np.asarray(theta, float))[None])
    return float(mean[0]), float(var[0])


@dataclass
class GPEnsemble:
    """L(KL+1) GPs, one per entry of the (L, KL+1) coefficient matrix."""

    models: list  # row-major over the coefficient matrix
    K: int
    L: int

    @property
    def shape(self):
        return (self.L, self.K * self.L + 1)

    def __len__(self):
        return len(self.models)

    def posterior_matrices(self, thetas):
        """Means and variances shaped (Q, L, KL+1) for Q parameter points."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        # every model shares inputs and standardization; only the length scale differs
        means = np.empty((len(thetas), len(self.models)))
        var = np.empty_like(means)
        for j, m in enumerate(self.models):
            means[:, j], var[:, j] = posterior_batch(m, thetas)
        return means.reshape(-1, *self.shape), var.reshape(-1, *self.shape)

    def mean_coefficients(self, theta):
        mean, _ = self.posterior_matrices(np.atleast_1d(theta)[None])
        return LatentCoefficients.from_matrix(mean[0], self.K)


def fit_ensemble(thetas, coef_matrices, K, grid=LENGTH_SCALE_GRID, jitter=JITTER):
    """Fit the ensemble from training parameters (n, p) and matrices (n, L, KL+1)."""
    coef_matrices = np.asarray(coef_matrices, dtype=float)
    n, L, width = coef_matrices.shape
    if width != K * L + 1:
        raise ShapeError(f"coefficient matrices must be (L, {K * L + 1}), got ({L}, {width})")
    models = fit_many(np.atleast_2d(np.asarray(thetas, float)), coef_matrices.reshape(n, -1), grid, jitter)
    return GPEnsemble(models, K, L)


def sample_posterior_matrices(ensemble, theta, n_samples=20, seed=0):
    """(n_samples, L, KL+1) independent normal draws around the posterior."""
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    mean, var = ensemble.posterior_matrices(np.atleast_1d(theta)[None])
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_samples, *ensemble.shape))
    return mean[0] + np.sqrt(var[0]) * noise


def sample_posterior(ensemble, theta, n_samples=20, seed=0):
    draws = sample_posterior_matrices(ensemble, theta, n_samples, seed)
    return [LatentCoefficients.from_matrix(d, ensemble.K) for d in draws]
