import math
from typing import Literal, Optional

import numpy as np
from scipy.special import ndtr

from .cdf_estimator import CdfEstimate, isotonic
from .exceptions import FitError
from .models import GaussianCdfFit
from .utils import configure_logger

logger = configure_logger(__name__)

MAX_ITERATIONS = 200
RELATIVE_STEP_TOLERANCE = 1e-10
INITIAL_DAMPING = 1e-3
MAX_DAMPING = 1e16

Weights = Literal['none', 'inverse-variance']

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gaussian_cdf(x, mu: float = 0.0, sigma: float = 1.0):
    """Phi((x - mu) / sigma) through scipy's ndtr."""
    return ndtr((np.asarray(x, dtype=float) - mu) / sigma)


def fit_weights(est: CdfEstimate, weights: Weights) -> np.ndarray:
    """
    Per-point weights of the least-squares objective.

    'inverse-variance' uses R L_j / F(1 - F), with the variance floored at one
    count, 1 / (R L_j), so points at F = 0 or 1 keep a finite weight.
    """
    if weights == 'none':
        return np.ones(len(est))
    if weights != 'inverse-variance':
        raise FitError(f"unknown weighting '{weights}'")
    trials = est.records * est.sizes.astype(float)
    variance = np.maximum(est.F * (1.0 - est.F), 1.0 / trials) / trials
    return 1.0 / variance


def residuals(params, x, F, w) -> np.ndarray:
    """sqrt(w) * (Phi((x - mu) / sigma) - F) with params = (mu, log sigma)."""
    mu, log_sigma = params
    return np.sqrt(w) * (ndtr((x - mu) / math.exp(log_sigma)) - F)


def jacobian(params, x, F, w) -> np.ndarray:
    """Analytic derivatives of residuals with respect to (mu, log sigma), shape (L, 2)."""
    mu, log_sigma = params
    z = (x - mu) / math.exp(log_sigma)
    phi = np.sqrt(w) * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return np.column_stack((-phi / math.exp(log_sigma), -phi * z))


def objective(params, x, F, w) -> float:
    """Weighted sum of squared residuals."""
    r = residuals(params, x, F, w)
    return float(r @ r)


def initial_guess(est: CdfEstimate) -> tuple[float, float]:
    """
    Quantile starting point: mu0 at F = 0.5, sigma0 = (x at 0.841 - x at 0.159) / 2.

    Points are sorted by abscissa and made monotone first; flat runs of
    F-hat are represented by their mean abscissa before inverting.
    """
    order = np.argsort(est.x, kind='stable')
    x = est.x[order]
    F = isotonic(est.F[order], est.sizes[order])
    levels, inverse = np.unique(F, return_inverse=True)
    centres = np.bincount(inverse, weights=x) / np.bincount(inverse)
    if levels.size < 2:
        raise FitError("all F-hat values are equal; nothing to fit")
    mu0 = float(np.interp(0.5, levels, centres))
    sigma0 = float(np.interp(0.841, levels, centres) - np.interp(0.159, levels, centres)) / 2.0
    if not sigma0 > 0:
        sigma0 = float(x[-1] - x[0]) / 4.0 or 1.0
    return mu0, sigma0


def fit_gaussian_cdf(
    est: CdfEstimate,
    weights: Weights = 'none',
    max_iterations: int = MAX_ITERATIONS,
    initial: Optional[tuple[float, float]] = None,
) -> GaussianCdfFit:
    """
    Fit Phi((x - mu) / sigma) to the sampled CDF by Levenberg-Marquardt.

    Parameters are (mu, log sigma) so sigma stays positive. A trial step is
    accepted only if it does not increase the objective; the damping shrinks
    tenfold on acceptance and grows tenfold on rejection. Iteration stops when
    the accepted step is below 1e-10 relative to the parameters, or when no
    damping can reduce the objective any more (a stationary point).

    Args:
        est (CdfEstimate): Points to fit.
        weights (str): 'none' or 'inverse-variance'.
        max_iterations (int): Iteration cap; the best iterate is returned unconverged past it.
        initial (tuple[float, float], optional): Starting (mu, sigma); defaults to quantiles.

    Returns:
        GaussianCdfFit: Parameters, residual diagnostics and the objective history.

    Raises:
        FitError: Fewer than 3 points, all F-hat equal, or every F-hat at 0 or 1.
    """
    if len(est) < 3:
        raise FitError(f"fitting needs at least 3 points, got {len(est)}")
    if np.all(est.F == est.F[0]):
        raise FitError("all F-hat values are equal; nothing to fit")
    if np.all(est.degenerate):
        raise FitError("every F-hat is 0 or 1; the points carry no shape information")

    x, F = est.x, est.F
    w = fit_weights(est, weights)
    mu0, sigma0 = initial if initial is not None else initial_guess(est)
    if not sigma0 > 0:
        raise FitError(f"initial sigma must be positive, got {sigma0}")
    params = np.array([mu0, math.log(sigma0)])
    cost = objective(params, x, F, w)
    history = [cost]
    damping = INITIAL_DAMPING
    converged = False
    iterations = 0

    while iterations < max_iterations:
        iterations += 1
        r = residuals(params, x, F, w)
        J = jacobian(params, x, F, w)
        JtJ = J.T @ J
        gradient = J.T @ r
        accepted = False
        while damping <= MAX_DAMPING:
            system = JtJ + damping * np.diag(np.maximum(np.diag(JtJ), 1e-300))
            try:
                delta = -np.linalg.solve(system, gradient)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = params + delta
            trial_cost = objective(trial, x, F, w)
            if np.isfinite(trial_cost) and trial_cost <= cost:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            # no descent direction left at any damping: stationary point
            converged = True
            logger.debug("LM stopped at iteration %d: no reducing step", iterations)
            break
        step = float(np.linalg.norm(delta))
        params, cost = trial, trial_cost
        history.append(cost)
        damping = max(damping / 10.0, 1e-12)
        logger.debug("LM iteration %d: cost=%.6g damping=%.1g step=%.3g", iterations, cost, damping, step)
        if step <= RELATIVE_STEP_TOLERANCE * (float(np.linalg.norm(params)) + RELATIVE_STEP_TOLERANCE):
            converged = True
            break

    mu, sigma = float(params[0]), math.exp(params[1])
    raw = ndtr((x - mu) / sigma) - F
    if not converged:
        logger.warning("Gaussian fit did not converge in %d iterations", max_iterations)
    logger.info("Gaussian fit: mu=%g sigma=%g max|res|=%g (%d iterations)", mu, sigma, np.abs(raw).max(), iterations)
    return GaussianCdfFit(
        mu=mu,
        sigma=sigma,
        max_residual=float(np.abs(raw).max()),
        rms_residual=float(np.sqrt(np.mean(raw * raw))),
        iterations=iterations,
        converged=converged,
        weights=weights,
        objective_history=tuple(history),
    )
