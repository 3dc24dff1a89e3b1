"""Prior densities for the hyperparameters of both model stages.

Each prior is evaluated as a density in its natural parametrization, the
space its construction defines it in: Gamma priors on precisions, penalized
complexity priors on standard deviations (jointly with the range for Matern
fields), the autoregressive prior on log((1+v)/(1-v)).  The fitted mode
maximizes log marginal + log natural-space prior; because that objective is a
fixed function of the parameters, the result does not depend on which
coordinates the optimizer searches in.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + math.log(var) + (x - mean) ** 2 / var)


def gamma_precision_logpdf(sigma2, shape, rate):
    """Gamma(shape, rate) on the precision 1/sigma2, evaluated at that precision."""
    if sigma2 <= 0:
        return -np.inf
    tau = 1.0 / sigma2
    return (
        shape * math.log(rate) - math.lgamma(shape) + (shape - 1) * math.log(tau) - rate * tau
    )


def inverse_gamma_logpdf(sigma2, shape, scale):
    """Inverse-Gamma density over the variance itself (its natural space)."""
    if sigma2 <= 0:
        return -np.inf
    return (
        shape * math.log(scale)
        - math.lgamma(shape)
        - (shape + 1) * math.log(sigma2)
        - scale / sigma2
    )


def ar_transform(varsigma):
    return math.log((1.0 + varsigma) / (1.0 - varsigma))


def ar_transform_inv(t):
    return math.tanh(0.5 * t)


def ar_transformed_normal_logpdf(varsigma, mean_t, sd_t):
    """Gaussian prior stated on log((1+v)/(1-v)), evaluated on that transform."""
    if not abs(varsigma) < 1.0:
        return -np.inf
    return normal_logpdf(ar_transform(varsigma), mean_t, sd_t**2)


def pc_matern_logpdf(sigma2_omega, rho, sigma0, rho0, alpha=0.05):
    """Joint penalized-complexity prior for a two-dimensional Matern field.

    Shrinks towards the base model with infinite range and zero standard
    deviation.  The tail conditions P(rho < rho0) = alpha and
    P(sigma > sigma0) = alpha pin the two rate constants; the closed form for
    dimension two is lam_r lam_s rho^-2 exp(-lam_r / rho - lam_s sigma),
    a density over (sigma, rho).
    """
    if sigma2_omega <= 0 or rho <= 0:
        return -np.inf
    sigma = math.sqrt(sigma2_omega)
    lam_rho = -math.log(alpha) * rho0
    lam_sigma = -math.log(alpha) / sigma0
    return (
        math.log(lam_rho)
        + math.log(lam_sigma)
        - 2.0 * math.log(rho)
        - lam_rho / rho
        - lam_sigma * sigma
    )


def pc_sd_logpdf(sigma2, sigma0, alpha=0.05):
    """PC prior for a standard deviation: exponential with P(sigma > sigma0) = alpha."""
    if sigma2 <= 0:
        return -np.inf
    sigma = math.sqrt(sigma2)
    lam = -math.log(alpha) / sigma0
    return math.log(lam) - lam * sigma


def spde_internal_gaussian_logpdf(sigma2_omega, rho, sd=10.0):
    """Weak independent Gaussians on the internal field scales (log tau, log kappa).

    The default spread makes this effectively flat over any plausible range.
    """
    if sigma2_omega <= 0 or rho <= 0:
        return -np.inf
    log_kappa = math.log(math.sqrt(8.0) / rho)
    # sigma2 = 1 / (4 pi kappa^2 tau^2)
    log_tau = -0.5 * (math.log(4.0 * math.pi) + 2.0 * log_kappa + math.log(sigma2_omega))
    return normal_logpdf(log_tau, 0.0, sd**2) + normal_logpdf(log_kappa, 0.0, sd**2)
