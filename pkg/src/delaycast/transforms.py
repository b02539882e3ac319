"""Unconstrained-to-constrained transforms used by the parameter layouts.

Positive scalars travel on the log scale; simplexes use the stick-breaking
construction so the constrained vector always sums to one exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit


def simplex_constrain(y: np.ndarray) -> tuple[np.ndarray, float]:
    """Stick-breaking map from R^(K-1) to the K-simplex.

    Returns (beta, log_jacobian). Break k uses the logistic of
    y_k - log(K-1-k), so y = 0 maps to the uniform simplex point.
    """
    y = np.asarray(y, dtype=float)
    m = y.size
    beta = np.zeros(m + 1)
    rem = 1.0
    logjac = 0.0
    for k in range(m):
        x = y[k] - np.log(m - k)
        z = expit(x)
        beta[k] = rem * z
        # log z + log(1-z) + log rem
        logjac += log_expit(x) + log_expit(-x) + np.log(rem)
        rem *= 1.0 - z
    beta[m] = rem
    return beta, float(logjac)


def simplex_unconstrain(beta: np.ndarray) -> np.ndarray:
    """Inverse stick-breaking; beta must be interior to the simplex."""
    beta = np.asarray(beta, dtype=float)
    m = beta.size - 1
    y = np.zeros(m)
    rem = 1.0
    for k in range(m):
        z = beta[k] / rem
        y[k] = np.log(z) - np.log1p(-z) + np.log(m - k)
        rem -= beta[k]
    return y


def simplex_backward(y: np.ndarray, g_beta: np.ndarray, with_jacobian: bool = True) -> np.ndarray:
    """Gradient pullback through stick-breaking.

    Given d(loss)/d(beta) for loss = f(beta) [+ log_jacobian when
    ``with_jacobian``], returns d(loss)/dy by reverse accumulation.
    """
    y = np.asarray(y, dtype=float)
    g_beta = np.asarray(g_beta, dtype=float)
    m = y.size
    # Forward pass retaining intermediates.
    z = np.zeros(m)
    rem = np.zeros(m + 1)
    rem[0] = 1.0
    for k in range(m):
        z[k] = expit(y[k] - np.log(m - k))
        rem[k + 1] = rem[k] * (1.0 - z[k])
    g_y = np.zeros(m)
    g_rem = g_beta[m]  # beta_m = rem_m
    for k in range(m - 1, -1, -1):
        dz = g_beta[k] * rem[k] - g_rem * rem[k]
        drem = g_beta[k] * z[k] + g_rem * (1.0 - z[k])
        if with_jacobian:
            dz += 1.0 / z[k] - 1.0 / (1.0 - z[k])
            drem += 1.0 / rem[k]
        g_y[k] = dz * z[k] * (1.0 - z[k])
        g_rem = drem
    return g_y
