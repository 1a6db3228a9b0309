import numpy as np
from scipy.special import expit


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def pair_sum(a, b):
    """sum over leading axes of outer(a, b): (..., m), (..., n) -> (m, n)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])
