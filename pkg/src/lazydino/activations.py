"""Exact (erf-based) GELU and its first two derivatives."""
import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu_hess(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x) * (2.0 - x * x)


def gelu_and_grad(x):
    cdf = ndtr(x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * cdf, cdf + x * pdf
