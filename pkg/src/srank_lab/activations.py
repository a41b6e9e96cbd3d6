"""Elementwise activations with derivatives, and a stable row softmax."""

import math

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Valid derivative suprema: max |gelu'| ~ 1.1269 at sqrt(2), max |silu'| ~ 1.0998.
LIPSCHITZ = {"gelu": 1.13, "silu": 1.1}


def _phi(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * _phi(x)


def gelu_prime(x):
    x = np.asarray(x, dtype=np.float64)
    return _phi(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def silu_prime(x):
    x = np.asarray(x, dtype=np.float64)
    sig = _sigmoid(x)
    return sig * (1.0 + x * (1.0 - sig))


ACTIVATIONS = {
    "gelu": (gelu, gelu_prime),
    "silu": (silu, silu_prime),
}


def row_softmax(x):
    """Softmax along the last axis, stable under large logits and -inf masks."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
