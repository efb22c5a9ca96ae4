"""Numba-compiled margin-head kernels.

Semantics match kernels.numpy_impl; row reductions here run left to right,
so values can differ from the numpy backend by rounding noise only.
Kernels are single-threaded by design: training determinism requires a
fixed summation order.
"""

import math

import numpy as np
from numba import njit

from .numpy_impl import SIN_FLOOR


@njit(cache=True)
def margin_head_forward(cos, labels, scales, m_s, m_a, m_c):
    n, c = cos.shape
    logits = np.empty((n, c))
    probs = np.empty((n, c))
    logp_pos = np.empty(n)
    for i in range(n):
        s = scales[i]
        y = labels[i]
        for j in range(c):
            logits[i, j] = s * cos[i, j]
        theta = math.acos(cos[i, y])
        logits[i, y] = s * math.cos(m_s * theta + m_a) - m_c

        row_max = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > row_max:
                row_max = logits[i, j]
        denom = 0.0
        for j in range(c):
            e = math.exp(logits[i, j] - row_max)
            probs[i, j] = e
            denom += e
        for j in range(c):
            probs[i, j] /= denom
        logp_pos[i] = (logits[i, y] - row_max) - math.log(denom)
    return logits, probs, logp_pos


@njit(cache=True)
def margin_head_backward(cos, probs, labels, scales, weights, m_s, m_a, m_c,
                         inv_n, logp_pos, logp_floor):
    n, c = cos.shape
    grad = np.empty((n, c))
    for i in range(n):
        coeff = weights[i] * inv_n if logp_pos[i] >= logp_floor else 0.0
        s = scales[i]
        y = labels[i]
        cs = coeff * s
        for j in range(c):
            grad[i, j] = cs * probs[i, j]
        cp = cos[i, y]
        theta = math.acos(cp)
        sin_theta = math.sqrt(max(1.0 - cp * cp, 0.0))
        if sin_theta < SIN_FLOOR:
            sin_theta = SIN_FLOOR
        dpos = s * m_s * math.sin(m_s * theta + m_a) / sin_theta
        grad[i, y] = coeff * (probs[i, y] - 1.0) * dpos
    return grad
