"""Pure-numpy reference implementations of the margin-head batch kernels.

These define the semantics; the numba backend mirrors them loop-for-loop.
All kernels take the precomputed cosine matrix (features x centers, already
clamped to [-1, 1]) so the matmuls stay on the BLAS path outside.
"""

import numpy as np

# Guard for the arccos derivative: sin(theta) is clamped below at this value
# so the positive-branch gradient stays finite as |cos(theta)| -> 1.
SIN_FLOOR = 1e-6


def margin_head_forward(cos, labels, scales, m_s, m_a, m_c):
    """Combined-margin logits and row softmax from a clamped cosine matrix.

    Positive-class entry becomes scale*cos(m_s*theta + m_a) - m_c with
    theta = arccos(cos); every other entry is scale*cos unchanged.

    Returns (logits, probs, logp_pos) where probs are the softmax rows and
    logp_pos is the log-probability of each row's labelled class.
    """
    n = cos.shape[0]
    rows = np.arange(n)
    logits = scales[:, None] * cos
    theta_pos = np.arccos(cos[rows, labels])
    logits[rows, labels] = scales * np.cos(m_s * theta_pos + m_a) - m_c

    row_max = logits.max(axis=1)
    shifted = logits - row_max[:, None]
    ex = np.exp(shifted)
    denom = ex.sum(axis=1)
    probs = ex / denom[:, None]
    logp_pos = shifted[rows, labels] - np.log(denom)
    return logits, probs, logp_pos


def margin_head_backward(cos, probs, labels, scales, weights, m_s, m_a, m_c,
                         inv_n, logp_pos, logp_floor):
    """Gradient of the weighted negative-log-likelihood w.r.t. the cosine matrix.

    The loss is inv_n * sum_i weights[i] * (-max(logp_pos[i], logp_floor));
    rows whose log-probability sits below the floor are constant and get zero
    gradient.  The positive column goes through the arccos/margin chain with
    the sin floor guard; negative columns differentiate to the plain scale.
    """
    n = cos.shape[0]
    rows = np.arange(n)
    coeff = np.where(logp_pos >= logp_floor, weights * inv_n, 0.0)
    grad = probs * (coeff * scales)[:, None]

    cos_pos = cos[rows, labels]
    theta = np.arccos(cos_pos)
    sin_theta = np.maximum(np.sqrt(np.maximum(1.0 - cos_pos * cos_pos, 0.0)), SIN_FLOOR)
    dpos = scales * m_s * np.sin(m_s * theta + m_a) / sin_theta
    grad[rows, labels] = coeff * (probs[rows, labels] - 1.0) * dpos
    return grad
