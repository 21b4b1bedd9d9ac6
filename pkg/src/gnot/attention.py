"""Softmax-free normalized attention, in quadratic and linear-cost forms.

Queries and keys are normalized along the feature axis (each row becomes a
probability vector); the pairwise similarity q~.k~ is then strictly positive,
so the per-query weights

    w_ti = (q~_t . k~_i) / sum_j (q~_t . k~_j)

form a simplex without any pairwise softmax.  Because both the numerator and
denominator are linear in the key rows, the whole output can be factored
through the d x d summary S = sum_i k~_i (x) v_i and s = sum_i k~_i, giving
cost O((N+M) d^2) instead of O(N M d).

All functions accept arrays of shape [..., N, d] / [..., M, d]; leading axes
(batch, heads) broadcast.  An optional boolean key mask of shape
broadcastable to [..., M] excludes padded key rows by zeroing their
normalized-key contribution, which is exactly equivalent to deleting them
(both S and s are linear in the key rows).
"""

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, _as_tensor, softmax_lastdim

DENOM_FLOOR = 1e-12


def _prepare(q, k, v, key_mask):
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if k.shape[-2] == 0:
        raise ContractError("attention requires at least one key/value row")
    qn = softmax_lastdim(q)
    kn = softmax_lastdim(k)
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=np.float64)
        if not np.all(mask.sum(axis=-1) >= 1):
            raise ContractError("every sequence needs at least one unmasked key")
        kn = kn * Tensor(mask[..., np.newaxis])
    return qn, kn, v


def normalized_attention_direct(q, k, v, key_mask=None):
    """Quadratic-cost reference: materializes the [N, M] weight matrix."""
    qn, kn, v = _prepare(q, k, v, key_mask)
    scores = qn @ kn.swap_last()               # [..., N, M]
    denom = scores.sum(axis=-1, keepdims=True)
    weights = scores / denom.clip_min(DENOM_FLOOR)
    return weights @ v


def normalized_attention_factored(q, k, v, key_mask=None):
    """Linear-cost form via the summary statistics S and s.

    Numerically equal to the direct form up to summation order.
    """
    qn, kn, v = _prepare(q, k, v, key_mask)
    if kn.shape[-2] == 1 and key_mask is None:
        # single key: weights are identically 1, output is v_1 bit-exactly
        # (and the true gradient w.r.t. q and k is zero)
        ones = Tensor(np.ones(qn.shape[:-1] + (1,)))
        return ones @ v
    summary = kn.swap_last() @ v               # [..., d, d]
    key_total = kn.sum(axis=-2, keepdims=True) # [..., 1, d]
    numer = qn @ summary
    denom = (qn * key_total).sum(axis=-1, keepdims=True)
    return numer / denom.clip_min(DENOM_FLOOR)


def attention_weights(q, k, key_mask=None):
    """The implied per-query weight simplex [..., N, M] (diagnostic helper)."""
    qn, kn, _ = _prepare(q, k, k, key_mask)
    scores = qn @ kn.swap_last()
    return scores / scores.sum(axis=-1, keepdims=True).clip_min(DENOM_FLOOR)


def softmax_attention_oracle(q, k, v, tau=None):
    """Classical softmax attention over plain arrays (test/benchmark reference).

    z_t = sum_i softmax_i(q_t . k_i / tau) v_i, with tau defaulting to
    sqrt(d).  Quadratic cost; never used inside the model.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if k.shape[-2] == 0:
        raise ContractError("attention requires at least one key/value row")
    if tau is None:
        tau = float(np.sqrt(q.shape[-1]))
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = q @ np.swapaxes(k, -1, -2) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ v


def _swap(x, i, j):
    axes = list(range(x.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return x.transpose(axes)


def split_heads(x, heads):
    """[..., N, E] -> [..., heads, N, E/heads]."""
    x = _as_tensor(x)
    width = x.shape[-1]
    if width % heads != 0:
        raise ConfigError(f"embedding width {width} is not divisible by {heads} heads")
    out = x.reshape(x.shape[:-1] + (heads, width // heads))
    return _swap(out, -3, -2)


def merge_heads(x):
    """[..., heads, N, d] -> [..., N, heads*d] (inverse of split_heads)."""
    x = _as_tensor(x)
    heads, n, d = x.shape[-3], x.shape[-2], x.shape[-1]
    return _swap(x, -3, -2).reshape(x.shape[:-3] + (n, heads * d))
