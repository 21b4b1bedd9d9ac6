import time

import numpy as np
import pytest

from gnot.attention import (
    attention_weights,
    merge_heads,
    normalized_attention_direct,
    normalized_attention_factored,
    softmax_attention_oracle,
    split_heads,
)
from gnot.errors import ConfigError, ContractError
from gnot.tensor import Tensor


def feature_softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def normalized_attention_double_loop(q, k, v, valid=None):
    """Definitional double sum, one query and one key at a time."""
    qn = feature_softmax_rows(q)
    kn = feature_softmax_rows(k)
    n, m = q.shape[0], k.shape[0]
    idx = range(m) if valid is None else [i for i in range(m) if valid[i]]
    out = np.zeros((n, v.shape[1]))
    for t in range(n):
        den = sum(float(qn[t] @ kn[i]) for i in idx)
        for i in idx:
            out[t] += (float(qn[t] @ kn[i]) / den) * v[i]
    return out


def softmax_attention_double_loop(q, k, v, tau):
    n, m, d = q.shape[0], k.shape[0], v.shape[1]
    out = np.zeros((n, d))
    for t in range(n):
        logits = np.array([float(q[t] @ k[i]) / tau for i in range(m)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        for i in range(m):
            out[t] += w[i] * v[i]
    return out


def rand_qkv(rng, n, m, d):
    return (
        rng.uniform(-2, 2, (n, d)),
        rng.uniform(-2, 2, (m, d)),
        rng.uniform(-2, 2, (m, d)),
    )


# ---------------------------------------------------------------------------
# softmax oracle (classical attention reference)


def test_oracle_single_key_returns_value_row():
    rng = np.random.default_rng(0)
    q, k, v = rand_qkv(rng, 5, 1, 3)
    out = softmax_attention_oracle(q, k, v)
    assert np.array_equal(out, np.broadcast_to(v[0], (5, 3)))


def test_oracle_high_temperature_approaches_mean():
    rng = np.random.default_rng(1)
    q, k, v = rand_qkv(rng, 4, 6, 3)
    out = softmax_attention_oracle(q, k, v, tau=1e6)
    assert np.max(np.abs(out - v.mean(axis=0))) <= 1e-4


def test_oracle_matches_double_loop():
    rng = np.random.default_rng(2)
    q, k, v = rand_qkv(rng, 3, 4, 2)
    got = softmax_attention_oracle(q, k, v, tau=1.7)
    want = softmax_attention_double_loop(q, k, v, tau=1.7)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_oracle_rejects_empty_keys_and_bad_tau():
    with pytest.raises(ContractError):
        softmax_attention_oracle(np.ones((2, 3)), np.ones((0, 3)), np.ones((0, 3)))
    with pytest.raises(ContractError):
        softmax_attention_oracle(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)), tau=0.0)


# ---------------------------------------------------------------------------
# normalized attention, direct form


def test_direct_single_key():
    rng = np.random.default_rng(3)
    q, k, v = rand_qkv(rng, 6, 1, 4)
    out = normalized_attention_direct(q, k, v).numpy()
    assert np.array_equal(out, np.broadcast_to(v[0], (6, 4)))


def test_direct_constant_values_fixed_point():
    rng = np.random.default_rng(4)
    q, k, _ = rand_qkv(rng, 5, 7, 3)
    c = np.array([1.5, -2.0, 0.25])
    v = np.tile(c, (7, 1))
    out = normalized_attention_direct(q, k, v).numpy()
    assert np.max(np.abs(out - c)) <= 1e-12


def test_direct_key_value_permutation_invariance():
    rng = np.random.default_rng(5)
    q, k, v = rand_qkv(rng, 5, 8, 4)
    perm = rng.permutation(8)
    base = normalized_attention_direct(q, k, v).numpy()
    permuted = normalized_attention_direct(q, k[perm], v[perm]).numpy()
    assert np.max(np.abs(base - permuted)) <= 1e-12


def test_direct_all_keys_masked_rejected():
    rng = np.random.default_rng(6)
    q, k, v = rand_qkv(rng, 3, 4, 2)
    with pytest.raises(ContractError):
        normalized_attention_direct(q, k, v, key_mask=np.zeros(4, dtype=bool))


def test_direct_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, m, d = rng.integers(1, 9, 3)
        q, k, v = rand_qkv(rng, n, m, d)
        got = normalized_attention_direct(q, k, v).numpy()
        want = normalized_attention_double_loop(q, k, v)
        assert np.max(np.abs(got - want)) <= 1e-12


# ---------------------------------------------------------------------------
# factored form


def test_factored_equals_direct_randomized():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        m = int(rng.integers(1, 65))
        d = int(rng.integers(1, 17))
        q, k, v = rand_qkv(rng, n, m, d)
        a = normalized_attention_direct(q, k, v).numpy()
        b = normalized_attention_factored(q, k, v).numpy()
        rel = np.abs(a - b) / np.maximum(np.abs(a), 1e-12)
        assert rel.max() <= 1e-10


def test_factored_single_key_exact():
    rng = np.random.default_rng(9)
    q, k, v = rand_qkv(rng, 7, 1, 5)
    out = normalized_attention_factored(q, k, v).numpy()
    assert np.array_equal(out, np.broadcast_to(v[0], (7, 5)))


def test_factored_masking_equals_truncation():
    rng = np.random.default_rng(10)
    q, k, v = rand_qkv(rng, 5, 9, 4)
    valid = np.array([1, 1, 0, 1, 0, 1, 1, 0, 1], dtype=bool)
    masked = normalized_attention_factored(q, k, v, key_mask=valid).numpy()
    truncated = normalized_attention_factored(q, k[valid], v[valid]).numpy()
    assert np.max(np.abs(masked - truncated)) <= 1e-12
    masked_direct = normalized_attention_direct(q, k, v, key_mask=valid).numpy()
    truncated_direct = normalized_attention_direct(q, k[valid], v[valid]).numpy()
    assert np.max(np.abs(masked_direct - truncated_direct)) <= 1e-12


def test_query_permutation_equivariance():
    rng = np.random.default_rng(11)
    q, k, v = rand_qkv(rng, 6, 5, 3)
    perm = rng.permutation(6)
    for fn in (normalized_attention_direct, normalized_attention_factored):
        base = fn(q, k, v).numpy()
        permuted = fn(q[perm], k, v).numpy()
        assert np.max(np.abs(base[perm] - permuted)) <= 1e-12


def test_weight_simplex_and_convex_hull():
    rng = np.random.default_rng(12)
    for _ in range(50):
        n, m, d = rng.integers(1, 10, 3)
        q, k, v = rand_qkv(rng, n, m, d)
        w = attention_weights(q, k).numpy()
        assert np.all(w >= 0)
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) <= 1e-12
        out = normalized_attention_factored(q, k, v).numpy()
        assert np.all(out <= v.max(axis=0) + 1e-9)
        assert np.all(out >= v.min(axis=0) - 1e-9)


def test_batched_leading_axes_match_per_slice():
    rng = np.random.default_rng(13)
    q = rng.uniform(-2, 2, (2, 3, 6, 4))
    k = rng.uniform(-2, 2, (2, 3, 5, 4))
    v = rng.uniform(-2, 2, (2, 3, 5, 4))
    batched = normalized_attention_factored(q, k, v).numpy()
    for i in range(2):
        for j in range(3):
            single = normalized_attention_factored(q[i, j], k[i, j], v[i, j]).numpy()
            assert np.max(np.abs(batched[i, j] - single)) <= 1e-12


def test_gradients_flow_through_both_forms():
    from test_tensor import assert_grad_close, central_difference

    rng = np.random.default_rng(14)
    q_arr, k_arr, v_arr = rand_qkv(rng, 4, 5, 3)
    r = rng.normal(size=(4, 3))
    for fn in (normalized_attention_direct, normalized_attention_factored):
        q = Tensor(q_arr, requires_grad=True)
        k = Tensor(k_arr, requires_grad=True)
        v = Tensor(v_arr, requires_grad=True)
        (fn(q, k, v) * Tensor(r)).sum().backward()

        def loss():
            return float((fn(Tensor(q_arr), Tensor(k_arr), Tensor(v_arr)) * Tensor(r)).sum().data)

        assert_grad_close(q.grad, central_difference(loss, q_arr))
        assert_grad_close(k.grad, central_difference(loss, k_arr))
        assert_grad_close(v.grad, central_difference(loss, v_arr))


# ---------------------------------------------------------------------------
# multi-head split/merge


def test_split_merge_identity_single_head():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(6, 8))
    assert np.array_equal(split_heads(Tensor(x), 1).numpy()[0], x)
    assert np.array_equal(merge_heads(split_heads(Tensor(x), 1)).numpy(), x)


def test_split_merge_round_trip_bit_identical():
    rng = np.random.default_rng(16)
    for shape, h in [((5, 12), 4), ((2, 7, 12), 3), ((3, 2, 4, 8), 2)]:
        x = rng.normal(size=shape)
        back = merge_heads(split_heads(Tensor(x), h)).numpy()
        assert np.array_equal(back, x)


def test_split_rejects_indivisible_width():
    with pytest.raises(ConfigError):
        split_heads(Tensor(np.zeros((4, 10))), 3)


def test_multihead_equals_independent_per_head_attention():
    rng = np.random.default_rng(17)
    n, m, e, h = 6, 9, 16, 4
    q = rng.uniform(-2, 2, (n, e))
    k = rng.uniform(-2, 2, (m, e))
    v = rng.uniform(-2, 2, (m, e))
    multi = merge_heads(
        normalized_attention_factored(
            split_heads(Tensor(q), h), split_heads(Tensor(k), h), split_heads(Tensor(v), h)
        )
    ).numpy()
    dh = e // h
    pieces = [
        normalized_attention_factored(
            q[:, i * dh : (i + 1) * dh], k[:, i * dh : (i + 1) * dh], v[:, i * dh : (i + 1) * dh]
        ).numpy()
        for i in range(h)
    ]
    assert np.max(np.abs(multi - np.concatenate(pieces, axis=1))) <= 1e-12


# ---------------------------------------------------------------------------
# coarse runtime ordering (strict slope windows live in the acceptance suite)


def _median_time(fn, reps=3):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def test_factored_scales_better_than_direct():
    rng = np.random.default_rng(18)
    d = 32
    sizes = (256, 2048)
    ratios = {}
    for name, fn in (("direct", normalized_attention_direct), ("factored", normalized_attention_factored)):
        times = []
        for m in sizes:
            q = rng.uniform(-1, 1, (m, d))
            k = rng.uniform(-1, 1, (m, d))
            v = rng.uniform(-1, 1, (m, d))
            fn(q, k, v)  # warm up
            times.append(_median_time(lambda: fn(q, k, v)))
        ratios[name] = times[1] / times[0]
    assert ratios["factored"] < ratios["direct"]
