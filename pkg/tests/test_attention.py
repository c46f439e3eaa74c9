import math

import numpy as np
import pytest

from lightvit import tensor as T
from lightvit.attention import (
    AttentionParams,
    AttentionToggles,
    effective_window,
    global_aggregate,
    global_broadcast,
    lightvit_attention,
    local_attention,
    scaled_mha,
    window_partition,
    window_reverse,
)
from lightvit.errors import ConfigError, ContractError
from lightvit.nn import trunc_normal

from conftest import t64


def make_params(C, heads, rng, std=0.5):
    p = AttentionParams(C, heads).astype(np.float64)
    for _, prm in p.named_parameters():
        prm.data[...] = rng.standard_normal(prm.shape) * std
    return p


# --- scalar-loop references -----------------------------------------------------


def ref_proj(x, lin):
    return x @ lin.weight.data + (lin.bias.data if lin.bias is not None else 0.0)


def ref_attend(qs, ks, vs, scale):
    """Single-head attention with explicit loops over queries and keys."""
    out = np.zeros((len(qs), vs.shape[1]))
    for i, q in enumerate(qs):
        logits = [scale * sum(q[c] * k[c] for c in range(len(q))) for k in ks]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        z = math.fsum(e)
        for j, v in enumerate(vs):
            out[i] += (e[j] / z) * v
    return out


def ref_multihead(q, k, v, heads, scale, mask=None):
    C = q.shape[1]
    d = C // heads
    out = np.zeros((len(q), C))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        if mask is None:
            out[:, sl] = ref_attend(q[:, sl], k[:, sl], v[:, sl], scale)
        else:
            for i in range(len(q)):
                keep = mask[i]
                out[i, sl] = ref_attend(q[i : i + 1, sl], k[keep, sl], v[keep, sl], scale)[0]
    return out


def ref_masked_local(x, p, S):
    """Full attention over all H*W tokens with cross-window pairs masked out."""
    H, W, C = x.shape
    flat = x.reshape(H * W, C)
    win = np.array([(i // S) * (W // S) + (j // S) for i in range(H) for j in range(W)])
    mask = win[:, None] == win[None, :]
    q, k, v = ref_proj(flat, p.q), ref_proj(flat, p.k), ref_proj(flat, p.v)
    logits_mask = np.where(mask, 0.0, -np.inf)
    d = C // p.heads
    out = np.zeros_like(flat)
    for h in range(p.heads):
        sl = slice(h * d, (h + 1) * d)
        logit = q[:, sl] @ k[:, sl].T * p.scale + logits_mask
        logit -= logit.max(axis=1, keepdims=True)
        w = np.exp(logit)
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return ref_proj(out, p.proj).reshape(H, W, C)


def ref_lightvit(x, g, p, S):
    """Monolithic recomputation of local, aggregate and broadcast attention with loops."""
    H, W, C = x.shape
    flat = x.reshape(H * W, C)
    q, k, v = ref_proj(flat, p.q), ref_proj(flat, p.k), ref_proj(flat, p.v)
    win = [(i // S) * (W // S) + (j // S) for i in range(H) for j in range(W)]
    mask = np.array([[win[a] == win[b] for b in range(H * W)] for a in range(H * W)])
    local = ref_multihead(q, k, v, p.heads, p.scale, mask)
    g_hat = ref_multihead(ref_proj(g, p.q), k, v, p.heads, p.scale)
    bcast = ref_multihead(q, ref_proj(g_hat, p.k), ref_proj(g_hat, p.v), p.heads, p.scale)
    x_new = ref_proj(local + bcast, p.proj).reshape(H, W, C)
    return x_new, ref_proj(g_hat, p.proj)


# --- windowing --------------------------------------------------------------------


def test_partition_single_window_keeps_order(rng):
    x = rng.standard_normal((7, 7, 3))
    w, layout = window_partition(T.tensor(x), 7)
    assert layout.n_windows == 1
    assert np.array_equal(w.data[0], x.reshape(49, 3))


def test_partition_index_arithmetic(rng):
    H, W, S = 14, 14, 7
    x = rng.standard_normal((H, W, 2))
    w, _ = window_partition(T.tensor(x), S)
    assert w.shape == (4, 49, 2)
    assert np.array_equal(w.data[1, 0], x[0, 7])
    for i in range(H):
        for j in range(W):
            widx = (i // S) * (W // S) + j // S
            tidx = (i % S) * S + j % S
            assert np.array_equal(w.data[widx, tidx], x[i, j])


@pytest.mark.parametrize("H,W,S", [(4, 6, 2), (14, 14, 7), (6, 9, 3), (5, 5, 5)])
def test_partition_roundtrip_bitwise(rng, H, W, S):
    x = rng.standard_normal((H, W, 3))
    w, layout = window_partition(T.tensor(x), S)
    assert np.array_equal(window_reverse(w, layout).data, x)


def test_partition_rejects_bad_grid():
    with pytest.raises(ConfigError, match="S=7.*H=8"):
        window_partition(T.tensor(np.zeros((8, 8, 2))), 7)


def test_effective_window():
    assert effective_window(28, 28, 7) == 7
    assert effective_window(7, 7, 7) == 7
    assert effective_window(1, 1, 2) == 1


# --- scaled_mha ----------------------------------------------------------------------


def test_mha_matches_scalar_loop(rng):
    p = make_params(4, 1, rng)
    q, kv = rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
    out = scaled_mha(t64(q), t64(kv), t64(kv), p).data
    ref = ref_proj(ref_attend(ref_proj(q, p.q), ref_proj(kv, p.k), ref_proj(kv, p.v), p.scale), p.proj)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mha_single_key(rng):
    p = make_params(6, 2, rng)
    q, kv = rng.standard_normal((5, 6)), rng.standard_normal((1, 6))
    out = scaled_mha(t64(q), t64(kv), t64(kv), p).data
    row = ref_proj(ref_proj(kv, p.v), p.proj)[0]
    np.testing.assert_allclose(out, np.broadcast_to(row, (5, 6)), atol=1e-12)


def test_mha_identical_keys_average_values(rng):
    p = make_params(4, 2, rng)
    q = rng.standard_normal((3, 4))
    k = np.tile(rng.standard_normal((1, 4)), (5, 1))
    v = rng.standard_normal((5, 4))
    out = scaled_mha(t64(q), t64(k), t64(v), p).data
    mean_v = ref_proj(ref_proj(v, p.v).mean(axis=0, keepdims=True), p.proj)
    np.testing.assert_allclose(out, np.broadcast_to(mean_v, (3, 4)), atol=1e-12)


def test_scale_defaults_to_inverse_sqrt_head_dim():
    assert AttentionParams(64, 2).scale == 1 / math.sqrt(32)
    with pytest.raises(ConfigError):
        AttentionParams(10, 3)


# --- local ---------------------------------------------------------------------------


def test_local_one_window_equals_full_mha(rng):
    p = make_params(6, 3, rng)
    x = rng.standard_normal((4, 4, 6))
    flat = t64(x.reshape(16, 6))
    full = scaled_mha(flat, flat, flat, p).data.reshape(4, 4, 6)
    np.testing.assert_allclose(local_attention(t64(x), p, 4).data, full, atol=1e-12)


def _random_local_case(rng):
    S = int(rng.integers(1, 8))
    H = S * int(rng.integers(1, 14 // S + 1))
    W = S * int(rng.integers(1, 14 // S + 1))
    heads = int(rng.choice([1, 2, 4]))
    C = heads * int(rng.integers(1, 4))
    return H, W, S, C, heads


def test_local_equals_masked_full_attention_many_cases():
    rng = np.random.default_rng(7)
    for _ in range(120):
        H, W, S, C, heads = _random_local_case(rng)
        p = make_params(C, heads, rng)
        x = rng.standard_normal((H, W, C))
        out = local_attention(t64(x), p, S).data
        np.testing.assert_allclose(out, ref_masked_local(x, p, S), atol=1e-6, rtol=0)


def test_local_constant_windows_give_constant_output(rng):
    p = make_params(4, 2, rng)
    base = rng.standard_normal((2, 3, 4))
    x = np.repeat(np.repeat(base, 3, axis=0), 3, axis=1)  # 6 x 9 grid, S = 3
    out = local_attention(t64(x), p, 3).data
    for wi in range(2):
        for wj in range(3):
            block = out[3 * wi : 3 * wi + 3, 3 * wj : 3 * wj + 3].reshape(9, 4)
            np.testing.assert_allclose(block, np.broadcast_to(block[0], (9, 4)), atol=1e-12)


# --- global aggregate / broadcast ------------------------------------------------


def test_aggregate_single_token(rng):
    p = make_params(4, 2, rng)
    x = rng.standard_normal((1, 1, 4))
    g = rng.standard_normal((3, 4))
    g_hat = global_aggregate(t64(g), t64(x), p).data
    np.testing.assert_allclose(g_hat, np.broadcast_to(ref_proj(x.reshape(1, 4), p.v), (3, 4)), atol=1e-12)


def test_aggregate_permutation_invariant(rng):
    p = make_params(8, 2, rng)
    x = rng.standard_normal((4, 4, 8))
    g = rng.standard_normal((3, 8))
    perm = rng.permutation(16)
    a = global_aggregate(t64(g), t64(x), p).data
    b = global_aggregate(t64(g), t64(x.reshape(16, 8)[perm].reshape(4, 4, 8)), p).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_aggregate_matches_brute_force(rng):
    p = make_params(4, 1, rng)
    x = rng.standard_normal((2, 2, 4))
    g = rng.standard_normal((2, 4))
    flat = x.reshape(4, 4)
    ref = ref_attend(ref_proj(g, p.q), ref_proj(flat, p.k), ref_proj(flat, p.v), p.scale)
    np.testing.assert_allclose(global_aggregate(t64(g), t64(x), p).data, ref, atol=1e-12)


def test_aggregate_needs_tokens(rng):
    p = make_params(4, 1, rng)
    with pytest.raises(ContractError):
        global_aggregate(t64(np.zeros((0, 4))), t64(np.zeros((2, 2, 4))), p)


def test_broadcast_single_global_token(rng):
    p = make_params(4, 2, rng)
    x = rng.standard_normal((2, 3, 4))
    gh = rng.standard_normal((1, 4))
    out = global_broadcast(t64(x), t64(gh), p).data
    row = ref_proj(gh, p.v) @ p.proj.weight.data
    np.testing.assert_allclose(out, np.broadcast_to(row.reshape(1, 1, 4), (2, 3, 4)), atol=1e-12)


def test_broadcast_identical_globals_constant(rng):
    p = make_params(4, 2, rng)
    x = rng.standard_normal((3, 3, 4))
    gh = np.tile(rng.standard_normal((1, 4)), (5, 1))
    out = global_broadcast(t64(x), t64(gh), p).data.reshape(9, 4)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], (9, 4)), atol=1e-12)


def test_broadcast_matches_brute_force(rng):
    p = make_params(6, 3, rng)
    x = rng.standard_normal((2, 2, 6))
    gh = rng.standard_normal((3, 6))
    flat = x.reshape(4, 6)
    core = ref_multihead(ref_proj(flat, p.q), ref_proj(gh, p.k), ref_proj(gh, p.v), 3, p.scale)
    out = global_broadcast(t64(x), t64(gh), p).data.reshape(4, 6)
    np.testing.assert_allclose(out, core @ p.proj.weight.data, atol=1e-6)


# --- merged attention -------------------------------------------------------------


def test_end_to_end_matches_monolithic_reference(rng):
    for heads, C, (H, W, S) in [(1, 4, (2, 2, 2)), (2, 8, (4, 4, 2)), (2, 6, (6, 3, 3))]:
        p = make_params(C, heads, rng)
        x = rng.standard_normal((H, W, C))
        g = rng.standard_normal((2, C))
        x_new, g_new = lightvit_attention(t64(x), t64(g), p, S)
        rx, rg = ref_lightvit(x, g, p, S)
        np.testing.assert_allclose(x_new.data, rx, atol=1e-6, rtol=0)
        np.testing.assert_allclose(g_new.data, rg, atol=1e-6, rtol=0)


def test_no_global_tokens_is_local_exactly(rng):
    p = make_params(8, 2, rng)
    x = t64(rng.standard_normal((4, 4, 8)))
    ref = local_attention(x, p, 2).data
    for g in (None, t64(np.zeros((0, 8)))):
        out, _ = lightvit_attention(x, g, p, 2)
        assert np.array_equal(out.data, ref)
    out, g_out = lightvit_attention(x, t64(rng.standard_normal((2, 8))), p, 2, AttentionToggles(True, False))
    assert np.array_equal(out.data, ref)


def test_core_additive_decomposition_exact(rng):
    p = make_params(8, 2, rng)
    x = t64(rng.standard_normal((4, 4, 8)))
    g = t64(rng.standard_normal((3, 8)))
    core, g_hat = lightvit_attention(x, g, p, 2, project=False)
    local = local_attention(x, p, 2, project=False)
    bcast = global_broadcast(x, global_aggregate(g, x, p), p, project=False)
    assert np.array_equal(g_hat.data, global_aggregate(g, x, p).data)
    assert np.array_equal(core.data, local.data + bcast.data)
    # after the shared projection, up to rounding
    full, _ = lightvit_attention(x, g, p, 2)
    np.testing.assert_allclose(full.data, local_attention(x, p, 2).data + global_broadcast(x, g_hat, p).data,
                               atol=1e-12)


def test_zero_value_projection_removes_global_branch(rng):
    p = make_params(4, 2, rng)
    p.v.weight.data[...] = 0.0
    p.v.bias.data[...] = 0.0
    x = t64(rng.standard_normal((2, 2, 4)))
    g = t64(rng.standard_normal((2, 4)))
    out, _ = lightvit_attention(x, g, p, 2)
    np.testing.assert_allclose(out.data, local_attention(x, p, 2).data, atol=0)


def test_global_only_and_toggle_errors(rng):
    p = make_params(4, 1, rng)
    x = t64(rng.standard_normal((3, 3, 4)))
    g = t64(rng.standard_normal((2, 4)))
    out, _ = lightvit_attention(x, g, p, 2, AttentionToggles(local=False))  # window unused
    assert out.shape == (3, 3, 4)
    with pytest.raises(ConfigError):
        lightvit_attention(x, None, p, 3, AttentionToggles(local=False))
    with pytest.raises(ConfigError):
        AttentionToggles(False, False)


def test_attention_gradients(rng):
    from lightvit.gradcheck import gradcheck

    p = make_params(4, 2, rng)
    x = t64(rng.standard_normal((2, 2, 4)))
    g = t64(rng.standard_normal((2, 4)))
    w1, w2 = rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 4))

    def loss():
        xn, gn = lightvit_attention(x, g, p, 2)
        return (xn * w1).sum() + (gn * w2).sum()

    names, params = zip(*p.named_parameters())
    for r in gradcheck(loss, [x, g, *params], ["x", "g", *names]):
        assert r.rel_err < 1e-4, r


def test_trunc_normal_bounds():
    w = trunc_normal(np.random.default_rng(0), (10000,), std=0.02)
    assert np.all(np.abs(w) <= 0.04) and abs(w.std() - 0.0176) < 0.002
