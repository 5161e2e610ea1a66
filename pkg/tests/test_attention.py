import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajmap import numerics as nx
from trajmap.attention import (
    AttentionParams,
    LayerScaleParams,
    TrajectoryGroup,
    cross_attention,
    rope_spatial,
    rope_trajectory,
    self_attention,
    trajectory_attention,
    trajectory_encoder,
)
from trajmap.errors import ConfigError
from trajmap.numerics import Tensor
from trajmap.tokenization import Grid

BASE = 100.0

# ----------------------------------------------------------------------------
# naive oracles (per element loops, float64)


def naive_rotate(vec, pos_a, pos_b):
    """Rotate-half convention per axis half: dims [h*2k + m] and [h*2k + k + m] pair up."""
    d = len(vec)
    k = d // 4
    out = np.array(vec, dtype=float)
    for h, pos in enumerate((pos_a, pos_b)):
        for m in range(k):
            ang = pos * BASE ** (-m / k)
            i0, i1 = h * 2 * k + m, h * 2 * k + k + m
            a, b = vec[i0], vec[i1]
            out[i0] = a * math.cos(ang) - b * math.sin(ang)
            out[i1] = b * math.cos(ang) + a * math.sin(ang)
    return out


def naive_ln(x, g, b):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / math.sqrt(var + 1e-5) * gg + bb for v, gg, bb in zip(x, g, b)])


def naive_mha(q_in, kv_in, p, q_pos, k_pos, mask=None):
    """q_in (N, D), kv_in (M, D) already normalized; positions are (a, b) pairs per token."""
    wq, wk, wv, wo = (np.asarray(t.data, float) for t in (p.wq, p.wk, p.wv, p.wo))
    bq, bk, bv, bo = (np.asarray(t.data, float) for t in (p.bq, p.bk, p.bv, p.bo))
    h, dh = p.heads, p.head_dim
    n, m = len(q_in), len(kv_in)
    merged = np.zeros((n, h * dh))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        qs = [naive_rotate((q_in[i] @ wq + bq)[sl], *q_pos[i]) for i in range(n)]
        ks = [naive_rotate((kv_in[j] @ wk + bk)[sl], *k_pos[j]) for j in range(m)]
        vs = [(kv_in[j] @ wv + bv)[sl] for j in range(m)]
        for i in range(n):
            allowed = [j for j in range(m) if mask is None or mask[i][j]]
            logits = [sum(qs[i][c] * ks[j][c] for c in range(dh)) / math.sqrt(dh) for j in allowed]
            top = max(logits)
            ws = [math.exp(v - top) for v in logits]
            z = sum(ws)
            for w, j in zip(ws, allowed):
                merged[i, sl] += (w / z) * vs[j]
    return merged @ wo + bo


def _params(rng, dim=16, heads=2, cross=False, std=0.4):
    p = AttentionParams.init(rng, dim, heads, cross=cross, std=std, dtype=np.float64)
    for _, t in p.named():
        t.data += rng.normal(size=t.shape) * 0.1
    return p


def _grid_pos(grid):
    return [tuple(map(float, rc)) for rc in grid.positions()]


# ----------------------------------------------------------------------------
# rotary


def test_rope_identity_at_origin_and_norm(rng):
    x = Tensor(rng.normal(size=(1, 16)))
    out = rope_spatial(x, Grid(1, 1)).data
    assert np.array_equal(out, x.data)
    y = Tensor(rng.normal(size=(16, 8)))
    r = rope_spatial(y, Grid(4, 4)).data
    assert np.allclose(np.linalg.norm(r, axis=-1), np.linalg.norm(y.data, axis=-1), atol=1e-6)
    t0 = rope_trajectory(Tensor(rng.normal(size=8)), 0, 0).data
    assert t0.shape == (8,)


def test_rope_rejects_head_dim_not_multiple_of_4(rng):
    with pytest.raises(Exception):
        rope_spatial(Tensor(rng.normal(size=(4, 6))), Grid(2, 2))
    with pytest.raises(ConfigError):
        AttentionParams.init(rng, 12, 2)


def test_rope_matches_naive_rotation(rng):
    x = rng.normal(size=(16, 8))
    got = rope_spatial(Tensor(x), Grid(4, 4)).data
    for n, (r, c) in enumerate(Grid(4, 4).positions()):
        assert np.allclose(got[n], naive_rotate(x[n], r, c), atol=1e-12)


def test_rope_spatial_relative_property_exhaustive(rng):
    grid = Grid(4, 4)
    q, k = rng.normal(size=8), rng.normal(size=8)
    qs = rope_spatial(Tensor(np.tile(q, (16, 1))), grid).data
    ks = rope_spatial(Tensor(np.tile(k, (16, 1))), grid).data
    seen: dict[tuple[int, int], float] = {}
    pos = grid.positions()
    for a in range(16):
        for b in range(16):
            delta = tuple(pos[a] - pos[b])
            val = float(qs[a] @ ks[b])
            if delta in seen:
                assert abs(seen[delta] - val) <= 1e-9
            else:
                seen[delta] = val
    assert len(seen) == 49


def test_rope_trajectory_depends_on_time_offset_only(rng):
    q, k = rng.normal(size=8), rng.normal(size=8)
    for delta in range(0, 4):
        vals = [float(rope_trajectory(Tensor(q), 3, t + delta).data @ rope_trajectory(Tensor(k), 3, t).data)
                for t in range(0, 7)]
        assert max(vals) - min(vals) <= 1e-9
    assert np.allclose(np.linalg.norm(rope_trajectory(Tensor(q), 5, 2).data), np.linalg.norm(q), atol=1e-6)
    assert np.array_equal(rope_trajectory(Tensor(q), 0, 0).data, q)


# ----------------------------------------------------------------------------
# spatial attention


def test_self_attention_single_token(rng):
    p = _params(rng)
    x = rng.normal(size=(1, 16))
    out = self_attention(Tensor(x), p, Grid(1, 1)).data
    h = naive_ln(x[0], p.norm_g.data, p.norm_b.data)
    v = h @ p.wv.data + p.bv.data
    assert np.allclose(out[0], x[0] + v @ p.wo.data + p.bo.data, atol=1e-12)


def test_self_attention_vs_naive_loop(rng):
    grid = Grid(4, 4)
    p = _params(rng)
    x = rng.normal(size=(16, 16))
    got = self_attention(Tensor(x), p, grid).data
    h = np.stack([naive_ln(r, p.norm_g.data, p.norm_b.data) for r in x])
    pos = _grid_pos(grid)
    assert np.max(np.abs(got - (x + naive_mha(h, h, p, pos, pos)))) <= 1e-6


def test_self_attention_logits_translation_invariant(rng):
    # shifting every position by (1, 1) leaves all q.k logits unchanged
    from trajmap.attention import rope_tables

    q, k = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    pos = Grid(4, 4).positions()

    def logits(offset):
        cos, sin = rope_tables(pos[:, 0] + offset, pos[:, 1] + offset, 8, BASE, np.float64)
        qr, kr = nx.rotary(Tensor(q), cos, sin).data, nx.rotary(Tensor(k), cos, sin).data
        return qr @ kr.T

    assert np.allclose(logits(0), logits(1), atol=1e-12)


def test_cross_attention_vs_naive_loop(rng):
    qg, kg = Grid(2, 3), Grid(4, 2)
    p = _params(rng, cross=True)
    x, c = rng.normal(size=(6, 16)), rng.normal(size=(8, 16))
    got = cross_attention(Tensor(x), Tensor(c), p, qg, context_grid=kg).data
    h = np.stack([naive_ln(r, p.norm_g.data, p.norm_b.data) for r in x])
    hc = np.stack([naive_ln(r, p.ctx_g.data, p.ctx_b.data) for r in c])
    ref = x + naive_mha(h, hc, p, _grid_pos(qg), _grid_pos(kg))
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_cross_attention_with_itself_is_self_attention(rng):
    grid = Grid(4, 4)
    p = _params(rng, cross=True)
    p.ctx_g.data[:] = p.norm_g.data
    p.ctx_b.data[:] = p.norm_b.data
    x = Tensor(rng.normal(size=(16, 16)))
    assert np.allclose(cross_attention(x, x, p, grid).data, self_attention(x, p, grid).data, atol=1e-6)


def test_cross_attention_single_context_token(rng):
    p = _params(rng, cross=True)
    x, c = rng.normal(size=(16, 16)), rng.normal(size=(1, 16))
    out = cross_attention(Tensor(x), Tensor(c), p, Grid(4, 4), context_grid=Grid(1, 1)).data
    v = naive_ln(c[0], p.ctx_g.data, p.ctx_b.data) @ p.wv.data + p.bv.data
    assert np.allclose(out, x + (v @ p.wo.data + p.bo.data), atol=1e-12)


def test_attention_accepts_batches(rng):
    p = _params(rng)
    x = rng.normal(size=(3, 16, 16))
    batched = self_attention(Tensor(x), p, Grid(4, 4)).data
    for b in range(3):
        assert np.allclose(batched[b], self_attention(Tensor(x[b]), p, Grid(4, 4)).data, atol=1e-12)


# ----------------------------------------------------------------------------
# trajectory attention


def _group(rng, k=4, n=4, d=16, partners=None, subject=0):
    partners = partners or list(range(1, k + 1))
    return TrajectoryGroup(subject, "ego", [Tensor(rng.normal(size=(n, d))) for _ in partners], partners)


def naive_trajectory(group, j, p):
    pos = group.partner_indices.index(j)
    n = group.tokens[0].shape[0]
    out = np.zeros(group.tokens[0].shape)
    for s in range(n):
        seq = np.stack([naive_ln(t.data[s], p.norm_g.data, p.norm_b.data) for t in group.tokens[:pos + 1]])
        times = [(float(s), float(t)) for t in group.partner_indices[:pos + 1]]
        out[s] = naive_mha(seq[-1:], seq, p, times[-1:], times)[0]
    return out


def test_trajectory_attention_vs_per_index_brute_force(rng):
    p = _params(rng)
    g = _group(rng, partners=[2, 3, 5, 6], subject=1)
    for j in g.partner_indices:
        got = trajectory_attention(g, j, p).data
        assert np.max(np.abs(got - naive_trajectory(g, j, p))) <= 1e-6


def test_trajectory_attention_single_partner_is_value_path(rng):
    p = _params(rng)
    g = _group(rng, k=1)
    x = g.tokens[0].data
    h = np.stack([naive_ln(r, p.norm_g.data, p.norm_b.data) for r in x])
    ref = (h @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    assert np.allclose(trajectory_attention(g, 1, p).data, ref, atol=1e-12)


def test_trajectory_attention_unknown_partner():
    rng = np.random.default_rng(0)
    with pytest.raises(IndexError):
        trajectory_attention(_group(rng), 9, _params(rng))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_trajectory_causality_bit_exact(k, seed):
    rng = np.random.default_rng(seed)
    p = _params(rng)
    g = _group(rng, k=k)
    for pos in range(k - 1):
        ref = trajectory_attention(g, g.partner_indices[pos], p).data
        changed = TrajectoryGroup(g.subject_frame, g.branch,
                                  g.tokens[:pos + 1] + [Tensor(rng.normal(size=(4, 16)) * 5)
                                                         for _ in g.tokens[pos + 1:]],
                                  g.partner_indices)
        assert np.array_equal(trajectory_attention(changed, g.partner_indices[pos], p).data, ref)


def test_trajectory_spatial_separability(rng):
    p = _params(rng)
    g = _group(rng)
    ref = trajectory_attention(g, 4, p).data
    for t in g.tokens:
        t.data[1:] += rng.normal(size=t.data[1:].shape)
    assert np.array_equal(trajectory_attention(g, 4, p).data[0], ref[0])


def test_trajectory_encoder_layerscale_cases(rng):
    p = _params(rng)
    g = _group(rng)
    x = g.tokens[2].data
    ta = trajectory_attention(g, 3, p).data
    zero = LayerScaleParams(Tensor(np.zeros(16)))
    assert np.array_equal(trajectory_encoder(g, 3, p, zero).data, x)
    one = LayerScaleParams(Tensor(np.ones(16)))
    assert np.array_equal(trajectory_encoder(g, 3, p, one).data, x + ta)
    eps = LayerScaleParams.init(16, 1e-5, dtype=np.float64)
    assert np.all(eps.scale.data == 1e-5)
    out = trajectory_encoder(g, 3, p, eps).data
    assert np.linalg.norm(out - x) <= 1e-5 * np.linalg.norm(ta) * (1 + 1e-6)


def test_trajectory_group_validation(rng):
    t = [Tensor(np.zeros((4, 16)))] * 2
    with pytest.raises(Exception):
        TrajectoryGroup(0, "ego", t, [2, 1])
    with pytest.raises(Exception):
        TrajectoryGroup(1, "ego", t, [1, 2])
    with pytest.raises(Exception):
        TrajectoryGroup(0, "side", t, [1, 2])


def test_attention_gradients_64bit(rng):
    with nx.precision(np.float64):
        p = _params(rng, cross=True)
        x = Tensor(rng.normal(size=(2, 16, 16)))
        c = Tensor(rng.normal(size=(2, 16, 16)))
        grid = Grid(4, 4)
        params = [t for _, t in p.named()]
        assert nx.grad_check(lambda: nx.mean(nx.mul(cross_attention(self_attention(x, p, grid), c, p, grid),
                                                   cross_attention(x, c, p, grid))),
                             params, max_coords=8, step=1e-3, order=4) <= 1e-4
        g = _group(rng)
        ls = LayerScaleParams(Tensor(rng.normal(size=16), requires_grad=True))
        assert nx.grad_check(lambda: nx.mean(nx.mul(trajectory_encoder(g, 3, p, ls), trajectory_encoder(g, 4, p, ls))),
                             params + [ls.scale], max_coords=8, step=1e-3, order=4) <= 1e-4
