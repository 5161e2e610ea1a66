"""Self/cross attention with 2-axis rotary embeddings, and trajectory attention.

Every attention here is pre-norm. Rotary embeddings split each head in two
halves: for spatial attention the halves carry grid row and column, for
trajectory attention they carry the flattened spatial index and the partner
frame index.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ProtocolError, ShapeError
from .numerics import Tensor
from .tokenization import Grid

ROPE_BASE = 100.0
LAYERSCALE_INIT = 1e-5

_causal_fault = False


@contextlib.contextmanager
def inject_causal_fault():
    """Test hook: drop the causal mask from trajectory attention."""
    global _causal_fault
    _causal_fault = True
    try:
        yield
    finally:
        _causal_fault = False


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    norm_g: Tensor
    norm_b: Tensor
    heads: int
    # cross-attention only: pre-norm applied to the context tokens
    ctx_g: Tensor | None = None
    ctx_b: Tensor | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"model dim {d} not divisible by heads {self.heads}")
        if (d // self.heads) % 4:
            raise ConfigError(f"head dim {d // self.heads} must be divisible by 4 for rotary halves")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "norm_g", "norm_b", "ctx_g", "ctx_b"):
            t = getattr(self, name)
            if t is not None:
                yield name, t

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int, *, cross: bool = False,
             std: float = 0.02, dtype=None) -> "AttentionParams":
        dtype = dtype or nx.default_dtype()

        def w():
            return Tensor((rng.standard_normal((dim, dim)) * std).astype(dtype), requires_grad=True)

        def z():
            return Tensor(np.zeros(dim, dtype), requires_grad=True)

        def o():
            return Tensor(np.ones(dim, dtype), requires_grad=True)

        return cls(wq=w(), bq=z(), wk=w(), bk=z(), wv=w(), bv=z(), wo=w(), bo=z(),
                   norm_g=o(), norm_b=z(), heads=heads,
                   ctx_g=o() if cross else None, ctx_b=z() if cross else None)


@dataclass
class LayerScaleParams:
    scale: Tensor

    @classmethod
    def init(cls, dim: int, eps: float = LAYERSCALE_INIT, dtype=None) -> "LayerScaleParams":
        dtype = dtype or nx.default_dtype()
        return cls(Tensor(np.full(dim, eps, dtype), requires_grad=True))


@dataclass
class TrajectoryGroup:
    """Tokens of one subject frame across its ordered partner frames."""

    subject_frame: int
    branch: str
    tokens: list[Tensor]
    partner_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.branch not in ("ego", "target"):
            raise ConfigError(f"branch must be 'ego' or 'target', got {self.branch!r}")
        if len(self.tokens) != len(self.partner_indices):
            raise ShapeError("one token tensor per partner is required")
        if any(b <= a for a, b in zip(self.partner_indices, self.partner_indices[1:])):
            raise ProtocolError(f"partner indices must be strictly increasing: {self.partner_indices}")
        if self.subject_frame in self.partner_indices:
            raise ProtocolError("subject frame cannot be its own partner")
        shapes = {t.shape for t in self.tokens}
        if len(shapes) > 1:
            raise ShapeError(f"group tokens disagree in shape: {shapes}")

    def stacked(self) -> Tensor:
        """(1, K, N, D)."""
        return nx.reshape(nx.stack(self.tokens, axis=0), (1, len(self.tokens)) + self.tokens[0].shape)


# ----------------------------------------------------------------------------
# rotary position embedding


def rope_frequencies(quarter: int, base: float = ROPE_BASE) -> np.ndarray:
    return base ** (-np.arange(quarter, dtype=np.float64) / quarter)


def rope_tables(pos_a: np.ndarray, pos_b: np.ndarray, head_dim: int,
                base: float = ROPE_BASE, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``broadcast(pos_a, pos_b).shape + (2, head_dim // 4)``."""
    if head_dim % 4:
        raise ConfigError(f"head dim {head_dim} must be divisible by 4 for rotary halves")
    freqs = rope_frequencies(head_dim // 4, base)
    pa, pb = np.broadcast_arrays(np.asarray(pos_a, np.float64), np.asarray(pos_b, np.float64))
    ang = np.stack([pa[..., None] * freqs, pb[..., None] * freqs], axis=-2)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_spatial(x: Tensor, grid: Grid, base: float = ROPE_BASE) -> Tensor:
    """Rotate (..., N, head_dim) by grid row (first half) and column (second half)."""
    if x.shape[-2] != grid.n:
        raise ShapeError(f"rope_spatial: {x.shape[-2]} tokens vs grid of {grid.n}")
    pos = grid.positions()
    cos, sin = rope_tables(pos[:, 0], pos[:, 1], x.shape[-1], base, x.dtype)
    return nx.rotary(x, cos, sin)


def rope_trajectory(x: Tensor, spatial_index, time_index, base: float = ROPE_BASE) -> Tensor:
    """Rotate by flattened spatial index (first half) and frame index (second half)."""
    cos, sin = rope_tables(np.asarray(spatial_index), np.asarray(time_index), x.shape[-1], base, x.dtype)
    return nx.rotary(x, cos, sin)


# ----------------------------------------------------------------------------
# spatial attention


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return nx.matmul(nx.softmax_rows(scores, mask), v)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"attention expects (N, D) or (B, N, D), got {x.shape}")
    return x, False


def _attention_delta(queries: Tensor, context: Tensor, p: AttentionParams,
                     q_grid: Grid, k_grid: Grid, base: float) -> Tensor:
    q = rope_spatial(_heads(nx.linear(queries, p.wq, p.bq), p.heads), q_grid, base)
    k = rope_spatial(_heads(nx.linear(context, p.wk, p.bk), p.heads), k_grid, base)
    v = _heads(nx.linear(context, p.wv, p.bv), p.heads)
    return nx.linear(_merge(_attend(q, k, v)), p.wo, p.bo)


def self_attention(tokens: Tensor, params: AttentionParams, grid: Grid,
                   base: float = ROPE_BASE) -> Tensor:
    """``x + MHA(LN(x))`` with spatial rotary on queries and keys."""
    x, squeeze = _batched(tokens)
    h = nx.layer_norm(x, params.norm_g, params.norm_b)
    out = nx.add(x, _attention_delta(h, h, params, grid, grid, base))
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def cross_attention(queries: Tensor, context: Tensor, params: AttentionParams, grid: Grid,
                    context_grid: Grid | None = None, base: float = ROPE_BASE) -> Tensor:
    """``x + MHA(LN(x), LN_ctx(context))``."""
    x, squeeze = _batched(queries)
    c, _ = _batched(context)
    h = nx.layer_norm(x, params.norm_g, params.norm_b)
    if params.ctx_g is not None:
        c = nx.layer_norm(c, params.ctx_g, params.ctx_b)
    out = nx.add(x, _attention_delta(h, c, params, grid, context_grid or grid, base))
    return nx.reshape(out, out.shape[1:]) if squeeze else out


# ----------------------------------------------------------------------------
# trajectory attention
#
# Internal layout: groups of shape (G, K, N, D) where G indexes (subject, branch)
# groups, K the partner sequence and N the spatial index. Attention runs over K
# independently for each (group, spatial index).


def _ta_heads(x: Tensor, heads: int) -> Tensor:
    """(G, N, K, D) -> (G, N, H, K, dh)."""
    g, n, k, d = x.shape
    return nx.transpose(nx.reshape(x, (g, n, k, heads, d // heads)), (0, 1, 3, 2, 4))


def _ta_tables(n: int, times: np.ndarray, head_dim: int, base: float, dtype):
    """Tables broadcasting against (G, N, H, K, head_dim)."""
    times = np.asarray(times)
    if times.ndim == 1:
        times = times[None]
    spatial = np.arange(n)[None, :, None, None]          # (1, N, 1, 1)
    t = times[:, None, None, :]                          # (G, 1, 1, K)
    return rope_tables(spatial, t, head_dim, base, dtype)


def trajectory_qkv(x: Tensor, times: np.ndarray, params: AttentionParams,
                   base: float = ROPE_BASE) -> tuple[Tensor, Tensor, Tensor]:
    """Project grouped tokens (G, K, N, D) to rotated q, k and plain v of shape (G, N, H, K, dh)."""
    xt = nx.transpose(x, (0, 2, 1, 3))
    h = nx.layer_norm(xt, params.norm_g, params.norm_b)
    cos, sin = _ta_tables(x.shape[2], times, params.head_dim, base, x.dtype)
    q = nx.rotary(_ta_heads(nx.linear(h, params.wq, params.bq), params.heads), cos, sin)
    k = nx.rotary(_ta_heads(nx.linear(h, params.wk, params.bk), params.heads), cos, sin)
    v = _ta_heads(nx.linear(h, params.wv, params.bv), params.heads)
    return q, k, v


def trajectory_output(attn: Tensor, params: AttentionParams) -> Tensor:
    """(G, N, H, K, dh) attention result -> projected (G, K, N, D)."""
    g, n, h, k, dh = attn.shape
    merged = nx.reshape(nx.transpose(attn, (0, 1, 3, 2, 4)), (g, n, k, h * dh))
    out = nx.linear(merged, params.wo, params.bo)
    return nx.transpose(out, (0, 2, 1, 3))


def causal_mask(k: int) -> np.ndarray:
    if _causal_fault:
        return np.ones((k, k), dtype=bool)
    return np.tril(np.ones((k, k), dtype=bool))


def trajectory_attention_stack(x: Tensor, times: np.ndarray, params: AttentionParams,
                               base: float = ROPE_BASE, kv_sink: list | None = None) -> Tensor:
    """Causal trajectory attention over every partner position of every group.

    ``x`` is (G, K, N, D) with partners in ascending frame order and ``times``
    the partner frame indices, (K,) or (G, K). Returns (G, K, N, D) without the
    residual. If ``kv_sink`` is a list, the rotated keys and values are appended
    to it.
    """
    q, k, v = trajectory_qkv(x, times, params, base)
    if kv_sink is not None:
        kv_sink.append((k, v))
    attn = _attend(q, k, v, causal_mask(x.shape[1]))
    return trajectory_output(attn, params)


def trajectory_attention(group: TrajectoryGroup, j: int, params: AttentionParams,
                         base: float = ROPE_BASE) -> Tensor:
    """Trajectory attention output (N, D) for partner frame ``j`` of ``group``."""
    if j not in group.partner_indices:
        raise IndexError(f"partner {j} not in group partners {group.partner_indices}")
    pos = group.partner_indices.index(j)
    out = trajectory_attention_stack(group.stacked(), np.asarray(group.partner_indices), params, base)
    return nx.reshape(nx.take(out, [pos], axis=1), out.shape[2:])


def trajectory_encode_stack(x: Tensor, times: np.ndarray, params: AttentionParams,
                            ls: LayerScaleParams, base: float = ROPE_BASE,
                            kv_sink: list | None = None) -> Tensor:
    """``x + LS(TA(x))`` for a (G, K, N, D) stack."""
    return nx.add(x, nx.mul(trajectory_attention_stack(x, times, params, base, kv_sink), ls.scale))


def trajectory_encoder(group: TrajectoryGroup, j: int, params: AttentionParams,
                       ls: LayerScaleParams, base: float = ROPE_BASE) -> Tensor:
    ta = trajectory_attention(group, j, params, base)
    return nx.add(group.tokens[group.partner_indices.index(j)], nx.mul(ta, ls.scale))


def attend_cached(q_new: Tensor, k_hist: Sequence[np.ndarray] | np.ndarray, v_hist, k_new: Tensor,
                  v_new: Tensor) -> Tensor:
    """One new partner position attending over cached keys/values plus itself.

    ``q_new``/``k_new``/``v_new`` are (G, N, H, 1, dh); histories (G, N, H, K, dh).
    """
    k_all = nx.concat([Tensor(np.asarray(k_hist)), k_new], axis=3)
    v_all = nx.concat([Tensor(np.asarray(v_hist)), v_new], axis=3)
    return _attend(q_new, k_all, v_all)
