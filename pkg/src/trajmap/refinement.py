"""Incremental window extension with cached trajectory keys and values.

Because trajectory attention is causal in partner order, the keys and values a
subject frame computed for partners ``k < j`` are exactly what a larger window
would compute for them. Extending with a new, later frame therefore needs only
the new pairs; in-window subjects append one cache column per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import (
    attend_cached,
    trajectory_encode_stack,
    trajectory_output,
    trajectory_qkv,
)
from .decoder import (
    BRANCHES,
    DecoderWeights,
    GroupLayout,
    PointmapPair,
    _tilde,
    decode_window,
    head,
    mlp,
)
from .errors import CheckpointError, OrderingError
from .numerics import Tensor
from .tokenization import Frame, tokenize_pixels

Key = tuple[int, int, str]  # (subject frame, layer, branch)


@dataclass
class TrajectoryCache:
    """Append-only per-subject history of trajectory keys, values and tilde tokens.

    ``keys[(i, l, b)][k]`` is the rotated key of subject ``i``'s ``k``-th partner
    at layer ``l`` in branch ``b``, shaped (N, H, head_dim). ``tilde`` holds the
    matching pre-trajectory tokens (N, D). ``frame_tokens`` keeps each frame's
    tokenization so new pairs can be decoded without the original pixels.
    """

    depth: int
    heads: int
    dim: int
    n_tokens: int
    frame_tokens: dict[int, np.ndarray] = field(default_factory=dict)
    partners: dict[tuple[int, str], list[int]] = field(default_factory=dict)
    keys: dict[Key, list[np.ndarray]] = field(default_factory=dict)
    values: dict[Key, list[np.ndarray]] = field(default_factory=dict)
    tilde: dict[Key, list[np.ndarray]] = field(default_factory=dict)

    @classmethod
    def for_weights(cls, weights: DecoderWeights) -> "TrajectoryCache":
        cfg = weights.config
        return cls(cfg.depth, cfg.heads, cfg.dim, cfg.grid.n)

    @property
    def frames(self) -> list[int]:
        return sorted(self.frame_tokens)

    def record(self, layer: int, branch: str, layout: GroupLayout, tilde: Tensor,
               keys: Tensor, values: Tensor) -> None:
        """Store a full window's grouped tensors (decoder recorder hook)."""
        for g, subject in enumerate(layout.subjects):
            partners = [int(p) for p in layout.partners[g]]
            if layer == 0:
                self.partners[(subject, branch)] = partners
            for k in range(len(partners)):
                self._append((subject, layer, branch), tilde.data[g, k], keys.data[g, :, :, k],
                             values.data[g, :, :, k])

    def _append(self, key: Key, tilde: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
        self.tilde.setdefault(key, []).append(np.array(tilde))
        self.keys.setdefault(key, []).append(np.array(k))
        self.values.setdefault(key, []).append(np.array(v))

    def history(self, subject: int, layer: int, branch: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (1, N, H, K, dh) keys and values for attention."""
        key = (subject, layer, branch)
        k = np.stack(self.keys[key], axis=2)[None]
        v = np.stack(self.values[key], axis=2)[None]
        return k, v

    def validate(self) -> None:
        for (s, b), plist in self.partners.items():
            if any(q <= p for p, q in zip(plist, plist[1:])):
                raise OrderingError(f"cache partners for subject {s}/{b} not increasing: {plist}")
            for l in range(self.depth):
                key = (s, l, b)
                if not (len(self.keys[key]) == len(self.values[key]) == len(self.tilde[key]) == len(plist)):
                    raise OrderingError(f"cache entry {key} has inconsistent lengths")


def forward_window_cached(frames: Sequence[Frame], weights: DecoderWeights
                          ) -> tuple[dict[tuple[int, int], PointmapPair], TrajectoryCache]:
    """Trajectory-mode forward that also fills a :class:`TrajectoryCache`."""
    cache = TrajectoryCache.for_weights(weights)
    with nx.no_grad():
        out = decode_window(frames, weights, "trajectory", recorder=cache)
    for pos, f in enumerate(out.layout.frame_indices):
        cache.frame_tokens[f] = out.tokens.data[pos].copy()
    return out.pointmaps(), cache


def _check_compatible(cache: TrajectoryCache, weights: DecoderWeights, frame: Frame) -> None:
    cfg = weights.config
    if (cache.depth, cache.heads, cache.dim, cache.n_tokens) != (cfg.depth, cfg.heads, cfg.dim, cfg.grid.n):
        raise CheckpointError(
            f"cache built for depth={cache.depth}, heads={cache.heads}, dim={cache.dim}, "
            f"N={cache.n_tokens}; weights have depth={cfg.depth}, heads={cfg.heads}, "
            f"dim={cfg.dim}, N={cfg.grid.n}")
    if frame.pixels.shape[:2] != (cfg.height, cfg.width):
        raise CheckpointError(f"frame is {frame.pixels.shape[:2]}, weights expect {(cfg.height, cfg.width)}")
    if not cache.frame_tokens:
        raise OrderingError("cannot extend an empty cache")
    last = max(cache.frame_tokens)
    if frame.frame_index <= last:
        raise OrderingError(f"new frame index {frame.frame_index} must exceed cached index {last}")


def _append_partner(x_new: Tensor, cache: TrajectoryCache, subject: int, layer: int, branch: str,
                    new_index: int, weights: DecoderWeights) -> Tensor:
    """Trajectory encoder for one in-window subject gaining partner ``new_index``.

    ``x_new`` is the new pair's tilde tokens (N, D); returns the encoded (N, D).
    """
    bb = weights.branch(layer, branch)
    x = nx.reshape(x_new, (1, 1) + x_new.shape)
    q, k, v = trajectory_qkv(x, np.array([[new_index]]), bb.ta, weights.config.rope_base)
    k_hist, v_hist = cache.history(subject, layer, branch)
    attn = attend_cached(q, k_hist, v_hist, k, v)
    out = nx.add(x, nx.mul(trajectory_output(attn, bb.ta), bb.ls.scale))
    cache._append((subject, layer, branch), x_new.data, k.data[0, :, :, 0], v.data[0, :, :, 0])
    return nx.reshape(out, x_new.shape)


def _fresh_group(x_rows: Tensor, cache: TrajectoryCache, subject: int, partners: list[int],
                 layer: int, branch: str, weights: DecoderWeights) -> Tensor:
    """Trajectory encoder for the new subject over its (all earlier) partners."""
    bb = weights.branch(layer, branch)
    x = nx.reshape(x_rows, (1,) + x_rows.shape)
    sink: list = []
    out = trajectory_encode_stack(x, np.asarray(partners), bb.ta, bb.ls, weights.config.rope_base, sink)
    keys, values = sink[0]
    for k in range(len(partners)):
        cache._append((subject, layer, branch), x.data[0, k], keys.data[0, :, :, k], values.data[0, :, :, k])
    return nx.reshape(out, x_rows.shape)


def extend(cache: TrajectoryCache, new_frame: Frame, weights: DecoderWeights
           ) -> tuple[dict[tuple[int, int], PointmapPair], TrajectoryCache]:
    """Decode pairs (i, j) and (j, i) for the new frame j against every cached frame i.

    The cache is updated in place (and returned) so repeated calls chain.
    """
    _check_compatible(cache, weights, new_frame)
    cfg = weights.config
    grid = cfg.grid
    window = cache.frames
    j = new_frame.frame_index
    w = len(window)
    pairs = [(i, j) for i in window] + [(j, i) for i in window]

    with nx.no_grad():
        f_new = tokenize_pixels(new_frame.pixels[None], weights.tok_w, weights.tok_b, cfg.patch)
        f_new = nx.reshape(f_new, f_new.shape[1:])
        f_old = Tensor(np.stack([cache.frame_tokens[i] for i in window]))
        f_rep = nx.reshape(nx.stack([f_new] * w), (w,) + f_new.shape)
        # rows 0..w-1: pair (i, j); rows w..2w-1: pair (j, i)
        ego = nx.concat([f_old, f_rep], axis=0)
        tgt = nx.concat([f_rep, f_old], axis=0)
        ego_layers, tgt_layers = [ego], [tgt]
        for l, block in enumerate(weights.blocks):
            e_t, t_t = _tilde(ego, tgt, block, grid, cfg.rope_base)
            # ego: rows (i, j) extend subject i; rows (j, i) form subject j's group
            e_rows = [_append_partner(_row(e_t, r), cache, window[r], l, "ego", j, weights) for r in range(w)]
            e_fresh = _fresh_group(_rows(e_t, w, 2 * w), cache, j, window, l, "ego", weights)
            # target: rows (i, j) describe frame j (fresh group); rows (j, i) extend subject i
            t_fresh = _fresh_group(_rows(t_t, 0, w), cache, j, window, l, "target", weights)
            t_rows = [_append_partner(_row(t_t, w + r), cache, window[r], l, "target", j, weights)
                      for r in range(w)]
            e_bar = nx.concat([nx.stack(e_rows), e_fresh], axis=0)
            t_bar = nx.concat([t_fresh, nx.stack(t_rows)], axis=0)
            ego = mlp(e_bar, block.ego.mlp)
            tgt = mlp(t_bar, block.target.mlp)
            ego_layers.append(ego)
            tgt_layers.append(tgt)
        ego_pts = head(ego_layers, weights.ego_head, grid, cfg.patch)
        tgt_pts = head(tgt_layers, weights.target_head, grid, cfg.patch)
        nx.check_finite(ego_pts, "extend ego output")
        nx.check_finite(tgt_pts, "extend target output")

    for i in window:
        for b in BRANCHES:
            cache.partners[(i, b)].append(j)
    for b in BRANCHES:
        cache.partners[(j, b)] = list(window)
    cache.frame_tokens[j] = f_new.data.copy()

    out = {p: PointmapPair(ego_pts.data[r], tgt_pts.data[r], p[0], p[1]) for r, p in enumerate(pairs)}
    return out, cache


def _row(x: Tensor, r: int) -> Tensor:
    return nx.reshape(nx.take(x, [r], axis=0), x.shape[1:])


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    return nx.take(x, np.arange(lo, hi), axis=0)


@dataclass
class CacheReport:
    total_bytes: int
    kv_bytes: int
    tilde_bytes: int
    token_bytes: int
    entries_per_layer: dict[int, int]  # key entries (== value entries) per layer

    @property
    def kv_entries(self) -> int:
        return sum(self.entries_per_layer.values())

    def to_text(self) -> str:
        lines = [
            f"total_bytes = {self.total_bytes}",
            f"kv_bytes = {self.kv_bytes}",
            f"tilde_bytes = {self.tilde_bytes}",
            f"token_bytes = {self.token_bytes}",
            f"kv_entries = {self.kv_entries}",
        ]
        lines += [f"layer_{l}_entries = {n}" for l, n in sorted(self.entries_per_layer.items())]
        return "\n".join(lines) + "\n"


def cache_memory_report(cache: TrajectoryCache) -> CacheReport:
    kv = sum(a.nbytes for d in (cache.keys, cache.values) for lst in d.values() for a in lst)
    tl = sum(a.nbytes for lst in cache.tilde.values() for a in lst)
    tok = sum(a.nbytes for a in cache.frame_tokens.values())
    per_layer: dict[int, int] = {}
    for (_, layer, _), lst in cache.keys.items():
        per_layer[layer] = per_layer.get(layer, 0) + len(lst)
    return CacheReport(kv + tl + tok, kv, tl, tok, per_layer)
