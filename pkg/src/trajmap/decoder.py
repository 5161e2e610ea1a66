"""Siamese ego/target decoder with trajectory encoders, and the pointmap head.

Both branches run ``L`` blocks. In each block a branch applies self-attention,
cross-attends to the other branch's tokens from the previous block, optionally
passes the result through the trajectory encoder (grouped by subject frame),
then applies its MLP. A window of ``W`` frames is decoded as all ``W(W-1)``
directed pairs stacked along a batch axis.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import numerics as nx
from . import tensorio
from .attention import (
    ROPE_BASE,
    AttentionParams,
    LayerScaleParams,
    cross_attention,
    self_attention,
    trajectory_encode_stack,
)
from .errors import CheckpointError, ConfigError, ProtocolError, ShapeError
from .numerics import Tensor
from .tokenization import Frame, Grid, make_grid, tokenize_pixels, unpatchify_tensor

MODES = ("pairwise", "trajectory")
BRANCHES = ("ego", "target")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    patch: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    head_hidden: int = 128
    rope_base: float = ROPE_BASE
    layerscale_init: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        make_grid(self.height, self.width, self.patch)
        if self.dim % self.heads or (self.dim // self.heads) % 4:
            raise ConfigError(f"dim={self.dim}, heads={self.heads}: head dim must be a multiple of 4")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def grid(self) -> Grid:
        return make_grid(self.height, self.width, self.patch)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise CheckpointError(f"unknown model config key {key!r}")
            kwargs[key] = float(value) if types[key] == "float" else int(value)
        return cls(**kwargs)


# ----------------------------------------------------------------------------
# parameters


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


@dataclass
class MLPParams:
    norm_g: Tensor
    norm_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)

    @classmethod
    def init(cls, rng, dim: int, hidden: int, std: float, dtype) -> "MLPParams":
        return cls(
            norm_g=_param(np.ones(dim, dtype)), norm_b=_param(np.zeros(dim, dtype)),
            w1=_param((rng.standard_normal((dim, hidden)) * std).astype(dtype)),
            b1=_param(np.zeros(hidden, dtype)),
            w2=_param((rng.standard_normal((hidden, dim)) * std).astype(dtype)),
            b2=_param(np.zeros(dim, dtype)),
        )


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    h = nx.layer_norm(x, p.norm_g, p.norm_b)
    return nx.add(x, nx.linear(nx.gelu(nx.linear(h, p.w1, p.b1)), p.w2, p.b2))


@dataclass
class BranchBlock:
    sa: AttentionParams
    ca: AttentionParams
    ta: AttentionParams
    ls: LayerScaleParams
    mlp: MLPParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for part in ("sa", "ca", "ta"):
            for name, t in getattr(self, part).named():
                yield f"{part}.{name}", t
        yield "ls.scale", self.ls.scale
        for name, t in self.mlp.named():
            yield f"mlp.{name}", t


@dataclass
class Block:
    ego: BranchBlock
    target: BranchBlock


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class DecoderWeights:
    config: ModelConfig
    tok_w: Tensor
    tok_b: Tensor
    blocks: list[Block]
    ego_head: HeadParams
    target_head: HeadParams
    # True keeps every layerscale pinned at zero (the pair-wise baseline)
    layerscale_frozen: bool = False

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=None) -> "DecoderWeights":
        dtype = dtype or nx.default_dtype()
        rng = np.random.default_rng(seed)
        d, std = config.dim, config.init_std
        pdim = config.patch * config.patch * 3

        def branch():
            return BranchBlock(
                sa=AttentionParams.init(rng, d, config.heads, std=std, dtype=dtype),
                ca=AttentionParams.init(rng, d, config.heads, cross=True, std=std, dtype=dtype),
                ta=AttentionParams.init(rng, d, config.heads, std=std, dtype=dtype),
                ls=LayerScaleParams.init(d, config.layerscale_init, dtype=dtype),
                mlp=MLPParams.init(rng, d, config.mlp_ratio * d, std, dtype),
            )

        blocks = [Block(ego=branch(), target=branch()) for _ in range(config.depth)]

        def head():
            fan_in = (config.depth + 1) * d
            b2 = np.zeros((config.patch * config.patch, 3), dtype)
            b2[:, 2] = 1.0  # points start in front of the camera
            return HeadParams(
                w1=_param((rng.standard_normal((fan_in, config.head_hidden)) * std).astype(dtype)),
                b1=_param(np.zeros(config.head_hidden, dtype)),
                w2=_param((rng.standard_normal((config.head_hidden, pdim)) * std).astype(dtype)),
                b2=_param(b2.reshape(-1)),
            )

        return cls(
            config=config,
            tok_w=_param((rng.standard_normal((pdim, d)) * std).astype(dtype)),
            tok_b=_param(np.zeros(d, dtype)),
            blocks=blocks,
            ego_head=head(),
            target_head=head(),
        )

    @property
    def dtype(self):
        return self.tok_w.dtype

    def branch(self, layer: int, branch: str) -> BranchBlock:
        return getattr(self.blocks[layer], branch)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "tokenizer.weight", self.tok_w
        yield "tokenizer.bias", self.tok_b
        for l, blk in enumerate(self.blocks):
            for b in BRANCHES:
                for name, t in getattr(blk, b).named():
                    yield f"blocks.{l}.{b}.{name}", t
        for name, t in self.ego_head.named():
            yield f"head.ego.{name}", t
        for name, t in self.target_head.named():
            yield f"head.target.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters()
                if not (self.layerscale_frozen and is_layerscale(n))]

    def layerscales(self) -> list[Tensor]:
        return [t for n, t in self.named_parameters() if is_layerscale(n)]

    def set_layerscale(self, value: float) -> None:
        for t in self.layerscales():
            t.data[...] = value

    def freeze_layerscale(self) -> None:
        self.set_layerscale(0.0)
        self.layerscale_frozen = True

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            arr = state[name]
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr

    def astype(self, dtype) -> "DecoderWeights":
        clone = DecoderWeights.init(self.config, seed=0, dtype=dtype)
        clone.load_state_dict({n: a.astype(dtype) for n, a in self.state_dict().items()})
        clone.layerscale_frozen = self.layerscale_frozen
        return clone

    def copy(self) -> "DecoderWeights":
        return self.astype(self.dtype)

    def save(self, directory) -> None:
        tensorio.save_checkpoint(directory, self.state_dict())
        extra = f"layerscale_frozen = {int(self.layerscale_frozen)}\n"
        (Path(directory) / "config.txt").write_text(self.config.to_text() + extra)

    @classmethod
    def load(cls, directory) -> "DecoderWeights":
        root = Path(directory)
        try:
            text = (root / "config.txt").read_text()
        except OSError as exc:
            raise CheckpointError(f"cannot read {root / 'config.txt'}: {exc}") from exc
        frozen = False
        lines = []
        for line in text.splitlines():
            if line.startswith("layerscale_frozen"):
                frozen = line.split("=", 1)[1].strip() == "1"
            else:
                lines.append(line)
        config = ModelConfig.from_text("\n".join(lines))
        state = tensorio.load_checkpoint(root)
        dtypes = {a.dtype for a in state.values()}
        if len(dtypes) != 1:
            raise CheckpointError(f"mixed dtypes in checkpoint: {dtypes}")
        model = cls.init(config, dtype=dtypes.pop())
        model.load_state_dict(state)
        model.layerscale_frozen = frozen
        return model


def is_layerscale(name: str) -> bool:
    return name.endswith(".ls.scale")


# ----------------------------------------------------------------------------
# pair / group layout


@dataclass
class PointmapPair:
    ego: np.ndarray      # X^{i|j}: frame i in camera i
    target: np.ndarray   # Y^{j|i}: frame j in camera i
    subject: int         # i
    partner: int         # j


@dataclass
class GroupLayout:
    """Index maps from the pair batch to (subject, partner) groups for one branch."""

    subjects: list[int]
    partners: np.ndarray  # (G, K) partner frame indices, ascending per row
    perm: np.ndarray      # (G, K) pair-batch row holding (subject, partner)
    inverse: np.ndarray   # (P,) position of each pair row in perm.ravel()


@dataclass
class WindowLayout:
    frame_indices: list[int]
    pairs: list[tuple[int, int]]
    ego: GroupLayout
    target: GroupLayout

    @property
    def ego_rows(self) -> np.ndarray:
        pos = {f: k for k, f in enumerate(self.frame_indices)}
        return np.array([pos[i] for i, _ in self.pairs])

    @property
    def target_rows(self) -> np.ndarray:
        pos = {f: k for k, f in enumerate(self.frame_indices)}
        return np.array([pos[j] for _, j in self.pairs])

    def branch(self, name: str) -> GroupLayout:
        return self.ego if name == "ego" else self.target


def directed_pairs(frame_indices: Sequence[int]) -> list[tuple[int, int]]:
    idx = sorted(frame_indices)
    return [(i, j) for i in idx for j in idx if i != j]


def group_layout(pairs: Sequence[tuple[int, int]], branch: str) -> GroupLayout:
    """Group pair rows by subject frame.

    The ego branch's subject for pair (i, j) is i (partner j); the target
    branch's subject is j (partner i): both groups collect tokens describing
    the same frame.
    """
    row = {p: r for r, p in enumerate(pairs)}
    members: dict[int, list[int]] = {}
    for i, j in pairs:
        s, t = (i, j) if branch == "ego" else (j, i)
        members.setdefault(s, []).append(t)
    subjects = sorted(members)
    sizes = {len(v) for v in members.values()}
    if len(sizes) != 1:
        raise ProtocolError("trajectory groups must have equal partner counts")
    partners = np.array([sorted(members[s]) for s in subjects], dtype=np.int64)
    perm = np.array([[row[(s, t) if branch == "ego" else (t, s)] for t in partners[g]]
                     for g, s in enumerate(subjects)], dtype=np.int64)
    inverse = np.empty(perm.size, dtype=np.int64)
    inverse[perm.ravel()] = np.arange(perm.size)
    return GroupLayout(subjects, partners, perm, inverse)


def window_layout(frame_indices: Sequence[int]) -> WindowLayout:
    idx = sorted(frame_indices)
    if len(set(idx)) != len(idx):
        raise ProtocolError(f"duplicate frame indices in window: {list(frame_indices)}")
    if len(idx) < 2:
        raise ProtocolError(f"a window needs at least 2 frames, got {len(idx)}")
    pairs = directed_pairs(idx)
    return WindowLayout(idx, pairs, group_layout(pairs, "ego"), group_layout(pairs, "target"))


# ----------------------------------------------------------------------------
# forward


class KVRecorder(Protocol):
    def record(self, layer: int, branch: str, layout: GroupLayout, tilde: Tensor,
               keys: Tensor, values: Tensor) -> None: ...


def decoder_block_pairwise(ego_in: Tensor, target_in: Tensor, block: Block,
                           grid: Grid, base: float = ROPE_BASE) -> tuple[Tensor, Tensor]:
    """One block without trajectory encoding; works on (N, D) or stacked (P, N, D)."""
    e_t, t_t = _tilde(ego_in, target_in, block, grid, base)
    return mlp(e_t, block.ego.mlp), mlp(t_t, block.target.mlp)


def _tilde(ego: Tensor, tgt: Tensor, block: Block, grid: Grid, base: float) -> tuple[Tensor, Tensor]:
    e_sa = self_attention(ego, block.ego.sa, grid, base)
    t_sa = self_attention(tgt, block.target.sa, grid, base)
    # cross-attend to the other branch's previous-block tokens, not its SA output
    e_t = cross_attention(e_sa, tgt, block.ego.ca, grid, base=base)
    t_t = cross_attention(t_sa, ego, block.target.ca, grid, base=base)
    return e_t, t_t


def _encode_groups(tilde: Tensor, gl: GroupLayout, branch: BranchBlock, base: float,
                   layer: int, name: str, recorder: KVRecorder | None) -> Tensor:
    p, n, d = tilde.shape
    g, k = gl.perm.shape
    grouped = nx.reshape(nx.take(tilde, gl.perm.ravel(), axis=0), (g, k, n, d))
    sink: list | None = [] if recorder is not None else None
    out = trajectory_encode_stack(grouped, gl.partners, branch.ta, branch.ls, base, sink)
    if recorder is not None:
        keys, values = sink[0]
        recorder.record(layer, name, gl, grouped, keys, values)
    return nx.take(nx.reshape(out, (g * k, n, d)), gl.inverse, axis=0)


def decoder_block_trajectory(ego_in: Tensor, target_in: Tensor, block: Block, layout: WindowLayout,
                             grid: Grid, base: float = ROPE_BASE, layer: int = 0,
                             recorder: KVRecorder | None = None) -> tuple[Tensor, Tensor]:
    """One block over all directed pairs of a window, rows ordered as ``layout.pairs``."""
    if ego_in.shape[0] != len(layout.pairs) or target_in.shape[0] != len(layout.pairs):
        raise ProtocolError(f"window has {len(layout.pairs)} pairs, got {ego_in.shape[0]} rows")
    e_t, t_t = _tilde(ego_in, target_in, block, grid, base)
    e_t = _encode_groups(e_t, layout.ego, block.ego, base, layer, "ego", recorder)
    t_t = _encode_groups(t_t, layout.target, block.target, base, layer, "target", recorder)
    return mlp(e_t, block.ego.mlp), mlp(t_t, block.target.mlp)


def head(block_tokens: Sequence[Tensor], params: HeadParams, grid: Grid, patch: int) -> Tensor:
    """Concatenate the L+1 block outputs per token, MLP to P*P*3, unpatchify.

    Accepts (N, D) or (B, N, D) token tensors; returns (U, V, 3) or (B, U, V, 3).
    """
    squeeze = block_tokens[0].ndim == 2
    toks = [nx.reshape(t, (1,) + t.shape) if squeeze else t for t in block_tokens]
    x = nx.concat(toks, axis=-1)
    if x.shape[-1] != params.w1.shape[0]:
        raise ShapeError(f"head expects {params.w1.shape[0]} features, got {x.shape[-1]}")
    out = nx.linear(nx.gelu(nx.linear(x, params.w1, params.b1)), params.w2, params.b2)
    img = unpatchify_tensor(out, grid, patch)
    return nx.reshape(img, img.shape[1:]) if squeeze else img


@dataclass
class WindowActivations:
    """Block-wise tokens for every directed pair; index 0 holds the tokenizations."""

    pairs: list[tuple[int, int]]
    ego: list[Tensor] = field(default_factory=list)     # per layer, (P, N, D)
    target: list[Tensor] = field(default_factory=list)

    def ego_tokens(self, i: int, j: int, layer: int) -> np.ndarray:
        return self.ego[layer].data[self.pairs.index((i, j))]

    def target_tokens(self, j: int, i: int, layer: int) -> np.ndarray:
        """T_l^{j|i}: frame j's target tokens from pair (i, j)."""
        return self.target[layer].data[self.pairs.index((i, j))]


@dataclass
class WindowOutput:
    layout: WindowLayout
    ego_points: Tensor      # (P, U, V, 3)
    target_points: Tensor   # (P, U, V, 3)
    activations: WindowActivations
    tokens: Tensor          # (W, N, D) in layout.frame_indices order

    def pointmaps(self) -> dict[tuple[int, int], PointmapPair]:
        out = {}
        for r, (i, j) in enumerate(self.layout.pairs):
            out[(i, j)] = PointmapPair(self.ego_points.data[r], self.target_points.data[r], i, j)
        return out


def _stack_frames(frames: Sequence[Frame], config: ModelConfig) -> tuple[list[Frame], np.ndarray]:
    if len(frames) < 2:
        raise ProtocolError(f"a window needs at least 2 frames, got {len(frames)}")
    shapes = {f.pixels.shape for f in frames}
    if len(shapes) != 1:
        raise ProtocolError(f"frames in a window must share one resolution, got {shapes}")
    shape = shapes.pop()
    if shape[:2] != (config.height, config.width):
        raise ShapeError(f"frames are {shape[:2]}, model expects {(config.height, config.width)}")
    ordered = sorted(frames, key=lambda f: f.frame_index)
    return ordered, np.stack([f.pixels for f in ordered])


def decode_window(frames: Sequence[Frame], weights: DecoderWeights, mode: str = "trajectory",
                  recorder: KVRecorder | None = None) -> WindowOutput:
    """Differentiable forward over all directed pairs of a window."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = weights.config
    ordered, pixels = _stack_frames(frames, cfg)
    layout = window_layout([f.frame_index for f in ordered])
    grid = cfg.grid
    tokens = tokenize_pixels(pixels, weights.tok_w, weights.tok_b, cfg.patch)
    ego = nx.take(tokens, layout.ego_rows, axis=0)
    tgt = nx.take(tokens, layout.target_rows, axis=0)
    acts = WindowActivations(layout.pairs, [ego], [tgt])
    for l, block in enumerate(weights.blocks):
        if mode == "pairwise":
            ego, tgt = decoder_block_pairwise(ego, tgt, block, grid, cfg.rope_base)
        else:
            ego, tgt = decoder_block_trajectory(ego, tgt, block, layout, grid, cfg.rope_base,
                                                layer=l, recorder=recorder)
        acts.ego.append(ego)
        acts.target.append(tgt)
    ego_pts = head(acts.ego, weights.ego_head, grid, cfg.patch)
    tgt_pts = head(acts.target, weights.target_head, grid, cfg.patch)
    nx.check_finite(ego_pts, "ego head output")
    nx.check_finite(tgt_pts, "target head output")
    return WindowOutput(layout, ego_pts, tgt_pts, acts, tokens)


def forward_window(frames: Sequence[Frame], weights: DecoderWeights, mode: str = "trajectory"
                   ) -> tuple[dict[tuple[int, int], PointmapPair], WindowActivations]:
    """Pointmaps for every directed pair ``(i, j)`` of the window plus activations."""
    with nx.no_grad():
        out = decode_window(frames, weights, mode)
    return out.pointmaps(), out.activations


def frames_from_pixels(pixels: np.ndarray, indices: Sequence[int] | None = None) -> list[Frame]:
    indices = list(range(len(pixels))) if indices is None else list(indices)
    return [Frame(np.asarray(p), int(i)) for p, i in zip(pixels, indices)]


def check_geometry(weights: DecoderWeights, frames: Sequence[Frame]) -> None:
    for f in frames:
        if f.pixels.shape[:2] != (weights.config.height, weights.config.width):
            raise CheckpointError(
                f"frame {f.frame_index} is {f.pixels.shape[:2]}, checkpoint expects "
                f"{(weights.config.height, weights.config.width)}")


__all__ = [
    "ModelConfig", "DecoderWeights", "PointmapPair", "WindowActivations", "WindowOutput",
    "decode_window", "forward_window", "decoder_block_pairwise", "decoder_block_trajectory",
    "head", "window_layout", "group_layout", "directed_pairs",
]
