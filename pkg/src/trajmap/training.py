"""Loss, AdamW, data schedules and the training / ablation drivers."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .decoder import DecoderWeights, ModelConfig, decode_window, forward_window, is_layerscale
from .errors import ConfigError, NumericError
from .metrics import EvalProtocol, EvalReport, evaluate
from .numerics import Tensor
from .synthscene import ClipSample
from .tokenization import Frame

log = logging.getLogger(__name__)

SCHEDULES = ("synthetic_only", "joint", "synthetic_then_real", "real_then_synthetic")
# style A stands in for synthetic data, style B for real data
STYLE_A, STYLE_B = "A", "B"


@dataclass
class TrainConfig:
    epochs: int = 30
    clips_per_epoch: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    warmup_frac: float = 0.05
    schedule: str = "real_then_synthetic"
    switch_epoch: int = 5  # length of the real-data (style B) phase
    window: int = 5
    frame_strides: tuple[int, ...] = (1, 2)
    val_settings: tuple[tuple[int, int], ...] = ((2, 6), (4, 3))
    val_clips: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.schedule in ("synthetic_then_real", "real_then_synthetic") and self.epochs > 0 \
                and not self.switch_epoch < self.epochs:
            raise ConfigError(f"switch_epoch ({self.switch_epoch}) must be < epochs ({self.epochs})")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.batch_size < 1 or self.clips_per_epoch < 0 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1; epochs and clips_per_epoch >= 0")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.clips_per_epoch / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


# ----------------------------------------------------------------------------
# loss


def _normalize_gt(gt: np.ndarray) -> np.ndarray:
    flat = gt.reshape(gt.shape[0], -1, 3).astype(np.float64)
    scale = np.linalg.norm(flat, axis=-1).mean(axis=1)
    if np.any(scale < 1e-8):
        raise NumericError("ground-truth pointcloud has near-zero mean distance to the origin")
    return flat / scale[:, None, None]


def pointmap_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-pixel distance between scale-normalized clouds.

    ``pred``/``gt`` are (B, U, V, 3) batches of clouds; each cloud is divided by
    its own mean distance to the origin before comparison, and the result is
    averaged over pixels and clouds.
    """
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    b = pred.shape[0]
    g = _normalize_gt(gt).astype(pred.dtype)
    p = nx.reshape(pred, (b, -1, 3))
    scale = nx.clamp_min(nx.mean(nx.safe_norm(p, axis=-1), axis=1), 1e-8)
    pn = nx.div(p, nx.reshape(scale, (b, 1, 1)))
    return nx.mean(nx.safe_norm(nx.sub(pn, g), axis=-1))


def window_loss(frames: Sequence[Frame], clip: ClipSample, weights: DecoderWeights, mode: str) -> Tensor:
    out = decode_window(frames, weights, mode)
    ego_gt = np.stack([clip.ego(i) for i, _ in out.layout.pairs])
    tgt_gt = np.stack([clip.target(j, i) for i, j in out.layout.pairs])
    pred = nx.concat([out.ego_points, out.target_points], axis=0)
    return pointmap_loss(pred, np.concatenate([ego_gt, tgt_gt]))


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # decay applied on the last step per parameter (zero for layerscales)
    last_decay: dict[str, float] = field(default_factory=dict)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over ``warmup_frac`` of the steps, cosine decay to zero afterwards."""
    if total_steps <= 0:
        return base_lr
    warm = max(1, int(round(warmup_frac * total_steps))) if warmup_frac > 0 else 0
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(params: Sequence[tuple[str, Tensor]], grads: Mapping[str, np.ndarray],
                   state: AdamWState, lr: float, config: TrainConfig) -> AdamWState:
    """One AdamW update in place; layerscale parameters get no weight decay."""
    for name, _ in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        decay = 0.0 if is_layerscale(name) else config.weight_decay
        state.last_decay[name] = decay
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps) + decay * p.data
        p.data -= (lr * update).astype(p.dtype)
    return state


# ----------------------------------------------------------------------------
# data schedule


@dataclass(frozen=True)
class Draw:
    epoch: int
    style: str
    clip: int
    start: int
    stride: int

    def frames(self, clip: ClipSample, window: int) -> list[Frame]:
        return [Frame(clip.frames[self.start + k * self.stride], self.start + k * self.stride)
                for k in range(window)]


def epoch_style_plan(config: TrainConfig, epoch: int) -> list[str]:
    """Style of every clip drawn in ``epoch`` (1-based)."""
    n = config.clips_per_epoch
    s = config.schedule
    if s == "synthetic_only":
        return [STYLE_A] * n
    if s == "joint":
        return [STYLE_A if k % 2 == 0 else STYLE_B for k in range(n)]
    if s == "real_then_synthetic":
        return [STYLE_B if epoch <= config.switch_epoch else STYLE_A] * n
    return [STYLE_A if epoch <= config.epochs - config.switch_epoch else STYLE_B] * n


def epoch_draws(config: TrainConfig, epoch: int, pools: Mapping[str, Sequence[ClipSample]]) -> list[Draw]:
    styles = epoch_style_plan(config, epoch)
    draws = []
    cursor: dict[str, list[int]] = {}
    rng = np.random.default_rng([config.seed, epoch])
    for style in styles:
        pool = pools.get(style)
        if not pool:
            raise ConfigError(f"schedule {config.schedule} needs style-{style} clips")
        if not cursor.get(style):
            # (re)shuffle with an epoch-derived stream whenever a pool runs dry
            cursor[style] = list(rng.permutation(len(pool))[::-1])
        idx = int(cursor[style].pop())
        clip = pool[idx]
        strides = [s for s in config.frame_strides if (config.window - 1) * s < len(clip)]
        if not strides:
            raise ConfigError(f"clip of {len(clip)} frames too short for window {config.window}")
        stride = int(strides[rng.integers(len(strides))])
        start = int(rng.integers(len(clip) - (config.window - 1) * stride))
        draws.append(Draw(epoch, style, idx, start, stride))
    return draws


# ----------------------------------------------------------------------------
# training driver


@dataclass
class EpochLog:
    epoch: int
    phase: str
    train_loss: float
    val: dict[str, float]

    def line(self) -> str:
        m2 = self.val.get("M@2", float("nan"))
        m4 = self.val.get("M@4", float("nan"))
        return f"{self.epoch}, {self.phase}, {self.train_loss:.6f}, {m2:.6f}, {m4:.6f}"


@dataclass
class TrainResult:
    weights: DecoderWeights
    best_weights: DecoderWeights
    log: list[EpochLog]
    draws: list[Draw]
    step_losses: list[float]


def _phase(styles: Sequence[str]) -> str:
    uniq = sorted(set(styles))
    if uniq == [STYLE_A]:
        return "synthetic"
    if uniq == [STYLE_B]:
        return "real"
    return "joint" if uniq else "none"


def model_predictor(weights: DecoderWeights, mode: str = "trajectory"):
    def predict(frames, clip=None):
        return forward_window(frames, weights, mode)[0]
    return predict


def train_mode(weights: DecoderWeights) -> str:
    # with every layerscale pinned at zero both modes compute the same function
    return "pairwise" if weights.layerscale_frozen else "trajectory"


def train(config: TrainConfig, datasets: Mapping[str, Sequence[ClipSample]], weights: DecoderWeights,
          val_clips: Sequence[ClipSample] = (), out_dir: str | Path | None = None) -> TrainResult:
    """Train ``weights`` in place following ``config.schedule``.

    ``datasets`` maps "A" (synthetic stand-in) and/or "B" (real stand-in) to
    clips. Writes ``metrics.log``, ``data_order.txt`` and ``best/``/``last/``
    checkpoints when ``out_dir`` is given.
    """
    params = weights.trainable_parameters()
    state = AdamWState()
    mode = train_mode(weights)
    protocol = EvalProtocol(settings=config.val_settings)
    val = list(val_clips)[: config.val_clips] if config.val_clips is not None else list(val_clips)
    logs: list[EpochLog] = []
    all_draws: list[Draw] = []
    step_losses: list[float] = []
    best = weights.copy()
    best_score = math.inf
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("epoch, phase, train_loss, val_M@2, val_M@4\n")
        (out / "data_order.txt").write_text("")

    step = 0
    total = config.total_steps
    for epoch in range(1, config.epochs + 1):
        draws = epoch_draws(config, epoch, datasets)
        all_draws.extend(draws)
        losses = []
        for b0 in range(0, len(draws), config.batch_size):
            batch = draws[b0:b0 + config.batch_size]
            for _, p in params:
                p.grad = None
            batch_loss = 0.0
            for d in batch:
                clip = datasets[d.style][d.clip]
                loss = window_loss(d.frames(clip, config.window), clip, weights, mode)
                nx.check_finite(loss, "training loss")
                nx.mul(loss, 1.0 / len(batch)).backward()
                batch_loss += float(loss.data) / len(batch)
            grads = {n: p.grad for n, p in params if p.grad is not None}
            optimizer_step(params, grads, state, lr_at(step, total, config.learning_rate, config.warmup_frac),
                           config)
            step += 1
            losses.append(batch_loss)
            step_losses.append(batch_loss)
        val_scores: dict[str, float] = {}
        if val:
            val_scores = evaluate(model_predictor(weights, mode), val, protocol, "val").medians
        entry = EpochLog(epoch, _phase([d.style for d in draws]), float(np.mean(losses)) if losses else 0.0,
                         val_scores)
        logs.append(entry)
        log.info("epoch %s", entry.line())
        score = float(np.mean(list(val_scores.values()))) if val_scores else -epoch
        if score < best_score:
            best_score = score
            best = weights.copy()
        if out is not None:
            with open(out / "metrics.log", "a") as fh:
                fh.write(entry.line() + "\n")
            with open(out / "data_order.txt", "a") as fh:
                fh.writelines(f"{d.epoch}, {d.style}, {d.clip}, {d.start}, {d.stride}\n" for d in draws)
            best.save(out / "best")
            weights.save(out / "last")
    if out is not None and config.epochs == 0:
        weights.save(out / "best")
        weights.save(out / "last")
    return TrainResult(weights, best, logs, all_draws, step_losses)


# ----------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    name: str
    report: EvalReport
    layerscale_max: float

    @property
    def mean_error(self) -> float:
        return self.report.mean_error


@dataclass
class AblationResult:
    rows: list[AblationRow]
    baseline_mode_gap: float  # max |trajectory - pairwise| eval difference of the frozen model
    results: dict[str, TrainResult]

    def table(self) -> str:
        labels = list(self.rows[0].report.medians)
        head = f"{'model':<22}" + "".join(f"{l:>9}" for l in labels) + f"{'mean':>9}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.name:<22}" + "".join(f"{r.report.medians[l]:>9.4f}" for l in labels)
                         + f"{r.mean_error:>9.4f}")
        return "\n".join(lines)


def ablation_run(config: TrainConfig, model_config: ModelConfig, datasets: Mapping[str, Sequence[ClipSample]],
                 test_clips: Sequence[ClipSample], protocol: EvalProtocol = EvalProtocol(),
                 val_clips: Sequence[ClipSample] = (), init_seed: int = 0) -> AblationResult:
    """Train the frozen-layerscale baseline and the full model on identical budgets."""
    results: dict[str, TrainResult] = {}
    rows = []
    gap = 0.0
    for name, frozen in (("pairwise_baseline", True), ("trajectory_encoder", False)):
        weights = DecoderWeights.init(model_config, seed=init_seed)
        if frozen:
            weights.freeze_layerscale()
        res = train(config, datasets, weights, val_clips)
        results[name] = res
        report = evaluate(model_predictor(res.weights, "trajectory"), test_clips, protocol, name)
        if frozen:
            pw = evaluate(model_predictor(res.weights, "pairwise"), test_clips, protocol, name)
            gap = max(abs(report.medians[k] - pw.medians[k]) for k in report.medians)
        ls_max = max(float(np.abs(t.data).max()) for t in res.weights.layerscales())
        rows.append(AblationRow(name, report, ls_max))
        log.info("ablation %s mean error %.4f", name, report.mean_error)
    return AblationResult(rows, gap, results)


def config_dict(config) -> dict:
    return dataclasses.asdict(config)
