"""Scale/shift-invariant pointmap error and the strided multi-window protocol."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DatasetError, InsufficientDataError, ProtocolError
from .synthscene import ClipSample
from .tokenization import Frame

DEFAULT_SETTINGS = ((2, 6), (4, 3), (6, 2))


@dataclass(frozen=True)
class EvalProtocol:
    slice_length: int = 12
    settings: tuple[tuple[int, int], ...] = DEFAULT_SETTINGS
    slice_step: int = 6  # distance between consecutive (overlapping) slice starts

    def __post_init__(self):
        if self.slice_length < 1 or self.slice_step < 1:
            raise ConfigError("slice_length and slice_step must be positive")
        for w, stride in self.settings:
            if w < 1 or stride < 1:
                raise ProtocolError(f"bad setting W={w}, stride={stride}")
            if (w - 1) * stride > self.slice_length - 1:
                raise ProtocolError(
                    f"W={w} with stride {stride} spans {(w - 1) * stride + 1} frames, "
                    f"slice has {self.slice_length}")

    @staticmethod
    def label(w: int) -> str:
        return f"M@{w}"

    @property
    def labels(self) -> list[str]:
        return [self.label(w) for w, _ in self.settings]


def parse_settings(text: str) -> tuple[tuple[int, int], ...]:
    """``"2:6,4:3,6:2"`` -> ((2, 6), (4, 3), (6, 2))."""
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2:
            raise ConfigError(f"malformed setting {item!r}; expected W:stride")
        try:
            w, stride = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ConfigError(f"malformed setting {item!r}; expected integers") from exc
        out.append((w, stride))
    if not out:
        raise ConfigError("no settings given")
    return tuple(out)


def strided_indices(slice_length: int, w: int, stride: int) -> list[int]:
    idx = [k * stride for k in range(w)]
    if idx and idx[-1] > slice_length - 1:
        raise ProtocolError(f"indices {idx} exceed a slice of {slice_length} frames")
    return idx


def lower_median(values: Sequence[float]) -> float:
    """Median; for even counts the lower of the two middle order statistics."""
    if len(values) == 0:
        raise InsufficientDataError("median of an empty collection")
    arr = np.sort(np.asarray(values, dtype=np.float64))
    return float(arr[(len(arr) - 1) // 2])


@dataclass
class AlignmentResult:
    s: float
    t: np.ndarray
    residual_median: float
    degenerate: bool = False


def align_scale_shift(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> AlignmentResult:
    """Least-squares scalar scale and 3-vector shift taking ``pred`` onto ``gt``."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise ProtocolError(f"pred {np.shape(pred)} and gt {np.shape(gt)} differ")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        p, g = p[m], g[m]
    if len(p) < 4:
        raise InsufficientDataError(f"alignment needs >= 4 valid pixels, got {len(p)}")
    pc = p - p.mean(axis=0)
    gc = g - g.mean(axis=0)
    den = float((pc * pc).sum())
    s = float((pc * gc).sum()) / den if den > 0 else 0.0
    degenerate = not s > 0
    if degenerate:
        s = 1e-8
    t = g.mean(axis=0) - s * p.mean(axis=0)
    resid = np.linalg.norm(s * p + t - g, axis=1)
    return AlignmentResult(s, t, lower_median(resid), degenerate)


def alignment_sse(pred: np.ndarray, gt: np.ndarray, s: float, t: np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    return float(((s * p + t - g) ** 2).sum())


# (frames, clip) -> {(i, j): PointmapPair | Y^{j|i} array}. The clip is passed so
# reference predictors can read ground truth; model predictors ignore it.
Predictor = Callable[[list[Frame], ClipSample], Mapping[tuple[int, int], object]]


@dataclass
class EvalReport:
    dataset: str
    settings: tuple[tuple[int, int], ...]
    medians: dict[str, float]
    pair_errors: dict[str, list[float]] = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(np.mean(list(self.medians.values())))

    def machine_lines(self) -> list[str]:
        return [f"{self.dataset}, {w}, {s}, {self.medians[EvalProtocol.label(w)]:.6f}"
                for w, s in self.settings]

    def table(self) -> str:
        width = max(len(self.dataset), 7)
        head = f"{'dataset':<{width}}  " + "  ".join(f"{EvalProtocol.label(w):>8}" for w, _ in self.settings)
        row = f"{self.dataset:<{width}}  " + "  ".join(
            f"{self.medians[EvalProtocol.label(w)]:>8.4f}" for w, _ in self.settings)
        return head + "\n" + row


def slice_starts(n_frames: int, protocol: EvalProtocol) -> list[int]:
    return list(range(0, n_frames - protocol.slice_length + 1, protocol.slice_step))


def evaluate(predict: Predictor, clips: Sequence[ClipSample], protocol: EvalProtocol = EvalProtocol(),
             dataset: str = "synthetic") -> EvalReport:
    """Median target-pointcloud error per (W, stride) setting.

    Each predicted Y^{j|i} is aligned to its ground truth on its own; the
    per-pixel residual median is taken within a pair, then the lower median
    across all pairs and slices.
    """
    medians: dict[str, float] = {}
    per_pair: dict[str, list[float]] = {}
    for w, stride in protocol.settings:
        idx = strided_indices(protocol.slice_length, w, stride)
        errors: list[float] = []
        for clip in clips:
            starts = slice_starts(len(clip), protocol)
            if not starts:
                raise DatasetError(f"clip with {len(clip)} frames is shorter than a {protocol.slice_length}-frame slice")
            for s0 in starts:
                sel = [s0 + k for k in idx]
                frames = [Frame(clip.frames[f], f) for f in sel]
                out = predict(frames, clip)
                for i in sel:
                    for j in sel:
                        if i == j:
                            continue
                        if (i, j) not in out:
                            raise DatasetError(f"prediction missing pair ({i}, {j})")
                        gt = clip.target(j, i)
                        res = align_scale_shift(_target_of(out[(i, j)]), gt, clip.validity(j))
                        errors.append(res.residual_median)
        label = protocol.label(w)
        per_pair[label] = errors
        medians[label] = lower_median(errors)
    return EvalReport(dataset, protocol.settings, medians, per_pair)


def _target_of(item) -> np.ndarray:
    return item.target if hasattr(item, "target") else np.asarray(item)


def oracle_predictor(transform: Callable[[np.ndarray], np.ndarray] | None = None) -> Predictor:
    """Predictor returning ground truth (optionally transformed), for protocol checks."""

    def predict(frames: list[Frame], clip: ClipSample):
        idx = [f.frame_index for f in frames]
        out = {}
        for i in idx:
            for j in idx:
                if i != j:
                    y = clip.target(j, i)
                    out[(i, j)] = transform(y) if transform else y
        return out

    return predict
