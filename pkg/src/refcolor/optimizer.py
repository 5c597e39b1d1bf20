"""Coarse-to-fine colourisation by direct optimisation of the output image.

At each scale ``i = K .. 0`` the output is parameterised as a Laplacian
pyramid whose finest bands are frozen to those of the initial image, and the
remaining bands are updated with RMSprop against
``lambda_fda * L_fda(X, R) + lambda_p * L_p(X, O)``.
The coarsest scale starts from the high-pass of the old photo; every finer
scale starts from the upsampled previous result plus that scale's high-pass.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import image_core
from .features import Extractors
from .image_core import ImageLike, lab_to_rgb, resize, rgb_to_lab, to_array, to_tensor
from .losses import DEFAULT_N_SAMPLES, LossContext, LossWeights, total_loss
from .metrics import MetricConfig
from .pyramid import FrozenPyramid, decompose, effective_levels, freeze_top_bands, high_frequency

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "fda_only", "no_spm_f", "no_spm_p", "lab_ab_only")
LOSS_COLUMNS = ("scale", "iter", "loss_fda", "loss_p", "loss_total")
RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, iterate: np.ndarray | None = None):
        super().__init__(message)
        self.iterate = iterate


class RunAborted(RuntimeError):
    """Raised by :func:`run`; carries the partial report and offending iterate."""

    def __init__(self, message: str, report: "RunReport", iterate: np.ndarray | None = None):
        super().__init__(message)
        self.report = report
        self.iterate = iterate


@dataclass
class RunConfig:
    K: int = 3
    T: int = 200
    L: int = 5
    lr: float = 0.002
    lr_final_scale: float = 0.001
    scale_factor: float = 0.5
    size: tuple[int, int] = (256, 256)
    metric: MetricConfig = field(default_factory=MetricConfig)
    weights: LossWeights | None = None
    n_frozen: int = 2
    n_samples: int = DEFAULT_N_SAMPLES
    resample_each_iter: bool = False
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self) -> None:
        if isinstance(self.metric, dict):
            self.metric = MetricConfig(**self.metric)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.weights is None:
            self.weights = LossWeights.for_metric(self.metric.kind)
        if isinstance(self.size, int):
            self.size = (self.size, self.size)
        self.size = (int(self.size[0]), int(self.size[1]))
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.lr <= 0 or self.lr_final_scale <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0 < self.scale_factor < 1:
            raise ValueError("scale_factor must be in (0, 1)")
        if self.n_frozen < 0:
            raise ValueError("n_frozen must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        smallest = min(self.scale_shapes()[-1])
        if smallest < 4:
            raise ValueError(f"coarsest scale is {self.scale_shapes()[-1]}; reduce K or raise the size")

    def scale_shapes(self) -> list[tuple[int, int]]:
        """Working resolution of scale ``i`` at index ``i`` (finest first)."""
        h, w = self.size
        return [(round(h * self.scale_factor**i), round(w * self.scale_factor**i)) for i in range(self.K + 1)]

    def lr_at(self, i: int) -> float:
        return self.lr_final_scale if i == 0 else self.lr

    def effective_weights(self) -> LossWeights:
        if self.ablation in ("fda_only", "no_spm_f", "lab_ab_only"):
            return LossWeights(lambda_fda=self.weights.lambda_fda, lambda_p=0.0)
        return self.weights

    def effective_n_frozen(self) -> int:
        return 0 if self.ablation in ("fda_only", "no_spm_p") else self.n_frozen

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size"] = list(self.size)
        if d["metric"]["alphas"] is not None:
            d["metric"]["alphas"] = list(d["metric"]["alphas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "size" in d and not isinstance(d["size"], int):
            d["size"] = tuple(d["size"])
        return cls(**d)


class LabVariable:
    """Chrominance-only variable: fixed L* from the old photo, trainable a*b*."""

    def __init__(self, lightness: torch.Tensor, ab: torch.Tensor):
        self.lightness = lightness.detach()
        self.ab = ab.detach().clone().requires_grad_(True)

    def parameters(self) -> list[torch.Tensor]:
        return [self.ab]

    def reconstruct(self) -> torch.Tensor:
        return lab_to_rgb(torch.cat([self.lightness, self.ab], dim=1))


@dataclass
class ScaleState:
    index: int
    x: FrozenPyramid | LabVariable
    o_scaled: torch.Tensor
    r_scaled: torch.Tensor
    lr: float
    levels: int
    n_frozen: int
    optimizer: torch.optim.Optimizer | None = None
    iteration: int = 0
    loss_history: list[tuple[int, float | None, float | None, float]] = field(default_factory=list)

    def current(self) -> torch.Tensor:
        """Clamped copy of the current iterate; the variable is untouched."""
        with torch.no_grad():
            return self.x.reconstruct().clamp(0.0, 1.0)


def init_scale(i: int, prev_result: torch.Tensor | None, o_i: torch.Tensor, cfg: RunConfig,
               r_i: torch.Tensor | None = None) -> ScaleState:
    if (prev_result is None) != (i == cfg.K):
        raise ValueError("prev_result must be given for every scale except the coarsest")
    hw = tuple(o_i.shape[-2:])
    if cfg.ablation == "lab_ab_only":
        lightness = rgb_to_lab(o_i)[:, :1]
        ab = torch.zeros_like(o_i[:, :2]) if prev_result is None else rgb_to_lab(resize(prev_result, *hw))[:, 1:]
        x: FrozenPyramid | LabVariable = LabVariable(lightness, ab)
        levels, n_frozen = 0, 0
    else:
        x0 = high_frequency(o_i)
        if prev_result is not None:
            up = resize(prev_result, *hw)
            if up.shape != x0.shape:
                raise RuntimeError(f"upsampled result {tuple(up.shape)} does not match {tuple(x0.shape)}")
            x0 = up + x0
        levels = effective_levels(cfg.L, *hw)
        n_frozen = min(cfg.effective_n_frozen(), levels - 1)
        x = freeze_top_bands(decompose(x0.detach(), levels), n_frozen)
    state = ScaleState(index=i, x=x, o_scaled=o_i, r_scaled=r_i if r_i is not None else o_i,
                       lr=cfg.lr_at(i), levels=levels, n_frozen=n_frozen)
    state.optimizer = torch.optim.RMSprop(x.parameters(), lr=state.lr, alpha=RMSPROP_ALPHA, eps=RMSPROP_EPS)
    return state


def step(state: ScaleState, ctx: LossContext) -> ScaleState:
    """One RMSprop update of the trainable bands; frozen bands never move."""
    x = state.x.reconstruct()
    terms = total_loss(x, ctx, state.iteration)
    value = float(terms.total.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss {value} at scale {state.index}, iteration {state.iteration}",
            iterate=to_array(x),
        )
    state.optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    state.optimizer.step()
    state.loss_history.append((state.iteration, terms.fda, terms.p, value))
    state.iteration += 1
    return state


@dataclass
class ScaleRecord:
    index: int
    height: int
    width: int
    lr: float
    levels: int
    n_frozen: int
    seed: int
    losses: list[tuple[int, float | None, float | None, float]] = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class RunReport:
    config: dict
    extractors: dict = field(default_factory=dict)
    scales: list[ScaleRecord] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None
    effective: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def loss_rows(self) -> list[tuple]:
        return [(s.index, *row) for s in self.scales for row in s.losses]

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for scale, it, fda, p, tot in self.loss_rows():
            w.writerow([scale, it, "" if fda is None else repr(fda), "" if p is None else repr(p), repr(tot)])
        return buf.getvalue()


SnapshotFn = Callable[[int, int, np.ndarray], None]
ScaleDoneFn = Callable[[ScaleState], None]


def prepare_inputs(o: ImageLike, r: ImageLike, cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Working-resolution tensors; a colour old photo is reduced to luma first."""
    o_arr = o if isinstance(o, np.ndarray) else to_array(o)
    if not image_core.is_grayscale(o_arr):
        logger.info("old photo has colour; using its luma")
        o_arr = image_core.to_grayscale(o_arr)
    r_arr = r if isinstance(r, np.ndarray) else to_array(r)
    O = resize(to_tensor(o_arr), *cfg.size)
    R = resize(to_tensor(r_arr), *cfg.size)
    return O, R


def run(o: ImageLike, r: ImageLike, cfg: RunConfig, extractors: Extractors | None = None,
        snapshot_stride: int | None = None, on_snapshot: SnapshotFn | None = None,
        on_scale_done: ScaleDoneFn | None = None) -> tuple[np.ndarray, RunReport]:
    """Colourise ``o`` from ``r``; returns the clamped finest result and a report.

    ``on_snapshot(scale, iteration, image)`` is called every ``snapshot_stride``
    iterations (from 0 up to and including T) with a clamped copy of the iterate.
    ``on_scale_done(state)`` receives each scale's final state.
    """
    ext = extractors or Extractors()
    weights = cfg.effective_weights()
    report = RunReport(
        config=cfg.to_dict(),
        extractors=ext.info,
        effective={"lambda_fda": weights.lambda_fda, "lambda_p": weights.lambda_p,
                   "n_frozen": cfg.effective_n_frozen(),
                   "normalization": {"mean": list(image_core.IMAGENET_MEAN), "std": list(image_core.IMAGENET_STD)}},
    )
    start = time.perf_counter()
    O, R = prepare_inputs(o, r, cfg)
    shapes = cfg.scale_shapes()
    prev = None
    for i in range(cfg.K, -1, -1):
        t0 = time.perf_counter()
        o_i, r_i = resize(O, *shapes[i]), resize(R, *shapes[i])
        state = init_scale(i, prev, o_i, cfg, r_i)
        seed = cfg.seed + i
        rec = ScaleRecord(index=i, height=shapes[i][0], width=shapes[i][1], lr=state.lr,
                          levels=state.levels, n_frozen=state.n_frozen, seed=seed, losses=state.loss_history)
        report.scales.append(rec)
        ctx = LossContext(ext, r_i, o_i, cfg.metric, weights, seed=seed, n_samples=cfg.n_samples,
                          resample=cfg.resample_each_iter)
        try:
            for t in range(cfg.T):
                if on_snapshot and snapshot_stride and t % snapshot_stride == 0:
                    on_snapshot(i, t, to_array(state.current()))
                step(state, ctx)
        except NonFiniteLossError as exc:
            rec.wall_time = time.perf_counter() - t0
            report.wall_time = time.perf_counter() - start
            report.status, report.error = "aborted", str(exc)
            raise RunAborted(str(exc), report, exc.iterate) from exc
        prev = state.current()
        if on_snapshot and snapshot_stride and cfg.T % snapshot_stride == 0:
            on_snapshot(i, cfg.T, to_array(prev))
        rec.wall_time = time.perf_counter() - t0
        if on_scale_done:
            on_scale_done(state)
        logger.info("scale %d (%dx%d) done in %.1fs, final loss %.4f", i, *shapes[i], rec.wall_time,
                    state.loss_history[-1][3])
    report.wall_time = time.perf_counter() - start
    return to_array(prev), report
