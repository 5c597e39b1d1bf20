"""Colour-transfer and structure terms of the per-scale objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .features import (
    Extractors,
    FeatureMatrix,
    FeatureSet,
    VIT_PATCH,
    extract_hypercolumn,
    extract_structure,
    sample_points,
)
from .image_core import normalize_for_network
from .metrics import MetricConfig, distance

# lambda_FDA per metric; the structure weight defaults to 1 for all
DEFAULT_FDA_WEIGHTS = {"fs": 2.0, "cx": 6.0, "cmd": 0.5, "remd": 1.0}
DEFAULT_N_SAMPLES = 1024


@dataclass
class LossWeights:
    lambda_fda: float
    lambda_p: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_fda", "lambda_p"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.lambda_fda == 0 and self.lambda_p == 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def for_metric(cls, kind: str, lambda_p: float = 1.0) -> "LossWeights":
        return cls(lambda_fda=DEFAULT_FDA_WEIGHTS[kind.lower()], lambda_p=lambda_p)


def structure_input(x: torch.Tensor) -> torch.Tensor:
    """Resize to the nearest multiple of the ViT patch size (at least one patch)."""
    h, w = x.shape[-2:]
    th = max(VIT_PATCH, round(h / VIT_PATCH) * VIT_PATCH)
    tw = max(VIT_PATCH, round(w / VIT_PATCH) * VIT_PATCH)
    if (th, tw) == (h, w):
        return x
    return F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)


def hypercolumn_of(ext: Extractors, x: torch.Tensor) -> FeatureSet:
    return extract_hypercolumn(ext, normalize_for_network(x))


def structure_of(ext: Extractors, x: torch.Tensor) -> FeatureSet:
    return extract_structure(ext, normalize_for_network(structure_input(x)))


def n_points(hw: tuple[int, int], n: int) -> int:
    return max(2, min(n, hw[0] * hw[1]))


def fda_loss(x: torch.Tensor, r_features: FeatureMatrix, ext: Extractors,
             mcfg: MetricConfig, seed: int, n: int | None = None) -> torch.Tensor:
    """Distribution distance between ``x``'s sampled hypercolumns and the reference's."""
    fs = hypercolumn_of(ext, x)
    fx = sample_points(fs, n if n is not None else r_features.n, seed)
    return distance(fx, r_features, mcfg)


def perceptual_loss(x: torch.Tensor, o_features: FeatureSet, ext: Extractors,
                    eps: float = 1e-8) -> torch.Tensor:
    """Mean over blocks of ``1 - cos`` between flattened structure features."""
    gx = structure_of(ext, x)
    return block_cosine_distance(gx, o_features, eps)


def block_cosine_distance(a: FeatureSet, b: FeatureSet, eps: float = 1e-8) -> torch.Tensor:
    # 1 - cos(a, b) written as |a/|a| - b/|b||^2 / 2: same value, but the
    # gradient is exactly zero when the features agree, which matters because
    # RMSprop rescales even round-off sized gradients to full steps.
    terms = []
    for fa, fb in zip(a.maps, b.maps):
        ua = fa.flatten() / fa.norm().clamp(min=eps)
        ub = fb.flatten() / fb.norm().clamp(min=eps)
        terms.append(0.5 * (ua - ub).pow(2).sum())
    return torch.stack(terms).mean()


class LossContext:
    """Reference and old-photo features for one scale, computed once.

    With ``resample=True`` the reference hypercolumn is re-sampled at fresh
    positions every iteration (from the cached maps, no re-extraction).
    """

    def __init__(self, ext: Extractors, r: torch.Tensor, o: torch.Tensor, mcfg: MetricConfig,
                 weights: LossWeights, seed: int, n_samples: int = DEFAULT_N_SAMPLES,
                 resample: bool = False):
        self.ext = ext
        self.mcfg = mcfg
        self.weights = weights
        self.seed = seed
        self.resample = resample
        self.n = n_points(tuple(r.shape[-2:]), n_samples)
        with torch.no_grad():
            self.r_set = hypercolumn_of(ext, r) if weights.lambda_fda > 0 else None
            self.r_matrix = sample_points(self.r_set, self.n, seed) if self.r_set is not None else None
            self.o_set = structure_of(ext, o) if weights.lambda_p > 0 else None

    def seed_at(self, iteration: int) -> int:
        return self.seed + iteration if self.resample else self.seed

    def reference_matrix(self, iteration: int) -> FeatureMatrix:
        if not self.resample or iteration == 0:
            return self.r_matrix
        return sample_points(self.r_set, self.n, self.seed_at(iteration))


@dataclass
class LossTerms:
    total: torch.Tensor
    fda: float | None
    p: float | None


def total_loss(x: torch.Tensor, ctx: LossContext, iteration: int = 0) -> LossTerms:
    """``lambda_fda * L_fda + lambda_p * L_p``.

    Zero-weight terms are not evaluated and are reported as ``None``.
    """
    w = ctx.weights
    total = x.new_zeros(())
    fda_val = p_val = None
    if w.lambda_fda > 0:
        fda = fda_loss(x, ctx.reference_matrix(iteration), ctx.ext, ctx.mcfg,
                       ctx.seed_at(iteration), ctx.n)
        total = total + w.lambda_fda * fda
        fda_val = float(fda.detach())
    if w.lambda_p > 0:
        p = perceptual_loss(x, ctx.o_set, ctx.ext)
        total = total + w.lambda_p * p
        p_val = float(p.detach())
    return LossTerms(total=total, fda=fda_val, p=p_val)
