"""Differentiable distances between two sets of feature vectors.

Every metric takes ``(n, m)`` tensors (rows are samples) and returns a scalar
tensor. Matrices are accepted directly or wrapped in a :class:`FeatureMatrix`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .features import FeatureMatrix

METRICS = ("fs", "cx", "cmd", "remd")


@dataclass
class MetricConfig:
    kind: str = "cx"
    h: float = 0.5
    k: int = 5
    alphas: tuple[float, ...] | None = None
    eps: float = 1e-5

    def __post_init__(self) -> None:
        self.kind = self.kind.lower()
        if self.kind not in METRICS:
            raise ValueError(f"unknown metric {self.kind!r}; choose from {METRICS}")
        if self.h <= 0:
            raise ValueError("band-width h must be > 0")
        if self.k < 1:
            raise ValueError("moment order k must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.alphas is not None:
            self.alphas = tuple(float(a) for a in self.alphas)
            if len(self.alphas) != self.k or min(self.alphas) < 0:
                raise ValueError(f"alphas must be {self.k} non-negative weights")

    def moment_weights(self) -> tuple[float, ...]:
        return self.alphas if self.alphas is not None else (1.0,) * self.k


def _mat(f) -> torch.Tensor:
    return f.vectors if isinstance(f, FeatureMatrix) else f


def _check_pair(fx: torch.Tensor, fr: torch.Tensor) -> None:
    if fx.dim() != 2 or fr.dim() != 2:
        raise ValueError("feature matrices must be 2-D (n, m)")
    if fx.shape[1] != fr.shape[1]:
        raise ValueError(f"feature dimension mismatch: {fx.shape[1]} vs {fr.shape[1]}")


def _unit_rows(f: torch.Tensor, eps: float) -> torch.Tensor:
    return f / f.norm(dim=1, keepdim=True).clamp(min=eps)


def cosine_distance_matrix(fx: torch.Tensor, fr: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """``D[i, j] = 1 - cos(fx_i, fr_j)``; zero rows have cosine 0."""
    return (1.0 - _unit_rows(fx, eps) @ _unit_rows(fr, eps).t()).clamp(min=0.0, max=2.0)


def fs_distance(fx, fr, cfg: MetricConfig | None = None) -> torch.Tensor:
    """Mean/standard-deviation matching: ``|mu_x - mu_r| + |sigma_x - sigma_r|``."""
    cfg = cfg or MetricConfig(kind="fs")
    fx, fr = _mat(fx), _mat(fr)
    _check_pair(fx, fr)
    mu_x, mu_r = fx.mean(0), fr.mean(0)
    sd_x = ((fx - mu_x).pow(2).mean(0) + cfg.eps).sqrt()
    sd_r = ((fr - mu_r).pow(2).mean(0) + cfg.eps).sqrt()
    return torch.linalg.vector_norm(mu_x - mu_r) + torch.linalg.vector_norm(sd_x - sd_r)


def cx_distance(fx, fr, cfg: MetricConfig | None = None) -> torch.Tensor:
    """Contextual loss ``-log CX``.

    Distances are normalised per x-row by their minimum, turned into
    affinities with a softmax over the reference points, and CX averages the
    best affinity each reference point receives.
    """
    cfg = cfg or MetricConfig(kind="cx")
    fx, fr = _mat(fx), _mat(fr)
    _check_pair(fx, fr)
    d = cosine_distance_matrix(fx, fr, cfg.eps)
    d_rel = d / (d.min(dim=1, keepdim=True).values + cfg.eps)
    a = torch.softmax((1.0 - d_rel) / cfg.h, dim=1)
    cx = a.max(dim=0).values.mean()
    return -torch.log(cx.clamp(min=torch.finfo(cx.dtype).tiny))


def _minmax_normalize(fx: torch.Tensor, fr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    both = torch.cat([fx, fr], dim=0)
    lo = both.min(dim=0).values
    span = both.max(dim=0).values - lo
    live = span > 0
    scale = torch.where(live, span, torch.ones_like(span))
    nx = torch.where(live, (fx - lo) / scale, torch.zeros_like(fx))
    nr = torch.where(live, (fr - lo) / scale, torch.zeros_like(fr))
    return nx, nr


def cmd_distance(fx, fr, cfg: MetricConfig | None = None) -> torch.Tensor:
    """Central moment discrepancy on jointly min-max normalised coordinates."""
    cfg = cfg or MetricConfig(kind="cmd")
    fx, fr = _mat(fx), _mat(fr)
    _check_pair(fx, fr)
    nx, nr = _minmax_normalize(fx, fr)
    alphas = cfg.moment_weights()
    mx, mr = nx.mean(0), nr.mean(0)
    total = alphas[0] * torch.linalg.vector_norm(mx - mr)
    cx, cr = nx - mx, nr - mr
    for order in range(2, cfg.k + 1):
        diff = cx.pow(order).mean(0) - cr.pow(order).mean(0)
        total = total + alphas[order - 1] * torch.linalg.vector_norm(diff)
    return total


def remd_one_sided(fx, fr, eps: float = 1e-5) -> torch.Tensor:
    """Relaxed transport cost with only the ``fr`` marginal enforced.

    With uniform weights on ``fr`` the optimal plan sends each reference
    point's mass to its cheapest ``fx`` point, so the value is the mean over
    reference points of the column minimum of the cost matrix.
    """
    d = cosine_distance_matrix(_mat(fx), _mat(fr), eps)
    return d.min(dim=0).values.mean()


def remd_distance(fx, fr, cfg: MetricConfig | None = None) -> torch.Tensor:
    cfg = cfg or MetricConfig(kind="remd")
    fx, fr = _mat(fx), _mat(fr)
    _check_pair(fx, fr)
    return torch.maximum(remd_one_sided(fx, fr, cfg.eps), remd_one_sided(fr, fx, cfg.eps))


DISTANCES: dict[str, Callable[..., torch.Tensor]] = {
    "fs": fs_distance,
    "cx": cx_distance,
    "cmd": cmd_distance,
    "remd": remd_distance,
}


def distance(fx, fr, cfg: MetricConfig) -> torch.Tensor:
    return DISTANCES[cfg.kind](fx, fr, cfg)
