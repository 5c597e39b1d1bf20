"""Laplacian pyramid and the frozen-band parameterization built on it.

``down`` blurs with the separable binomial kernel ``[1, 4, 6, 4, 1] / 16`` and
keeps every second pixel. ``up`` inserts zeros back to the finer shape and
blurs with the same kernel at 4x gain. Each band is stored as
``X_j - up(X_{j+1})`` and reconstruction adds back exactly the same
``up(X_{j+1})``, so the round trip is exact up to float rounding.

All functions work on ``(B, C, H, W)`` tensors and are differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

_BINOMIAL = (1.0, 4.0, 6.0, 4.0, 1.0)


class PyramidStructureError(ValueError):
    """Band shapes do not chain together."""


def _reflect_index(n: int, pad: int, device=None) -> torch.Tensor:
    """Indices of a reflect-padded axis of length ``n`` (edge not repeated).

    Unlike ``F.pad(mode="reflect")`` this works for any ``n >= 1``, folding
    repeatedly when the pad is wider than the axis.
    """
    idx = torch.arange(-pad, n + pad, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def _blur(x: torch.Tensor, gain: float = 1.0) -> torch.Tensor:
    """Separable 5-tap binomial blur with reflect borders. ``gain`` per axis."""
    b, c, h, w = x.shape
    k = torch.tensor(_BINOMIAL, dtype=x.dtype, device=x.device) * (gain / 16.0)
    x = x.index_select(2, _reflect_index(h, 2, x.device))
    x = F.conv2d(x.reshape(b * c, 1, h + 4, w), k.view(1, 1, 5, 1))
    x = x.index_select(3, _reflect_index(w, 2, x.device))
    x = F.conv2d(x, k.view(1, 1, 1, 5))
    return x.reshape(b, c, h, w)


def down(x: torch.Tensor) -> torch.Tensor:
    """Blur then 2x decimate; an ``h x w`` input gives ``ceil(h/2) x ceil(w/2)``."""
    return _blur(x)[..., ::2, ::2]


def up(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Zero-insert to ``size`` and blur at 4x gain (2x per axis)."""
    h, w = size
    if (x.shape[-2], x.shape[-1]) != ((h + 1) // 2, (w + 1) // 2):
        raise PyramidStructureError(f"cannot upsample {tuple(x.shape[-2:])} to {size}")
    z = x.new_zeros(x.shape[:-2] + (h, w))
    z[..., ::2, ::2] = x
    return _blur(z, gain=2.0)


def high_frequency(x: torch.Tensor) -> torch.Tensor:
    """One-level high-pass ``x - up(down(x))``."""
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"high_frequency needs at least 2x2 pixels, got {h}x{w}")
    return x - up(down(x), (h, w))


def max_levels(h: int, w: int) -> int:
    """Deepest L for which every level is at least 1x1."""
    return int(math.floor(math.log2(min(h, w))))


def effective_levels(L: int, h: int, w: int) -> int:
    """Clamp ``L`` at coarse scales so the residual never degenerates."""
    return max(1, min(L, int(math.floor(math.log2(min(h, w)))) - 1))


@dataclass
class Pyramid:
    bands: list[torch.Tensor]
    residual: torch.Tensor

    @property
    def levels(self) -> int:
        return len(self.bands)


def decompose(x: torch.Tensor, L: int) -> Pyramid:
    h, w = x.shape[-2:]
    if L < 1:
        raise ValueError(f"pyramid needs L >= 1, got {L}")
    if min(h, w) / 2**L < 1:
        raise ValueError(f"L={L} is too deep for a {h}x{w} image")
    bands = []
    cur = x
    for _ in range(L):
        nxt = down(cur)
        bands.append(cur - up(nxt, tuple(cur.shape[-2:])))
        cur = nxt
    return Pyramid(bands=bands, residual=cur)


def reconstruct(p: Pyramid) -> torch.Tensor:
    cur = p.residual
    for band in reversed(p.bands):
        if band.shape[:-2] != cur.shape[:-2]:
            raise PyramidStructureError(f"band {tuple(band.shape)} does not match level {tuple(cur.shape)}")
        cur = band + up(cur, tuple(band.shape[-2:]))
    return cur


@dataclass
class FrozenPyramid:
    """Pyramid whose finest ``n_frozen`` bands are constants.

    ``trainable`` holds the remaining bands followed by the residual as leaf
    tensors with ``requires_grad=True``; hand :meth:`parameters` to an optimizer.
    """

    frozen: list[torch.Tensor]
    trainable: list[torch.Tensor] = field(default_factory=list)

    @property
    def n_frozen(self) -> int:
        return len(self.frozen)

    @property
    def levels(self) -> int:
        return len(self.frozen) + len(self.trainable) - 1

    def parameters(self) -> list[torch.Tensor]:
        return list(self.trainable)

    def pyramid(self) -> Pyramid:
        bands = list(self.frozen) + list(self.trainable[:-1])
        return Pyramid(bands=bands, residual=self.trainable[-1])

    def reconstruct(self) -> torch.Tensor:
        return reconstruct(self.pyramid())


def freeze_top_bands(p: Pyramid, n_frozen: int = 2) -> FrozenPyramid:
    if not 0 <= n_frozen < p.levels:
        raise ValueError(f"n_frozen must be in [0, {p.levels}), got {n_frozen}")
    frozen = [b.detach().clone() for b in p.bands[:n_frozen]]
    trainable = [b.detach().clone().requires_grad_(True) for b in p.bands[n_frozen:]]
    trainable.append(p.residual.detach().clone().requires_grad_(True))
    return FrozenPyramid(frozen=frozen, trainable=trainable)
