"""Colour-histogram scores and convergence curves.

The CH score compares joint RGB histograms of a result and its reference with
KL divergence ``KL(result || reference)`` and the Hellinger distance.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_BINS = 8
DEFAULT_EPS = 1e-8
CURVE_COLUMNS = ("scale", "iter", "ch_kl", "ch_hellinger")


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray  # (B, B, B), sums to 1
    bins: int
    smoothing_eps: float

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def color_histogram(img: np.ndarray, bins: int = DEFAULT_BINS, eps: float = DEFAULT_EPS) -> Histogram:
    """Joint RGB histogram with ``eps`` added to every bin, then L1-normalised."""
    if bins < 2:
        raise ValueError("need at least 2 bins per channel")
    px = np.clip(np.asarray(img, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    idx = np.minimum((px * bins).astype(np.int64), bins - 1)
    flat = (idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2]
    counts = np.bincount(flat, minlength=bins**3).astype(np.float64) / len(flat)
    counts = (counts + eps) / (1.0 + eps * bins**3)
    return Histogram(counts=counts.reshape(bins, bins, bins), bins=bins, smoothing_eps=eps)


def _check(p: Histogram, q: Histogram) -> None:
    if p.counts.shape != q.counts.shape:
        raise ValueError(f"histogram bins differ: {p.counts.shape} vs {q.counts.shape}")


def kl_divergence(p: Histogram, q: Histogram) -> float:
    _check(p, q)
    pc, qc = p.counts.ravel(), q.counts.ravel()
    if np.any(pc <= 0) or np.any(qc <= 0):
        raise ValueError("KL divergence needs smoothed histograms without empty bins")
    return max(0.0, float(np.sum(pc * np.log(pc / qc))))


def hellinger(p: Histogram, q: Histogram) -> float:
    _check(p, q)
    d = np.sqrt(p.counts.ravel()) - np.sqrt(q.counts.ravel())
    return float(min(1.0, np.sqrt(np.sum(d * d)) / np.sqrt(2.0)))


def ch_scores(result: np.ndarray, reference: np.ndarray, bins: int = DEFAULT_BINS,
              eps: float = DEFAULT_EPS) -> dict[str, float]:
    p, q = color_histogram(result, bins, eps), color_histogram(reference, bins, eps)
    return {"ch_kl": kl_divergence(p, q), "ch_hellinger": hellinger(p, q)}


def convergence_curve(snapshots: Iterable[tuple[int, int, np.ndarray]], reference: np.ndarray,
                      bins: int = DEFAULT_BINS) -> list[dict]:
    """One row of CH scores per ``(scale, iteration, image)`` snapshot."""
    q = color_histogram(reference, bins)
    rows = []
    for scale, it, img in snapshots:
        p = color_histogram(img, bins)
        rows.append({"scale": scale, "iter": it, "ch_kl": kl_divergence(p, q), "ch_hellinger": hellinger(p, q)})
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return buf.getvalue()


def window_medians(values: Sequence[float], window: int = 20) -> list[float]:
    """Medians of consecutive non-overlapping windows (the last may be shorter)."""
    return [float(np.median(values[k:k + window])) for k in range(0, len(values), window)]


def is_non_increasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))


# Table-style summary of an ablation grid: one row per cell, grouped by the
# axis that differs from the default configuration.
TABLE_AXES = ("ablation", "K", "T", "L")
TABLE_METRICS = ("sifid", "fid", "ch_kl", "ch_hellinger")


def format_ablation_table(rows: Sequence[dict], defaults: dict | None = None) -> str:
    """Plain-text table mirroring an ablation grid over ablation mode, K, T and L.

    SIFID / FID columns are shown when the rows carry externally computed values.
    """
    defaults = defaults or {"ablation": "full", "K": 3, "T": 200, "L": 5}
    metrics = [m for m in TABLE_METRICS if any(r.get(m) is not None for r in rows)]
    header = ["axis", "setting", *metrics]
    lines = []
    for r in rows:
        diff = [a for a in TABLE_AXES if r.get(a) != defaults.get(a)]
        axis = diff[0] if len(diff) == 1 else ("default" if not diff else "+".join(diff))
        setting = ", ".join(f"{a}={r.get(a)}" for a in (diff or TABLE_AXES))
        vals = []
        for m in metrics:
            v = r.get(m)
            vals.append("-" if v is None or v == "" else f"{float(v):.3f}")
        lines.append([axis, setting, *vals])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*line) for line in lines]
    return "\n".join(out)
