"""Dimensional-collapse diagnostics.

The singular spectrum of the representation covariance is computed with an
in-house cyclic Jacobi eigensolver (the covariance is symmetric PSD, so
singular values coincide with eigenvalues); tests cross-check it against an
independent LAPACK eigendecomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid, GridError

__all__ = [
    "SpectrumReport",
    "representation_covariance",
    "jacobi_eigenvalues",
    "singular_spectrum",
    "effective_rank",
    "collapse_index",
    "make_spectrum_report",
    "export_spectrum_csv",
    "LOG10_ZERO_SENTINEL",
]

LOG10_ZERO_SENTINEL = -16.0
SOURCES = ("pooled_backbone", "projector_embedding")


@dataclass
class SpectrumReport:
    singular_values: list[float]     # sorted descending
    log10_values: list[float]        # sentinel -16 for exact zeros
    effective_rank: float
    collapse_index: int
    threshold: float
    feature_dim: int
    num_samples: int
    source: str = "pooled_backbone"

    def to_dict(self) -> dict:
        return {
            "singular_values": self.singular_values,
            "log10_values": self.log10_values,
            "effective_rank": self.effective_rank,
            "collapse_index": self.collapse_index,
            "threshold": self.threshold,
            "feature_dim": self.feature_dim,
            "num_samples": self.num_samples,
            "source": self.source,
        }


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Grid) else x, dtype=np.float64)


def representation_covariance(features) -> np.ndarray:
    """Population covariance (1/N sum of centered outer products) of [N, d] rows."""
    f = _as_array(features)
    if f.ndim != 2:
        raise GridError(f"representation_covariance: expected [N, d], got {f.shape}")
    n = f.shape[0]
    if n < 2:
        raise GridError(f"representation_covariance: need N >= 2 samples, got {n}")
    centered = f - f.mean(axis=0, keepdims=True)
    c = centered.T @ centered / n
    return 0.5 * (c + c.T)


def jacobi_eigenvalues(matrix: np.ndarray, tol: float = 1e-14,
                       max_sweeps: int = 64) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(matrix, dtype=np.float64)
    d = a.shape[0]
    if d == 1:
        return a[0].copy()
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(d)
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, (a * a).sum() - (np.diag(a) ** 2).sum()))
        if off <= tol * norm:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # avoid overflow in theta^2
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    return np.diag(a).copy()


def singular_spectrum(cov) -> np.ndarray:
    """Descending singular values of a symmetric PSD matrix (negative
    round-off clamped to zero)."""
    c = _as_array(cov)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise GridError(f"singular_spectrum: expected square matrix, got {c.shape}")
    asym = float(np.abs(c - c.T).max()) if c.size else 0.0
    if asym > 1e-8:
        raise GridError(f"singular_spectrum: matrix asymmetry {asym:.3e} exceeds 1e-8")
    eig = jacobi_eigenvalues(0.5 * (c + c.T))
    return np.sort(np.maximum(eig, 0.0))[::-1].copy()


def effective_rank(spectrum) -> float:
    """exp(entropy) of the normalized spectrum; near-zero values (<= 1e-12 of
    the max) are dropped first."""
    s = np.asarray(spectrum, dtype=np.float64).reshape(-1)
    if s.size == 0 or s.max() <= 0:
        raise GridError("effective_rank: spectrum has no positive values")
    s = s[s > 1e-12 * s.max()]
    p = s / s.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def collapse_index(spectrum, threshold_ratio: float = 1e-4) -> int:
    """Number of singular values below threshold_ratio times the largest."""
    if not 0.0 < threshold_ratio < 1.0:
        raise GridError(f"collapse_index: threshold_ratio must be in (0,1), got {threshold_ratio}")
    s = np.asarray(spectrum, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise GridError("collapse_index: empty spectrum")
    return int((s < threshold_ratio * s.max()).sum())


def _log10_with_sentinel(values: np.ndarray) -> list[float]:
    return [float(np.log10(v)) if v > 0 else LOG10_ZERO_SENTINEL for v in values]


def make_spectrum_report(features, source: str = "pooled_backbone",
                         threshold_ratio: float = 1e-4) -> SpectrumReport:
    """Covariance -> spectrum -> scalar collapse metrics for an [N, d] feature set."""
    if source not in SOURCES:
        raise GridError(f"make_spectrum_report: unknown source {source!r}")
    f = _as_array(features)
    cov = representation_covariance(f)
    spectrum = singular_spectrum(cov)
    return SpectrumReport(
        singular_values=[float(v) for v in spectrum],
        log10_values=_log10_with_sentinel(spectrum),
        effective_rank=effective_rank(spectrum),
        collapse_index=collapse_index(spectrum, threshold_ratio),
        threshold=threshold_ratio,
        feature_dim=f.shape[1],
        num_samples=f.shape[0],
        source=source,
    )


def export_spectrum_csv(report: SpectrumReport, path) -> None:
    """One row per dimension: index, value, log10 value (-16 for zeros)."""
    lines = ["index,singular_value,log10_singular_value"]
    for i, (v, lv) in enumerate(zip(report.singular_values, report.log10_values)):
        lines.append(f"{i},{v:.17g},{lv:.17g}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise GridError(f"export_spectrum_csv: cannot write {path}: {e}") from e
