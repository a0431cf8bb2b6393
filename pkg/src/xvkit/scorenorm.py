"""Adaptive symmetric score normalization against an unlabeled cohort."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import PldaModel
from .errors import DataError, NumericalError

DEFAULT_K = 200
SIGMA_EPS = 1e-12


@dataclass(frozen=True)
class CohortStats:
    mean: float
    std: float
    k: int


def default_k(cohort_size: int) -> int:
    return min(DEFAULT_K, cohort_size)


def cohort_score_matrix(m: PldaModel, targets: np.ndarray, cohort: np.ndarray) -> np.ndarray:
    """PLDA score of every target (rows) against every cohort vector (columns)."""
    cohort = np.atleast_2d(np.asarray(cohort, dtype=np.float64))
    if cohort.size == 0:
        raise DataError("empty cohort")
    return m.score_matrix(np.atleast_2d(targets), cohort)


def top_k_stats(scores, k: int) -> CohortStats:
    """Mean and unbiased std of the k largest scores; values tied with the k-th are all included."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    if k < 2 or k > len(s):
        raise DataError(f"need 2 <= K <= cohort size ({len(s)}), got K={k}")
    kth = s[k - 1]
    top = s[s >= kth]
    std = float(np.std(top, ddof=1))
    if not std > SIGMA_EPS * max(1.0, float(np.abs(top).max())):
        raise NumericalError(f"degenerate cohort: top-{k} score std is {std:.3g}")
    return CohortStats(float(np.mean(top)), std, len(top))


def asnorm(raw: float, enroll_cohort, test_cohort, k: int | None = None) -> float:
    """0.5 * ((raw - mu_e) / sigma_e + (raw - mu_t) / sigma_t) over each side's top-K cohort scores."""
    if k is None:
        k = default_k(min(len(enroll_cohort), len(test_cohort)))
    e = top_k_stats(enroll_cohort, k)
    t = top_k_stats(test_cohort, k)
    return 0.5 * ((raw - e.mean) / e.std + (raw - t.mean) / t.std)


def asnorm_matrix(raw: np.ndarray, enroll_cohort: np.ndarray, test_cohort: np.ndarray,
                  k: int | None = None) -> np.ndarray:
    """Normalize a (n_enroll, n_test) score matrix given per-side cohort score matrices.

    enroll_cohort: (n_enroll, cohort); test_cohort: (n_test, cohort).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if k is None:
        k = default_k(min(enroll_cohort.shape[1], test_cohort.shape[1]))
    es = [top_k_stats(row, k) for row in enroll_cohort]
    ts = [top_k_stats(row, k) for row in test_cohort]
    mu_e = np.array([s.mean for s in es])[:, None]
    sd_e = np.array([s.std for s in es])[:, None]
    mu_t = np.array([s.mean for s in ts])[None, :]
    sd_t = np.array([s.std for s in ts])[None, :]
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)
