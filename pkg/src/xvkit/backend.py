"""Embedding back-end: LDA, length normalization, two-covariance PLDA (fit, adapt, score)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .archive import load_tensors, save_tensors
from .errors import ConfigError, DataError, NumericalError, ShapeError

RIDGE_REL = 1e-6
LOG_2PI = math.log(2 * math.pi)


class NumericalWarning(UserWarning):
    pass


def _group(labels) -> tuple[np.ndarray, np.ndarray]:
    classes, inverse = np.unique(np.asarray(labels), return_inverse=True)
    return classes, inverse


def _sym(m):
    return 0.5 * (m + m.T)


def _ridge(cov: np.ndarray, scale_ref: np.ndarray | None = None, what: str = "covariance") -> np.ndarray:
    """Add eps*I (eps = 1e-6 * mean diagonal) when `cov` is not safely positive definite."""
    cov = _sym(cov)
    w = np.linalg.eigvalsh(cov)
    ref = float(np.mean(np.diag(cov)))
    if ref <= 0 and scale_ref is not None:
        ref = float(np.mean(np.diag(scale_ref)))
    if ref <= 0:
        ref = 1.0
    if w[0] > RIDGE_REL * ref * 1e-3:
        return cov
    warnings.warn(f"singular {what}; adding ridge {RIDGE_REL * ref:.3g}", NumericalWarning, stacklevel=3)
    return cov + RIDGE_REL * ref * np.eye(len(cov))


# -- LDA -----------------------------------------------------------------------------


@dataclass
class LdaModel:
    projection: np.ndarray  # (out_dim, in_dim)
    mean: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.projection.T

    def save(self, path):
        save_tensors(path, {"projection": self.projection, "mean": self.mean, "eigenvalues": self.eigenvalues},
                     {"kind": "lda"})

    @classmethod
    def load(cls, path):
        header, t = load_tensors(path)
        if header.get("kind") != "lda":
            raise DataError(f"{path}: not an LDA model")
        return cls(t["projection"], t["mean"], t["eigenvalues"])


def scatter_matrices(x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, within-class scatter, between-class scatter), both scatters normalized by N."""
    x = np.asarray(x, dtype=np.float64)
    _, inv = _group(labels)
    mu = x.mean(axis=0)
    n_cls = inv.max() + 1
    counts = np.bincount(inv, minlength=n_cls).astype(np.float64)
    sums = np.zeros((n_cls, x.shape[1]))
    np.add.at(sums, inv, x)
    means = sums / counts[:, None]
    centered = x - means[inv]
    sw = centered.T @ centered / len(x)
    dm = means - mu
    sb = (dm * counts[:, None]).T @ dm / len(x)
    return mu, _sym(sw), _sym(sb)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its first non-negligible component is positive."""
    out = vectors.copy()
    for i, row in enumerate(out):
        tol = 1e-12 * max(1.0, np.abs(row).max())
        nz = np.flatnonzero(np.abs(row) > tol)
        if len(nz) and row[nz[0]] < 0:
            out[i] = -row
    return out


def lda_fit(x: np.ndarray, labels, out_dim: int = 150) -> LdaModel:
    """Top generalized eigenvectors of (between, within) scatter, descending eigenvalue."""
    x = np.asarray(x, dtype=np.float64)
    classes, inv = _group(labels)
    if len(classes) < 2:
        raise DataError("LDA needs at least two classes")
    if np.bincount(inv).max() < 2:
        raise DataError("LDA needs at least one class with two or more samples")
    limit = min(x.shape[1], len(classes) - 1)
    if out_dim > limit:
        warnings.warn(f"LDA out_dim {out_dim} clipped to {limit} (min(in_dim, classes-1))",
                      NumericalWarning, stacklevel=2)
        out_dim = limit
    mu, sw, sb = scatter_matrices(x, labels)
    sw = _ridge(sw, what="within-class scatter")
    evals, evecs = linalg.eigh(sb, sw)
    order = np.argsort(-evals, kind="stable")[:out_dim]
    evals = evals[order]
    if np.all(np.abs(evals) <= 1e-12 * max(1.0, float(np.trace(sw)))):
        warnings.warn("between-class scatter is zero; LDA basis is arbitrary", NumericalWarning, stacklevel=2)
    proj = _fix_signs(evecs[:, order].T)
    return LdaModel(proj, mu, evals)


def length_norm(v: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere (row-wise for 2-D input)."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalError("cannot length-normalize a zero vector")
    return v / norms


def enroll_vector(vectors: np.ndarray) -> np.ndarray:
    """Multi-session enrollment: mean of the length-normalized session vectors."""
    return length_norm(np.atleast_2d(vectors)).mean(axis=0)


# -- PLDA ------------------------------------------------------------------------------


@dataclass
class PldaModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    loglik_history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @cached_property
    def _scoring(self):
        d = self.dim
        total = self.between + self.within
        joint = np.block([[total, self.between], [self.between, total]])
        joint_inv = linalg.inv(joint)
        a = _sym(joint_inv[:d, :d])
        c = joint_inv[:d, d:]
        c = 0.5 * (c + c.T)
        q = a - linalg.inv(total)
        _, logdet_joint = np.linalg.slogdet(joint)
        _, logdet_total = np.linalg.slogdet(total)
        const = -0.5 * logdet_joint + logdet_total
        return q, c, const

    def score(self, enroll: np.ndarray, test: np.ndarray) -> float:
        return float(self.score_matrix(np.atleast_2d(enroll), np.atleast_2d(test))[0, 0])

    def score_matrix(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        """LLR for every (enroll row, test row) pair."""
        enroll, test = np.atleast_2d(enroll), np.atleast_2d(test)
        if enroll.shape[1] != self.dim or test.shape[1] != self.dim:
            raise ShapeError(f"PLDA dim {self.dim}, got enroll {enroll.shape[1]} / test {test.shape[1]}")
        q, c, const = self._scoring
        e = enroll - self.mean
        t = test - self.mean
        qe = -0.5 * np.einsum("ij,jk,ik->i", e, q, e)
        qt = -0.5 * np.einsum("ij,jk,ik->i", t, q, t)
        return qe[:, None] + qt[None, :] - e @ c @ t.T + const

    def save(self, path):
        save_tensors(path, {"mean": self.mean, "between": self.between, "within": self.within}, {"kind": "plda"})

    @classmethod
    def load(cls, path):
        header, t = load_tensors(path)
        if header.get("kind") != "plda":
            raise DataError(f"{path}: not a PLDA model")
        return cls(t["mean"], _sym(t["between"]), _sym(t["within"]))


def plda_score(m: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    return m.score(enroll, test)


def _class_stats(x, labels):
    _, inv = _group(labels)
    k = inv.max() + 1
    counts = np.bincount(inv, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, inv, x)
    return inv, counts, sums


def plda_loglik(m: PldaModel, x: np.ndarray, labels) -> float:
    """Marginal log-likelihood of the data under the model, averaged per vector."""
    x = np.asarray(x, dtype=np.float64)
    inv, counts, _ = _class_stats(x, labels)
    d = x.shape[1]
    b_inv = linalg.inv(m.between)
    w_inv = linalg.inv(m.within)
    _, logdet_b = np.linalg.slogdet(m.between)
    _, logdet_w = np.linalg.slogdet(m.within)
    dev = x - m.mean
    quad_w = np.einsum("ij,jk,ik->i", dev, w_inv, dev)
    dsum = np.zeros((len(counts), d))
    np.add.at(dsum, inv, dev)
    total = 0.0
    for n in np.unique(counts):
        idx = np.flatnonzero(counts == n)
        prec = b_inv + n * w_inv
        _, logdet_p = np.linalg.slogdet(prec)
        r = dsum[idx] @ w_inv
        rpr = np.einsum("ij,ij->i", r, linalg.solve(prec, r.T, assume_a="pos").T)
        total += len(idx) * (-0.5 * n * d * LOG_2PI - 0.5 * logdet_b - 0.5 * n * logdet_w - 0.5 * logdet_p)
        total += 0.5 * rpr.sum()
    total -= 0.5 * quad_w.sum()
    return total / len(x)


def plda_init(x: np.ndarray, labels) -> PldaModel:
    mu, sw, _ = scatter_matrices(x, labels)
    inv, counts, sums = _class_stats(x, labels)
    means = sums / counts[:, None]
    dm = means - mu
    sb = dm.T @ dm / len(means)
    total = np.cov(x.T, bias=True).reshape(x.shape[1], x.shape[1])
    return PldaModel(mu, _ridge(sb, total, "between-class covariance"), _ridge(sw, total, "within-class covariance"))


def plda_fit(x: np.ndarray, labels, iters: int = 10, tol: float = 1e-9) -> PldaModel:
    """Two-covariance PLDA trained by EM.

    ``loglik_history`` holds the per-vector marginal log-likelihood after
    initialization and after each iteration; a decrease larger than `tol`
    without an intervening ridge repair raises NumericalError.
    """
    x = np.asarray(x, dtype=np.float64)
    classes, _ = _group(labels)
    if len(classes) < 2:
        raise DataError("PLDA needs at least two classes")
    model = plda_init(x, labels)
    inv, counts, _ = _class_stats(x, labels)
    total_cov = np.cov(x.T, bias=True).reshape(x.shape[1], x.shape[1])
    history = [plda_loglik(model, x, labels)]
    k = len(counts)
    for it in range(iters):
        b_inv = linalg.inv(model.between)
        w_inv = linalg.inv(model.within)
        dev = x - model.mean
        dsum = np.zeros((k, x.shape[1]))
        np.add.at(dsum, inv, dev)
        post_mean = np.zeros_like(dsum)
        post_cov_sum_b = np.zeros_like(model.between)
        post_cov_sum_w = np.zeros_like(model.within)
        for n in np.unique(counts):
            idx = np.flatnonzero(counts == n)
            cov = linalg.inv(b_inv + n * w_inv)
            post_mean[idx] = dsum[idx] @ w_inv @ cov
            post_cov_sum_b += len(idx) * cov
            post_cov_sum_w += len(idx) * n * cov
        shift = post_mean.mean(axis=0)
        centered = post_mean - shift
        between = _sym((post_cov_sum_b + centered.T @ centered) / k)
        resid = dev - post_mean[inv]
        within = _sym((post_cov_sum_w + resid.T @ resid) / len(x))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            between_r = _ridge(between, total_cov, "between-class covariance")
            within_r = _ridge(within, total_cov, "within-class covariance")
        repaired = bool(caught)
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
        model = PldaModel(model.mean + shift, between_r, within_r)
        ll = plda_loglik(model, x, labels)
        if not repaired and ll < history[-1] - tol:
            raise NumericalError(f"EM log-likelihood decreased at iteration {it + 1}: {history[-1]} -> {ll}")
        history.append(ll)
    model.loglik_history = history
    return model


@dataclass(frozen=True)
class AdaptConfig:
    within_scale: float = 0.75
    between_scale: float = 0.25

    def __post_init__(self):
        for v in (self.within_scale, self.between_scale):
            if not 0.0 <= v <= 1.0:
                raise ConfigError("adaptation scales must lie in [0, 1]")


def psd_part(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(_sym(m))
    return _sym((v * np.maximum(w, 0.0)) @ v.T)


def plda_adapt(m: PldaModel, indomain: np.ndarray, cfg: AdaptConfig = AdaptConfig()) -> PldaModel:
    """Covariance-interpolation adaptation to unlabeled in-domain vectors."""
    indomain = np.asarray(indomain, dtype=np.float64)
    if indomain.ndim != 2 or len(indomain) < 2:
        raise DataError("PLDA adaptation needs at least two in-domain vectors")
    if indomain.shape[1] != m.dim:
        raise ShapeError(f"in-domain dim {indomain.shape[1]} != PLDA dim {m.dim}")
    mu = indomain.mean(axis=0)
    dev = indomain - mu
    total = dev.T @ dev / len(indomain)
    excess = psd_part(total - (m.between + m.within))
    return PldaModel(mu, _sym(m.between + cfg.between_scale * excess), _sym(m.within + cfg.within_scale * excess))
