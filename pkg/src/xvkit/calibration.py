"""PAV calibration, logistic-regression fusion, and detection metrics (EER, minDCF, actDCF)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .archive import atomic_write_text
from .errors import ConfigError, DataError, NumericalError

TARGET, NONTARGET, UNKNOWN = 1, 0, -1
POSTERIOR_EPS = 1e-6
_LABEL_WORDS = {"target": TARGET, "nontarget": NONTARGET, "unknown": UNKNOWN}


def logit(p):
    return np.log(p) - np.log1p(-p)


# -- trial sets and files -----------------------------------------------------------


@dataclass
class TrialScoreSet:
    enroll: list
    test: list
    scores: np.ndarray
    labels: np.ndarray  # TARGET / NONTARGET / UNKNOWN

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.scores)
        if not (len(self.enroll) == len(self.test) == len(self.labels) == n):
            raise DataError("trial fields have different lengths")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("trial scores must be finite")
        if len(set(zip(self.enroll, self.test))) != n:
            raise DataError("duplicate (enroll, test) trial")

    @classmethod
    def from_arrays(cls, scores, labels) -> "TrialScoreSet":
        n = len(scores)
        ids = [f"t{i}" for i in range(n)]
        lab = np.where(np.asarray(labels, dtype=bool), TARGET, NONTARGET)
        return cls(ids, ["x"] * n, scores, lab)

    def __len__(self):
        return len(self.scores)

    def keys(self):
        return list(zip(self.enroll, self.test))

    @property
    def targets(self) -> np.ndarray:
        return self.scores[self.labels == TARGET]

    @property
    def nontargets(self) -> np.ndarray:
        return self.scores[self.labels == NONTARGET]

    def with_scores(self, scores) -> "TrialScoreSet":
        return TrialScoreSet(list(self.enroll), list(self.test), scores, self.labels.copy())


def write_scores(path, t: TrialScoreSet, precision: int = 6) -> None:
    lines = [f"{e} {s} {v:.{precision}f}\n" for e, s, v in zip(t.enroll, t.test, t.scores)]
    atomic_write_text(path, "".join(lines))


def _split_lines(path):
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if parts:
            if len(parts) != 3:
                raise DataError(f"{path}:{n}: expected 3 fields, got {len(parts)}")
            yield n, parts


def read_scores(path) -> TrialScoreSet:
    enroll, test, scores = [], [], []
    for n, (e, s, v) in _split_lines(path):
        try:
            scores.append(float(v))
        except ValueError:
            raise DataError(f"{path}:{n}: bad score {v!r}") from None
        enroll.append(e)
        test.append(s)
    return TrialScoreSet(enroll, test, scores, np.full(len(scores), UNKNOWN))


def write_key(path, keys, labels) -> None:
    words = {TARGET: "target", NONTARGET: "nontarget", UNKNOWN: "unknown"}
    atomic_write_text(path, "".join(f"{e} {s} {words[int(l)]}\n" for (e, s), l in zip(keys, labels)))


def read_key(path) -> dict:
    key = {}
    for n, (e, s, w) in _split_lines(path):
        if w not in _LABEL_WORDS:
            raise DataError(f"{path}:{n}: label must be target/nontarget/unknown, got {w!r}")
        key[(e, s)] = _LABEL_WORDS[w]
    return key


def apply_key(t: TrialScoreSet, key: dict) -> TrialScoreSet:
    """Label trials from a key; trials absent from the key are dropped with a warning."""
    keep, labels, missing = [], [], []
    for i, k in enumerate(t.keys()):
        if k in key:
            keep.append(i)
            labels.append(key[k])
        else:
            missing.append(k)
    if missing:
        shown = ", ".join(f"{e}/{s}" for e, s in missing[:5])
        warnings.warn(f"{len(missing)} scored trial(s) missing from key, excluded: {shown}"
                      + (" ..." if len(missing) > 5 else ""), stacklevel=2)
    return TrialScoreSet([t.enroll[i] for i in keep], [t.test[i] for i in keep], t.scores[keep], labels)


# -- PAV calibration ----------------------------------------------------------------


def isotonic_blocks(scores, labels, weights=None):
    """Pool-adjacent-violators on (score, label) pairs; tied scores always share a block.

    Returns (lo, hi, value, weight) arrays, one entry per block in increasing score order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    s, y, w = s[order], y[order], w[order]
    uniq, start = np.unique(s, return_index=True)
    wsum = np.add.reduceat(w, start)
    ysum = np.add.reduceat(w * y, start)
    lo, hi, tot, wt = [], [], [], []
    for u, ys, ws in zip(uniq, ysum, wsum):
        lo.append(u), hi.append(u), tot.append(ys), wt.append(ws)
        while len(tot) > 1 and tot[-2] / wt[-2] >= tot[-1] / wt[-1]:
            hi[-2] = hi[-1]
            tot[-2] += tot[-1]
            wt[-2] += wt[-1]
            del lo[-1], hi[-1], tot[-1], wt[-1]
    wt = np.array(wt)
    return np.array(lo), np.array(hi), np.array(tot) / wt, wt


def isotonic_fit(scores, labels) -> np.ndarray:
    """Fitted isotonic value for every input sample (input order)."""
    lo, hi, val, _ = isotonic_blocks(scores, labels)
    idx = np.searchsorted(hi, np.asarray(scores, dtype=np.float64), side="left")
    return val[idx]


@dataclass(frozen=True)
class CalibrationMap:
    """Monotone score -> LLR map: constant on each PAV block, linear across the gap between blocks."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __call__(self, scores):
        return pav_apply(self, scores)

    def to_dict(self):
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["breakpoints"], dtype=np.float64), np.asarray(d["values"], dtype=np.float64))


def pav_fit(scores, labels, eps: float = POSTERIOR_EPS) -> CalibrationMap:
    labels = np.asarray(labels, dtype=bool)
    n_tar = int(labels.sum())
    if n_tar == 0 or n_tar == len(labels):
        raise DataError("PAV calibration needs both target and nontarget trials")
    lo, hi, post, _ = isotonic_blocks(scores, labels)
    prior = n_tar / len(labels)
    llr = logit(np.clip(post, eps, 1 - eps)) - logit(prior)
    xs = np.stack([lo, hi], axis=1).ravel()
    ys = np.repeat(llr, 2)
    keep = np.r_[True, np.diff(xs) > 0]
    return CalibrationMap(xs[keep], ys[keep])


def pav_apply(cal: CalibrationMap, scores):
    out = np.interp(np.asarray(scores, dtype=np.float64), cal.breakpoints, cal.values)
    return float(out) if np.ndim(out) == 0 else out


# -- fusion ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionModel:
    weights: np.ndarray
    offset: float
    objective_history: tuple = ()

    def apply(self, scores: np.ndarray) -> np.ndarray:
        """scores: (n_trials, n_subsystems)."""
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        if scores.shape[1] != len(self.weights):
            raise DataError(f"fusion expects {len(self.weights)} subsystems, got {scores.shape[1]}")
        return scores @ self.weights + self.offset

    def to_dict(self):
        return {"weights": self.weights.tolist(), "offset": self.offset}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=np.float64), float(d["offset"]))


def _fusion_objective(theta, x1, tar, prior, reg):
    """Prior-weighted logistic loss (natural log) + 0.5*reg*|w|^2, with gradient and Hessian."""
    s = x1 @ theta + logit(prior)
    sign = np.where(tar, 1.0, -1.0)
    n_t, n_n = tar.sum(), (~tar).sum()
    cw = np.where(tar, prior / n_t, (1 - prior) / n_n)
    f = -np.sum(cw * log_expit(sign * s))
    p = expit(-sign * s)  # d/ds of -log sigmoid(sign*s) is -sign*p
    g = x1.T @ (-sign * p * cw)
    hdiag = cw * p * (1 - p)
    h = (x1 * hdiag[:, None]).T @ x1
    r = np.full(len(theta), reg)
    r[-1] = 0.0  # offset is not regularized
    f += 0.5 * np.sum(r * theta**2)
    g += r * theta
    h += np.diag(r)
    return f, g, h


def fusion_fit(scores: np.ndarray, labels, prior: float = 0.5, reg: float = 1e-6,
               tol: float = 1e-8, max_iter: int = 200) -> FusionModel:
    """Linear logistic-regression fusion by damped Newton iterations.

    scores: (n_trials, n_subsystems). The small L2 penalty on the weights keeps
    the optimum finite when the classes are separable.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DataError("fusion needs a (trials, subsystems) matrix with at least two subsystems")
    tar = np.asarray(labels, dtype=bool)
    if tar.all() or not tar.any():
        raise DataError("fusion needs both target and nontarget trials")
    if not 0 < prior < 1:
        raise ConfigError("prior must lie in (0, 1)")
    x1 = np.hstack([x, np.ones((len(x), 1))])
    theta = np.zeros(x1.shape[1])
    f, g, h = _fusion_objective(theta, x1, tar, prior, reg)
    history = [f]
    for _ in range(max_iter):
        if np.linalg.norm(g) < tol:
            break
        step = np.linalg.lstsq(h, -g, rcond=None)[0]
        if g @ step >= 0:
            step = -g
        t = 1.0
        while True:
            cand = theta + t * step
            fc, gc, hc = _fusion_objective(cand, x1, tar, prior, reg)
            if fc <= f + 1e-4 * t * (g @ step) or t < 1e-12:
                break
            t *= 0.5
        if fc > f:
            break  # no further decrease representable
        theta, f, g, h = cand, fc, gc, hc
        history.append(f)
    if np.linalg.norm(g) >= tol and not _stalled(history):
        raise NumericalError(f"fusion did not converge: |grad| = {np.linalg.norm(g):.3e} after {len(history) - 1} "
                             f"iterations, objective {f:.6g}")
    return FusionModel(theta[:-1].copy(), float(theta[-1]), tuple(history))


def _stalled(history) -> bool:
    # objective flat to machine precision: gradient tolerance is below attainable accuracy
    return len(history) > 2 and abs(history[-1] - history[-2]) <= 1e-15 * max(1.0, abs(history[-1]))


# -- metrics --------------------------------------------------------------------------


@dataclass(frozen=True)
class DcfConfig:
    p_targets: tuple = (0.01, 0.005)
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not self.p_targets:
            raise ConfigError("need at least one target prior")
        for p in self.p_targets:
            if not 0 < p < 1:
                raise ConfigError(f"target prior must lie in (0, 1), got {p}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ConfigError("costs must be positive")


def _split(t, labels=None):
    if isinstance(t, TrialScoreSet):
        tar, non = t.targets, t.nontargets
    else:
        s = np.asarray(t, dtype=np.float64)
        lab = np.asarray(labels, dtype=bool)
        tar, non = s[lab], s[~lab]
    if len(tar) == 0 or len(non) == 0:
        raise DataError("metric needs both target and nontarget trials")
    return tar, non


def operating_points(tar: np.ndarray, non: np.ndarray):
    """(P_miss, P_fa) for thresholds -inf, every distinct score, +inf; accept when score >= threshold."""
    thr = np.unique(np.concatenate([tar, non]))
    tar_s, non_s = np.sort(tar), np.sort(non)
    p_miss = np.searchsorted(tar_s, thr, side="left") / len(tar)
    p_fa = 1.0 - np.searchsorted(non_s, thr, side="left") / len(non)
    return np.r_[0.0, p_miss, 1.0], np.r_[1.0, p_fa, 0.0]


def eer(t, labels=None) -> float:
    """Equal error rate in percent, linearly interpolated on the ROC polyline."""
    tar, non = _split(t, labels)
    pm, pf = operating_points(tar, non)
    d = pm - pf
    i = int(np.argmax(d >= 0))
    if d[i] == 0:
        return 100.0 * pm[i]
    a = -d[i - 1] / (d[i] - d[i - 1])
    return 100.0 * (pm[i - 1] + a * (pm[i] - pm[i - 1]))


def _norm_dcf(pm, pf, p, cfg: DcfConfig):
    cost = cfg.c_miss * p * pm + cfg.c_fa * (1 - p) * pf
    return cost / min(cfg.c_miss * p, cfg.c_fa * (1 - p))


def min_dcf_points(t, labels=None, cfg: DcfConfig = DcfConfig()) -> dict:
    tar, non = _split(t, labels)
    pm, pf = operating_points(tar, non)
    return {p: float(np.min(_norm_dcf(pm, pf, p, cfg))) for p in cfg.p_targets}


def min_dcf(t, labels=None, cfg: DcfConfig = DcfConfig()) -> float:
    return float(np.mean(list(min_dcf_points(t, labels, cfg).values())))


def bayes_threshold(p: float, cfg: DcfConfig) -> float:
    return math.log(cfg.c_fa * (1 - p) / (cfg.c_miss * p))


def act_dcf_points(t, labels=None, cfg: DcfConfig = DcfConfig()) -> dict:
    tar, non = _split(t, labels)
    out = {}
    for p in cfg.p_targets:
        eta = bayes_threshold(p, cfg)
        pm = np.mean(tar < eta)
        pf = np.mean(non >= eta)
        out[p] = float(_norm_dcf(pm, pf, p, cfg))
    return out


def act_dcf(t, labels=None, cfg: DcfConfig = DcfConfig()) -> float:
    return float(np.mean(list(act_dcf_points(t, labels, cfg).values())))


@dataclass
class MetricReport:
    eer: float
    min_dcf: float
    act_dcf: float
    min_dcf_points: dict = field(default_factory=dict)
    act_dcf_points: dict = field(default_factory=dict)
    n_target: int = 0
    n_nontarget: int = 0
    name: str = ""

    def format(self) -> str:
        return format_report([self])


def evaluate_trials(t: TrialScoreSet, cfg: DcfConfig = DcfConfig(), name: str = "") -> MetricReport:
    return MetricReport(
        eer=eer(t), min_dcf=min_dcf(t, cfg=cfg), act_dcf=act_dcf(t, cfg=cfg),
        min_dcf_points=min_dcf_points(t, cfg=cfg), act_dcf_points=act_dcf_points(t, cfg=cfg),
        n_target=len(t.targets), n_nontarget=len(t.nontargets), name=name,
    )


def format_report(reports) -> str:
    """Fixed-width table, one row per system: EER(%), min-DCF per prior and averaged, act-DCF."""
    reports = list(reports)
    priors = list(reports[0].min_dcf_points) if reports else []
    head = ["system", "EER(%)"] + [f"min-DCF@{p:g}" for p in priors] + ["min-DCF", "act-DCF", "#tar", "#non"]
    rows = []
    for r in reports:
        rows.append([r.name or "-", f"{r.eer:.2f}"] + [f"{r.min_dcf_points[p]:.3f}" for p in priors]
                    + [f"{r.min_dcf:.3f}", f"{r.act_dcf:.3f}", str(r.n_target), str(r.n_nontarget)])
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"
