"""
OLS and random-intercept linear mixed models with backward elimination.

Both fits solve least-squares problems through a QR factorisation of the
column-equilibrated design. The mixed model is profiled over the single
variance ratio ``lam = sigma_b^2 / sigma_eps^2``: for a random intercept the
block ``I + lam * 1 1^T`` has the closed-form inverse square root
``I - c_g/n_g * 1 1^T`` with ``c_g = 1 - 1/sqrt(1 + lam * n_g)``, so each
evaluation of the restricted likelihood is one OLS solve on group-demeaned
data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DegenerateGroupingError,
    InvalidParameterError,
    RankDeficientError,
)
from .tdist import t_two_sided_p

INTERCEPT = "intercept"
RANK_TOL = 1e-10
LOG_LAM_BOUNDS = (-12.0, 12.0)
GOLDEN_TOL = 1e-8
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class DesignMatrix:
    """
    Regression design: a leading intercept column followed by named predictors.

    ``group_ids`` are relabelled to 0..G-1 on construction; the original labels
    are kept in ``group_labels`` (``group_labels[g]`` is the label of id g).
    """

    X: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...]
    group_ids: np.ndarray | None = None
    group_labels: tuple | None = None
    group_name: str = ""

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise InvalidParameterError("design matrix must be two-dimensional")
        n, p = X.shape
        if y.size != n:
            raise InvalidParameterError(f"response has {y.size} rows, design has {n}")
        if len(self.column_names) != p:
            raise InvalidParameterError("one name per design column required")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidParameterError("design and response must be free of missing values")
        if p >= n:
            raise InvalidParameterError(f"need more rows ({n}) than columns ({p})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if self.group_ids is not None:
            g = np.asarray(self.group_ids)
            if g.shape != (n,):
                raise InvalidParameterError("one group id per row required")
            if self.group_labels is None:
                labels, ids = np.unique(g, return_inverse=True)
                labels = tuple(labels.tolist())
            else:
                ids = g.astype(np.int64)
                labels = tuple(self.group_labels)
                if ids.min() < 0 or ids.max() >= len(labels) or len(np.unique(ids)) != len(labels):
                    raise InvalidParameterError("group ids must cover 0..G-1 contiguously")
            ids = np.asarray(ids, dtype=np.int64)
            ids.setflags(write=False)
            object.__setattr__(self, "group_ids", ids)
            object.__setattr__(self, "group_labels", labels)

    @classmethod
    def from_predictors(cls, predictors, names: Sequence[str], y, group_ids=None,
                        group_name: str = "") -> "DesignMatrix":
        """Prepend the intercept column; ``group_ids`` may carry any sortable labels."""
        P = np.asarray(predictors, dtype=np.float64)
        if P.ndim == 1:
            P = P[:, None]
        X = np.column_stack([np.ones(P.shape[0]), P])
        return cls(X, y, (INTERCEPT, *names), group_ids, None, group_name)

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    @property
    def predictors(self) -> tuple[str, ...]:
        return tuple(c for c in self.column_names if c != INTERCEPT)

    @property
    def n_groups(self) -> int:
        return 0 if self.group_labels is None else len(self.group_labels)

    def drop(self, name: str) -> "DesignMatrix":
        if name == INTERCEPT or name not in self.column_names:
            raise InvalidParameterError(f"cannot drop column {name!r}")
        keep = [i for i, c in enumerate(self.column_names) if c != name]
        return replace(self, X=self.X[:, keep], column_names=tuple(self.column_names[i] for i in keep))

    def without_groups(self) -> "DesignMatrix":
        return replace(self, group_ids=None, group_labels=None, group_name="")


@dataclass(frozen=True)
class EliminationStep:
    variable: str
    reason: str  # "aic" for an accepted drop, "aliased" for a rank-deficient column
    aic_before: float | None
    aic_after: float | None


@dataclass(frozen=True)
class RegressionModel:
    kind: str  # "ols" or "lmm"
    column_names: tuple[str, ...]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    aic: float
    sigma2_resid: float
    rss: float
    n_obs: int
    df_resid: int
    sigma2_group: float | None = None
    lam: float | None = None
    boundary: str | None = None  # "lower" / "upper" when lam sits on the search boundary
    group_labels: tuple | None = None
    group_name: str = ""
    blup_intercepts: np.ndarray | None = None
    eliminated: tuple[EliminationStep, ...] = ()
    aic_trace: tuple[float, ...] = ()

    @property
    def predictors(self) -> tuple[str, ...]:
        return tuple(c for c in self.column_names if c != INTERCEPT)

    def _index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self._index(name)])

    def p_value(self, name: str) -> float:
        return float(self.p_values[self._index(name)])

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None else float(v)

        out = {
            "kind": self.kind,
            "n_obs": self.n_obs,
            "df_resid": self.df_resid,
            "coefficients": {c: float(v) for c, v in zip(self.column_names, self.coefficients)},
            "standard_errors": {c: float(v) for c, v in zip(self.column_names, self.standard_errors)},
            "p_values": {c: float(v) for c, v in zip(self.column_names, self.p_values)},
            "aic": float(self.aic),
            "rss": float(self.rss),
            "sigma2_resid": float(self.sigma2_resid),
            "sigma2_group": num(self.sigma2_group),
            "lam": num(self.lam),
            "boundary": self.boundary,
            "eliminated": [
                {"variable": s.variable, "reason": s.reason,
                 "aic_before": num(s.aic_before), "aic_after": num(s.aic_after)}
                for s in self.eliminated
            ],
            "aic_trace": [float(a) for a in self.aic_trace],
        }
        if self.kind == "lmm":
            out["grouping"] = self.group_name
            out["intercepts"] = [{"group": _jsonable(g), "intercept": b} for g, b in intercept_report(self)]
        return out


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


# -- least squares core -------------------------------------------------------

@dataclass(frozen=True)
class _LstSq:
    beta: np.ndarray
    resid: np.ndarray
    rss: float
    R: np.ndarray
    scale: np.ndarray

    def unscaled_cov(self) -> np.ndarray:
        """(X^T X)^-1 in the original column units."""
        Rinv = solve_triangular(self.R, np.eye(self.R.shape[0]))
        return (Rinv @ Rinv.T) / np.outer(self.scale, self.scale)

    def log_det_xtx(self) -> float:
        return 2.0 * float(np.sum(np.log(np.abs(np.diag(self.R))))) + 2.0 * float(np.sum(np.log(self.scale)))


def _lstsq(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> _LstSq:
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    Q, R = np.linalg.qr(Xs)
    diag = np.abs(np.diag(R))
    tol = RANK_TOL * np.linalg.norm(Xs, 2)
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise RankDeficientError(names[bad[0]])
    beta = solve_triangular(R, Q.T @ y) / scale
    resid = y - X @ beta
    return _LstSq(beta, resid, float(resid @ resid), R, scale)


def _inference(beta, cov_unscaled, sigma2, df):
    se = np.sqrt(np.maximum(np.diag(cov_unscaled) * sigma2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    # an exactly fitted coefficient with zero spread is maximally significant
    t = np.where(se == 0, np.where(beta == 0, np.nan, np.inf), t)
    p = np.array([t_two_sided_p(float(v), df) for v in t])
    return se, np.clip(p, 0.0, 1.0)


def _log_rss(rss: float, n: int) -> float:
    # exact fits would send the log to -inf; floor at the smallest normal double
    return n * math.log(max(rss, np.finfo(float).tiny) / n)


def fit_ols(design: DesignMatrix) -> RegressionModel:
    """Ordinary least squares with t-based two-sided p-values."""
    n, p = design.X.shape
    fit = _lstsq(design.X, design.y, design.column_names)
    df = n - p
    sigma2 = fit.rss / df
    se, pv = _inference(fit.beta, fit.unscaled_cov(), sigma2, df)
    aic = _log_rss(fit.rss, n) + 2 * (p + 1)
    return RegressionModel("ols", design.column_names, fit.beta, se, pv, aic, sigma2, fit.rss, n, df)


# -- random-intercept mixed model ---------------------------------------------

@dataclass(frozen=True)
class RemlProfile:
    """Closed-form profile of the restricted likelihood at one variance ratio."""

    lam: float
    beta: np.ndarray
    rss_whitened: float
    log_det_v: float
    objective: float  # -2 log restricted likelihood up to an additive constant
    fit: _LstSq


def _group_stats(design: DesignMatrix):
    if design.group_ids is None or design.n_groups < 2:
        raise DegenerateGroupingError(
            f"a random-intercept model needs at least two groups, got {design.n_groups}")
    ids = design.group_ids
    counts = np.bincount(ids, minlength=design.n_groups).astype(np.float64)
    onehot = np.zeros((design.n_groups, design.n_obs))
    onehot[ids, np.arange(design.n_obs)] = 1.0
    return ids, counts, onehot


def reml_profile(design: DesignMatrix, lam: float, _stats=None) -> RemlProfile:
    """Profile beta and the residual variance out of the REML criterion at ``lam``."""
    if lam < 0:
        raise InvalidParameterError("variance ratio must be non-negative")
    ids, counts, onehot = _stats or _group_stats(design)
    c = 1.0 - 1.0 / np.sqrt(1.0 + lam * counts)
    shrink = (c / counts)[ids]
    Xw = design.X - shrink[:, None] * (onehot @ design.X)[ids]
    yw = design.y - shrink * (onehot @ design.y)[ids]
    fit = _lstsq(Xw, yw, design.column_names)
    n, p = design.X.shape
    log_det_v = float(np.sum(np.log1p(lam * counts)))
    obj = (n - p) * math.log(max(fit.rss, np.finfo(float).tiny)) + log_det_v + fit.log_det_xtx()
    return RemlProfile(lam, fit.beta, fit.rss, log_det_v, obj, fit)


def _golden_min(f, lo: float, hi: float, tol: float):
    a, b = lo, hi
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def fit_lmm(design: DesignMatrix, lam: float | None = None) -> RegressionModel:
    """
    Random-intercept LMM by profiled REML.

    ``lam`` pins the variance ratio instead of estimating it. When the
    criterion is minimised at the lower end of the search range the variance
    component is set to exactly zero and the fit coincides with OLS.
    """
    stats = _group_stats(design)
    n, p = design.X.shape
    boundary = None
    if lam is None:
        cache: dict[float, RemlProfile] = {}

        def objective(u: float) -> float:
            prof = reml_profile(design, math.exp(u), stats)
            cache[u] = prof
            return prof.objective

        lo, hi = LOG_LAM_BOUNDS
        u_best, f_best = _golden_min(objective, lo, hi, GOLDEN_TOL)
        f_lo, f_hi = objective(lo), objective(hi)
        zero = reml_profile(design, 0.0, stats)
        if min(f_lo, zero.objective) <= f_best and min(f_lo, zero.objective) <= f_hi:
            prof, boundary = zero, "lower"
        elif f_hi <= f_best:
            prof, boundary = cache[hi], "upper"
        else:
            prof = cache[u_best]
            if u_best - lo <= GOLDEN_TOL:
                boundary = "lower"
            elif hi - u_best <= GOLDEN_TOL:
                boundary = "upper"
    else:
        prof = reml_profile(design, float(lam), stats)

    df = n - p
    sigma2 = prof.rss_whitened / df
    se, pv = _inference(prof.beta, prof.fit.unscaled_cov(), sigma2, df)
    # maximum-likelihood deviance at the REML ratio, constants shared with fit_ols dropped
    aic = _log_rss(prof.rss_whitened, n) + prof.log_det_v + 2 * (p + 2)

    ids, counts, onehot = stats
    resid = design.y - design.X @ prof.beta
    blup = prof.lam / (1.0 + prof.lam * counts) * (onehot @ resid)
    return RegressionModel(
        "lmm", design.column_names, prof.beta, se, pv, aic, sigma2, prof.rss_whitened, n, df,
        sigma2_group=prof.lam * sigma2, lam=prof.lam, boundary=boundary,
        group_labels=design.group_labels, group_name=design.group_name, blup_intercepts=blup,
    )


def fit(design: DesignMatrix, kind: str) -> RegressionModel:
    if kind == "ols":
        return fit_ols(design)
    if kind == "lmm":
        return fit_lmm(design)
    raise InvalidParameterError(f"unknown model kind {kind!r}")


# -- model selection ----------------------------------------------------------

def backward_eliminate(design: DesignMatrix, kind: str = "ols", criterion: str = "aic") -> RegressionModel:
    """
    Backward elimination: repeatedly drop the predictor with the largest
    p-value while that strictly lowers the AIC.

    Columns that make the design rank deficient are removed first (recorded
    with reason ``"aliased"``); this happens whenever predictors take fewer
    distinct rows than there are columns, e.g. features of a small clip set.
    """
    if criterion.lower() != "aic":
        raise InvalidParameterError(f"unsupported criterion {criterion!r}")
    steps: list[EliminationStep] = []
    while True:
        try:
            model = fit(design, kind)
            break
        except RankDeficientError as exc:
            if exc.column == INTERCEPT or len(design.predictors) <= 1:
                raise
            steps.append(EliminationStep(exc.column, "aliased", None, None))
            design = design.drop(exc.column)

    trace = [model.aic]
    while len(model.predictors) > 1:
        idx = [i for i, c in enumerate(model.column_names) if c != INTERCEPT]
        worst = model.column_names[max(idx, key=lambda i: model.p_values[i])]
        candidate_design = design.drop(worst)
        candidate = fit(candidate_design, kind)
        if not candidate.aic < model.aic:
            break
        steps.append(EliminationStep(worst, "aic", model.aic, candidate.aic))
        trace.append(candidate.aic)
        design, model = candidate_design, candidate
    return replace(model, eliminated=tuple(steps), aic_trace=tuple(trace))


# -- reports ------------------------------------------------------------------

def intercept_report(model: RegressionModel) -> list[tuple[object, float]]:
    """BLUP intercepts as (group label, intercept), sorted by label."""
    if model.kind != "lmm" or model.blup_intercepts is None:
        raise InvalidParameterError("intercept report needs a mixed model")
    pairs = [(_jsonable(g), float(b)) for g, b in zip(model.group_labels, model.blup_intercepts)]
    return sorted(pairs, key=lambda gb: gb[0])


def write_intercept_csv(model: RegressionModel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((model.group_name or "group", "intercept"))
        for g, b in intercept_report(model):
            w.writerow((g, f"{b:.12g}"))


def write_intercept_plot_data(model: RegressionModel, path) -> None:
    """Whitespace-separated ``x y`` columns ready for a line plot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {model.group_name or 'group'} intercept\n")
        for g, b in intercept_report(model):
            fh.write(f"{g} {b:.12g}\n")


def write_model_json(models: Mapping[str, RegressionModel], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: m.to_dict() for k, m in models.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class TableRow:
    variable: str
    p_value: float
    coef_ols: float
    coef_lmm: float


@dataclass(frozen=True)
class TableSection:
    title: str
    rows: tuple[TableRow, ...] = field(default_factory=tuple)


TABLE_HEADER = ("P-value", "Coef. OLS", "Coef. LMM")


def table_section(title: str, ols: RegressionModel, lmm: RegressionModel) -> TableSection:
    """One block of the coefficient table; p-values are taken from the OLS fit."""
    rows = []
    for name in ols.predictors:
        label = name.upper() if name.lower().startswith("x") else name
        rows.append(TableRow(label, ols.p_value(name), ols.coef(name), lmm.coef(name)))
    return TableSection(title, tuple(rows))


def render_table(sections: Sequence[TableSection], decimals: int = 3) -> str:
    """Plain-text coefficient table: ``variable, p_value, coef_ols, coef_lmm`` per block."""
    body = []
    for s in sections:
        cells = [[r.variable, f"{r.p_value:.{decimals}f}",
                  _fmt_coef(r.coef_ols, decimals), _fmt_coef(r.coef_lmm, decimals)] for r in s.rows]
        body.append(([s.title, *TABLE_HEADER], cells))
    ncol = 4
    widths = [max(len(row[i]) for head, cells in body for row in [head, *cells]) for i in range(ncol)]
    lines = []
    for head, cells in body:
        if lines:
            lines.append("")
        lines.append(_fmt_row(head, widths))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend(_fmt_row(c, widths) for c in cells)
    return "\n".join(lines) + "\n"


def _fmt_coef(v: float, decimals: int) -> str:
    # raw spectral features span many decades, so extreme coefficients switch to exponent form
    a = abs(v)
    if a >= 1e6 or 0 < a < 10.0 ** -decimals:
        return f"{v:.{decimals}e}"
    return f"{v:.{decimals}f}"


def _fmt_row(cells, widths) -> str:
    first = cells[0].ljust(widths[0])
    rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
    return "  ".join([first, *rest])


def load_table_fixture(path) -> list[TableSection]:
    """Read a coefficient-table JSON: ``{"sections": [{"title", "rows": [...]}]}``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return [
            TableSection(s["title"], tuple(
                TableRow(r["variable"], float(r["p_value"]), float(r["coef_ols"]), float(r["coef_lmm"]))
                for r in s["rows"]))
            for s in doc["sections"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidParameterError(f"{path}: malformed table fixture ({exc})") from None
