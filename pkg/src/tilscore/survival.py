"""Survival statistics over patient cohorts.

Implements the analysis battery applied to the TIL scores: quartile
quantization of a score, Harrell's concordance index, the Kaplan-Meier
product-limit estimator, the K-group log-rank test, Cox proportional-hazards
regression on a categorical covariate (Breslow tie handling), and the
chi-square / Fisher exact association tests.

Conventions, fixed here once:

* risk direction: higher risk_score = worse prognosis. A TIL density is a
  favorable-prognosis score, so it is negated on the way in (see
  records_from_cohort), which makes "high TILs, good outcome" read directly
  as c-index > 0.5.
* tied event/censoring times: a subject censored exactly at an event time is
  still at risk for that event (standard convention).
* chi-square tails via the regularized upper incomplete gamma function.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import gammaincc

from .errors import ConvergenceError, CsvParseError, UndefinedMetricError

__all__ = [
    "SurvivalRecord",
    "KMCurve",
    "CoxFit",
    "LogRankResult",
    "ChiSquareResult",
    "quantize_quartiles",
    "concordance_index",
    "kaplan_meier",
    "log_rank_test",
    "cox_ph_fit",
    "cox_score_test",
    "chi_square_test",
    "fisher_exact_2x2",
    "read_cohort_csv",
    "write_cohort_csv",
    "records_from_cohort",
    "cohort_analysis",
]

QUARTILE_LABELS = ("Q1", "Q2", "Q3", "Q4")


@dataclass(frozen=True)
class SurvivalRecord:
    """One patient: follow-up time (months), event flag, risk score, group."""

    patient_id: str
    time: float
    event: bool
    risk_score: float
    group: str | None = None

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError(f"time must be a positive real, got {self.time!r}")
        if not math.isfinite(self.risk_score):
            raise ValueError("risk_score must be finite")


def quantize_quartiles(scores):
    """Quartile cut-offs (linear-interpolation quantiles) and group labels.

    Returns ((c25, c50, c75), groups) with groups[i] in Q1..Q4. Ties at a
    cut-off go to the lower group, so all-equal scores collapse into Q1.
    """
    s = np.asarray(list(scores), dtype=np.float64)
    if s.size < 4:
        raise ValueError(f"need >= 4 scores for quartiles, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    c25, c50, c75 = (float(v) for v in np.percentile(s, [25.0, 50.0, 75.0]))
    groups = []
    for v in s:
        if v <= c25:
            groups.append("Q1")
        elif v <= c50:
            groups.append("Q2")
        elif v <= c75:
            groups.append("Q3")
        else:
            groups.append("Q4")
    return (c25, c50, c75), groups


def concordance_index(records) -> float:
    """Harrell's c-index by direct pair enumeration.

    A pair is comparable iff the strictly earlier time belongs to an event
    (tied times are never comparable). Concordant when the earlier-failing
    patient carries the higher risk score; tied risk scores count 0.5.
    """
    recs = list(records)
    concordant = 0
    ties = 0
    comparable = 0
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            a, b = recs[i], recs[j]
            if a.time == b.time:
                continue
            early, late = (a, b) if a.time < b.time else (b, a)
            if not early.event:
                continue
            comparable += 1
            if early.risk_score > late.risk_score:
                concordant += 1
            elif early.risk_score == late.risk_score:
                ties += 1
    if comparable == 0:
        raise UndefinedMetricError("c-index undefined: no comparable pairs")
    return (concordant + 0.5 * ties) / comparable


# ------------------------------------------------------------- Kaplan-Meier

@dataclass(frozen=True)
class KMCurve:
    """Product-limit curve: S after each distinct event time, plus marks."""

    event_times: tuple
    survival: tuple
    at_risk: tuple
    events: tuple
    censor_times: tuple

    def __post_init__(self):
        k = len(self.event_times)
        if not (len(self.survival) == len(self.at_risk) == len(self.events) == k):
            raise ValueError("per-event-time fields must have equal length")
        if any(self.event_times[i] >= self.event_times[i + 1] for i in range(k - 1)):
            raise ValueError("event_times must be strictly ascending")
        if any(not 0.0 <= s <= 1.0 for s in self.survival):
            raise ValueError("survival probabilities must lie in [0, 1]")
        if any(self.survival[i] < self.survival[i + 1] for i in range(k - 1)):
            raise ValueError("survival must be non-increasing")

    @property
    def n_subjects(self) -> int:
        return int(sum(self.events)) + len(self.censor_times)

    def survival_at(self, t: float) -> float:
        """Step-function value S(t); 1.0 before the first event."""
        s = 1.0
        for et, sv in zip(self.event_times, self.survival):
            if et <= t:
                s = sv
            else:
                break
        return s

    def _at_risk_at(self, t: float) -> int:
        """Subjects at risk just before t (censored exactly at t still count)."""
        removed = sum(d for et, d in zip(self.event_times, self.events) if et < t)
        removed += sum(1 for c in self.censor_times if c < t)
        return self.n_subjects - removed

    def write_csv(self, path) -> Path:
        """One row per distinct observed time: time, survival, at_risk, censored."""
        times = sorted(set(self.event_times) | set(self.censor_times))
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "survival", "at_risk", "censored"])
            for t in times:
                cens = sum(1 for c in self.censor_times if c == t)
                w.writerow([f"{t:.6g}", f"{self.survival_at(t):.6g}",
                            self._at_risk_at(t), cens])
        return path


def kaplan_meier(records) -> KMCurve:
    """Product-limit estimate S(t) = prod over event times <= t of (1 - d/n)."""
    recs = list(records)
    if not recs:
        raise ValueError("need >= 1 record")
    times = np.array([r.time for r in recs], dtype=np.float64)
    ev = np.array([bool(r.event) for r in recs])
    event_times = np.unique(times[ev])
    at_risk = []
    events = []
    surv = []
    s = 1.0
    for t in event_times:
        n = int(np.sum(times >= t))
        d = int(np.sum((times == t) & ev))
        s *= 1.0 - d / n
        at_risk.append(n)
        events.append(d)
        surv.append(s)
    censor = tuple(sorted(float(t) for t, e in zip(times, ev) if not e))
    return KMCurve(tuple(float(t) for t in event_times), tuple(surv),
                   tuple(at_risk), tuple(events), censor)


# ----------------------------------------------------------------- log-rank

class LogRankResult(NamedTuple):
    statistic: float
    df: int
    p_value: float


def _chi2_upper_tail(stat: float, df: int) -> float:
    return float(gammaincc(df / 2.0, stat / 2.0))


def log_rank_test(groups) -> LogRankResult:
    """K-group log-rank test via the O-E hypergeometric construction.

    The statistic is (O-E)' V^-1 (O-E) over the first K-1 groups; a singular
    variance matrix falls back to the pseudo-inverse. df = K - 1.
    """
    glists = [list(g) for g in groups]
    if len(glists) < 2 or any(not g for g in glists):
        raise ValueError("need >= 2 non-empty groups")
    k = len(glists)
    times = [np.array([r.time for r in g], dtype=np.float64) for g in glists]
    ev = [np.array([bool(r.event) for r in g]) for g in glists]
    all_event_times = np.unique(np.concatenate([t[e] for t, e in zip(times, ev)])
                                if any(e.any() for e in ev) else np.empty(0))
    if all_event_times.size == 0:
        raise UndefinedMetricError("log-rank undefined: no events in any group")

    O = np.zeros(k)
    E = np.zeros(k)
    V = np.zeros((k, k))
    for t in all_event_times:
        n_g = np.array([np.sum(tm >= t) for tm in times], dtype=np.float64)
        d_g = np.array([np.sum((tm == t) & e) for tm, e in zip(times, ev)],
                       dtype=np.float64)
        n = n_g.sum()
        d = d_g.sum()
        if d == 0 or n == 0:
            continue
        O += d_g
        E += d * n_g / n
        if n > 1:
            frac = n_g / n
            c = d * (n - d) / (n - 1)
            V += c * (np.diag(frac) - np.outer(frac, frac))
    z = (O - E)[: k - 1]
    M = V[: k - 1, : k - 1]
    try:
        stat = float(z @ np.linalg.solve(M, z))
    except np.linalg.LinAlgError:
        stat = float(z @ np.linalg.pinv(M) @ z)
    stat = max(stat, 0.0)
    df = k - 1
    return LogRankResult(stat, df, _chi2_upper_tail(stat, df))


# ------------------------------------------------------------------ Cox PH

@dataclass(frozen=True)
class CoxFit:
    """Cox model on one categorical covariate, dummy-coded vs. a reference."""

    reference: str
    levels: tuple
    beta: tuple
    se: tuple
    hazard_ratio: tuple
    ci_low: tuple
    ci_high: tuple
    wald_p: tuple
    log_likelihood: float
    iterations: int
    converged: bool

    def __post_init__(self):
        k = len(self.levels)
        for f in (self.beta, self.se, self.hazard_ratio, self.ci_low,
                  self.ci_high, self.wald_p):
            if len(f) != k:
                raise ValueError("per-level fields must have equal length")
        for hr, lo, hi in zip(self.hazard_ratio, self.ci_low, self.ci_high):
            if not hr > 0:
                raise ValueError("hazard ratios must be positive")
            if not lo <= hr <= hi:
                raise ValueError("CI must contain the hazard ratio")

    def to_json_dict(self) -> dict:
        return {
            "reference": self.reference,
            "levels": [
                {"level": lv, "beta": b, "hazard_ratio": hr,
                 "ci95": [lo, hi], "wald_p": p, "se": s}
                for lv, b, s, hr, lo, hi, p in zip(
                    self.levels, self.beta, self.se, self.hazard_ratio,
                    self.ci_low, self.ci_high, self.wald_p)
            ],
            "log_likelihood": self.log_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _cox_design(records, covariate, reference):
    recs = list(records)
    labels = list(covariate) if covariate is not None else [r.group for r in recs]
    if len(labels) != len(recs):
        raise ValueError("covariate length must match records")
    if any(lv is None for lv in labels):
        raise ValueError("every record needs a covariate level")
    present = sorted(set(labels))
    if len(present) < 2:
        raise ValueError("constant covariate: need >= 2 levels present")
    if reference is None:
        reference = present[0]
    elif reference not in present:
        raise ValueError(f"reference level {reference!r} not present")
    coded = [lv for lv in present if lv != reference]
    X = np.zeros((len(recs), len(coded)))
    for i, lv in enumerate(labels):
        if lv != reference:
            X[i, coded.index(lv)] = 1.0
    times = np.array([r.time for r in recs], dtype=np.float64)
    ev = np.array([bool(r.event) for r in recs])
    if not ev.any():
        raise UndefinedMetricError("Cox fit undefined: no events")
    return times, ev, X, reference, coded


def _cox_quantities(times, ev, X, beta):
    """Breslow partial log-likelihood, score vector, information matrix."""
    eta = X @ beta
    w = np.exp(eta)
    p = X.shape[1]
    ll = 0.0
    U = np.zeros(p)
    info = np.zeros((p, p))
    for t in np.unique(times[ev]):
        risk = times >= t
        dead = (times == t) & ev
        d = float(dead.sum())
        wr = w[risk]
        Xr = X[risk]
        s0 = wr.sum()
        s1 = wr @ Xr
        s2 = Xr.T @ (wr[:, None] * Xr)
        mu = s1 / s0
        ll += float(eta[dead].sum()) - d * math.log(s0)
        U += X[dead].sum(axis=0) - d * mu
        info += d * (s2 / s0 - np.outer(mu, mu))
    return ll, U, info


def cox_ph_fit(records, covariate=None, reference=None) -> CoxFit:
    """Newton-Raphson fit with step-halving; Breslow handling for tied times.

    covariate defaults to each record's group field. Convergence at
    max |score| < 1e-9 or 50 iterations; any coefficient passing |beta| > 20
    raises ConvergenceError (monotone likelihood), naming the level.
    """
    times, ev, X, reference, coded = _cox_design(records, covariate, reference)
    p = X.shape[1]
    beta = np.zeros(p)
    ll, U, info = _cox_quantities(times, ev, X, beta)
    iterations = 0
    converged = bool(np.max(np.abs(U)) < 1e-9)
    while not converged and iterations < 50:
        iterations += 1
        try:
            step = np.linalg.solve(info, U)
        except np.linalg.LinAlgError:
            step = np.linalg.pinv(info) @ U
        new_beta = beta + step
        new_ll, new_U, new_info = _cox_quantities(times, ev, X, new_beta)
        halvings = 0
        while new_ll < ll and halvings < 30:
            step *= 0.5
            halvings += 1
            new_beta = beta + step
            new_ll, new_U, new_info = _cox_quantities(times, ev, X, new_beta)
        worst = int(np.argmax(np.abs(new_beta)))
        if abs(new_beta[worst]) > 20.0:
            raise ConvergenceError(
                f"Cox coefficient for level {coded[worst]!r} diverged "
                f"(|beta| > 20): monotone likelihood / separation")
        beta, ll, U, info = new_beta, new_ll, new_U, new_info
        converged = bool(np.max(np.abs(U)) < 1e-9)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    hr = np.exp(beta)
    ci_lo = np.exp(beta - 1.96 * se)
    ci_hi = np.exp(beta + 1.96 * se)
    wald_p = np.array([math.erfc(abs(b) / s / math.sqrt(2)) if s > 0 else 0.0
                       for b, s in zip(beta, se)])
    return CoxFit(reference, tuple(coded), tuple(map(float, beta)),
                  tuple(map(float, se)), tuple(map(float, hr)),
                  tuple(map(float, ci_lo)), tuple(map(float, ci_hi)),
                  tuple(map(float, wald_p)), float(ll), iterations, converged)


def cox_score_test(records, covariate=None, reference=None) -> float:
    """Score statistic U'I^-1 U at beta = 0 (equals log-rank when tie-free)."""
    times, ev, X, _, _ = _cox_design(records, covariate, reference)
    _, U, info = _cox_quantities(times, ev, X, np.zeros(X.shape[1]))
    try:
        return float(U @ np.linalg.solve(info, U))
    except np.linalg.LinAlgError:
        return float(U @ np.linalg.pinv(info) @ U)


# ----------------------------------------------------- association tests

class ChiSquareResult(NamedTuple):
    statistic: float
    df: int
    p_value: float
    low_expected: bool  # any expected cell < 5: Fisher is the appropriate test


def chi_square_test(table) -> ChiSquareResult:
    """Pearson chi-square on an r x c count table."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or min(t.shape) < 2:
        raise ValueError("table must be at least 2x2")
    if (t < 0).any() or not np.isfinite(t).all():
        raise ValueError("counts must be non-negative finite")
    rows = t.sum(axis=1)
    cols = t.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise ValueError("every row and column marginal must be positive")
    expected = np.outer(rows, cols) / t.sum()
    stat = float(((t - expected) ** 2 / expected).sum())
    df = (t.shape[0] - 1) * (t.shape[1] - 1)
    return ChiSquareResult(stat, df, _chi2_upper_tail(stat, df),
                           bool((expected < 5).any()))


def fisher_exact_2x2(table) -> float:
    """Two-sided Fisher exact p by full hypergeometric enumeration.

    All arithmetic on integer numerators over a common binomial denominator,
    so the "probability <= observed" comparison is exact.
    """
    t = np.asarray(table)
    if t.shape != (2, 2):
        raise ValueError("table must be 2x2")
    a, b, c, d = (int(v) for v in t.ravel())
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be non-negative")
    r1, r2, c1 = a + b, c + d, a + c
    n = a + b + c + d
    if r1 == 0 or r2 == 0 or c1 == 0 or (b + d) == 0:
        raise ValueError("every margin must be positive")
    def num(k):
        return math.comb(r1, k) * math.comb(r2, c1 - k)
    observed = num(a)
    total = math.comb(n, c1)
    acc = 0
    for k in range(max(0, c1 - r2), min(r1, c1) + 1):
        if num(k) <= observed:
            acc += num(k)
    return acc / total


# ------------------------------------------------------------- cohort I/O

COHORT_COLUMNS = ("patient_id", "time_months", "event", "score")


def write_cohort_csv(rows, path) -> Path:
    """rows: iterable of (patient_id, time_months, event, score)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COHORT_COLUMNS)
        for pid, tm, event, score in rows:
            w.writerow([pid, f"{float(tm):.6g}", int(bool(event)),
                        f"{float(score):.6g}"])
    return path


def read_cohort_csv(path):
    """Parse a cohort CSV into (patient_id, time_months, event, score) tuples."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != COHORT_COLUMNS:
            raise CsvParseError(f"{path}: expected header {','.join(COHORT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(COHORT_COLUMNS):
                raise CsvParseError(f"{path}:{lineno}: expected "
                                    f"{len(COHORT_COLUMNS)} fields, got {len(row)}")
            pid, tm, event, score = row
            try:
                tmv = float(tm)
                evv = int(event)
                scv = float(score)
            except ValueError as e:
                raise CsvParseError(f"{path}:{lineno}: {e}") from None
            if tmv <= 0:
                raise CsvParseError(f"{path}:{lineno}: time_months must be > 0")
            if evv not in (0, 1):
                raise CsvParseError(f"{path}:{lineno}: event must be 0 or 1")
            rows.append((pid, tmv, bool(evv), scv))
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    return rows


def records_from_cohort(rows):
    """Build SurvivalRecords: risk = -score (high TILs = favorable), no group."""
    return [SurvivalRecord(pid, tm, event, -score) for pid, tm, event, score in rows]


def cohort_analysis(rows) -> dict:
    """Full battery on a cohort: c-index, quartiles, KM per group, log-rank, Cox.

    Returns a JSON-ready dict; KM curves are returned as objects under
    "km_curves" (caller serializes them to CSV). A diverging Cox fit is
    reported as an error string instead of aborting the other statistics.
    """
    scores = [score for *_, score in rows]
    records = records_from_cohort(rows)
    cutoffs, groups = quantize_quartiles(scores)
    by_group = {}
    for rec, g in zip(records, groups):
        by_group.setdefault(g, []).append(rec)
    labels = [g for g in QUARTILE_LABELS if g in by_group]
    out = {
        "n": len(records),
        "c_index": concordance_index(records),
        "quartile_cutoffs": {"c25": cutoffs[0], "c50": cutoffs[1], "c75": cutoffs[2]},
        "group_sizes": {g: len(by_group[g]) for g in labels},
        "km_curves": {g: kaplan_meier(by_group[g]) for g in labels},
    }
    if len(labels) >= 2:
        lr = log_rank_test([by_group[g] for g in labels])
        out["log_rank"] = {"statistic": lr.statistic, "df": lr.df,
                           "p_value": lr.p_value}
        try:
            fit = cox_ph_fit(records, covariate=groups, reference=labels[0])
            out["cox"] = fit.to_json_dict()
        except (ConvergenceError, UndefinedMetricError) as e:
            out["cox"] = {"error": str(e)}
    return out
