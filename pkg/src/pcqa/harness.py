"""Statistical evaluation of objective metrics against subjective scores.

Logistic mapping with leave-one-content-out cross-validation, then PCC,
SROCC, RMSE and outlier ratio on the concatenated test predictions, and
Zou's confidence interval for the difference between two dependent PCCs.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import norm, rankdata

from .errors import DegenerateInput, InvalidArgument, MissingData

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("stimulus_id", "content_id", "codec", "rate_level", "mos")
REFERENCE_CODECS = ("reference", "ref", "none")


@dataclass
class StimulusRecord:
    stimulus_id: str
    content_id: str
    codec: str
    rate_level: str
    mos: float
    mos_ci95: float | None = None
    metric_scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.content_id:
            raise InvalidArgument(f"stimulus {self.stimulus_id!r} has an empty content_id")
        if not math.isfinite(self.mos):
            raise InvalidArgument(f"stimulus {self.stimulus_id!r} has non-finite MOS")

    @property
    def is_reference(self):
        return self.codec.strip().lower() in REFERENCE_CODECS


@dataclass
class EvalStats:
    pcc: float
    srocc: float
    rmse: float
    or_: float


# ---------------------------------------------------------------------------
# correlation statistics


def _vectors(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("inputs must be 1-D vectors of equal length")
    if x.size < 2:
        raise InvalidArgument("need at least two samples")
    return x, y


def pearson(x, y) -> float:
    x, y = _vectors(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise DegenerateInput("zero variance input")
    r = np.dot(dx, dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _vectors(x, y)
    return pearson(rankdata(x), rankdata(y))


def rmse(pred, mos) -> float:
    pred, mos = _vectors(pred, mos)
    return float(np.sqrt(np.mean((pred - mos) ** 2)))


def outlier_ratio(pred, mos, ci95=None) -> float:
    """Share of stimuli whose residual exceeds the MOS 95% CI.

    Without CI data the threshold is twice the RMSE of the predictions.
    """
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    if pred.shape != mos.shape:
        raise InvalidArgument("pred and mos lengths differ")
    if pred.size == 0:
        return 0.0
    resid = np.abs(pred - mos)
    if ci95 is None:
        threshold = 2.0 * np.sqrt(np.mean(resid ** 2))
    else:
        threshold = np.asarray(ci95, dtype=np.float64)
        if threshold.shape != pred.shape:
            raise InvalidArgument("ci95 length differs from pred")
    return float(np.mean(resid > threshold))


# ---------------------------------------------------------------------------
# logistic mapping


@dataclass
class LogisticFit:
    """q(s) = a + (b - a) / (1 + exp(-c (s - d)))"""

    a: float
    b: float
    c: float
    d: float
    sse: float = float("nan")
    initial_sse: float = float("nan")
    converged: bool = True
    degenerate: bool = False

    @property
    def params(self):
        return np.array([self.a, self.b, self.c, self.d])

    def predict(self, s):
        return _logistic(self.params, np.asarray(s, dtype=np.float64))


def _logistic(p, s):
    a, b, c, d = p
    z = np.clip(-c * (s - d), -700, 700)
    return a + (b - a) / (1.0 + np.exp(z))


def _logistic_jac(p, s):
    a, b, c, d = p
    z = np.clip(-c * (s - d), -700, 700)
    e = np.exp(z)
    g = 1.0 / (1.0 + e)
    dg = g * g * e  # derivative of g w.r.t. -z
    return np.stack([1 - g, g, (b - a) * dg * (s - d), -(b - a) * dg * c], axis=1)


def fit_logistic(scores, mos, max_iter=1000, rtol=1e-10) -> LogisticFit:
    """Least-squares 4-parameter logistic with a fixed initialisation.

    Start: a = min MOS, b = max MOS, d = median score,
    c = sign(corr) / std(scores). Levenberg-Marquardt runs until the
    relative SSE change drops below ``rtol`` or ``max_iter`` evaluations.
    """
    s, y = _vectors(scores, mos)
    if s.size < 5:
        raise InvalidArgument("logistic fitting needs at least 5 samples")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
        raise InvalidArgument("scores and MOS must be finite")
    a0, b0 = float(y.min()), float(y.max())
    d0 = float(np.median(s))
    sd = float(np.std(s))
    if sd == 0:
        raise DegenerateInput("scores have zero variance")
    if a0 == b0:
        sse = float(np.sum((y - a0) ** 2))
        log.warning("constant MOS: logistic fit is degenerate")
        return LogisticFit(a0, b0, 1.0 / sd, d0, sse, sse, True, True)
    try:
        sign = 1.0 if pearson(s, y) >= 0 else -1.0
    except DegenerateInput:
        sign = 1.0
    p0 = np.array([a0, b0, sign / sd, d0])
    init_sse = float(np.sum((_logistic(p0, s) - y) ** 2))
    res = least_squares(lambda p: _logistic(p, s) - y, p0,
                        jac=lambda p: _logistic_jac(p, s), method="lm",
                        ftol=rtol, xtol=1e-15, gtol=1e-15, max_nfev=max_iter)
    p = res.x
    sse = float(np.sum(res.fun ** 2))
    if not np.all(np.isfinite(p)) or sse > init_sse:
        p, sse = p0, init_sse
    converged = bool(res.status > 0)
    if not converged:
        log.warning("logistic fit stopped without converging: %s", res.message)
    degenerate = bool(abs(p[1] - p[0]) <= 1e-12 * max(1.0, abs(p[0])))
    return LogisticFit(*map(float, p), sse, init_sse, converged, degenerate)


# ---------------------------------------------------------------------------
# cross-validation protocol


@dataclass
class EvalResult:
    metric: str
    stats: EvalStats
    predictions: np.ndarray  # aligned with the input records
    records: list


def _metric_arrays(records, metric):
    missing = [r.stimulus_id for r in records
               if metric not in r.metric_scores or not math.isfinite(r.metric_scores[metric])]
    if missing:
        raise MissingData(f"metric {metric!r} missing for {len(missing)} stimuli: "
                          + ", ".join(missing[:10]), missing)
    scores = np.array([r.metric_scores[metric] for r in records], dtype=np.float64)
    mos = np.array([r.mos for r in records], dtype=np.float64)
    return scores, mos


def stats_for(pred, records) -> EvalStats:
    mos = np.array([r.mos for r in records], dtype=np.float64)
    ci = None
    if records and all(r.mos_ci95 is not None for r in records):
        ci = np.array([r.mos_ci95 for r in records], dtype=np.float64)
    try:
        pcc, srocc = pearson(pred, mos), spearman(pred, mos)
    except DegenerateInput:
        # constant predictions (e.g. an unused feature map) have no correlation
        pcc = srocc = math.nan
    return EvalStats(pcc, srocc, rmse(pred, mos), outlier_ratio(pred, mos, ci))


def loocv_predictions(records, metric):
    """Held-out logistic predictions, one split per content, aligned to records."""
    scores, mos = _metric_arrays(records, metric)
    contents = np.array([r.content_id for r in records])
    order = list(dict.fromkeys(contents))
    if len(order) < 2:
        raise InvalidArgument("cross-validation needs at least two contents")
    pred = np.empty_like(mos)
    for content in order:
        test = contents == content
        try:
            fit = fit_logistic(scores[~test], mos[~test])
            pred[test] = fit.predict(scores[test])
        except DegenerateInput:
            pred[test] = mos[~test].mean()
    return pred


def loocv_evaluate(records, metric, include_references=True) -> EvalResult:
    """Leave-one-content-out evaluation of one metric."""
    records = [r for r in records if include_references or not r.is_reference]
    pred = loocv_predictions(records, metric)
    return EvalResult(metric, stats_for(pred, records), pred, records)


def group_stats(result: EvalResult, key="codec"):
    """Stats of the cross-validated predictions restricted to each group."""
    groups = {}
    for i, r in enumerate(result.records):
        groups.setdefault(getattr(r, key), []).append(i)
    out = {}
    for name, idx in groups.items():
        recs = [result.records[i] for i in idx]
        if len(idx) < 2:
            out[name] = EvalStats(math.nan, math.nan, math.nan, math.nan)
        else:
            out[name] = stats_for(result.predictions[idx], recs)
    return out


# ---------------------------------------------------------------------------
# difference between two dependent correlations


def pcc_difference_significance(scores_a, scores_b, mos, confidence=0.95):
    """Zou's interval for r(A, mos) - r(B, mos) with A and B measured on the same stimuli.

    Returns (ci_low, ci_high, significant); significant when 0 lies outside.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64)
    if not (a.shape == b.shape == y.shape) or a.ndim != 1:
        raise InvalidArgument("inputs must be equal-length vectors")
    n = a.size
    if n < 10:
        raise InvalidArgument("need at least 10 samples")
    r1 = pearson(a, y)
    r2 = pearson(b, y)
    r12 = pearson(a, b)
    zcrit = norm.ppf(0.5 + confidence / 2)
    half = zcrit / math.sqrt(n - 3)

    def limits(r):
        z = np.arctanh(r) if abs(r) < 1 else math.copysign(math.inf, r)
        return float(np.tanh(z - half)), float(np.tanh(z + half))

    l1, u1 = limits(r1)
    l2, u2 = limits(r2)
    denom = (1 - r1 ** 2) * (1 - r2 ** 2)
    if denom > 0:
        corr = ((r12 - 0.5 * r1 * r2) * (1 - r1 ** 2 - r2 ** 2 - r12 ** 2) + r12 ** 3) / denom
    else:
        # a perfect correlation has a zero-width interval, so the cross term vanishes
        corr = 0.0
    diff = r1 - r2
    low = diff - math.sqrt(max(0.0, (r1 - l1) ** 2 + (u2 - r2) ** 2
                                - 2 * corr * (r1 - l1) * (u2 - r2)))
    high = diff + math.sqrt(max(0.0, (u1 - r1) ** 2 + (r2 - l2) ** 2
                                 - 2 * corr * (u1 - r1) * (r2 - l2)))
    return low, high, bool(low > 0 or high < 0)


# ---------------------------------------------------------------------------
# CSV I/O


def _fmt(v):
    return f"{v:.6g}"


def read_scores_csv(path):
    """Records from a score table; extra columns become metric scores."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        columns = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in columns]
        if missing:
            raise MissingData(f"score table lacks column(s): {', '.join(missing)}", missing)
        metric_cols = [c for c in columns if c not in REQUIRED_COLUMNS and c != "mos_ci95"]
        records = []
        for row in reader:
            ci = row.get("mos_ci95")
            scores = {}
            for c in metric_cols:
                v = (row.get(c) or "").strip()
                scores[c] = float(v) if v else math.nan
            records.append(StimulusRecord(
                row["stimulus_id"], row["content_id"], row["codec"], row["rate_level"],
                float(row["mos"]), float(ci) if ci not in (None, "") else None, scores))
    return records


def write_scores_csv(records, path, metrics=None):
    metrics = metrics or sorted({m for r in records for m in r.metric_scores})
    with_ci = any(r.mos_ci95 is not None for r in records)
    header = list(REQUIRED_COLUMNS) + (["mos_ci95"] if with_ci else []) + list(metrics)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [r.stimulus_id, r.content_id, r.codec, r.rate_level, _fmt(r.mos)]
            if with_ci:
                row.append("" if r.mos_ci95 is None else _fmt(r.mos_ci95))
            row += [_fmt(r.metric_scores[m]) for m in metrics]
            w.writerow(row)


def report(records, metrics, include_references=True):
    """Cross-validated results for several metrics, best PCC first."""
    results = [loocv_evaluate(records, m, include_references) for m in metrics]
    # stable sort keeps the input order among equal PCCs
    return sorted(results, key=lambda r: _rank_key(r.stats.pcc))


def _rank_key(pcc):
    return -pcc if math.isfinite(pcc) else math.inf


def write_report(results, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "pcc", "srocc", "rmse", "or"])
        for res in results:
            s = res.stats
            w.writerow([res.metric, _fmt(s.pcc), _fmt(s.srocc), _fmt(s.rmse), _fmt(s.or_)])


def write_predictions(results, path):
    """Per-stimulus scatter data: raw score, cross-validated prediction, MOS."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "stimulus_id", "content_id", "codec", "score", "prediction", "mos"])
        for res in results:
            for r, p in zip(res.records, res.predictions):
                w.writerow([res.metric, r.stimulus_id, r.content_id, r.codec,
                            _fmt(r.metric_scores[res.metric]), _fmt(p), _fmt(r.mos)])


def write_group_reports(results, out_dir, key="codec"):
    """One report per group value, each sorted by descending PCC within the group."""
    tables = {}
    for res in results:
        for name, s in group_stats(res, key).items():
            tables.setdefault(name, []).append((res.metric, s))
    paths = []
    for name, rows in sorted(tables.items()):
        rows.sort(key=lambda t: _rank_key(t[1].pcc))
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(name))
        path = os.path.join(out_dir, f"report_{key}_{safe}.csv")
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["method", "pcc", "srocc", "rmse", "or"])
            for metric, s in rows:
                w.writerow([metric, _fmt(s.pcc), _fmt(s.srocc), _fmt(s.rmse), _fmt(s.or_)])
        paths.append(path)
    return paths
