import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcqa.errors import DegenerateInput, MissingData
from pcqa.harness import (StimulusRecord, fit_logistic, group_stats, loocv_evaluate,
                          outlier_ratio, pcc_difference_significance, pearson, read_scores_csv,
                          report, rmse, spearman, write_group_reports, write_predictions,
                          write_report, write_scores_csv)


def textbook_pearson(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxy = sum(a * b for a, b in zip(x, y))
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    return (n * sxy - sx * sy) / math.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))


def logistic(s, a, b, c, d):
    return a + (b - a) / (1 + np.exp(-c * (s - d)))


def make_records(n_content=6, per=16, seed=0, noise=0.02, codecs=("octree", "trisoup", "vpcc")):
    """Synthetic study: metric `good` is a noisy logistic of MOS, `noise` is unrelated."""
    rng = np.random.default_rng(seed)
    out = []
    for c in range(n_content):
        for k in range(per):
            mos = rng.uniform(1, 5)
            good = 1 / (1 + math.exp(-(mos - 3))) + rng.normal(0, noise)
            out.append(StimulusRecord(f"c{c}_s{k}", f"c{c}", codecs[k % len(codecs)], f"r{k}",
                                      mos, None, {"good": good, "noise": rng.normal()}))
    return out


def test_pearson_examples(rng):
    x = rng.normal(size=20)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    y = rng.normal(size=20)
    assert pearson(x, y) == pytest.approx(textbook_pearson(list(x), list(y)), abs=1e-12)


def test_pearson_degenerate():
    with pytest.raises(DegenerateInput):
        pearson([1, 1, 1], [1, 2, 3])


def test_spearman_examples(rng):
    x = rng.normal(size=30)
    assert spearman(x, np.exp(x)) == pytest.approx(1.0, abs=1e-15)
    # ranks of x are {1, 2.5, 2.5, 4}: by hand r = 4.5 / sqrt(4.5 * 5)
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(4.5 / math.sqrt(22.5), abs=1e-15)


@settings(max_examples=40)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True), st.randoms())
def test_spearman_monotone_invariance(xs, rnd):
    x = np.array(xs, dtype=float)
    y = np.array([rnd.randint(1, 50) for _ in xs], dtype=float)
    if np.ptp(y) == 0:
        return
    assert spearman(x, y) == pytest.approx(spearman(x ** 3 + 7, np.log(y)), abs=1e-12)


def test_rmse_and_or_basics():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0
    assert outlier_ratio([1, 2, 3], [1, 2, 3]) == 0
    assert outlier_ratio([0, 0, 0, 0], [1, 1, 0.1, 0.1], ci95=[0.5] * 4) == 0.5


def test_or_fallback_recount(rng):
    pred, mos = rng.normal(size=60), rng.normal(size=60)
    r = math.sqrt(sum((p - m) ** 2 for p, m in zip(pred, mos)) / 60)
    count = sum(abs(p - m) > 2 * r for p, m in zip(pred, mos))
    assert outlier_ratio(pred, mos) == count / 60


def test_logistic_recover():
    s = np.linspace(0, 10, 40)
    mos = logistic(s, 1.2, 4.7, 0.9, 5.5)
    fit = fit_logistic(s, mos)
    assert fit.sse <= 1e-8 and fit.sse <= fit.initial_sse and fit.converged


def test_logistic_decreasing_metric():
    s = np.linspace(0, 1, 30)
    mos = logistic(s, 1, 5, -8, 0.4)
    fit = fit_logistic(s, mos)
    assert fit.sse <= 1e-8


def test_logistic_constant_mos():
    fit = fit_logistic(np.arange(10.0), np.full(10, 3.0))
    assert fit.degenerate
    assert fit.b == pytest.approx(fit.a)


def test_loocv_perfect_metric():
    # a logistic cannot represent the identity exactly, so the fit is only near-perfect
    recs = make_records()
    for r in recs:
        r.metric_scores["mos"] = r.mos
        r.mos_ci95 = 0.2
    res = loocv_evaluate(recs, "mos")
    assert res.stats.pcc == pytest.approx(1, abs=1e-6)
    assert res.stats.srocc == pytest.approx(1, abs=1e-12)
    assert res.stats.rmse == pytest.approx(0, abs=1e-4)
    assert res.stats.or_ == 0


def test_loocv_noise_metric():
    res = loocv_evaluate(make_records(n_content=6, per=15, seed=3), "noise")
    assert abs(res.stats.pcc) < 0.5


def test_loocv_splits_are_per_content(monkeypatch):
    import pcqa.harness as h
    calls = []
    real = h.fit_logistic

    def spy(scores, mos, *a, **k):
        calls.append(len(scores))
        return real(scores, mos, *a, **k)

    monkeypatch.setattr(h, "fit_logistic", spy)
    loocv_evaluate(make_records(), "good")
    assert calls == [80] * 6


def test_loocv_rmse_recomputed():
    res = loocv_evaluate(make_records(), "good")
    mos = np.array([r.mos for r in res.records])
    assert res.stats.rmse == pytest.approx(math.sqrt(np.mean((res.predictions - mos) ** 2)),
                                           rel=1e-15)


def test_missing_data_lists_stimuli():
    recs = make_records(n_content=2, per=4)
    del recs[1].metric_scores["good"]
    with pytest.raises(MissingData) as err:
        loocv_evaluate(recs, "good")
    assert err.value.missing == [recs[1].stimulus_id]


def test_exclude_references():
    recs = make_records()
    recs[0].codec = "reference"
    assert len(loocv_evaluate(recs, "good", include_references=False).records) == 95


def _zou_oracle(r1, r2, r12, n, conf=0.95):
    """Zou's interval for overlapping correlations, written out scalar by scalar."""
    from statistics import NormalDist
    z = NormalDist().inv_cdf(1 - (1 - conf) / 2)
    lims = []
    for r in (r1, r2):
        zr = 0.5 * math.log((1 + r) / (1 - r))
        lims.append((math.tanh(zr - z / math.sqrt(n - 3)), math.tanh(zr + z / math.sqrt(n - 3))))
    (l1, u1), (l2, u2) = lims
    c = ((r12 - r1 * r2 / 2) * (1 - r1 * r1 - r2 * r2 - r12 * r12) + r12 ** 3) / (
        (1 - r1 * r1) * (1 - r2 * r2))
    low = r1 - r2 - math.sqrt((r1 - l1) ** 2 + (u2 - r2) ** 2 - 2 * c * (r1 - l1) * (u2 - r2))
    high = r1 - r2 + math.sqrt((u1 - r1) ** 2 + (r2 - l2) ** 2 - 2 * c * (u1 - r1) * (r2 - l2))
    return low, high


def test_zou_matches_scalar_oracle(rng):
    for _ in range(20):
        y = rng.normal(size=50)
        a = y + rng.normal(size=50)
        b = 0.5 * y + rng.normal(size=50)
        lo, hi, _ = pcc_difference_significance(a, b, y)
        elo, ehi = _zou_oracle(pearson(a, y), pearson(b, y), pearson(a, b), 50)
        assert lo == pytest.approx(elo, abs=1e-12) and hi == pytest.approx(ehi, abs=1e-12)


def test_zou_identical_scores(rng):
    y, a = rng.normal(size=40), rng.normal(size=40)
    lo, hi, sig = pcc_difference_significance(a, a, y + a)
    # zero difference estimate; Fisher-z limits are asymmetric so the width is not zero
    assert lo == pytest.approx(-hi, abs=1e-15) and lo < 0
    assert not sig


def test_zou_perfect_vs_noise(rng):
    y = rng.normal(size=60)
    assert pcc_difference_significance(y, rng.normal(size=60), y)[2]


def test_zou_width_shrinks_with_n():
    widths = {}
    for n in (20, 100):
        w = []
        for seed in range(50):
            r = np.random.default_rng(seed)
            y = r.normal(size=n)
            lo, hi, _ = pcc_difference_significance(y + r.normal(size=n),
                                                    y + 2 * r.normal(size=n), y)
            w.append(hi - lo)
        widths[n] = np.mean(w)
    assert widths[20] > widths[100]


def test_zou_coverage():
    # population: corr(a,y)=0.6/sqrt(0.36+0.64)... built from a latent normal model
    rng = np.random.default_rng(7)
    cov = np.array([[1.0, 0.7, 0.4], [0.7, 1.0, 0.5], [0.4, 0.5, 1.0]])  # y, a, b
    true_diff = 0.7 - 0.4
    hits = 0
    trials = 400
    for _ in range(trials):
        y, a, b = rng.multivariate_normal(np.zeros(3), cov, size=100).T
        lo, hi, _ = pcc_difference_significance(a, b, y)
        hits += lo <= true_diff <= hi
    assert 0.91 <= hits / trials <= 0.98


def test_report_order_and_headers(tmp_path):
    recs = make_records()
    results = report(recs, ["noise", "good"])
    assert [r.metric for r in results] == ["good", "noise"]
    write_report(results, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["method", "pcc", "srocc", "rmse", "or"]
    assert rows[1][0] == "good"
    assert all(len(v) <= 12 for row in rows[1:] for v in row[1:])
    write_predictions(results, tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["method", "stimulus_id", "content_id", "codec", "score", "prediction", "mos"]
    assert len(rows) == 1 + 2 * len(recs)


def test_scores_csv_roundtrip(tmp_path):
    recs = make_records(n_content=2, per=3)
    recs[0].mos_ci95 = 0.25
    write_scores_csv(recs, tmp_path / "s.csv")
    back = read_scores_csv(tmp_path / "s.csv")
    assert [r.stimulus_id for r in back] == [r.stimulus_id for r in recs]
    assert back[0].mos_ci95 == 0.25 and back[1].mos_ci95 is None
    assert back[2].metric_scores["good"] == float(f"{recs[2].metric_scores['good']:.6g}")


def test_scores_csv_missing_column(tmp_path):
    (tmp_path / "s.csv").write_text("stimulus_id,content_id,mos\na,b,3\n")
    with pytest.raises(MissingData):
        read_scores_csv(tmp_path / "s.csv")


def test_group_reports(tmp_path):
    recs = make_records()
    results = report(recs, ["good", "noise"])
    groups = group_stats(results[0])
    assert sorted(groups) == ["octree", "trisoup", "vpcc"]
    idx = [i for i, r in enumerate(results[0].records) if r.codec == "vpcc"]
    mos = np.array([results[0].records[i].mos for i in idx])
    assert groups["vpcc"].pcc == pytest.approx(pearson(results[0].predictions[idx], mos),
                                               abs=1e-15)
    paths = write_group_reports(results, tmp_path)
    assert [p.split("/")[-1] for p in paths] == [
        "report_codec_octree.csv", "report_codec_trisoup.csv", "report_codec_vpcc.csv"]
