"""Unit tests for anomaly scoring, labeling, precision and reports."""

import math
from datetime import date, datetime, time, timedelta

import numpy as np
import pytest

from stgan.errors import (
    AlignmentError,
    ConfigError,
    EmptySeriesError,
    TrainingError,
    UndefinedPrecisionError,
)
from stgan.graph import Station, build_graph
from stgan.model import (
    DiscriminatorParams,
    GeneratorParams,
    discriminate,
    generate,
)
from stgan.preprocess import FlowSeries, SampleWindow, assemble_dataset
from stgan.scoring import (
    NO_TAG,
    AnomalyReport,
    ReportRow,
    ScoreConfig,
    TruthRecord,
    count_tp_fp,
    detect,
    label_top_k,
    load_truth_csv,
    match_truth,
    precision,
    read_report,
    score_point,
    score_windows,
    write_report,
    write_truth_csv,
)


def toy_graph():
    return build_graph([
        Station("a", 50.000, 8.000),
        Station("b", 50.010, 8.004),
        Station("c", 50.005, 8.020),
        Station("d", 50.018, 8.012),
    ], threshold_m=2000.0)


def toy_models(d=6, l_r=3, l_d=2, seed=1):
    rng = np.random.default_rng(seed)
    gen = GeneratorParams(rng, d_hidden=d, l_r=l_r, l_d=l_d)
    disc = DiscriminatorParams(rng, d_hidden=d, l_r=l_r)
    return gen, disc


def toy_windows(count, l_r=3, l_d=2, n=4, seed=2):
    rng = np.random.default_rng(seed)
    wins = []
    for k in range(count):
        wins.append(SampleWindow(
            index=k, time=datetime(2024, 1, 10, 8, 0) + timedelta(minutes=5 * k),
            recent=rng.uniform(0.1, 0.9, size=(l_r, n, 1)),
            trend=rng.uniform(0.1, 0.9, size=(l_d, n, 1)),
            external=(np.arange(31) == (k % 31)).astype(float),
            target=rng.uniform(0.1, 0.9, size=(n, 1)),
        ))
    return wins


def zero_params(store):
    for _, p in store.items():
        p.value[...] = 0.0


def top_k_oracle(scores, k_percent, tie_keys=None):
    """Full-sort reference selection."""
    n = len(scores)
    count = math.floor(k_percent * n / 100.0)
    keys = []
    for i in range(n):
        key = [-scores[i]]
        if tie_keys is not None:
            key.extend(k[i] for k in tie_keys)
        key.append(i)
        keys.append((tuple(key), i))
    keys.sort()
    mask = np.zeros(n, dtype=bool)
    for _, i in keys[:count]:
        mask[i] = True
    return mask


def test_truth_record_validation():
    t0 = datetime(2024, 1, 1, 8, 0)
    TruthRecord("a", t0, t0, "weather")
    with pytest.raises(ConfigError):
        TruthRecord("a", t0, t0, "meteor")
    with pytest.raises(ConfigError):
        TruthRecord("a", t0, t0 - timedelta(minutes=1), "weather")


def test_score_config_validation():
    ScoreConfig().validate()
    with pytest.raises(ConfigError):
        ScoreConfig(k_percent=0.0).validate()
    with pytest.raises(ConfigError):
        ScoreConfig(k_percent=101.0).validate()
    with pytest.raises(ConfigError):
        ScoreConfig(lam=-1.0).validate()


def test_score_point_matches_direct_evaluation():
    graph = toy_graph()
    gen, disc = toy_models()
    lam = 1.3
    for w in toy_windows(3):
        s_g, s_d, score = score_point(w, gen, disc, graph, lam)
        pred, fake_seq = generate(w, gen, graph)
        real_seq = np.concatenate([w.recent, w.target[None]], axis=0)
        s_g_ref = ((pred - w.target) ** 2).sum(axis=1)
        s_d_ref = discriminate(real_seq, disc, graph) - discriminate(fake_seq, disc, graph)
        np.testing.assert_allclose(s_g, s_g_ref, atol=1e-12)
        assert s_d == pytest.approx(s_d_ref, abs=1e-12)
        np.testing.assert_allclose(score, s_g_ref + lam * s_d_ref, atol=1e-12)


def test_score_affine_in_lambda():
    graph = toy_graph()
    gen, disc = toy_models()
    wins = toy_windows(4)
    s_g, s_d, score0 = score_windows(wins, gen, disc, graph, lam=0.0)
    np.testing.assert_array_equal(score0, s_g)
    _, _, score2 = score_windows(wins, gen, disc, graph, lam=2.0)
    np.testing.assert_allclose(score2, s_g + 2.0 * s_d[:, None], rtol=1e-15)


def test_score_zero_models():
    # a zero generator predicts 0.5 everywhere and a zero discriminator
    # scores every sequence 0.5, so s_d vanishes exactly
    graph = toy_graph()
    gen, disc = toy_models()
    zero_params(gen.store)
    zero_params(disc.store)
    w = toy_windows(1)[0]
    s_g, s_d, score = score_point(w, gen, disc, graph, lam=1.0)
    assert s_d == 0.0
    np.testing.assert_allclose(s_g, ((0.5 - w.target) ** 2).sum(axis=1), atol=1e-15)
    np.testing.assert_array_equal(score, s_g)


def test_score_windows_chunking_consistent():
    graph = toy_graph()
    gen, disc = toy_models()
    wins = toy_windows(7)
    a = score_windows(wins, gen, disc, graph, lam=1.0, chunk=2)
    b = score_windows(wins, gen, disc, graph, lam=1.0, chunk=256)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_label_top_k_basic():
    mask = label_top_k([5.0, 1.0, 9.0, 3.0], 25.0)
    np.testing.assert_array_equal(mask, [False, False, True, False])


def test_label_top_k_count_floor():
    assert label_top_k(np.arange(10000, dtype=float), 0.1).sum() == 10
    assert label_top_k(np.arange(5, dtype=float), 10.0).sum() == 0
    assert label_top_k(np.arange(8, dtype=float), 100.0).sum() == 8


def test_label_top_k_matches_full_sort_oracle():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = int(rng.integers(5, 60))
        scores = rng.choice([0.0, 0.25, 0.5, 1.0, 2.0], size=n)
        times = rng.integers(0, 6, size=n)
        cams = rng.integers(0, 4, size=n)
        k = float(rng.uniform(5, 95))
        got = label_top_k(scores, k, tie_keys=[times, cams])
        want = top_k_oracle(scores.tolist(), k, tie_keys=[times, cams])
        np.testing.assert_array_equal(got, want)


def test_label_top_k_permutation_invariant():
    rng = np.random.default_rng(14)
    scores = rng.choice([0.0, 1.0, 2.0, 3.0], size=40)
    times = rng.permutation(40)  # distinct tie keys pin a unique selection
    base = label_top_k(scores, 30.0, tie_keys=[times])
    perm = rng.permutation(40)
    permuted = label_top_k(scores[perm], 30.0, tie_keys=[times[perm]])
    np.testing.assert_array_equal(permuted, base[perm])


def test_label_top_k_nested_in_k():
    rng = np.random.default_rng(15)
    scores = rng.choice([0.0, 0.5, 1.0], size=50)
    times = rng.permutation(50)
    prev = np.zeros(50, dtype=bool)
    for k in (5.0, 10.0, 25.0, 60.0, 100.0):
        cur = label_top_k(scores, k, tie_keys=[times])
        assert np.all(prev <= cur)
        prev = cur


def test_label_top_k_errors():
    with pytest.raises(EmptySeriesError):
        label_top_k([], 10.0)
    with pytest.raises(ConfigError):
        label_top_k([1.0], 0.0)
    with pytest.raises(ConfigError):
        label_top_k([1.0], 150.0)
    with pytest.raises(ConfigError):
        label_top_k(np.zeros((2, 2)), 10.0)


def rows_with(labels_and_tags):
    t0 = datetime(2024, 1, 1, 8, 0)
    return [
        ReportRow(camera_id="a", time=t0 + timedelta(minutes=5 * i),
                  s_g=0.0, s_d=0.0, score=0.0, labeled=lab, truth_tag=tag)
        for i, (lab, tag) in enumerate(labels_and_tags)
    ]


def test_count_and_precision():
    rows = rows_with([(True, "weather")] * 75 + [(True, NO_TAG)] * 6
                     + [(False, "weather")] * 3 + [(False, NO_TAG)] * 10)
    assert count_tp_fp(rows) == (75, 6)
    assert precision(rows) == pytest.approx(75.0 / 81.0)
    assert round(100.0 * precision(rows), 1) == 92.6


def test_precision_all_true():
    rows = rows_with([(True, "signal_cut")] * 8)
    assert precision(rows) == 1.0


def test_precision_undefined_without_labels():
    rows = rows_with([(False, NO_TAG)] * 4)
    with pytest.raises(UndefinedPrecisionError):
        precision(rows)


def test_match_truth_interval_and_aftermath():
    t0 = datetime(2024, 1, 1, 8, 0)
    rec = TruthRecord("a", t0, t0 + timedelta(minutes=30), "signal_cut")
    rows = [
        ReportRow("a", t0 - timedelta(minutes=5), 0, 0, 0, True),
        ReportRow("a", t0, 0, 0, 0, True),
        ReportRow("a", t0 + timedelta(minutes=30), 0, 0, 0, True),
        ReportRow("a", t0 + timedelta(minutes=90), 0, 0, 0, True),
        ReportRow("a", t0 + timedelta(minutes=95), 0, 0, 0, True),
        ReportRow("b", t0, 0, 0, 0, True),
    ]
    match_truth(rows, [rec], aftermath=timedelta(minutes=60))
    assert [r.truth_tag for r in rows] == [
        NO_TAG, "signal_cut", "signal_cut", "signal_cut", NO_TAG, NO_TAG,
    ]


def test_match_truth_earliest_record_wins_and_resets():
    t0 = datetime(2024, 1, 1, 8, 0)
    early = TruthRecord("a", t0, t0 + timedelta(minutes=60), "weather")
    late = TruthRecord("a", t0 + timedelta(minutes=30), t0 + timedelta(minutes=90),
                       "signal_cut")
    row = ReportRow("a", t0 + timedelta(minutes=45), 0, 0, 0, True,
                    truth_tag="visual_artifact")
    match_truth([row], [late, early], aftermath=timedelta(0))
    assert row.truth_tag == "weather"
    match_truth([row], [], aftermath=timedelta(0))
    assert row.truth_tag == NO_TAG


def planted_dataset():
    """4 days x 6 slots x 3 cameras, flat 0.5 with six planted deviations."""
    g = build_graph([
        Station("a", 50.000, 8.000),
        Station("b", 50.010, 8.004),
        Station("c", 50.005, 8.020),
    ])
    plants = {
        (2, 2, "a"): 0.10,
        (2, 3, "b"): 0.14,
        (2, 4, "c"): 0.80,
        (3, 2, "a"): 0.26,
        (3, 3, "b"): 0.70,
        (3, 4, "c"): 0.34,
    }
    series = []
    for cam in ("a", "b", "c"):
        pts = []
        for d in range(4):
            base = datetime.combine(date(2024, 1, 1) + timedelta(days=d), time(5, 0))
            for s in range(6):
                pts.append((base + timedelta(minutes=5 * s),
                            plants.get((d, s, cam), 0.5)))
        series.append(FlowSeries(cam, pts))
    return assemble_dataset(series, g), g, plants


def zeroed_models(l_r=2, l_d=2):
    gen = GeneratorParams(np.random.default_rng(0), d_hidden=4, l_r=l_r, l_d=l_d)
    disc = DiscriminatorParams(np.random.default_rng(0), d_hidden=4, l_r=l_r)
    zero_params(gen.store)
    zero_params(disc.store)
    return gen, disc


def test_detect_labels_planted_deviations():
    ds, g, plants = planted_dataset()
    gen, disc = zeroed_models()
    report = detect(ds, gen, disc, g, ScoreConfig(lam=1.0, k_percent=25.0))
    # grid of 24 slots x 3 cameras; windows exist on days 2-3, slots 2-5
    assert report.summary["total"] == 72
    assert report.summary["scored"] == 24
    assert report.summary["skipped"] == 48
    assert report.summary["labeled"] == 6
    labeled = {(r.time, r.camera_id) for r in report.rows if r.labeled}
    want = {
        (datetime.combine(date(2024, 1, 1) + timedelta(days=d), time(5, 0))
         + timedelta(minutes=5 * s), cam)
        for (d, s, cam) in plants
    }
    assert labeled == want
    assert report.summary["tp"] is None and report.summary["precision"] is None


def test_detect_with_truth_and_score_from():
    ds, g, plants = planted_dataset()
    gen, disc = zeroed_models()
    day3 = datetime(2024, 1, 4, 5, 0)
    truth = [
        TruthRecord("a", datetime(2024, 1, 4, 5, 10), datetime(2024, 1, 4, 5, 10),
                    "signal_cut"),
        TruthRecord("b", datetime(2024, 1, 4, 5, 15), datetime(2024, 1, 4, 5, 15),
                    "weather"),
    ]
    report = detect(ds, gen, disc, g, ScoreConfig(lam=1.0, k_percent=25.0),
                    truth=truth, score_from=day3)
    # one day of 6 slots remains; windows cover slots 2-5
    assert report.summary["total"] == 18
    assert report.summary["scored"] == 12
    assert report.summary["skipped"] == 6
    assert report.summary["labeled"] == 3
    assert report.summary["tp"] == 2
    assert report.summary["fp"] == 1
    assert report.summary["precision"] == pytest.approx(2.0 / 3.0)


def test_detect_validation_errors():
    ds, g, _ = planted_dataset()
    gen, disc = zeroed_models()
    other = build_graph([
        Station("b", 50.010, 8.004),
        Station("a", 50.000, 8.000),
        Station("c", 50.005, 8.020),
    ])
    with pytest.raises(AlignmentError):
        detect(ds, gen, disc, other, ScoreConfig())
    with pytest.raises(TrainingError):
        detect(ds, gen, disc, g, ScoreConfig(), score_from=datetime(2030, 1, 1))


def test_detect_deterministic():
    ds, g, _ = planted_dataset()
    gen, disc = zeroed_models()
    r1 = detect(ds, gen, disc, g, ScoreConfig(k_percent=25.0))
    r2 = detect(ds, gen, disc, g, ScoreConfig(k_percent=25.0))
    assert r1.rows == r2.rows
    assert r1.summary == r2.summary


def test_report_roundtrip(tmp_path):
    rows = [
        ReportRow("a", datetime(2024, 1, 1, 8, 0), 0.125, -0.25, -0.125, True, "weather"),
        ReportRow("b", datetime(2024, 1, 1, 8, 5), 1e-9, 0.0, 1e-9, False, NO_TAG),
    ]
    report = AnomalyReport(rows=rows, summary={"total": 2, "labeled": 1})
    write_report(tmp_path / "rep", report)
    back = read_report(tmp_path / "rep")
    assert back.rows == rows
    assert back.summary == {"total": 2, "labeled": 1}


def test_report_header_check(tmp_path):
    out = tmp_path / "rep"
    out.mkdir()
    (out / "report.csv").write_text("wrong,header\n")
    with pytest.raises(AlignmentError):
        read_report(out)


def test_truth_csv_roundtrip(tmp_path):
    records = [
        TruthRecord("a", datetime(2024, 1, 2, 7, 0), datetime(2024, 1, 2, 8, 30),
                    "signal_cut"),
        TruthRecord("b", datetime(2024, 1, 3, 12, 5), datetime(2024, 1, 3, 12, 45),
                    "weather"),
    ]
    path = tmp_path / "truth.csv"
    write_truth_csv(path, records)
    assert load_truth_csv(path) == records
    path.write_text("a,b,c\n")
    with pytest.raises(AlignmentError):
        load_truth_csv(path)
