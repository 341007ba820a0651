"""Unit tests for the adversarial training loop."""

import math
from datetime import datetime

import numpy as np
import pytest

from stgan.errors import ConfigError, TrainingError
from stgan.graph import Station, build_graph
from stgan.model import (
    EXTERNAL_DIM,
    DiscriminatorParams,
    GeneratorParams,
    discriminate,
    discriminate_batch,
    generate,
    generate_batch,
)
from stgan.preprocess import SampleWindow
from stgan.train import (
    StepMetrics,
    TrainConfig,
    discriminator_accuracy,
    discriminator_loss,
    generator_loss,
    gradient_check,
    read_metrics_csv,
    stack_windows,
    train,
    train_on_windows,
    write_metrics_csv,
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


def toy_windows(count, l_r=3, l_d=2, n=4, seed=2, value=None):
    rng = np.random.default_rng(seed)
    wins = []
    for k in range(count):
        if value is None:
            recent = rng.uniform(0.1, 0.9, size=(l_r, n, 1))
            trend = rng.uniform(0.1, 0.9, size=(l_d, n, 1))
            target = rng.uniform(0.1, 0.9, size=(n, 1))
        else:
            recent = np.full((l_r, n, 1), value)
            trend = np.full((l_d, n, 1), value)
            target = np.full((n, 1), value)
        wins.append(SampleWindow(
            index=k, time=datetime(2024, 1, 10, 8, 0),
            recent=recent, trend=trend,
            external=(np.arange(EXTERNAL_DIM) == (k % EXTERNAL_DIM)).astype(float),
            target=target,
        ))
    return wins


def zero_params(store):
    for _, p in store.items():
        p.value[...] = 0.0


def test_config_validation():
    TrainConfig().validate()
    for bad in (
        TrainConfig(lr_g=0.0),
        TrainConfig(lr_d=-1.0),
        TrainConfig(batch=0),
        TrainConfig(epochs=0),
        TrainConfig(lambda_g=-0.1),
        TrainConfig(l_r=0),
        TrainConfig(l_d=0),
        TrainConfig(hidden=0),
    ):
        with pytest.raises(ConfigError):
            bad.validate()


def test_stack_windows_shapes():
    wins = toy_windows(5)
    recent, trend, external, target = stack_windows(wins)
    assert recent.shape == (5, 3, 4, 1)
    assert trend.shape == (5, 2, 4, 1)
    assert external.shape == (5, EXTERNAL_DIM)
    assert target.shape == (5, 4, 1)


def test_generator_loss_matches_per_sample_oracle():
    graph = toy_graph()
    gen, disc = toy_models()
    wins = toy_windows(4)
    lam = 1.7
    total, parts = generator_loss(wins, gen, disc, graph, lam)

    adv_terms = []
    mse_terms = []
    for w in wins:
        pred, fake_seq = generate(w, gen, graph)
        adv_terms.append(-math.log(discriminate(fake_seq, disc, graph)))
        mse_terms.append(float(((pred - w.target) ** 2).sum()))
    adv_ref = sum(adv_terms) / len(wins)
    mse_ref = sum(mse_terms) / len(wins)
    assert parts["adversarial"] == pytest.approx(adv_ref, abs=1e-12)
    assert parts["mse"] == pytest.approx(mse_ref, abs=1e-12)
    assert total == pytest.approx(adv_ref + lam * mse_ref, abs=1e-12)


def test_generator_loss_affine_in_lambda():
    graph = toy_graph()
    gen, disc = toy_models()
    wins = toy_windows(3)
    t0, p0 = generator_loss(wins, gen, disc, graph, 0.0)
    t2, p2 = generator_loss(wins, gen, disc, graph, 2.0)
    assert t0 == p0["adversarial"]
    assert t2 - p2["adversarial"] == pytest.approx(2.0 * p2["mse"], rel=1e-12)


def test_discriminator_loss_matches_per_sample_oracle():
    graph = toy_graph()
    gen, disc = toy_models()
    wins = toy_windows(4)
    got = discriminator_loss(wins, gen, disc, graph)

    terms = []
    for w in wins:
        pred, fake_seq = generate(w, gen, graph)
        real_seq = np.concatenate([w.recent, w.target[None]], axis=0)
        terms.append(-math.log(discriminate(real_seq, disc, graph)))
        terms.append(-math.log(1.0 - discriminate(fake_seq, disc, graph)))
    assert got == pytest.approx(sum(terms) / len(terms), abs=1e-12)


def test_blind_discriminator_scores_ln2():
    graph = toy_graph()
    gen, disc = toy_models()
    zero_params(disc.store)
    wins = toy_windows(4)
    assert abs(discriminator_loss(wins, gen, disc, graph) - math.log(2.0)) < 1e-12
    _, parts = generator_loss(wins, gen, disc, graph, 1.0)
    assert abs(parts["adversarial"] - math.log(2.0)) < 1e-12


def test_blind_discriminator_accuracy_is_half():
    # at exactly 0.5 the real sequences count as correct, the fakes do not
    graph = toy_graph()
    gen, disc = toy_models()
    zero_params(disc.store)
    wins = toy_windows(6)
    assert discriminator_accuracy(wins, gen, disc, graph) == 50.0


def test_gradient_check_passes_on_toy_instance():
    graph = toy_graph()
    wins = toy_windows(2, l_r=2, l_d=2, seed=3)
    res = gradient_check(wins, graph, d_hidden=4, l_r=2, l_d=2, seed=3)
    assert res["generator"] < 1e-4
    assert res["discriminator"] < 1e-4
    assert set(res["per_param"]) >= {"generator.fusion.w", "discriminator.fusion.w"}


def test_gradient_check_needs_windows():
    with pytest.raises(TrainingError):
        gradient_check([], toy_graph())


def test_training_is_deterministic():
    graph = toy_graph()
    wins = toy_windows(10)
    cfg = TrainConfig(batch=4, epochs=2, l_r=3, l_d=2, hidden=6, seed=5)
    r1 = train_on_windows(wins, graph, cfg)
    r2 = train_on_windows(wins, graph, cfg)
    assert r1.metrics == r2.metrics
    for name, p in r1.generator.store.items():
        np.testing.assert_array_equal(p.value, r2.generator.store[name].value)
    for name, p in r1.discriminator.store.items():
        np.testing.assert_array_equal(p.value, r2.discriminator.store[name].value)


def test_training_updates_both_networks():
    graph = toy_graph()
    wins = toy_windows(8)
    cfg = TrainConfig(batch=8, epochs=1, l_r=3, l_d=2, hidden=6, seed=5)
    rng = np.random.default_rng(cfg.seed)
    init_gen = GeneratorParams(rng, d_hidden=6, l_r=3, l_d=2)
    init_disc = DiscriminatorParams(rng, d_hidden=6, l_r=3)
    result = train_on_windows(wins, graph, cfg)
    assert any(
        not np.array_equal(p.value, init_gen.store[name].value)
        for name, p in result.generator.store.items()
    )
    assert any(
        not np.array_equal(p.value, init_disc.store[name].value)
        for name, p in result.discriminator.store.items()
    )


def test_metrics_numbering_and_epoch_callback():
    graph = toy_graph()
    wins = toy_windows(10)
    cfg = TrainConfig(batch=4, epochs=3, l_r=3, l_d=2, hidden=4, seed=0)
    seen = []
    result = train_on_windows(wins, graph, cfg,
                              on_epoch_end=lambda e, g, d: seen.append(e))
    assert seen == [1, 2, 3]
    # 10 windows at batch 4 makes 3 batches per epoch
    assert [m.step for m in result.metrics] == list(range(1, 10))
    assert [m.epoch for m in result.metrics] == [1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert all(m.d_loss > 0.0 for m in result.metrics)
    assert all(0.0 <= m.d_accuracy <= 100.0 for m in result.metrics)


def test_logged_metrics_match_first_forward_pass():
    # replay the first step by hand: with one window the shuffle is a no-op,
    # so the logged g_mse is the per-element squared error of the initial
    # forward pass and g_binary_loss is the matching adversarial term
    graph = toy_graph()
    wins = toy_windows(1)
    cfg = TrainConfig(batch=1, epochs=1, l_r=3, l_d=2, hidden=6, seed=9)
    rng = np.random.default_rng(cfg.seed)
    gen = GeneratorParams(rng, d_hidden=6, l_r=3, l_d=2)
    disc = DiscriminatorParams(rng, d_hidden=6, l_r=3)
    recent, trend, external, target = stack_windows(wins)
    preds, _ = generate_batch(recent, trend, external, gen, graph)
    fake = np.concatenate([recent, preds[:, None]], axis=1)
    p_fake, _ = discriminate_batch(fake, disc, graph)
    result = train_on_windows(wins, graph, cfg)
    first = result.metrics[0]
    assert first.g_mse == float(np.mean((preds - target) ** 2))
    assert first.g_binary_loss == float(np.mean(-np.log(p_fake)))


def test_reconstruction_error_falls_on_constant_data():
    # constant flows are perfectly predictable, so the squared error term
    # must shrink once the weighted reconstruction loss drives updates
    graph = toy_graph()
    wins = toy_windows(16, value=0.4)
    cfg = TrainConfig(lr_g=0.01, lr_d=1e-3, batch=16, epochs=40,
                      lambda_g=5.0, l_r=3, l_d=2, hidden=6, seed=1)
    result = train_on_windows(wins, graph, cfg)
    assert result.metrics[-1].g_mse < 0.25 * result.metrics[0].g_mse


def test_train_on_windows_rejects_empty():
    with pytest.raises(TrainingError):
        train_on_windows([], toy_graph(), TrainConfig())


def test_train_requires_enough_days():
    from datetime import date, time, timedelta
    from stgan.preprocess import FlowSeries, assemble_dataset
    graph = toy_graph()
    times = [datetime.combine(date(2024, 1, 1), time(5, 0)) + timedelta(minutes=5 * k)
             for k in range(20)]
    series = [FlowSeries(s.id, [(t, 0.5) for t in times]) for s in graph.stations]
    ds = assemble_dataset(series, graph)
    with pytest.raises(TrainingError):
        train(ds, graph, TrainConfig(l_r=2, l_d=2))


def test_metrics_csv_roundtrip(tmp_path):
    metrics = [
        StepMetrics(epoch=1, step=1, d_loss=0.6931471805599453,
                    d_accuracy=50.0, g_mse=0.0123, g_binary_loss=0.7),
        StepMetrics(epoch=2, step=2, d_loss=0.123456789012345678,
                    d_accuracy=62.5, g_mse=1e-9, g_binary_loss=16.1),
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, metrics)
    assert read_metrics_csv(path) == metrics


def test_metrics_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("epoch,step,loss\n")
    with pytest.raises(ConfigError):
        read_metrics_csv(path)
