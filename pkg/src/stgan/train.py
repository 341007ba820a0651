"""Adversarial training loop: alternating Adam updates per mini-batch.

Each step first updates the generator on its combined adversarial plus
reconstruction loss, then updates the discriminator on the mean binary
cross entropy over the same batch's real and generated sequences. Both
losses average per term, so a blind discriminator scores ln 2 on each.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError
from .graph import TrafficGraph
from .model import (
    DiscriminatorParams,
    GeneratorParams,
    discriminate_batch,
    discriminator_backward,
    generate_batch,
    generator_backward,
)
from .numeric import AdamState, adam_step, finite_diff_grad, max_rel_error
from .preprocess import PreparedDataset, build_windows


@dataclass
class TrainConfig:
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    batch: int = 64
    epochs: int = 6
    lambda_g: float = 1.0
    seed: int = 0
    l_r: int = 12
    l_d: int = 7
    hidden: int = 64

    def validate(self) -> None:
        if self.lr_g <= 0.0 or self.lr_d <= 0.0:
            raise ConfigError(f"learning rates must be positive: {self.lr_g}, {self.lr_d}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lambda_g < 0.0:
            raise ConfigError(f"lambda_g must be >= 0, got {self.lambda_g}")
        if self.l_r < 1 or self.l_d < 1:
            raise ConfigError(f"window lengths must be >= 1: l_r={self.l_r}, l_d={self.l_d}")
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")


@dataclass
class StepMetrics:
    """One training step's logged values.

    g_mse is the plain mean squared prediction error over every element of
    the batch (samples, nodes and features alike). The optimization itself
    uses the per-window node sum; only the log line is normalized this way.
    """

    epoch: int
    step: int
    d_loss: float
    d_accuracy: float
    g_mse: float
    g_binary_loss: float


@dataclass
class TrainResult:
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    metrics: list = field(default_factory=list)


def stack_windows(windows):
    """Stack a list of SampleWindow into batched arrays."""
    recent = np.stack([w.recent for w in windows])
    trend = np.stack([w.trend for w in windows])
    external = np.stack([w.external for w in windows])
    target = np.stack([w.target for w in windows])
    return recent, trend, external, target


def _sequences(recent, target, preds):
    real = np.concatenate([recent, target[:, None]], axis=1)
    fake = np.concatenate([recent, preds[:, None]], axis=1)
    return real, fake


def generator_loss(windows, gen: GeneratorParams, disc: DiscriminatorParams,
                   graph: TrafficGraph, lambda_g: float):
    """Mean adversarial term plus lambda_g times mean squared reconstruction.

    The squared error sums over nodes and features per window before the
    batch mean. Returns (total, parts) with parts holding 'adversarial'
    and 'mse'.
    """
    recent, trend, external, target = stack_windows(windows)
    preds, _ = generate_batch(recent, trend, external, gen, graph)
    _, fake = _sequences(recent, target, preds)
    p_fake, _ = discriminate_batch(fake, disc, graph)
    adversarial = float(np.mean(-np.log(p_fake)))
    err = preds - target
    mse = float(np.mean((err * err).sum(axis=(1, 2))))
    total = adversarial + lambda_g * mse
    return total, {"adversarial": adversarial, "mse": mse}


def discriminator_loss(windows, gen: GeneratorParams, disc: DiscriminatorParams,
                       graph: TrafficGraph) -> float:
    """Mean BCE over the batch's real and generated sequences (2B terms)."""
    recent, trend, external, target = stack_windows(windows)
    preds, _ = generate_batch(recent, trend, external, gen, graph)
    real, fake = _sequences(recent, target, preds)
    p_real, _ = discriminate_batch(real, disc, graph)
    p_fake, _ = discriminate_batch(fake, disc, graph)
    b = len(windows)
    return float((np.sum(-np.log(p_real)) + np.sum(-np.log(1.0 - p_fake))) / (2.0 * b))


def discriminator_accuracy(windows, gen: GeneratorParams, disc: DiscriminatorParams,
                           graph: TrafficGraph) -> float:
    """Percent of 2B sequences classified correctly; D >= 0.5 counts as real."""
    recent, trend, external, target = stack_windows(windows)
    preds, _ = generate_batch(recent, trend, external, gen, graph)
    real, fake = _sequences(recent, target, preds)
    p_real, _ = discriminate_batch(real, disc, graph)
    p_fake, _ = discriminate_batch(fake, disc, graph)
    correct = int(np.sum(p_real >= 0.5)) + int(np.sum(p_fake < 0.5))
    return 100.0 * correct / (2.0 * len(windows))


def _train_step(batch, gen, disc, graph, config, g_state, d_state):
    recent, trend, external, target = stack_windows(batch)
    b = len(batch)

    # generator update
    gen.store.zero_grads()
    preds, gcache = generate_batch(recent, trend, external, gen, graph, want_cache=True)
    fake = np.concatenate([recent, preds[:, None]], axis=1)
    p_fake_g, dcache = discriminate_batch(fake, disc, graph, want_cache=True)
    g_binary = float(np.mean(-np.log(p_fake_g)))
    err = preds - target
    g_mse = float(np.mean(err * err))
    d_prob = -1.0 / (b * p_fake_g)
    d_last = discriminator_backward(dcache, d_prob, disc, graph, mode="input_last")
    d_pred = d_last + (2.0 * config.lambda_g / b) * err
    generator_backward(gcache, d_pred, gen, graph)
    adam_step(gen.store, g_state, config.lr_g)

    # discriminator update on the sequences generated above
    disc.store.zero_grads()
    real = np.concatenate([recent, target[:, None]], axis=1)
    p_real, rcache = discriminate_batch(real, disc, graph, want_cache=True)
    p_fake_d, fcache = discriminate_batch(fake, disc, graph, want_cache=True)
    d_loss = float((np.sum(-np.log(p_real)) + np.sum(-np.log(1.0 - p_fake_d))) / (2.0 * b))
    correct = int(np.sum(p_real >= 0.5)) + int(np.sum(p_fake_d < 0.5))
    d_acc = 100.0 * correct / (2.0 * b)
    discriminator_backward(rcache, -1.0 / (2.0 * b * p_real), disc, graph, mode="params")
    discriminator_backward(fcache, 1.0 / (2.0 * b * (1.0 - p_fake_d)), disc, graph,
                           mode="params")
    adam_step(disc.store, d_state, config.lr_d)

    return d_loss, d_acc, g_mse, g_binary


def train_on_windows(windows, graph: TrafficGraph, config: TrainConfig,
                     on_epoch_end=None) -> TrainResult:
    """Run the full adversarial loop over prebuilt windows."""
    config.validate()
    if not windows:
        raise TrainingError("no training windows")
    rng = np.random.default_rng(config.seed)
    gen = GeneratorParams(rng, d_hidden=config.hidden, l_r=config.l_r, l_d=config.l_d)
    disc = DiscriminatorParams(rng, d_hidden=config.hidden, l_r=config.l_r)
    g_state = AdamState.for_store(gen.store)
    d_state = AdamState.for_store(disc.store)
    metrics: list[StepMetrics] = []
    order = np.arange(len(windows))
    step = 0
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        for lo in range(0, len(order), config.batch):
            batch = [windows[i] for i in order[lo : lo + config.batch]]
            d_loss, d_acc, g_mse, g_binary = _train_step(
                batch, gen, disc, graph, config, g_state, d_state
            )
            step += 1
            metrics.append(StepMetrics(epoch=epoch, step=step, d_loss=d_loss,
                                       d_accuracy=d_acc, g_mse=g_mse,
                                       g_binary_loss=g_binary))
        if on_epoch_end is not None:
            on_epoch_end(epoch, gen, disc)
    return TrainResult(generator=gen, discriminator=disc, metrics=metrics)


def train(dataset: PreparedDataset, graph: TrafficGraph, config: TrainConfig,
          on_epoch_end=None) -> TrainResult:
    """Build windows from the dataset and run the adversarial loop."""
    config.validate()
    windows = build_windows(dataset, l_r=config.l_r, l_d=config.l_d)
    if not windows:
        raise TrainingError(
            f"dataset yields no windows for l_r={config.l_r}, l_d={config.l_d} "
            f"({dataset.n_days} days, {dataset.n_slots} slots)"
        )
    return train_on_windows(windows, graph, config, on_epoch_end=on_epoch_end)


def write_metrics_csv(path, metrics) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "d_loss", "d_acc", "g_mse", "g_binary_loss"])
        for m in metrics:
            writer.writerow([m.epoch, m.step, repr(m.d_loss), repr(m.d_accuracy),
                             repr(m.g_mse), repr(m.g_binary_loss)])


def read_metrics_csv(path) -> list:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["epoch", "step", "d_loss", "d_acc", "g_mse", "g_binary_loss"]:
            raise ConfigError(f"{path}: unexpected metrics header {header}")
        for row in reader:
            out.append(StepMetrics(epoch=int(row[0]), step=int(row[1]),
                                   d_loss=float(row[2]), d_accuracy=float(row[3]),
                                   g_mse=float(row[4]), g_binary_loss=float(row[5])))
    return out


def gradient_check(windows, graph: TrafficGraph, d_hidden: int = 8,
                   l_r: int = 2, l_d: int = 2, lambda_g: float = 1.0,
                   seed: int = 0, eps: float = 1e-4) -> dict:
    """Validate both hand-derived backward passes against central differences.

    Builds fresh random parameters, runs one analytic backward per network,
    then compares every coordinate with a finite-difference estimate of the
    same loss. Returns max relative errors overall and per parameter.
    Intended for toy instances only; cost grows with parameter count.
    """
    if not windows:
        raise TrainingError("gradient check needs at least one window")
    rng = np.random.default_rng(seed)
    gen = GeneratorParams(rng, d_hidden=d_hidden, l_r=l_r, l_d=l_d)
    disc = DiscriminatorParams(rng, d_hidden=d_hidden, l_r=l_r)
    recent, trend, external, target = stack_windows(windows)
    b = len(windows)

    # analytic generator gradient
    gen.store.zero_grads()
    preds, gcache = generate_batch(recent, trend, external, gen, graph, want_cache=True)
    fake = np.concatenate([recent, preds[:, None]], axis=1)
    p_fake, dcache = discriminate_batch(fake, disc, graph, want_cache=True)
    d_last = discriminator_backward(dcache, -1.0 / (b * p_fake), disc, graph,
                                    mode="input_last")
    d_pred = d_last + (2.0 * lambda_g / b) * (preds - target)
    generator_backward(gcache, d_pred, gen, graph)
    analytic_g = {name: p.grad.copy() for name, p in gen.store.items()}

    fd_g = finite_diff_grad(
        lambda _: generator_loss(windows, gen, disc, graph, lambda_g)[0],
        gen.store, eps=eps,
    )

    # analytic discriminator gradient (generated sequences held fixed)
    disc.store.zero_grads()
    p_real, rcache = discriminate_batch(
        np.concatenate([recent, target[:, None]], axis=1), disc, graph, want_cache=True
    )
    p_fake2, fcache = discriminate_batch(fake, disc, graph, want_cache=True)
    discriminator_backward(rcache, -1.0 / (2.0 * b * p_real), disc, graph, mode="params")
    discriminator_backward(fcache, 1.0 / (2.0 * b * (1.0 - p_fake2)), disc, graph,
                           mode="params")
    analytic_d = {name: p.grad.copy() for name, p in disc.store.items()}

    fd_d = finite_diff_grad(
        lambda _: discriminator_loss(windows, gen, disc, graph),
        disc.store, eps=eps,
    )

    # floor 1e-6: coordinates below it are compared absolutely at 1e-10
    # scale, two orders above central-difference roundoff (~1e-12 here)
    per_param = {}
    for name in gen.store.names():
        per_param[f"generator.{name}"] = max_rel_error(analytic_g[name], fd_g[name],
                                                       floor=1e-6)
    for name in disc.store.names():
        per_param[f"discriminator.{name}"] = max_rel_error(analytic_d[name], fd_d[name],
                                                           floor=1e-6)
    gen_err = max(v for k, v in per_param.items() if k.startswith("generator."))
    disc_err = max(v for k, v in per_param.items() if k.startswith("discriminator."))
    return {"generator": gen_err, "discriminator": disc_err, "per_param": per_param}
