"""Generator and discriminator networks with hand-derived backward passes.

The generator fuses a 2-layer graph-convolutional GRU over the recent
segment, a 2-layer LSTM over the same-clock trend segment, and an embedded
calendar feature, then maps the fusion through one output graph convolution
to a sigmoid flow prediction. The discriminator scores a short flow sequence
with a single GCGRU layer pooled over node subgraphs plus a GCN readout of
the final slice.

All gradients are derived by hand and validated against central finite
differences in the test suite; no autodiff is involved anywhere.

Batched internals use (B, N, K) tensors. Heavy lifting goes through two
reshape tricks so BLAS sees large single GEMMs: per-node affine maps flatten
(B, N, K) to (B*N, K), and the propagation product folds the batch into
columns of one (N, B*K) operand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError, ContractViolation, ShapeError
from .graph import TrafficGraph, subgraph_pool_weights
from .numeric import PROB_EPS, ParameterStore, Tensor, sigmoid

CHECKPOINT_FORMAT_VERSION = 1

EXTERNAL_DIM = 31


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def rows_mm(x: Tensor, w: Tensor) -> Tensor:
    """(... , K) @ (K, M) as one flattened GEMM."""
    flat = x.reshape(-1, x.shape[-1])
    return (flat @ w).reshape(x.shape[:-1] + (w.shape[1],))


def rows_outer(x: Tensor, d: Tensor) -> Tensor:
    """Accumulated weight gradient x^T d over all leading dimensions."""
    return x.reshape(-1, x.shape[-1]).T @ d.reshape(-1, d.shape[-1])


def a_mul(a_hat: Tensor, x: Tensor) -> Tensor:
    """Propagation product: a_hat applied to the node axis of (B, N, K)."""
    if x.ndim == 2:
        return a_hat @ x
    b, n, k = x.shape
    y = a_hat @ x.transpose(1, 0, 2).reshape(n, b * k)
    return y.reshape(n, b, k).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# GCGRU layer


class GcgruLayer:
    """One graph-convolutional GRU layer registered in a ParameterStore.

    Gate equations, with A the propagation matrix and X_t the step input:
      r = sigmoid(A X W_r + A H_prev U_r + b_r)
      z = sigmoid(A X W_z + A H_prev U_z + b_z)
      Htil = tanh(A X W_h + A (r * H_prev) U_h + b_h)
      H = z * H_prev + (1 - z) * Htil
    """

    GATES = ("r", "z", "h")

    def __init__(self, store: ParameterStore, prefix: str, f_in: int, d: int,
                 rng: np.random.Generator) -> None:
        self.prefix = prefix
        self.f_in = f_in
        self.d = d
        self.w = {}
        self.u = {}
        self.b = {}
        for g in self.GATES:
            self.w[g] = store.register(f"{prefix}.w_{g}", xavier_uniform(rng, f_in, d))
            self.u[g] = store.register(f"{prefix}.u_{g}", xavier_uniform(rng, d, d))
            self.b[g] = store.register(f"{prefix}.b_{g}", np.zeros(d))


class _GcgruPack:
    """r and z gates packed side by side so each step runs two GEMMs, not six."""

    def __init__(self, layer: GcgruLayer) -> None:
        self.layer = layer
        self.wrz = np.concatenate([layer.w["r"].value, layer.w["z"].value], axis=1)
        self.urz = np.concatenate([layer.u["r"].value, layer.u["z"].value], axis=1)
        self.brz = np.concatenate([layer.b["r"].value, layer.b["z"].value])
        self.wh = layer.w["h"].value
        self.uh = layer.u["h"].value
        self.bh = layer.b["h"].value

    def make_grad_buffers(self):
        return {
            "wrz": np.zeros_like(self.wrz),
            "urz": np.zeros_like(self.urz),
            "brz": np.zeros_like(self.brz),
            "wh": np.zeros_like(self.wh),
            "uh": np.zeros_like(self.uh),
            "bh": np.zeros_like(self.bh),
        }

    def flush_grads(self, buf) -> None:
        d = self.layer.d
        self.layer.w["r"].grad += buf["wrz"][:, :d]
        self.layer.w["z"].grad += buf["wrz"][:, d:]
        self.layer.u["r"].grad += buf["urz"][:, :d]
        self.layer.u["z"].grad += buf["urz"][:, d:]
        self.layer.b["r"].grad += buf["brz"][:d]
        self.layer.b["z"].grad += buf["brz"][d:]
        self.layer.w["h"].grad += buf["wh"]
        self.layer.u["h"].grad += buf["uh"]
        self.layer.b["h"].grad += buf["bh"]


@dataclass
class _GcgruStepCache:
    ax: Tensor
    ah: Tensor
    arh: Tensor
    r: Tensor
    z: Tensor
    htil: Tensor
    h_prev: Tensor


def _gcgru_step(x_t: Tensor, h_prev: Tensor, pack: _GcgruPack, a_hat: Tensor):
    d = pack.layer.d
    ax = a_mul(a_hat, x_t)
    ah = a_mul(a_hat, h_prev)
    rz = sigmoid(rows_mm(ax, pack.wrz) + rows_mm(ah, pack.urz) + pack.brz)
    r = rz[..., :d]
    z = rz[..., d:]
    arh = a_mul(a_hat, r * h_prev)
    htil = np.tanh(rows_mm(ax, pack.wh) + rows_mm(arh, pack.uh) + pack.bh)
    h = z * h_prev + (1.0 - z) * htil
    return h, _GcgruStepCache(ax=ax, ah=ah, arh=arh, r=r, z=z, htil=htil, h_prev=h_prev)


def _gcgru_step_backward(cache: _GcgruStepCache, d_h: Tensor, pack: _GcgruPack,
                         a_hat: Tensor, grad_buf=None):
    """Backward through one cell. Returns (d_x, d_h_prev).

    grad_buf, when given, receives the packed parameter-gradient
    contributions of this step.
    """
    r, z, htil, h_prev = cache.r, cache.z, cache.htil, cache.h_prev
    d_z = d_h * (h_prev - htil)
    d_htil = d_h * (1.0 - z)
    d_h_prev = d_h * z
    d_pre_h = d_htil * (1.0 - htil * htil)
    # candidate branch: Htil depends on A(r*H_prev)U_h
    d_arh = rows_mm(d_pre_h, pack.uh.T)
    d_rh = a_mul(a_hat, d_arh)
    d_r = d_rh * h_prev
    d_h_prev = d_h_prev + d_rh * r
    d_pre_r = d_r * r * (1.0 - r)
    d_pre_z = d_z * z * (1.0 - z)
    d_pre_rz = np.concatenate([d_pre_r, d_pre_z], axis=-1)
    d_ah = rows_mm(d_pre_rz, pack.urz.T)
    d_h_prev = d_h_prev + a_mul(a_hat, d_ah)
    d_ax = rows_mm(d_pre_rz, pack.wrz.T) + rows_mm(d_pre_h, pack.wh.T)
    d_x = a_mul(a_hat, d_ax)
    if grad_buf is not None:
        lead = tuple(range(d_pre_rz.ndim - 1))
        grad_buf["wrz"] += rows_outer(cache.ax, d_pre_rz)
        grad_buf["urz"] += rows_outer(cache.ah, d_pre_rz)
        grad_buf["brz"] += d_pre_rz.sum(axis=lead)
        grad_buf["wh"] += rows_outer(cache.ax, d_pre_h)
        grad_buf["uh"] += rows_outer(cache.arh, d_pre_h)
        grad_buf["bh"] += d_pre_h.sum(axis=lead)
    return d_x, d_h_prev


def _gcgru_seq_forward(x_seq: Tensor, layer: GcgruLayer, a_hat: Tensor):
    """Roll the layer over (B, L, N, F). Returns (h_last, h_list, caches)."""
    b, length, n, _ = x_seq.shape
    pack = _GcgruPack(layer)
    h = np.zeros((b, n, layer.d), dtype=np.float64)
    hs = []
    caches = []
    for t in range(length):
        h, cache = _gcgru_step(np.ascontiguousarray(x_seq[:, t]), h, pack, a_hat)
        hs.append(h)
        caches.append(cache)
    return h, hs, caches


def _gcgru_seq_backward(caches, layer: GcgruLayer, a_hat: Tensor,
                        d_h_last: Tensor | None = None,
                        d_h_steps: list | None = None,
                        accumulate: bool = True):
    """Backpropagate through the rolled layer. Returns per-step input grads."""
    pack = _GcgruPack(layer)
    buf = pack.make_grad_buffers() if accumulate else None
    length = len(caches)
    d_h = d_h_last
    d_xs = [None] * length
    for t in reversed(range(length)):
        if d_h_steps is not None and d_h_steps[t] is not None:
            d_h = d_h_steps[t] if d_h is None else d_h + d_h_steps[t]
        if d_h is None:
            raise ContractViolation("gcgru backward started with no output gradient")
        d_xs[t], d_h = _gcgru_step_backward(caches[t], d_h, pack, a_hat, buf)
    if accumulate:
        pack.flush_grads(buf)
    return d_xs


# ---------------------------------------------------------------------------
# LSTM layer (per node, no graph mixing)


@dataclass
class LstmState:
    """Hidden and cell state of one LSTM layer."""

    h: Tensor
    c: Tensor


class LstmLayer:
    """Standard LSTM with input, forget, output and candidate gates."""

    GATES = ("i", "f", "o", "g")

    def __init__(self, store: ParameterStore, prefix: str, f_in: int, d: int,
                 rng: np.random.Generator) -> None:
        self.prefix = prefix
        self.f_in = f_in
        self.d = d
        self.w = {}
        self.u = {}
        self.b = {}
        for g in self.GATES:
            self.w[g] = store.register(f"{prefix}.w_{g}", xavier_uniform(rng, f_in, d))
            self.u[g] = store.register(f"{prefix}.u_{g}", xavier_uniform(rng, d, d))
            self.b[g] = store.register(f"{prefix}.b_{g}", np.zeros(d))


class _LstmPack:
    """All four gates packed so each step runs two GEMMs."""

    def __init__(self, layer: LstmLayer) -> None:
        self.layer = layer
        self.w = np.concatenate([layer.w[g].value for g in layer.GATES], axis=1)
        self.u = np.concatenate([layer.u[g].value for g in layer.GATES], axis=1)
        self.b = np.concatenate([layer.b[g].value for g in layer.GATES])

    def make_grad_buffers(self):
        return {
            "w": np.zeros_like(self.w),
            "u": np.zeros_like(self.u),
            "b": np.zeros_like(self.b),
        }

    def flush_grads(self, buf) -> None:
        d = self.layer.d
        for k, g in enumerate(self.layer.GATES):
            self.layer.w[g].grad += buf["w"][:, k * d : (k + 1) * d]
            self.layer.u[g].grad += buf["u"][:, k * d : (k + 1) * d]
            self.layer.b[g].grad += buf["b"][k * d : (k + 1) * d]


@dataclass
class _LstmStepCache:
    x: Tensor
    h_prev: Tensor
    c_prev: Tensor
    i: Tensor
    f: Tensor
    o: Tensor
    g: Tensor
    tc: Tensor


def _lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, pack: _LstmPack):
    d = pack.layer.d
    pre = rows_mm(x_t, pack.w) + rows_mm(h_prev, pack.u) + pack.b
    i = sigmoid(pre[..., :d])
    f = sigmoid(pre[..., d : 2 * d])
    o = sigmoid(pre[..., 2 * d : 3 * d])
    g = np.tanh(pre[..., 3 * d :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, _LstmStepCache(x=x_t, h_prev=h_prev, c_prev=c_prev,
                                i=i, f=f, o=o, g=g, tc=tc)


def _lstm_step_backward(cache: _LstmStepCache, d_h: Tensor, d_c: Tensor | None,
                        pack: _LstmPack, grad_buf=None):
    i, f, o, g, tc = cache.i, cache.f, cache.o, cache.g, cache.tc
    d_o = d_h * tc
    d_c_total = d_h * o * (1.0 - tc * tc)
    if d_c is not None:
        d_c_total = d_c_total + d_c
    d_f = d_c_total * cache.c_prev
    d_i = d_c_total * g
    d_g = d_c_total * i
    d_c_prev = d_c_total * f
    d_pre = np.concatenate(
        [
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_o * o * (1.0 - o),
            d_g * (1.0 - g * g),
        ],
        axis=-1,
    )
    d_x = rows_mm(d_pre, pack.w.T)
    d_h_prev = rows_mm(d_pre, pack.u.T)
    if grad_buf is not None:
        grad_buf["w"] += rows_outer(cache.x, d_pre)
        grad_buf["u"] += rows_outer(cache.h_prev, d_pre)
        grad_buf["b"] += d_pre.sum(axis=tuple(range(d_pre.ndim - 1)))
    return d_x, d_h_prev, d_c_prev


def _lstm_seq_forward(x_seq: Tensor, layer: LstmLayer):
    b, length, n, _ = x_seq.shape
    pack = _LstmPack(layer)
    h = np.zeros((b, n, layer.d), dtype=np.float64)
    c = np.zeros((b, n, layer.d), dtype=np.float64)
    hs = []
    caches = []
    for t in range(length):
        h, c, cache = _lstm_step(np.ascontiguousarray(x_seq[:, t]), h, c, pack)
        hs.append(h)
        caches.append(cache)
    return h, hs, caches


def _lstm_seq_backward(caches, layer: LstmLayer,
                       d_h_last: Tensor | None = None,
                       d_h_steps: list | None = None,
                       accumulate: bool = True):
    pack = _LstmPack(layer)
    buf = pack.make_grad_buffers() if accumulate else None
    length = len(caches)
    d_h = d_h_last
    d_c = None
    d_xs = [None] * length
    for t in reversed(range(length)):
        if d_h_steps is not None and d_h_steps[t] is not None:
            d_h = d_h_steps[t] if d_h is None else d_h + d_h_steps[t]
        if d_h is None:
            raise ContractViolation("lstm backward started with no output gradient")
        d_xs[t], d_h, d_c = _lstm_step_backward(caches[t], d_h, d_c, pack, buf)
    if accumulate:
        pack.flush_grads(buf)
    return d_xs


# ---------------------------------------------------------------------------
# Parameter bundles


class GeneratorParams:
    """All generator parameters in one ordered store.

    Layer layout: two GCGRU layers over the recent segment, two LSTM layers
    over the trend segment, the calendar embedding, the fusion affine map
    and the output graph-convolution filter.
    """

    def __init__(self, rng: np.random.Generator, d_hidden: int = 64,
                 l_r: int = 12, l_d: int = 7, f_in: int = 1) -> None:
        if d_hidden < 1 or l_r < 1 or l_d < 1 or f_in < 1:
            raise ShapeError("generator dimensions must all be >= 1")
        self.d = d_hidden
        self.l_r = l_r
        self.l_d = l_d
        self.f_in = f_in
        self.store = ParameterStore()
        self.gcgru = [
            GcgruLayer(self.store, "gcgru0", f_in, d_hidden, rng),
            GcgruLayer(self.store, "gcgru1", d_hidden, d_hidden, rng),
        ]
        self.lstm = [
            LstmLayer(self.store, "lstm0", f_in, d_hidden, rng),
            LstmLayer(self.store, "lstm1", d_hidden, d_hidden, rng),
        ]
        self.ext_w = self.store.register("external.w", xavier_uniform(rng, EXTERNAL_DIM, d_hidden))
        self.ext_b = self.store.register("external.b", np.zeros(d_hidden))
        self.fus_w = self.store.register("fusion.w", xavier_uniform(rng, 3 * d_hidden, d_hidden))
        self.fus_b = self.store.register("fusion.b", np.zeros(d_hidden))
        self.out_theta = self.store.register("output.theta", xavier_uniform(rng, d_hidden, f_in))


class DiscriminatorParams:
    """All discriminator parameters in one ordered store."""

    def __init__(self, rng: np.random.Generator, d_hidden: int = 64,
                 l_r: int = 12, f_in: int = 1) -> None:
        if d_hidden < 1 or l_r < 1 or f_in < 1:
            raise ShapeError("discriminator dimensions must all be >= 1")
        self.d = d_hidden
        self.l_r = l_r
        self.seq_len = l_r + 1
        self.f_in = f_in
        self.store = ParameterStore()
        self.gcgru = GcgruLayer(self.store, "gcgru", f_in, d_hidden, rng)
        self.gcn_theta = self.store.register("gcn.theta", xavier_uniform(rng, f_in, d_hidden))
        self.fus_w = self.store.register("fusion.w", xavier_uniform(rng, 2 * d_hidden, 1))
        self.fus_b = self.store.register("fusion.b", np.zeros(1))


@dataclass
class SequencePair:
    """A real flow sequence and its generated counterpart.

    Both are (L_r + 1, N, F); they share the first L_r slices and differ
    only in the final one.
    """

    real: Tensor
    fake: Tensor


def make_sequence_pair(recent: Tensor, target: Tensor, pred: Tensor) -> SequencePair:
    if recent.ndim != 3 or target.shape != recent.shape[1:] or pred.shape != target.shape:
        raise ShapeError(
            f"sequence pair shapes disagree: recent {recent.shape}, "
            f"target {target.shape}, pred {pred.shape}"
        )
    real = np.concatenate([recent, target[None]], axis=0)
    fake = np.concatenate([recent, pred[None]], axis=0)
    return SequencePair(real=real, fake=fake)


# ---------------------------------------------------------------------------
# Public single-sample cells


def gcgru_cell(x_t: Tensor, h_prev: Tensor, layer: GcgruLayer, a_hat: Tensor) -> Tensor:
    """One GCGRU step for a single sample: (N, F), (N, D) -> (N, D)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    n = a_hat.shape[0]
    if x_t.shape != (n, layer.f_in):
        raise ShapeError(f"gcgru_cell: input {x_t.shape}, expected {(n, layer.f_in)}")
    if h_prev.shape != (n, layer.d):
        raise ShapeError(f"gcgru_cell: state {h_prev.shape}, expected {(n, layer.d)}")
    h, _ = _gcgru_step(x_t[None], h_prev[None], _GcgruPack(layer), a_hat)
    return h[0]


def lstm_cell(x_t: Tensor, state: LstmState, layer: LstmLayer) -> LstmState:
    """One LSTM step for a single sample: (N, F) plus state -> new state."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != layer.f_in:
        raise ShapeError(f"lstm_cell: input {x_t.shape}, expected (*, {layer.f_in})")
    if state.h.shape != (x_t.shape[0], layer.d) or state.c.shape != state.h.shape:
        raise ShapeError(
            f"lstm_cell: state {state.h.shape}/{state.c.shape}, "
            f"expected {(x_t.shape[0], layer.d)}"
        )
    h, c, _ = _lstm_step(x_t[None], state.h[None], state.c[None], _LstmPack(layer))
    return LstmState(h=h[0], c=c[0])


def external_embed(e: Tensor, gen: GeneratorParams) -> Tensor:
    """Embed one calendar feature vector: (31,) -> (1, D), same row for all nodes."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (EXTERNAL_DIM,):
        raise ShapeError(f"external_embed: feature {e.shape}, expected ({EXTERNAL_DIM},)")
    return np.tanh(e[None, :] @ gen.ext_w.value + gen.ext_b.value)


# ---------------------------------------------------------------------------
# Generator forward/backward


@dataclass
class GenerateCache:
    recent: Tensor
    trend: Tensor
    external: Tensor
    c_g0: list
    c_g1: list
    c_l0: list
    c_l1: list
    ext_row: Tensor
    comb: Tensor
    fused: Tensor
    a_fused: Tensor
    pred: Tensor
    consumed: bool = False


def generate_batch(recent: Tensor, trend: Tensor, external: Tensor,
                   gen: GeneratorParams, graph: TrafficGraph,
                   want_cache: bool = False):
    """Forward pass over a batch. Returns (pred, cache-or-None).

    recent (B, L_r, N, F), trend (B, L_d, N, F), external (B, 31);
    pred is (B, N, F) in (0, 1).
    """
    recent = np.asarray(recent, dtype=np.float64)
    trend = np.asarray(trend, dtype=np.float64)
    external = np.asarray(external, dtype=np.float64)
    n = graph.n
    if recent.ndim != 4 or recent.shape[1:] != (gen.l_r, n, gen.f_in):
        raise ShapeError(
            f"generate: recent {recent.shape}, expected (B, {gen.l_r}, {n}, {gen.f_in})"
        )
    b = recent.shape[0]
    if trend.shape != (b, gen.l_d, n, gen.f_in):
        raise ShapeError(
            f"generate: trend {trend.shape}, expected {(b, gen.l_d, n, gen.f_in)}"
        )
    if external.shape != (b, EXTERNAL_DIM):
        raise ShapeError(
            f"generate: external {external.shape}, expected {(b, EXTERNAL_DIM)}"
        )
    a_hat = graph.propagation

    h1, hs1, c_g0 = _gcgru_seq_forward(recent, gen.gcgru[0], a_hat)
    x2 = np.stack(hs1, axis=1)
    h2, _, c_g1 = _gcgru_seq_forward(x2, gen.gcgru[1], a_hat)

    lh1, lhs1, c_l0 = _lstm_seq_forward(trend, gen.lstm[0])
    lx2 = np.stack(lhs1, axis=1)
    lh2, _, c_l1 = _lstm_seq_forward(lx2, gen.lstm[1])

    ext_row = np.tanh(external @ gen.ext_w.value + gen.ext_b.value)
    ext_full = np.repeat(ext_row[:, None, :], n, axis=1)

    comb = np.concatenate([h2, lh2, ext_full], axis=2)
    fused = np.tanh(rows_mm(comb, gen.fus_w.value) + gen.fus_b.value)
    a_fused = a_mul(a_hat, fused)
    pred = sigmoid(rows_mm(a_fused, gen.out_theta.value))

    cache = None
    if want_cache:
        cache = GenerateCache(
            recent=recent, trend=trend, external=external,
            c_g0=c_g0, c_g1=c_g1, c_l0=c_l0, c_l1=c_l1,
            ext_row=ext_row, comb=comb, fused=fused, a_fused=a_fused, pred=pred,
        )
    return pred, cache


def generator_backward(cache: GenerateCache, d_pred: Tensor,
                       gen: GeneratorParams, graph: TrafficGraph) -> None:
    """Accumulate d loss / d theta into the generator store.

    d_pred is the loss gradient at the prediction, shape (B, N, F). The
    cache must come from generate_batch(want_cache=True) and is consumed.
    """
    if cache is None:
        raise ContractViolation("generator backward called without a forward cache")
    if cache.consumed:
        raise ContractViolation("generator cache already consumed")
    cache.consumed = True
    if d_pred.shape != cache.pred.shape:
        raise ShapeError(
            f"generator backward: gradient {d_pred.shape}, expected {cache.pred.shape}"
        )
    a_hat = graph.propagation
    d = gen.d

    pred = cache.pred
    d_lin = d_pred * pred * (1.0 - pred)
    gen.out_theta.grad += rows_outer(cache.a_fused, d_lin)
    d_a_fused = rows_mm(d_lin, gen.out_theta.value.T)
    d_fused = a_mul(a_hat, d_a_fused)
    d_fus_pre = d_fused * (1.0 - cache.fused * cache.fused)
    gen.fus_w.grad += rows_outer(cache.comb, d_fus_pre)
    gen.fus_b.grad += d_fus_pre.sum(axis=(0, 1))
    d_comb = rows_mm(d_fus_pre, gen.fus_w.value.T)

    d_h2 = d_comb[:, :, :d]
    d_lh2 = d_comb[:, :, d : 2 * d]
    d_ext_full = d_comb[:, :, 2 * d :]

    d_ext_row = d_ext_full.sum(axis=1)
    d_ext_pre = d_ext_row * (1.0 - cache.ext_row * cache.ext_row)
    gen.ext_w.grad += cache.external.T @ d_ext_pre
    gen.ext_b.grad += d_ext_pre.sum(axis=0)

    d_x2_steps = _gcgru_seq_backward(cache.c_g1, gen.gcgru[1], a_hat, d_h_last=d_h2)
    _gcgru_seq_backward(cache.c_g0, gen.gcgru[0], a_hat, d_h_steps=d_x2_steps)

    d_lx2_steps = _lstm_seq_backward(cache.c_l1, gen.lstm[1], d_h_last=d_lh2)
    _lstm_seq_backward(cache.c_l0, gen.lstm[0], d_h_steps=d_lx2_steps)


def generate(window, gen: GeneratorParams, graph: TrafficGraph):
    """Single-sample forward. Returns (pred (N, F), fake_seq (L_r + 1, N, F))."""
    pred, _ = generate_batch(window.recent[None], window.trend[None],
                             window.external[None], gen, graph)
    fake_seq = np.concatenate([window.recent, pred], axis=0)
    return pred[0], fake_seq


# ---------------------------------------------------------------------------
# Discriminator forward/backward


@dataclass
class DiscriminateCache:
    seqs: Tensor
    caches: list
    pool_w: Tensor
    a_x: Tensor
    t2: Tensor
    u: Tensor
    raw: Tensor
    mask: Tensor
    consumed: bool = False


def discriminate_batch(seqs: Tensor, disc: DiscriminatorParams,
                       graph: TrafficGraph, want_cache: bool = False):
    """Score a batch of (B, L_r + 1, N, F) sequences. Returns (probs, cache).

    Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS]; the clamp
    passes zero gradient where it binds.
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    n = graph.n
    if seqs.ndim != 4 or seqs.shape[1:] != (disc.seq_len, n, disc.f_in):
        raise ShapeError(
            f"discriminate: sequence {seqs.shape}, expected "
            f"(B, {disc.seq_len}, {n}, {disc.f_in})"
        )
    a_hat = graph.propagation

    h_last, _, caches = _gcgru_seq_forward(seqs, disc.gcgru, a_hat)
    pool_w = subgraph_pool_weights(graph)
    g1 = (h_last * pool_w[None, :, None]).sum(axis=1)

    x_last = np.ascontiguousarray(seqs[:, -1])
    a_x = a_mul(a_hat, x_last)
    t2 = np.tanh(rows_mm(a_x, disc.gcn_theta.value))
    g2 = t2.mean(axis=1)

    u = np.concatenate([g1, g2], axis=1)
    logit = u @ disc.fus_w.value + disc.fus_b.value
    raw = sigmoid(logit[:, 0])
    prob = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    mask = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)

    cache = None
    if want_cache:
        cache = DiscriminateCache(seqs=seqs, caches=caches, pool_w=pool_w,
                                  a_x=a_x, t2=t2, u=u, raw=raw, mask=mask)
    return prob, cache


def discriminator_backward(cache: DiscriminateCache, d_prob: Tensor,
                           disc: DiscriminatorParams, graph: TrafficGraph,
                           mode: str = "params"):
    """Backward through the discriminator.

    mode 'params' accumulates d loss / d phi into the store and returns
    None (the generator update never calls this). mode 'input_last' leaves
    phi gradients untouched and returns the loss gradient with respect to
    the final input slice, shape (B, N, F); that slice is the only part of
    a generated sequence the generator influences, so the shortcut is exact.
    """
    if cache is None:
        raise ContractViolation("discriminator backward called without a forward cache")
    if mode not in ("params", "input_last"):
        raise ContractViolation(f"unknown discriminator backward mode {mode!r}")
    if cache.consumed:
        raise ContractViolation("discriminator cache already consumed")
    cache.consumed = True
    d_prob = np.asarray(d_prob, dtype=np.float64)
    if d_prob.shape != cache.raw.shape:
        raise ShapeError(
            f"discriminator backward: gradient {d_prob.shape}, expected {cache.raw.shape}"
        )
    a_hat = graph.propagation
    d = disc.d
    n = graph.n
    accumulate = mode == "params"

    d_raw = np.where(cache.mask, d_prob, 0.0)
    d_logit = d_raw * cache.raw * (1.0 - cache.raw)
    if accumulate:
        disc.fus_w.grad += cache.u.T @ d_logit[:, None]
        disc.fus_b.grad += d_logit.sum()
    d_u = d_logit[:, None] * disc.fus_w.value[:, 0][None, :]
    d_g1 = d_u[:, :d]
    d_g2 = d_u[:, d:]

    # GCN branch over the final slice
    d_t2 = np.broadcast_to(d_g2[:, None, :] / n, cache.t2.shape)
    d_lin2 = d_t2 * (1.0 - cache.t2 * cache.t2)
    if accumulate:
        disc.gcn_theta.grad += rows_outer(cache.a_x, d_lin2)
    d_x_gcn = a_mul(a_hat, rows_mm(d_lin2, disc.gcn_theta.value.T))

    # GCGRU branch: the pooled readout only sees the final hidden state
    d_h_last = cache.pool_w[None, :, None] * d_g1[:, None, :]
    if accumulate:
        _gcgru_seq_backward(cache.caches, disc.gcgru, a_hat, d_h_last=d_h_last)
        return None
    pack = _GcgruPack(disc.gcgru)
    d_x_gcgru, _ = _gcgru_step_backward(cache.caches[-1], d_h_last, pack, a_hat)
    return d_x_gcgru + d_x_gcn


def discriminate(seq: Tensor, disc: DiscriminatorParams, graph: TrafficGraph) -> float:
    """Score one (L_r + 1, N, F) sequence. Returns the clamped probability."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3:
        raise ShapeError(f"discriminate: sequence must be 3-D, got {seq.shape}")
    probs, _ = discriminate_batch(seq[None], disc, graph)
    return float(probs[0])


# ---------------------------------------------------------------------------
# Checkpoints


def _store_payload(store: ParameterStore) -> dict:
    return {
        name: {"shape": list(p.value.shape), "data": p.value.reshape(-1).tolist()}
        for name, p in store.items()
    }


def _load_store_payload(store: ParameterStore, payload: dict, label: str) -> None:
    want = set(store.names())
    have = set(payload)
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise CheckpointMismatchError(
            f"{label}: parameter names disagree, missing {missing}, unexpected {extra}"
        )
    for name, p in store.items():
        entry = payload[name]
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise CheckpointMismatchError(
                f"{label}: parameter {name!r} has shape {shape}, expected {p.value.shape}"
            )
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != p.value.size:
            raise CheckpointMismatchError(
                f"{label}: parameter {name!r} carries {data.size} values, "
                f"expected {p.value.size}"
            )
        p.value[...] = data.reshape(shape)


def save_checkpoint(path, gen: GeneratorParams, disc: DiscriminatorParams,
                    graph: TrafficGraph, extra: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "d_hidden": gen.d,
        "l_r": gen.l_r,
        "l_d": gen.l_d,
        "f_in": gen.f_in,
        "station_order": [s.id for s in graph.stations],
        "graph_config": {
            "threshold_m": graph.threshold_m,
            "sigma_m": graph.sigma,
            "n_stations": graph.n,
        },
        "extra": extra or {},
        "generator": _store_payload(gen.store),
        "discriminator": _store_payload(disc.store),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path, graph: TrafficGraph):
    """Load a checkpoint against the given graph.

    Returns (gen, disc, header) where header carries the scalar fields and
    the config echo. The station order must match the graph exactly.
    """
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {doc.get('format_version')!r}"
        )
    order = doc.get("station_order", [])
    graph_order = [s.id for s in graph.stations]
    if order != graph_order:
        raise CheckpointMismatchError(
            "checkpoint station order does not match the graph: "
            f"{order[:5]}... vs {graph_order[:5]}..."
        )
    rng = np.random.default_rng(0)
    gen = GeneratorParams(rng, d_hidden=int(doc["d_hidden"]), l_r=int(doc["l_r"]),
                          l_d=int(doc["l_d"]), f_in=int(doc["f_in"]))
    disc = DiscriminatorParams(rng, d_hidden=int(doc["d_hidden"]),
                               l_r=int(doc["l_r"]), f_in=int(doc["f_in"]))
    _load_store_payload(gen.store, doc["generator"], "generator")
    _load_store_payload(disc.store, doc["discriminator"], "discriminator")
    header = {
        "format_version": doc["format_version"],
        "d_hidden": int(doc["d_hidden"]),
        "l_r": int(doc["l_r"]),
        "l_d": int(doc["l_d"]),
        "f_in": int(doc["f_in"]),
        "station_order": order,
        "graph_config": doc.get("graph_config", {}),
        "extra": doc.get("extra", {}),
    }
    return gen, disc, header
