"""ConvLSTM autoencoder over packet windows.

The recurrence runs over packets in a window (time) while convolutions slide
over character positions (space). Gate order everywhere is input, forget,
cell, output. Peephole weights are per-position Hadamard factors ``[L, Hc]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .codec import CodecConfig, PacketSample, Window
from .diffcore import ParamStore, Tape, Var

log = logging.getLogger(__name__)

GATES = ("i", "f", "c", "o")
Encoding = Var


@dataclass(frozen=True)
class ConvLstmConfig:
    hidden_channels: int = 16
    kernel: int = 5

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")


@dataclass
class CellState:
    H: Var
    C: Var


def zero_state(lead: tuple[int, ...], L: int, hc: int) -> CellState:
    return CellState(Var(np.zeros(lead + (L, hc))), Var(np.zeros(lead + (L, hc))))


def _add_cell_params(store: ParamStore, prefix: str, cin: int, L: int, cfg: ConvLstmConfig) -> None:
    k, hc = cfg.kernel, cfg.hidden_channels
    for g in GATES:
        store.add(f"{prefix}W_x{g}", (k, cin, hc))
    for g in GATES:
        store.add(f"{prefix}W_h{g}", (k, hc, hc))
    for g in ("i", "f", "o"):
        store.add(f"{prefix}W_c{g}", (L, hc), "zeros")
    for g in GATES:
        store.add(f"{prefix}b_{g}", (hc,), "ones" if g == "f" else "zeros")


def init_autoencoder(codec: CodecConfig, cfg: ConvLstmConfig, seed: int) -> ParamStore:
    store = ParamStore(seed)
    L, A, hc = codec.max_len, codec.alphabet_size, cfg.hidden_channels
    _add_cell_params(store, "enc.", A, L, cfg)
    _add_cell_params(store, "dec.", hc, L, cfg)
    store.add("dec.W_proj", (1, hc, A))
    store.add("dec.b_proj", (A,), "zeros")
    return store


def _input_weights(p: Mapping, prefix: str):
    wx = dc.concat([p[f"{prefix}W_x{g}"] for g in GATES], axis=-1)
    b = dc.concat([p[f"{prefix}b_{g}"] for g in GATES], axis=-1)
    return wx, b


def _recurrent_step(zx, state: CellState, p: Mapping, prefix: str, wh) -> CellState:
    z = dc.add(zx, dc.conv1d(state.H, wh))
    zi, zf, zc, zo = dc.split(z, 4, axis=-1)
    i = dc.sigmoid(dc.add(zi, dc.mul(p[f"{prefix}W_ci"], state.C)))
    f = dc.sigmoid(dc.add(zf, dc.mul(p[f"{prefix}W_cf"], state.C)))
    c = dc.add(dc.mul(f, state.C), dc.mul(i, dc.tanh(zc)))
    o = dc.sigmoid(dc.add(zo, dc.mul(p[f"{prefix}W_co"], c)))
    h = dc.mul(o, dc.tanh(c))
    return CellState(h, c)


def cell_step(x_t, state: CellState, params: Mapping, prefix: str = "enc.") -> CellState:
    """One ConvLSTM update from input ``x_t[..., L, Cin]``."""
    wx, b = _input_weights(params, prefix)
    wh = dc.concat([params[f"{prefix}W_h{g}"] for g in GATES], axis=-1)
    return _recurrent_step(dc.conv1d(x_t, wx, b), state, params, prefix, wh)


def _run(xs, params: Mapping, prefix: str, hc: int) -> list[Var]:
    """Run a cell from zero state over per-step inputs; returns the hidden states.

    ``xs`` is an array ``[..., T, L, Cin]`` or a sequence of ``[..., L, Cin]``.
    """
    if isinstance(xs, np.ndarray):
        if xs.ndim < 3:
            raise dc.ShapeError(f"expected [..., T, L, Cin], got {xs.shape}")
        steps = [xs[..., t, :, :] for t in range(xs.shape[-3])]
    else:
        steps = list(xs)
    if not steps:
        raise dc.ShapeError("empty sequence")
    first = dc.value(steps[0])
    wx, b = _input_weights(params, prefix)
    wh = dc.concat([params[f"{prefix}W_h{g}"] for g in GATES], axis=-1)
    state = zero_state(first.shape[:-2], first.shape[-2], hc)
    outs = []
    for x_t in steps:
        state = _recurrent_step(dc.conv1d(x_t, wx, b), state, params, prefix, wh)
        outs.append(state.H)
    return outs


def _hidden(params: Mapping) -> int:
    return dc.value(params["enc.b_i"]).shape[0]


def _as_array(window) -> np.ndarray:
    if isinstance(window, Window):
        return window.stacked()
    if isinstance(window, PacketSample):
        return window.matrix[None]
    if isinstance(window, Sequence) and window and isinstance(window[0], PacketSample):
        return np.stack([s.matrix for s in window])
    return window


def encode(window, params: Mapping) -> list[Encoding]:
    """Per-timestep encoder hidden states for a window ``[..., T, L, A]``."""
    return _run(_as_array(window), params, "enc.", _hidden(params))


def encode_single(sample, params: Mapping) -> Encoding:
    """Query-point encoding: one step from zero state. Accepts ``[..., L, A]``."""
    x = sample.matrix if isinstance(sample, PacketSample) else sample
    x = np.asarray(x)[..., None, :, :]
    return encode(x, params)[0]


def decode(encodings: Sequence, params: Mapping) -> list[Var]:
    """Reconstruct ``[..., L, A]`` per timestep from a sequence of encodings."""
    if len(encodings) == 0:
        raise dc.ShapeError("decode needs at least one encoding")
    hs = _run(list(encodings), params, "dec.", _hidden(params))
    return [dc.conv1d(h, params["dec.W_proj"], params["dec.b_proj"]) for h in hs]


def recon_loss(window, params: Mapping) -> Var:
    x = _as_array(window)
    recon = dc.stack(decode(encode(x, params), params), axis=-3)
    return dc.mse(recon, x)


@dataclass
class AutoencoderHyper:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3


@dataclass
class AutoencoderRun:
    params: ParamStore
    step_losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def mean_recon_loss(windows: np.ndarray, params: Mapping, chunk: int = 16) -> float:
    total = 0.0
    for lo in range(0, len(windows), chunk):
        batch = windows[lo : lo + chunk]
        total += float(dc.value(recon_loss(batch, params))) * len(batch)
    return total / len(windows)


def train_autoencoder(
    windows: np.ndarray,
    codec: CodecConfig,
    cfg: ConvLstmConfig,
    hyper: AutoencoderHyper,
    seed: int,
) -> AutoencoderRun:
    """Mini-batch Adam on mean reconstruction error over ``windows[N, W, L, A]``."""
    if len(windows) == 0:
        raise ValueError("autoencoder corpus is empty")
    params = init_autoencoder(codec, cfg, seed)
    run = AutoencoderRun(params, initial_loss=mean_recon_loss(windows, params))
    rng = dc.SplitMix64(dc.derive_seed(seed, "phase1.shuffle"))
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(windows))
        for lo in range(0, len(order), hyper.batch_size):
            batch = windows[np.sort(order[lo : lo + hyper.batch_size])]
            tape = Tape()
            loss = recon_loss(batch, tape.watch(params))
            grads = dc.backward(tape, loss)
            dc.adam_step(params, grads, lr=hyper.lr)
            run.step_losses.append(float(loss.value))
        log.info("phase1 epoch %d loss %.6f", epoch + 1, run.step_losses[-1])
    run.final_loss = mean_recon_loss(windows, params)
    return run
