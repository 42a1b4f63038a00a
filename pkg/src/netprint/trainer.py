"""Two-phase training and the per-device evaluation protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import convlstm, diffcore as dc, protonet
from .codec import CodecConfig, DeviceTrace, encode_lines, null_window
from .convlstm import AutoencoderHyper, ConvLstmConfig
from .diffcore import ParamStore, SplitMix64, Tape, derive_seed
from .protonet import NEGATIVE, POSITIVE, EmbedConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    train_devices: tuple[str, ...]
    held_out_devices: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_devices) & set(self.held_out_devices):
            raise ValueError("train and held-out devices overlap")


def split_devices(device_ids: Iterable[str], ratio: float, seed: int) -> SplitSpec:
    """Seeded shuffle; the first ceil(ratio * N) devices train."""
    ids = sorted(device_ids)
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n_train = min(len(ids), math.ceil(ratio * len(ids) - 1e-9))
    order = SplitMix64(derive_seed(seed, "split")).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitSpec(tuple(sorted(shuffled[:n_train])), tuple(sorted(shuffled[n_train:])))


@dataclass(frozen=True)
class PairEntry:
    target_device: str
    window_offset: int
    query_device: str
    query_index: int
    kind: str


@dataclass
class PairBatch:
    entries: list[PairEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]


def sample_pairs(
    traces: Mapping[str, DeviceTrace],
    split: SplitSpec,
    batch_size: int,
    pos_fraction: float,
    seed: int | SplitMix64,
    window_len: int = 20,
    offset_pools: Mapping[str, Sequence[int]] | None = None,
) -> PairBatch:
    """Positive and negative (window, query) pairs over training devices.

    Target devices are drawn uniformly (not per packet) so imbalanced traces
    weigh equally. A positive query never falls inside its window.
    """
    rng = seed if isinstance(seed, SplitMix64) else SplitMix64(derive_seed(seed, "pairs"))
    devices = [d for d in split.train_devices if len(traces[d].lines) >= window_len + 1]
    if len(devices) < 2:
        raise ValueError("pair sampling needs at least 2 usable training devices")
    n_pos = int(round(pos_fraction * batch_size))
    entries = []
    for i in range(batch_size):
        target = devices[rng.integers(len(devices))]
        n = len(traces[target].lines)
        if offset_pools is not None:
            pool = offset_pools[target]
            offset = int(pool[rng.integers(len(pool))])
        else:
            offset = rng.integers(n - window_len + 1)
        if i < n_pos:
            j = rng.integers(n - window_len)
            q = j if j < offset else j + window_len
            entries.append(PairEntry(target, offset, target, q, POSITIVE))
        else:
            others = [d for d in devices if d != target]
            qdev = others[rng.integers(len(others))]
            q = rng.integers(len(traces[qdev].lines))
            entries.append(PairEntry(target, offset, qdev, q, NEGATIVE))
    return PairBatch(entries)


# -- frozen-encoder helpers ----------------------------------------------------


def encode_queries(lines: Sequence[str], theta: Mapping, codec: CodecConfig, chunk: int = 64) -> np.ndarray:
    """Single-packet encodings ``[n, L, Hc]`` with frozen parameters."""
    outs = []
    for lo in range(0, len(lines), chunk):
        x = encode_lines(lines[lo : lo + chunk], codec)
        outs.append(dc.value(convlstm.encode_single(x, theta)))
    return np.concatenate(outs) if outs else np.zeros((0,))


def encode_windows(lines: Sequence[str], offsets: Sequence[int], theta: Mapping, codec: CodecConfig, chunk: int = 8) -> np.ndarray:
    """Per-timestep window encodings ``[len(offsets), W, L, Hc]``."""
    W = codec.window_len
    outs = []
    for lo in range(0, len(offsets), chunk):
        xs = np.stack([encode_lines(lines[o : o + W], codec) for o in offsets[lo : lo + chunk]])
        hs = convlstm.encode(xs, theta)
        outs.append(np.stack([dc.value(h) for h in hs], axis=1))
    return np.concatenate(outs)


def embed_array(encodings: np.ndarray, phi: Mapping, chunk: int = 256) -> np.ndarray:
    """Frozen embedding of ``[n, L, Hc]`` encodings."""
    outs = [dc.value(protonet.embed(encodings[lo : lo + chunk], phi)) for lo in range(0, len(encodings), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0,))


def null_encodings(theta: Mapping, codec: CodecConfig) -> np.ndarray:
    return np.stack([dc.value(h) for h in convlstm.encode(null_window(codec), theta)])


# -- phase 2 -------------------------------------------------------------------


@dataclass
class Phase2Hyper:
    batches: int = 2000
    batch_size: int = 32
    pos_fraction: float = 0.5
    lr: float = 1e-3
    window_pool: int = 64


@dataclass
class Phase2Run:
    params: ParamStore
    batch_losses: list[float] = field(default_factory=list)


def train_phase2(
    theta: ParamStore,
    traces: Mapping[str, DeviceTrace],
    split: SplitSpec,
    codec: CodecConfig,
    embed_cfg: EmbedConfig,
    hyper: Phase2Hyper,
    seed: int,
) -> Phase2Run:
    """Fit the embedder on pair batches with the encoder frozen.

    Window encodings are precomputed for a seeded pool of at most
    ``window_pool`` offsets per device; every offset is equally likely to be
    pooled, so draws stay uniform over valid offsets.
    """
    W = codec.window_len
    hc = theta["enc.b_i"].shape[0]
    phi = protonet.init_embedder(hc, embed_cfg, derive_seed(seed, "phi"))
    devices = [d for d in split.train_devices if len(traces[d].lines) >= W + 1]
    if len(devices) < 2:
        raise ValueError("phase 2 needs at least 2 training devices with more than W packets")

    pool_rng = SplitMix64(derive_seed(seed, "phase2.pool"))
    pools, pool_pos, win_enc, query_enc = {}, {}, {}, {}
    for d in devices:
        lines = traces[d].lines
        n_off = len(lines) - W + 1
        offsets = np.arange(n_off) if n_off <= hyper.window_pool else np.sort(pool_rng.permutation(n_off)[: hyper.window_pool])
        pools[d] = offsets
        pool_pos[d] = {int(o): i for i, o in enumerate(offsets)}
        win_enc[d] = encode_windows(lines, offsets, theta, codec)
        query_enc[d] = encode_queries(lines, theta, codec)
    nul = null_encodings(theta, codec)
    log.info("phase2 caches ready for %d devices", len(devices))

    sub = SplitSpec(tuple(devices), split.held_out_devices)
    rng = SplitMix64(derive_seed(seed, "phase2.pairs"))
    run = Phase2Run(phi)
    for step in range(hyper.batches):
        batch = sample_pairs(traces, sub, hyper.batch_size, hyper.pos_fraction, rng, W, pools)
        tgt = np.stack([win_enc[e.target_device][pool_pos[e.target_device][e.window_offset]] for e in batch.entries])
        qry = np.stack([query_enc[e.query_device][e.query_index] for e in batch.entries])
        tape = Tape()
        p = tape.watch(phi)
        loss = protonet.pair_loss(
            protonet.embed(tgt, p), protonet.embed(nul, p), protonet.embed(qry, p), batch.kinds()
        )
        grads = dc.backward(tape, loss)
        dc.adam_step(phi, grads, lr=hyper.lr)
        run.batch_losses.append(float(loss.value))
        if (step + 1) % 200 == 0:
            log.info("phase2 batch %d loss %.4f", step + 1, float(np.mean(run.batch_losses[-200:])))
    return run


# -- composed gradient check ---------------------------------------------------


def composed_pair_loss(lines_by_device: Mapping[str, Sequence[str]], batch: PairBatch, codec: CodecConfig):
    """Closure over raw packet strings: codec, encoder, embedder and pair loss."""
    W = codec.window_len
    tgt = np.stack([encode_lines(lines_by_device[e.target_device][e.window_offset : e.window_offset + W], codec) for e in batch.entries])
    qry = encode_lines([lines_by_device[e.query_device][e.query_index] for e in batch.entries], codec)
    nul = null_window(codec).stacked()
    kinds = batch.kinds()

    def f(p):
        t_emb = dc.stack([protonet.embed(h, p) for h in convlstm.encode(tgt, p)], axis=-2)
        n_emb = dc.stack([protonet.embed(h, p) for h in convlstm.encode(nul, p)], axis=-2)
        q_emb = protonet.embed(convlstm.encode_single(qry, p), p)
        return protonet.pair_loss(t_emb, n_emb, q_emb, kinds)

    return f


def composed_gradcheck(
    seed: int = 0,
    samples: int = 200,
    h: float = 1e-5,
    tol: float = 1e-4,
    n_pairs: int = 2,
    codec: CodecConfig | None = None,
    convlstm_cfg: ConvLstmConfig | None = None,
    embed_cfg: EmbedConfig | None = None,
) -> dc.GradCheckReport:
    """Finite-difference check of the full pair-loss graph from packet strings.

    Decoder weights do not reach the pair loss, so only encoder and embedder
    parameters are sampled.
    """
    from . import synthgen

    codec = codec or CodecConfig()
    convlstm_cfg = convlstm_cfg or ConvLstmConfig()
    embed_cfg = embed_cfg or EmbedConfig()
    traces = synthgen.make_corpus(2, codec.window_len + 8, 0.5, seed)
    by_id = {t.device_id: t for t in traces}
    split = SplitSpec(tuple(by_id), ())
    batch = sample_pairs(by_id, split, n_pairs, 0.5, derive_seed(seed, "gradcheck.pairs"), codec.window_len)
    theta = convlstm.init_autoencoder(codec, convlstm_cfg, derive_seed(seed, "theta")).subset("enc.")
    phi = protonet.init_embedder(convlstm_cfg.hidden_channels, embed_cfg, derive_seed(seed, "phi"))
    params = theta.merged(phi)
    f = composed_pair_loss({d: t.lines for d, t in by_id.items()}, batch, codec)
    return dc.grad_check(f, params, h=h, tol=tol, samples=samples, seed=derive_seed(seed, "gradcheck.sample"))


# -- full training -------------------------------------------------------------


@dataclass
class TrainConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    convlstm: ConvLstmConfig = field(default_factory=ConvLstmConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    phase1: AutoencoderHyper = field(default_factory=AutoencoderHyper)
    phase2: Phase2Hyper = field(default_factory=Phase2Hyper)
    split_ratio: float = 12 / 23
    window_stride: int = 20
    seed: int = 0


@dataclass
class TrainedModel:
    theta: ParamStore
    phi: ParamStore
    config: TrainConfig
    split: SplitSpec
    phase1_losses: list[float] = field(default_factory=list)
    phase1_initial: float = float("nan")
    phase1_final: float = float("nan")
    phase2_losses: list[float] = field(default_factory=list)


def phase1_windows(traces: Mapping[str, DeviceTrace], devices: Iterable[str], codec: CodecConfig, stride: int) -> np.ndarray:
    W = codec.window_len
    out = []
    for d in devices:
        lines = traces[d].lines
        for i in range(0, len(lines) - W + 1, stride):
            out.append(encode_lines(lines[i : i + W], codec))
    if not out:
        raise ValueError("no training device has a full window of packets")
    return np.stack(out)


def train(traces: Sequence[DeviceTrace], cfg: TrainConfig, split: SplitSpec | None = None) -> TrainedModel:
    by_id = {t.device_id: t for t in traces}
    if split is None:
        split = split_devices(by_id, cfg.split_ratio, cfg.seed)
    windows = phase1_windows(by_id, split.train_devices, cfg.codec, cfg.window_stride)
    log.info("phase1: %d windows from %d devices", len(windows), len(split.train_devices))
    ae = convlstm.train_autoencoder(windows, cfg.codec, cfg.convlstm, cfg.phase1, derive_seed(cfg.seed, "theta"))
    del windows
    theta_bytes = b"".join(a.tobytes() for _, a in ae.params.items())
    p2 = train_phase2(ae.params, by_id, split, cfg.codec, cfg.embed, cfg.phase2, cfg.seed)
    if theta_bytes != b"".join(a.tobytes() for _, a in ae.params.items()):
        raise RuntimeError("encoder parameters changed during phase 2")
    return TrainedModel(
        theta=ae.params,
        phi=p2.params,
        config=cfg,
        split=split,
        phase1_losses=ae.step_losses,
        phase1_initial=ae.initial_loss,
        phase1_final=ae.final_loss,
        phase2_losses=p2.batch_losses,
    )


# -- evaluation ----------------------------------------------------------------


@dataclass
class DeviceEval:
    device_id: str
    seen: bool
    n_queries: int
    query_accuracy: float
    device_accuracy: float
    tpr: float
    tnr: float

    @property
    def balanced_accuracy(self) -> float:
        return 0.5 * (self.tpr + self.tnr)


@dataclass
class Decision:
    target_device: str
    source_device: str
    packet_index: int
    p_target: float
    decision: bool

    def line(self) -> str:
        return f"{self.target_device}\t{self.source_device}\t{self.packet_index}\t{self.p_target:.6f}\t{'TARGET' if self.decision else 'NULL'}"


@dataclass
class Aggregate:
    query_accuracy: float
    balanced_accuracy: float
    device_accuracy: float
    n_targets: int
    n_decisions: int


@dataclass
class EvalReport:
    devices: list[DeviceEval]
    skipped: list[str]
    overall: Aggregate
    unseen: Aggregate | None
    decisions: list[Decision]
    tau: float


def aggregate(decisions: Sequence[Decision], targets: Iterable[str]) -> Aggregate | None:
    """Pooled rates over all decisions made for ``targets``."""
    targets = set(targets)
    rows = [d for d in decisions if d.target_device in targets]
    if not rows:
        return None
    tgt = np.array([d.target_device for d in rows])
    src = np.array([d.source_device for d in rows])
    truth = tgt == src
    flag = np.array([d.decision for d in rows])
    correct = truth == flag
    tpr = correct[truth].mean() if truth.any() else float("nan")
    tnr = correct[~truth].mean() if (~truth).any() else float("nan")
    dev_correct = []
    for t in sorted(targets):
        mine = tgt == t
        for s in np.unique(src[mine]):
            sel = mine & (src == s)
            dev_correct.append((flag[sel].mean() > 0.5) == (s == t))
    return Aggregate(
        query_accuracy=float(correct.mean()),
        balanced_accuracy=float(np.nanmean([tpr, tnr])),
        device_accuracy=float(np.mean(dev_correct)),
        n_targets=len(targets),
        n_decisions=len(rows),
    )


def evaluate(
    theta: Mapping,
    phi: Mapping,
    traces: Sequence[DeviceTrace],
    split: SplitSpec,
    codec: CodecConfig,
    tau: float = 0.5,
) -> EvalReport:
    """Each device in turn is the target; every packet of every device is a query.

    The fingerprint is the target's first W packets. A decision is correct when
    it flags exactly the target's own packets.
    """
    W = codec.window_len
    c_n = protonet.centroid(embed_array(null_encodings(theta, codec), phi))
    c_n = dc.value(c_n)
    q_emb = {t.device_id: embed_array(encode_queries(t.lines, theta, codec), phi) for t in traces}
    devices, skipped, decisions = [], [], []
    for target in traces:
        if len(target.lines) < W:
            skipped.append(target.device_id)
            continue
        win = encode_windows(target.lines, [0], theta, codec)[0]
        c_t = dc.value(protonet.centroid(embed_array(win, phi)))
        tp = tn = pos = neg = 0
        dev_hits = 0
        for source in traces:
            p = protonet.posterior_target(q_emb[source.device_id], c_t, c_n)
            flags = p > tau
            same = source.device_id == target.device_id
            for i, (pi, fi) in enumerate(zip(p, flags)):
                decisions.append(Decision(target.device_id, source.device_id, i, float(pi), bool(fi)))
            if same:
                pos += len(flags)
                tp += int(flags.sum())
            else:
                neg += len(flags)
                tn += int((~flags).sum())
            dev_hits += int((flags.mean() > 0.5) == same)
        n = pos + neg
        devices.append(
            DeviceEval(
                device_id=target.device_id,
                seen=target.device_id in split.train_devices,
                n_queries=n,
                query_accuracy=(tp + tn) / n,
                device_accuracy=dev_hits / len(traces),
                tpr=tp / pos if pos else float("nan"),
                tnr=tn / neg if neg else float("nan"),
            )
        )
    scored = [d.device_id for d in devices]
    unseen_ids = [d for d in scored if d in split.held_out_devices]
    return EvalReport(
        devices=devices,
        skipped=skipped,
        overall=aggregate(decisions, scored),
        unseen=aggregate(decisions, unseen_ids) if unseen_ids else None,
        decisions=decisions,
        tau=tau,
    )


def format_report(report: EvalReport) -> str:
    head = f"{'device':<20} {'seen':>5} {'queries':>8} {'query_acc':>10} {'balanced':>9} {'tpr':>7} {'tnr':>7} {'device_acc':>11}"
    rows = [head, "-" * len(head)]
    for d in report.devices:
        rows.append(
            f"{d.device_id:<20} {'yes' if d.seen else 'no':>5} {d.n_queries:>8d} {d.query_accuracy:>10.4f} "
            f"{d.balanced_accuracy:>9.4f} {d.tpr:>7.4f} {d.tnr:>7.4f} {d.device_accuracy:>11.4f}"
        )
    rows.append("-" * len(head))
    for name, agg in (("ALL", report.overall), ("UNSEEN", report.unseen)):
        if agg is None:
            continue
        rows.append(
            f"{name:<20} {'':>5} {agg.n_decisions:>8d} {agg.query_accuracy:>10.4f} "
            f"{agg.balanced_accuracy:>9.4f} {'':>7} {'':>7} {agg.device_accuracy:>11.4f}"
        )
    for s in report.skipped:
        rows.append(f"skipped {s}: shorter than one window")
    return "\n".join(rows)
