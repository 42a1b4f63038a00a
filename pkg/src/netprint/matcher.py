"""Fingerprint models: build from a target sample, persist, and scan streams.

File layout (all integers little-endian)::

    b"DNP1" | u32 header_len | header (utf-8 key=value lines)
    then per tensor: u32 name_len | name | u32 rank | u64 dims... | float64 values

The header's ``tensors`` key gives the tensor count. The same container holds
trained weight bundles (``kind=weights``) and fingerprint models
(``kind=fingerprint``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import convlstm, diffcore as dc, protonet
from .codec import CodecConfig, DeviceTrace, encode_packet, load_device_csv, normalize_string, null_window
from .diffcore import ParamStore
from .protonet import NULL, TARGET, Prototype

MAGIC = b"DNP1"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class InsufficientMaterialError(ValueError):
    pass


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ModelVersionError(ValueError):
    pass


# -- container -----------------------------------------------------------------


def encode_container(header: Mapping[str, object], tensors: Sequence[tuple[str, np.ndarray]]) -> bytes:
    meta = dict(header)
    meta["tensors"] = len(tensors)
    lines = []
    for key, val in meta.items():
        text = str(val)
        if "\n" in text or "=" in key:
            raise ValueError(f"header entry {key!r} cannot be serialized")
        lines.append(f"{key}={text}")
    head = "\n".join(lines).encode("utf-8")
    out = [MAGIC, _U32.pack(len(head)), head]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)))
        out.append(raw)
        out.append(_U32.pack(arr.ndim))
        out.extend(_U64.pack(d) for d in arr.shape)
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode_container(data: bytes) -> tuple[dict[str, str], list[tuple[str, np.ndarray]]]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic, not a model file", 0)
    size = r.u32("header length")
    start = r.pos
    try:
        text = r.take(size, "header").decode("utf-8")
    except UnicodeDecodeError as e:
        raise ModelFormatError("header is not utf-8", start + e.start) from None
    header = {}
    for line in text.split("\n") if text else []:
        key, sep, val = line.partition("=")
        if not sep:
            raise ModelFormatError(f"malformed header line {line!r}", start)
        header[key] = val
    version = header.get("version")
    if version != str(FORMAT_VERSION):
        raise ModelVersionError(f"unsupported model version {version!r}, expected {FORMAT_VERSION}")
    try:
        count = int(header["tensors"])
    except (KeyError, ValueError):
        raise ModelFormatError("header lacks a valid tensor count", start) from None
    tensors = []
    for _ in range(count):
        at = r.pos
        try:
            name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError("tensor name is not utf-8", at) from None
        rank = r.u32("rank")
        if rank > 8:
            raise ModelFormatError(f"implausible rank {rank} for {name!r}", r.pos - 4)
        shape = tuple(r.u64("dimension") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(8 * n, f"values of {name!r}")
        tensors.append((name, np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)))
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return header, tensors


def _store(tensors: Iterable[tuple[str, np.ndarray]], seed: int) -> ParamStore:
    store = ParamStore(seed)
    for name, arr in tensors:
        store.set(name, arr)
    return store


# -- trained weights -----------------------------------------------------------


@dataclass
class WeightBundle:
    theta: ParamStore
    phi: ParamStore
    codec: CodecConfig
    meta: dict[str, str] = field(default_factory=dict)


def save_weights(path: str | Path, theta: ParamStore, phi: ParamStore, codec: CodecConfig, **meta) -> None:
    header = {"version": FORMAT_VERSION, "kind": "weights", "A": codec.alphabet_size, "L": codec.max_len, "W": codec.window_len}
    header.update(meta)
    Path(path).write_bytes(encode_container(header, list(theta.items()) + list(phi.items())))


def load_weights(path: str | Path) -> WeightBundle:
    header, tensors = decode_container(Path(path).read_bytes())
    if header.get("kind") != "weights":
        raise ModelFormatError(f"expected a weights file, found kind={header.get('kind')!r}", 8)
    seed = int(header.get("seed", 0))
    codec = CodecConfig(int(header["A"]), int(header["L"]), int(header["W"]))
    theta = _store(((n, a) for n, a in tensors if not n.startswith("emb.")), seed)
    phi = _store(((n, a) for n, a in tensors if n.startswith("emb.")), seed)
    return WeightBundle(theta, phi, codec, header)


# -- fingerprint model ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FingerprintModel:
    codec: CodecConfig
    theta: ParamStore
    phi: ParamStore
    c_t: Prototype
    c_n: Prototype
    tau: float = 0.5
    seed: int = 0
    target: str = ""
    version: int = FORMAT_VERSION

    def scan(self, lines: Sequence[str]) -> "ScanResult":
        return scan_lines(self, lines)


def build_fingerprint(
    target: str | Path | DeviceTrace,
    theta: Mapping,
    phi: Mapping,
    codec: CodecConfig,
    tau: float = 0.5,
    seed: int = 0,
) -> FingerprintModel:
    """Prototype the first W packets of the target and the Null window."""
    trace = target if isinstance(target, DeviceTrace) else load_device_csv(target)
    W = codec.window_len
    if len(trace.lines) < W:
        raise InsufficientMaterialError(
            f"insufficient fingerprint material: {trace.device_id} has {len(trace.lines)} packets, "
            f"{W} needed ({W - len(trace.lines)} short)"
        )
    window = np.stack([encode_packet(s, codec).matrix for s in trace.lines[:W]])
    target_emb = [protonet.embed(h, phi) for h in convlstm.encode(window, theta)]
    null_emb = [protonet.embed(h, phi) for h in convlstm.encode(null_window(codec), theta)]
    return FingerprintModel(
        codec=codec,
        theta=_as_store(theta),
        phi=_as_store(phi),
        c_t=protonet.prototype(target_emb, TARGET),
        c_n=protonet.prototype(null_emb, NULL),
        tau=float(tau),
        seed=int(seed),
        target=trace.device_id,
    )


def _as_store(params: Mapping) -> ParamStore:
    if isinstance(params, ParamStore):
        return params
    return _store(params.items(), 0)


def save_model(model: FingerprintModel, path: str | Path) -> None:
    Path(path).write_bytes(model_bytes(model))


def model_bytes(model: FingerprintModel) -> bytes:
    if "\n" in model.target:
        raise ValueError("target label must be a single line")
    hc = model.theta["enc.b_i"].shape[0]
    header = {
        "version": model.version,
        "kind": "fingerprint",
        "A": model.codec.alphabet_size,
        "L": model.codec.max_len,
        "W": model.codec.window_len,
        "Hc": hc,
        "k": model.theta["enc.W_xi"].shape[0],
        "E": model.phi["emb.W_out"].shape[1],
        "tau": repr(model.tau),
        "target": model.target,
        "seed": model.seed,
        "support_target": model.c_t.support_count,
        "support_null": model.c_n.support_count,
    }
    tensors = list(model.theta.items()) + list(model.phi.items())
    tensors += [("proto.target", model.c_t.vector), ("proto.null", model.c_n.vector)]
    return encode_container(header, tensors)


def load_model(path: str | Path) -> FingerprintModel:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(data: bytes) -> FingerprintModel:
    header, tensors = decode_container(data)
    if header.get("kind") != "fingerprint":
        raise ModelFormatError(f"expected a fingerprint model, found kind={header.get('kind')!r}", 8)
    try:
        codec = CodecConfig(int(header["A"]), int(header["L"]), int(header["W"]))
        seed = int(header["seed"])
        tau = float(header["tau"])
        counts = int(header["support_target"]), int(header["support_null"])
    except (KeyError, ValueError) as e:
        raise ModelFormatError(f"bad or missing header field: {e}", 8) from None
    by_name = dict(tensors)
    if "proto.target" not in by_name or "proto.null" not in by_name:
        raise ModelFormatError("model lacks stored prototypes", len(data))
    theta = _store(((n, a) for n, a in tensors if n.startswith(("enc.", "dec."))), seed)
    phi = _store(((n, a) for n, a in tensors if n.startswith("emb.")), seed)
    return FingerprintModel(
        codec=codec,
        theta=theta,
        phi=phi,
        c_t=Prototype(by_name["proto.target"], TARGET, counts[0]),
        c_n=Prototype(by_name["proto.null"], NULL, counts[1]),
        tau=tau,
        seed=seed,
        target=header.get("target", ""),
        version=int(header["version"]),
    )


# -- scanning ------------------------------------------------------------------


@dataclass(frozen=True)
class ScanRecord:
    index: int
    p_target: float
    flagged: bool

    def line(self) -> str:
        return f"{self.index}\t{self.p_target:.6f}\t{'TARGET' if self.flagged else 'NULL'}"


@dataclass
class ScanResult:
    records: list[ScanRecord]
    tau: float

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def flagged(self) -> int:
        return sum(r.flagged for r in self.records)

    @property
    def flag_rate(self) -> float:
        return self.flagged / self.total if self.records else 0.0

    def summary(self) -> str:
        return f"{self.flagged}/{self.total} flagged (rate {self.flag_rate:.4f}, tau {self.tau:g})"

    def log(self) -> str:
        return "".join(r.line() + "\n" for r in self.records) + self.summary() + "\n"


def query_posterior(model: FingerprintModel, line: str) -> float:
    """p_target of one packet; the stored prototypes are used as-is."""
    x = encode_packet(normalize_string(line), model.codec).matrix
    q = dc.value(protonet.embed(convlstm.encode_single(x, model.theta), model.phi))
    return float(protonet.posterior_target(q, model.c_t, model.c_n))


def scan_lines(model: FingerprintModel, lines: Sequence[str], start: int = 0, tau: float | None = None) -> ScanResult:
    """Packets go through one at a time so results never depend on how a stream is chunked."""
    tau = model.tau if tau is None else float(tau)
    records = []
    for i, line in enumerate(lines):
        p = query_posterior(model, line)
        records.append(ScanRecord(start + i, p, p > tau))
    return ScanResult(records, tau)


def read_stream(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def scan_stream(model: FingerprintModel, stream: str | Path, tau: float | None = None) -> ScanResult:
    return scan_lines(model, read_stream(stream), tau=tau)
