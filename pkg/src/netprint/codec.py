"""Packet info-string normalization and one-hot character encoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

OOV_CHAR = "\x1a"
NUL_INDEX = 0
OOV_INDEX = 1
PRINTABLE_LO, PRINTABLE_HI = 0x20, 0x7E
NULL_CLASS = "<NULL>"


class EmptyTraceError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    alphabet_size: int = 97
    max_len: int = 96
    window_len: int = 20

    def __post_init__(self):
        if self.alphabet_size != 2 + PRINTABLE_HI - PRINTABLE_LO + 1:
            raise ValueError("alphabet_size is fixed at 97 (NUL, OOV, printable ASCII)")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.window_len != 20:
            raise ValueError("window_len is fixed at 20")


@dataclass(frozen=True, eq=False)
class PacketSample:
    matrix: np.ndarray
    raw: str = ""


@dataclass(frozen=True, eq=False)
class Window:
    samples: tuple[PacketSample, ...]
    label: str

    def stacked(self) -> np.ndarray:
        """``[W, L, A]`` array of the sample matrices."""
        return np.stack([s.matrix for s in self.samples])


@dataclass
class DeviceTrace:
    device_id: str
    lines: list[str] = field(default_factory=list)


def normalize_string(s: str) -> str:
    return "".join(c if PRINTABLE_LO <= ord(c) <= PRINTABLE_HI else OOV_CHAR for c in s)


def char_index(c: str) -> int:
    o = ord(c)
    if PRINTABLE_LO <= o <= PRINTABLE_HI:
        return o - PRINTABLE_LO + 2
    return OOV_INDEX


def index_char(i: int) -> str:
    if i == NUL_INDEX:
        return "\x00"
    if i == OOV_INDEX:
        return OOV_CHAR
    return chr(i - 2 + PRINTABLE_LO)


def encode_indices(s: str, cfg: CodecConfig) -> np.ndarray:
    idx = np.full(cfg.max_len, NUL_INDEX, dtype=np.int64)
    for p, c in enumerate(s[: cfg.max_len]):
        idx[p] = char_index(c)
    return idx


def encode_packet(s: str, cfg: CodecConfig) -> PacketSample:
    idx = encode_indices(s, cfg)
    matrix = np.zeros((cfg.max_len, cfg.alphabet_size))
    matrix[np.arange(cfg.max_len), idx] = 1.0
    return PacketSample(matrix, s)


def decode_matrix(matrix: np.ndarray) -> str:
    """Inverse of ``encode_packet`` for in-alphabet strings (trailing NULs dropped)."""
    return "".join(index_char(int(i)) for i in matrix.argmax(axis=1)).rstrip("\x00")


def encode_lines(lines: Sequence[str], cfg: CodecConfig) -> np.ndarray:
    """Batch one-hot encoding: ``[n, L, A]``."""
    out = np.zeros((len(lines), cfg.max_len, cfg.alphabet_size))
    for i, s in enumerate(lines):
        out[i, np.arange(cfg.max_len), encode_indices(s, cfg)] = 1.0
    return out


def null_sample(cfg: CodecConfig) -> PacketSample:
    return encode_packet("", cfg)


def null_window(cfg: CodecConfig) -> Window:
    sample = null_sample(cfg)
    return Window(tuple(sample for _ in range(cfg.window_len)), NULL_CLASS)


def build_windows(trace: DeviceTrace, cfg: CodecConfig, stride: int | None = None) -> list[Window]:
    stride = cfg.window_len if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    W = cfg.window_len
    windows = []
    for i in range(0, len(trace.lines) - W + 1, stride):
        samples = tuple(encode_packet(s, cfg) for s in trace.lines[i : i + W])
        windows.append(Window(samples, trace.device_id))
    return windows


def load_device_csv(path: str | Path) -> DeviceTrace:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [normalize_string(line) for line in text.splitlines() if line.strip()]
    if not lines:
        raise EmptyTraceError(f"{path}: no non-blank lines")
    return DeviceTrace(path.stem, lines)


def load_corpus(directory: str | Path) -> list[DeviceTrace]:
    """Every ``<device_id>.csv`` in ``directory``, sorted by device id."""
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no .csv traces in {directory}")
    return [load_device_csv(p) for p in paths]
