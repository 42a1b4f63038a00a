"""Seeded synthetic IoT traces shaped like packet info-field extracts.

Each device gets a grammar: a weighting over a shared pool of protocol
templates, numeric parameters (ports, window sizes, MSS, hosts), and a short
device token that only appears in device-specific templates.

``similarity`` in [0, 1] controls how alike devices are. A line carries the
device token with probability ``1 - similarity``. Device parameters and
template weights are blended toward common values by the same factor, so at
similarity 1 every device draws from one identical distribution.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import DeviceTrace
from .diffcore import SplitMix64, derive_seed

SHARED_TEMPLATES = (
    "{sport} -> {dport} [ACK] Seq={seq} Ack={ack} Win={win} Len=0",
    "{dport} -> {sport} [SYN, ACK] Seq=0 Ack=1 Win={win} Len=0 MSS={mss}",
    "{sport} -> {dport} [SYN] Seq=0 Win={win} Len=0 MSS={mss}",
    "{dport} -> {sport} [FIN, ACK] Seq={seq} Ack={ack} Win={win} Len=0",
    "{sport} -> {dport} [PSH, ACK] Seq={seq} Ack={ack} Win={win} Len={plen}",
    "HTTP/1.1 200 OK (text/plain)",
    "HTTP/1.1 {status} (application/json)",
    "Standard query 0x{qid} A {host}",
    "Standard query response 0x{qid} A {host} A {ip}",
    "Who has {ip}? Tell {gw}",
    "NTP Version 4, client",
    "M-SEARCH * HTTP/1.1",
)

TOKEN_TEMPLATES = (
    "POST /{token}/session HTTP/1.1 (application/x-www-form-urlencoded)",
    "GET /{token}/status.json HTTP/1.1",
    "Standard query 0x{qid} A {token}.iot-cloud.net",
    "NOTIFY * HTTP/1.1 USN: uuid:{token}",
    "{sport} -> {dport} [PSH, ACK] Len={plen} {token}",
)

HOSTS = ("time.pool.example", "api.vendor.example", "cdn.firmware.example", "mqtt.hub.example")
STATUSES = ("200 OK", "201 Created", "204 No Content", "304 Not Modified")

# common value, max device offset
_NUMERIC = {
    "server_port": (80, 9000),
    "client_base": (49152, 14000),
    "win": (8192, 7000),
    "mss": (1460, 300),
    "plen": (120, 400),
    "ip_last": (100, 150),
}


@dataclass
class DeviceGrammar:
    device_id: str
    device_token: str
    templates: tuple[str, ...]
    template_weights: np.ndarray
    token_templates: tuple[str, ...]
    token_weights: np.ndarray
    token_rate: float
    numeric: dict[str, int] = field(default_factory=dict)
    host_weights: np.ndarray = field(default_factory=lambda: np.ones(len(HOSTS)) / len(HOSTS))


def _token(rng: SplitMix64, used: set[str]) -> str:
    alphabet = string.ascii_lowercase + string.digits
    while True:
        tok = "".join(alphabet[i] for i in rng.integers(len(alphabet), 6))
        if tok not in used and not tok.isdigit():
            used.add(tok)
            return tok


def _blend(rng: SplitMix64, n: int, similarity: float) -> np.ndarray:
    raw = rng.random(n) + 0.05
    w = similarity / n + (1.0 - similarity) * raw / raw.sum()
    return w / w.sum()


def make_grammar(device_id: str, similarity: float, rng: SplitMix64, used_tokens: set[str]) -> DeviceGrammar:
    spread = 1.0 - similarity
    numeric = {}
    for key, (center, width) in _NUMERIC.items():
        numeric[key] = center + int(round(spread * rng.uniform(0.0, width)))
    return DeviceGrammar(
        device_id=device_id,
        device_token=_token(rng, used_tokens),
        templates=SHARED_TEMPLATES,
        template_weights=_blend(rng, len(SHARED_TEMPLATES), similarity),
        token_templates=TOKEN_TEMPLATES,
        token_weights=_blend(rng, len(TOKEN_TEMPLATES), 0.0),
        token_rate=spread,
        numeric=numeric,
        host_weights=_blend(rng, len(HOSTS), similarity),
    )


def render_line(g: DeviceGrammar, rng: SplitMix64) -> str:
    if rng.random() < g.token_rate:
        template = rng.choice(g.token_templates, g.token_weights)
    else:
        template = rng.choice(g.templates, g.template_weights)
    n = g.numeric
    fields = {
        "sport": n["client_base"] + rng.integers(16),
        "dport": n["server_port"],
        "seq": 1 + rng.integers(2000),
        "ack": 1 + rng.integers(2000),
        "win": n["win"] + 8 * rng.integers(16),
        "mss": n["mss"],
        "plen": n["plen"] + rng.integers(64),
        "status": rng.choice(STATUSES),
        "qid": f"{rng.integers(1 << 16):04x}",
        "host": rng.choice(HOSTS, g.host_weights),
        "ip": f"192.168.1.{n['ip_last']}",
        "gw": "192.168.1.1",
        "token": g.device_token,
    }
    return template.format(**fields)


def make_corpus(
    n_devices: int = 8,
    lines_per_device: int = 400,
    similarity: float = 0.6,
    seed: int = 0,
) -> list[DeviceTrace]:
    if n_devices < 2:
        raise ValueError("need at least 2 devices")
    if not 0.0 <= similarity <= 1.0:
        raise ValueError(f"similarity must lie in [0, 1], got {similarity}")
    grammar_rng = SplitMix64(derive_seed(seed, "synthgen.grammar"))
    used: set[str] = set()
    traces = []
    for d in range(n_devices):
        device_id = f"synth{d:02d}"
        g = make_grammar(device_id, similarity, grammar_rng, used)
        line_rng = SplitMix64(derive_seed(seed, f"synthgen.lines.{device_id}"))
        traces.append(DeviceTrace(device_id, [render_line(g, line_rng) for _ in range(lines_per_device)]))
    return traces


def grammars(n_devices: int, similarity: float, seed: int) -> list[DeviceGrammar]:
    """The grammars ``make_corpus`` would use, for inspection."""
    rng = SplitMix64(derive_seed(seed, "synthgen.grammar"))
    used: set[str] = set()
    return [make_grammar(f"synth{d:02d}", similarity, rng, used) for d in range(n_devices)]


def random_noise_lines(n: int, max_len: int, seed: int) -> list[str]:
    """Uniformly random printable-ASCII strings of random length in [1, max_len]."""
    rng = SplitMix64(derive_seed(seed, "noise"))
    out = []
    for _ in range(n):
        length = 1 + rng.integers(max_len)
        out.append("".join(chr(0x20 + c) for c in rng.integers(0x7F - 0x20, length)))
    return out


def write_corpus(traces: list[DeviceTrace], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in traces:
        path = directory / f"{t.device_id}.csv"
        path.write_text("".join(line + "\n" for line in t.lines), encoding="utf-8")
        paths.append(path)
    return paths
