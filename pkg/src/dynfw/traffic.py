"""Flow records: CSV ingestion, synthetic generation, features, and windows.

Addresses are carried as 32-bit integers; use :func:`ip_to_int` and
:func:`int_to_ip` at the edges.
"""
from __future__ import annotations

import csv
import enum
import ipaddress
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, StateError


class Protocol(enum.Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"


class Label(enum.Enum):
    BENIGN = "BENIGN"
    MALICIOUS = "MALICIOUS"


_PROTO_NUMBERS = {"6": Protocol.TCP, "17": Protocol.UDP, "1": Protocol.ICMP}


def ip_to_int(addr: str | int) -> int:
    return int(ipaddress.IPv4Address(addr))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def parse_protocol(value: str) -> Protocol:
    text = value.strip()
    if text in _PROTO_NUMBERS:
        return _PROTO_NUMBERS[text]
    return Protocol(text.upper())


@dataclass(frozen=True)
class FlowRecord:
    timestamp: float
    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    protocol: Protocol
    bytes: int
    packets: int
    duration: float
    label: Label = Label.BENIGN
    attack_kind: str | None = None
    extra: tuple[float, ...] = ()

    def __post_init__(self):
        if self.packets < 1:
            raise ValueError(f"packets must be >= 1, got {self.packets}")
        if self.bytes < 0:
            raise ValueError(f"bytes must be >= 0, got {self.bytes}")
        if not self.duration >= 0:
            raise ValueError(f"duration must be >= 0, got {self.duration}")
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")
            if port == 0 and self.protocol is not Protocol.ICMP:
                raise ValueError(f"{name} may be 0 only for ICMP")
        if not 0 <= self.src_addr < 2**32 or not 0 <= self.dst_addr < 2**32:
            raise ValueError("address outside the IPv4 range")

    @property
    def is_malicious(self) -> bool:
        return self.label is Label.MALICIOUS


@dataclass(eq=False)
class FeatureVector:
    values: np.ndarray
    label: Label


@dataclass(eq=False)
class TrafficWindow:
    """``W`` consecutive feature vectors, stored as a ``(W, D)`` matrix."""

    matrix: np.ndarray
    labels: tuple[Label, ...]
    window_index: int

    @property
    def features(self) -> list[FeatureVector]:
        return [FeatureVector(row, lab) for row, lab in zip(self.matrix, self.labels)]

    def label(self, rule: str = "any") -> Label:
        """Window label: ``any`` member malicious, or strict ``majority``."""
        n_bad = sum(lab is Label.MALICIOUS for lab in self.labels)
        if rule == "any":
            bad = n_bad > 0
        elif rule == "majority":
            bad = 2 * n_bad > len(self.labels)
        else:
            raise ConfigError(f"unknown window label rule {rule!r}")
        return Label.MALICIOUS if bad else Label.BENIGN


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowSchema:
    """Maps CSV column names onto FlowRecord fields.

    ``timestamp`` and ``duration`` may be ``None`` (row index / 0.0 are used).
    ``feature_columns`` lists numeric columns passed through verbatim into
    ``FlowRecord.extra`` (at most 78).
    """

    src_addr: str = "src_addr"
    dst_addr: str = "dst_addr"
    src_port: str = "src_port"
    dst_port: str = "dst_port"
    protocol: str = "protocol"
    bytes: str = "bytes"
    packets: str = "packets"
    label: str = "label"
    timestamp: str | None = "timestamp"
    duration: str | None = "duration"
    attack_kind: str | None = None
    feature_columns: tuple[str, ...] = ()
    benign_labels: tuple[str, ...] = ("BENIGN", "normal")

    def required_columns(self) -> list[str]:
        cols = [self.src_addr, self.dst_addr, self.src_port, self.dst_port,
                self.protocol, self.bytes, self.packets, self.label]
        cols += [c for c in (self.timestamp, self.duration, self.attack_kind) if c]
        cols += list(self.feature_columns)
        return cols


class FlowCSVReader:
    """Iterates FlowRecords from a CSV file; bad rows are counted in ``skipped``."""

    def __init__(self, path: str | Path, schema: FlowSchema):
        self.path = Path(path)
        self.schema = schema
        self.skipped = 0
        if len(schema.feature_columns) > 78:
            raise ConfigError("at most 78 pass-through feature columns are supported")
        with open(self.path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header is None:
            raise ConfigError(f"{self.path}: missing header row")
        missing = [c for c in schema.required_columns() if c not in header]
        if missing:
            raise ConfigError(f"schema references absent column(s): {', '.join(missing)}")
        self._benign = {s.lower() for s in schema.benign_labels}

    def __iter__(self) -> Iterator[FlowRecord]:
        s = self.schema
        with open(self.path, newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                try:
                    raw_label = row[s.label].strip()
                    label = Label.BENIGN if raw_label.lower() in self._benign else Label.MALICIOUS
                    kind = (row[s.attack_kind].strip() or None) if s.attack_kind else None
                    if kind is None and label is Label.MALICIOUS:
                        kind = raw_label
                    rec = FlowRecord(
                        timestamp=float(row[s.timestamp]) if s.timestamp else float(i),
                        src_addr=ip_to_int(row[s.src_addr].strip()),
                        dst_addr=ip_to_int(row[s.dst_addr].strip()),
                        src_port=int(row[s.src_port]),
                        dst_port=int(row[s.dst_port]),
                        protocol=parse_protocol(row[s.protocol]),
                        bytes=int(float(row[s.bytes])),
                        packets=int(float(row[s.packets])),
                        duration=float(row[s.duration]) if s.duration else 0.0,
                        label=label,
                        attack_kind=kind,
                        extra=tuple(float(row[c]) for c in s.feature_columns),
                    )
                    if not all(math.isfinite(v) for v in rec.extra) or not math.isfinite(rec.timestamp):
                        raise ValueError("non-finite value")
                except (ValueError, TypeError, KeyError, ipaddress.AddressValueError):
                    self.skipped += 1
                    continue
                yield rec


def parse_flow_csv(path: str | Path, schema: FlowSchema | None = None) -> FlowCSVReader:
    return FlowCSVReader(path, schema or FlowSchema())


CSV_COLUMNS = ("timestamp", "src_addr", "dst_addr", "src_port", "dst_port", "protocol",
               "bytes", "packets", "duration", "label", "attack_kind")


def write_flow_csv(path: str | Path, records: Iterable[FlowRecord]) -> None:
    """Write records in the default-schema layout read back by :func:`parse_flow_csv`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([repr(r.timestamp), int_to_ip(r.src_addr), int_to_ip(r.dst_addr),
                        r.src_port, r.dst_port, r.protocol.value, r.bytes, r.packets,
                        repr(r.duration), r.label.value, r.attack_kind or ""])


# --------------------------------------------------------------------------
# Synthetic traffic
# --------------------------------------------------------------------------

ATTACK_KINDS = ("portscan", "synflood", "bruteforce", "udpflood")


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic traffic generator.

    Flows arrive as a Poisson process at ``flow_rate`` per second. Inside
    ``[attack_start, attack_stop)`` each flow is malicious with probability
    ``malicious_fraction`` and comes from one of the attacker addresses.
    With ``switch_every > 0`` a single attacker is active at a time and the
    active one advances every ``switch_every`` seconds; with
    ``reuse_retired_attackers`` a retired attacker address starts sending
    benign traffic.
    """

    duration: float = 300.0
    n_flows: int | None = None
    flow_rate: float = 10.0
    n_benign_hosts: int = 40
    n_attackers: int = 2
    attack_start: float = 0.0
    attack_stop: float | None = None
    malicious_fraction: float = 0.3
    attack_kinds: tuple[str, ...] = ATTACK_KINDS
    switch_every: float = 0.0
    reuse_retired_attackers: bool = False
    start_time: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ConfigError(f"malicious_fraction must lie in [0, 1], got {self.malicious_fraction}")
        if self.flow_rate <= 0:
            raise ConfigError("flow_rate must be positive")
        if self.n_benign_hosts < 1:
            raise ConfigError("n_benign_hosts must be >= 1")
        if self.n_attackers < 0 or self.n_attackers > 250:
            raise ConfigError("n_attackers must lie in [0, 250]")
        if self.malicious_fraction > 0 and self.n_attackers == 0:
            raise ConfigError("malicious_fraction > 0 needs at least one attacker")
        unknown = set(self.attack_kinds) - set(ATTACK_KINDS)
        if unknown or not self.attack_kinds:
            raise ConfigError(f"attack_kinds must be drawn from {ATTACK_KINDS}")
        if self.n_flows is None and self.duration <= 0:
            raise ConfigError("duration must be positive")


_SERVERS = tuple(ip_to_int(f"10.10.0.{i}") for i in range(1, 9))


def _benign_flow(rng: np.random.Generator, t: float, src: int) -> FlowRecord:
    dst = _SERVERS[rng.integers(len(_SERVERS))]
    sport = int(rng.integers(49152, 65536))
    u = rng.random()
    if u < 0.60:
        packets = 4 + int(rng.poisson(16))
        return FlowRecord(t, src, dst, sport, int(rng.choice([80, 443])), Protocol.TCP,
                          int(packets * rng.uniform(200, 1200)), packets,
                          float(rng.lognormal(0.0, 0.7)))
    if u < 0.80:
        packets = int(rng.integers(1, 3))
        return FlowRecord(t, src, dst, sport, 53, Protocol.UDP,
                          int(packets * rng.uniform(60, 200)), packets,
                          float(rng.uniform(0.005, 0.05)))
    if u < 0.87:
        packets = int(rng.integers(20, 200))
        return FlowRecord(t, src, dst, sport, 22, Protocol.TCP,
                          int(packets * rng.uniform(80, 300)), packets,
                          float(rng.uniform(5, 120)))
    if u < 0.95:
        packets = 3 + int(rng.poisson(8))
        port = int(rng.choice([25, 993, 8080, 3306]))
        return FlowRecord(t, src, dst, sport, port, Protocol.TCP,
                          int(packets * rng.uniform(100, 900)), packets,
                          float(rng.lognormal(-0.5, 0.6)))
    packets = int(rng.integers(1, 5))
    return FlowRecord(t, src, dst, 0, 0, Protocol.ICMP, 64 * packets, packets,
                      float(packets * rng.uniform(0.9, 1.1)))


def _attack_flow(rng: np.random.Generator, t: float, src: int, kind: str) -> FlowRecord:
    dst = _SERVERS[rng.integers(len(_SERVERS))]
    sport = int(rng.integers(1024, 65536))
    bad = dict(label=Label.MALICIOUS, attack_kind=kind)
    if kind == "portscan":
        packets = int(rng.integers(1, 3))
        return FlowRecord(t, src, dst, sport, int(rng.integers(1, 65536)), Protocol.TCP,
                          int(packets * rng.uniform(40, 60)), packets,
                          float(rng.uniform(0.0, 0.01)), **bad)
    if kind == "synflood":
        packets = int(rng.integers(1, 4))
        return FlowRecord(t, src, dst, sport, int(rng.choice([80, 443])), Protocol.TCP,
                          int(packets * rng.uniform(40, 60)), packets,
                          float(rng.uniform(0.0, 0.005)), **bad)
    if kind == "bruteforce":
        packets = int(rng.integers(8, 17))
        return FlowRecord(t, src, dst, sport, int(rng.choice([22, 21, 3389])), Protocol.TCP,
                          int(packets * rng.uniform(60, 120)), packets,
                          float(rng.uniform(1.0, 3.0)), **bad)
    packets = int(rng.integers(20, 101))
    return FlowRecord(t, src, dst, sport, int(rng.integers(1024, 65536)), Protocol.UDP,
                      int(packets * rng.uniform(1000, 1400)), packets,
                      float(rng.uniform(0.1, 1.0)), **bad)


@dataclass(frozen=True)
class SyntheticHosts:
    benign: tuple[int, ...]
    attackers: tuple[int, ...]
    attacker_kinds: tuple[str, ...]


def synthetic_hosts(config: SyntheticConfig, seed: int) -> SyntheticHosts:
    """Host addresses the generator uses for ``(config, seed)``."""
    rng = np.random.default_rng([seed, 0])
    benign_pool = rng.choice(4 * 254, size=config.n_benign_hosts, replace=False)
    benign = tuple(ip_to_int("10.0.0.0") + ((int(k) // 254 + 1) << 8) + int(k) % 254 + 1
                   for k in benign_pool)
    attacker_hosts = rng.choice(np.arange(1, 255), size=config.n_attackers, replace=False)
    attackers = tuple(ip_to_int("203.0.113.0") + int(h) for h in attacker_hosts)
    # rotate through the kinds from a random offset so every kind appears once n >= len(kinds)
    offset = int(rng.integers(len(config.attack_kinds)))
    kinds = tuple(str(config.attack_kinds[(offset + i) % len(config.attack_kinds)])
                  for i in range(config.n_attackers))
    return SyntheticHosts(benign, attackers, kinds)


def generate_synthetic(config: SyntheticConfig, seed: int) -> list[FlowRecord]:
    """Deterministic labeled traffic for ``(config, seed)``, in timestamp order."""
    config.validate()
    hosts = synthetic_hosts(config, seed)
    rng = np.random.default_rng([seed, 1])
    stop = math.inf if config.attack_stop is None else config.attack_stop
    end = config.start_time + config.duration
    out: list[FlowRecord] = []
    t = config.start_time
    while True:
        t += float(rng.exponential(1.0 / config.flow_rate))
        if config.n_flows is not None:
            if len(out) >= config.n_flows:
                break
        elif t >= end:
            break
        in_attack = config.attack_start <= t < stop
        if in_attack and config.malicious_fraction > 0 and rng.random() < config.malicious_fraction:
            if config.switch_every > 0:
                phase = int((t - config.attack_start) // config.switch_every)
                i = min(phase, config.n_attackers - 1)
            else:
                i = int(rng.integers(config.n_attackers))
            out.append(_attack_flow(rng, t, hosts.attackers[i], hosts.attacker_kinds[i]))
            continue
        pool = hosts.benign
        if config.reuse_retired_attackers and config.switch_every > 0 and t >= config.attack_start:
            phase = int((t - config.attack_start) // config.switch_every)
            pool = pool + hosts.attackers[:min(phase, config.n_attackers - 1)]
        out.append(_benign_flow(rng, t, pool[rng.integers(len(pool))]))
    return out


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------

ENGINEERED_FEATURES = (
    "log_bytes", "log_packets", "log_duration", "log_bytes_per_packet",
    "proto_tcp", "proto_udp", "proto_icmp",
    "dport_well_known", "dport_registered", "dport_dynamic", "dport_none",
    "sport_well_known",
    "src_flow_count", "src_distinct_dports", "src_distinct_dsts", "src_gap",
)


class RateTracker:
    """Per-source statistics over the trailing ``horizon`` seconds."""

    def __init__(self, horizon: float = 10.0, max_entries: int = 256):
        self.horizon = horizon
        self.max_entries = max_entries
        self._hist: dict[int, deque] = {}

    def update(self, record: FlowRecord) -> tuple[int, int, int, float]:
        """Add ``record``; return (flow count, distinct dports, distinct dsts, gap)."""
        h = self._hist.setdefault(record.src_addr, deque(maxlen=self.max_entries))
        gap = self.horizon if not h else min(self.horizon, record.timestamp - h[-1][0])
        h.append((record.timestamp, record.dst_port, record.dst_addr))
        cutoff = record.timestamp - self.horizon
        while h and h[0][0] < cutoff:
            h.popleft()
        return len(h), len({e[1] for e in h}), len({e[2] for e in h}), max(gap, 0.0)


class FeatureExtractor:
    """Turns FlowRecords into raw (unnormalized) feature rows.

    ``mode="engineered"`` gives the 16 features in ``ENGINEERED_FEATURES``;
    ``mode="passthrough"`` returns ``record.extra`` unchanged.
    """

    def __init__(self, mode: str = "engineered", horizon: float = 10.0):
        if mode not in ("engineered", "passthrough"):
            raise ConfigError(f"unknown feature mode {mode!r}")
        self.mode = mode
        self.tracker = RateTracker(horizon)

    def raw(self, record: FlowRecord) -> np.ndarray:
        if self.mode == "passthrough":
            return np.asarray(record.extra, dtype=np.float64)
        count, n_ports, n_dsts, gap = self.tracker.update(record)
        proto = record.protocol
        dport = record.dst_port
        return np.array([
            math.log1p(record.bytes),
            math.log1p(record.packets),
            math.log1p(record.duration),
            math.log1p(record.bytes / record.packets),
            proto is Protocol.TCP, proto is Protocol.UDP, proto is Protocol.ICMP,
            proto is not Protocol.ICMP and dport < 1024,
            proto is not Protocol.ICMP and 1024 <= dport < 49152,
            proto is not Protocol.ICMP and dport >= 49152,
            proto is Protocol.ICMP,
            proto is not Protocol.ICMP and record.src_port < 1024,
            math.log1p(count), math.log1p(n_ports), math.log1p(n_dsts), math.log1p(gap),
        ], dtype=np.float64)

    def raw_matrix(self, records: Sequence[FlowRecord]) -> np.ndarray:
        return np.stack([self.raw(r) for r in records]) if records else np.zeros((0, 0))


class Normalizer:
    """Per-dimension min-max scaling into [0, 1] with clipping."""

    def __init__(self, mins: np.ndarray | None = None, maxs: np.ndarray | None = None):
        self.mins = None if mins is None else np.asarray(mins, dtype=np.float64)
        self.maxs = None if maxs is None else np.asarray(maxs, dtype=np.float64)

    @property
    def fitted(self) -> bool:
        return self.mins is not None

    @property
    def dim(self) -> int:
        self._check()
        return len(self.mins)

    def fit(self, raw: np.ndarray) -> "Normalizer":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or len(raw) == 0:
            raise ConfigError("normalizer needs a non-empty 2-D sample")
        if not np.all(np.isfinite(raw)):
            raise ConfigError("normalizer sample contains non-finite values")
        self.mins = raw.min(axis=0)
        self.maxs = raw.max(axis=0)
        return self

    def transform(self, raw: np.ndarray) -> np.ndarray:
        self._check()
        raw = np.asarray(raw, dtype=np.float64)
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (raw - self.mins) / safe, 0.0)
        return np.clip(out, 0.0, 1.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        self._check()
        return {"mins": self.mins.copy(), "maxs": self.maxs.copy()}

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "Normalizer":
        return cls(state["mins"], state["maxs"])

    def _check(self):
        if not self.fitted:
            raise StateError("normalizer has not been fitted")


def extract_features(record: FlowRecord, normalizer: Normalizer,
                     extractor: FeatureExtractor | None = None) -> FeatureVector:
    """Normalized feature vector for one record.

    Pass a long-lived ``extractor`` to get meaningful per-source rate
    features; without one the record is treated as the first of its source.
    """
    if not normalizer.fitted:
        raise StateError("normalizer has not been fitted")
    raw = (extractor or FeatureExtractor()).raw(record)
    return FeatureVector(normalizer.transform(raw), record.label)


def featurize(records: Sequence[FlowRecord], normalizer: Normalizer | None = None,
              mode: str = "engineered") -> tuple[np.ndarray, Normalizer]:
    """Normalized ``(N, D)`` matrix for a stream; fits a normalizer when none is given."""
    raw = FeatureExtractor(mode).raw_matrix(records)
    if normalizer is None:
        normalizer = Normalizer().fit(raw)
    return normalizer.transform(raw), normalizer


# --------------------------------------------------------------------------
# Windows
# --------------------------------------------------------------------------

def windows(stream: Iterable[FeatureVector], W: int, stride: int = 1) -> Iterator[TrafficWindow]:
    """Window ``k`` covers items ``[k*stride, k*stride + W)``; partial tails are dropped."""
    if W < 1 or stride < 1:
        raise ValueError("W and stride must be >= 1")
    buf: deque[FeatureVector] = deque(maxlen=W)
    for n, fv in enumerate(stream, start=1):
        buf.append(fv)
        start = n - W
        if start >= 0 and start % stride == 0:
            yield TrafficWindow(np.stack([v.values for v in buf]),
                                tuple(v.label for v in buf), start // stride)


def source_windows(records: Sequence[FlowRecord], features: np.ndarray, W: int) -> np.ndarray:
    """One window per record: its source's last ``W`` feature rows, ending at the record.

    Sources with fewer than ``W`` flows so far are left-padded with their
    earliest row. Returns ``(N, W, D)``.
    """
    out = np.empty((len(records), W, features.shape[1]))
    hist: dict[int, deque] = {}
    for i, rec in enumerate(records):
        h = hist.setdefault(rec.src_addr, deque(maxlen=W))
        h.append(i)
        idx = list(h)
        idx = [idx[0]] * (W - len(idx)) + idx
        out[i] = features[idx]
    return out


def source_window_labels(records: Sequence[FlowRecord], W: int, rule: str = "any") -> np.ndarray:
    """Binary labels matching :func:`source_windows` (1 = malicious)."""
    labels = np.empty(len(records))
    hist: dict[int, deque] = {}
    for i, rec in enumerate(records):
        h = hist.setdefault(rec.src_addr, deque(maxlen=W))
        h.append(rec.is_malicious)
        members = [h[0]] * (W - len(h)) + list(h)
        labels[i] = any(members) if rule == "any" else 2 * sum(members) > W
    return labels
