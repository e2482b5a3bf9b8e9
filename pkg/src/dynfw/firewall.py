"""Ordered first-match rule engine and rule-set transformations.

Text format for rule sets, one rule per line::

    # default ALLOW
    <id> <verdict> <src> <dst> <sport> <dport> <proto>

Addresses are ``*``, ``a.b.c.d`` or ``a.b.c.d/len``; ports are ``*``,
``p`` or ``lo-hi``; protocols are ``*`` or a comma list such as
``tcp,udp``. Blank lines and other ``#`` comments are ignored.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

from .errors import ConfigError, DeltaError
from .traffic import FlowRecord, Protocol, int_to_ip, ip_to_int


class Verdict(enum.Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"


_FULL = 0xFFFFFFFF


@dataclass(frozen=True)
class AddrMatch:
    """Prefix match; ``prefix == 0`` is the wildcard, 32 an exact address."""

    network: int = 0
    prefix: int = 0
    mask: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.prefix <= 32:
            raise ValueError(f"prefix length out of range: {self.prefix}")
        mask = (_FULL << (32 - self.prefix)) & _FULL
        if self.network & ~mask & _FULL:
            raise ValueError(f"{int_to_ip(self.network)}/{self.prefix} has host bits set")
        object.__setattr__(self, "mask", mask)

    @classmethod
    def exact(cls, addr: int) -> "AddrMatch":
        return cls(addr, 32)

    @classmethod
    def covering(cls, addr: int, prefix: int) -> "AddrMatch":
        return cls(addr & ((_FULL << (32 - prefix)) & _FULL), prefix)

    @classmethod
    def parse(cls, text: str) -> "AddrMatch":
        if text == "*":
            return cls()
        if "/" in text:
            net, plen = text.split("/", 1)
            return cls(ip_to_int(net), int(plen))
        return cls(ip_to_int(text), 32)

    def matches(self, addr: int) -> bool:
        return addr & self.mask == self.network

    def contains(self, other: "AddrMatch") -> bool:
        return self.prefix <= other.prefix and other.network & self.mask == self.network

    def __str__(self):
        if self.prefix == 0:
            return "*"
        if self.prefix == 32:
            return int_to_ip(self.network)
        return f"{int_to_ip(self.network)}/{self.prefix}"


@dataclass(frozen=True)
class PortMatch:
    lo: int = 0
    hi: int = 65535

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi <= 65535:
            raise ValueError(f"malformed port range {self.lo}-{self.hi}")

    @classmethod
    def parse(cls, text: str) -> "PortMatch":
        if text == "*":
            return cls()
        if "-" in text:
            lo, hi = text.split("-", 1)
            return cls(int(lo), int(hi))
        return cls(int(text), int(text))

    def matches(self, port: int) -> bool:
        return self.lo <= port <= self.hi

    def contains(self, other: "PortMatch") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi

    def __str__(self):
        if (self.lo, self.hi) == (0, 65535):
            return "*"
        return str(self.lo) if self.lo == self.hi else f"{self.lo}-{self.hi}"


ALL_PROTOCOLS = frozenset(Protocol)


@dataclass(frozen=True)
class Match:
    src: AddrMatch = AddrMatch()
    dst: AddrMatch = AddrMatch()
    sport: PortMatch = PortMatch()
    dport: PortMatch = PortMatch()
    protos: frozenset = ALL_PROTOCOLS

    def __post_init__(self):
        if not self.protos or not self.protos <= ALL_PROTOCOLS:
            raise ValueError("protocol set must be a non-empty subset of TCP/UDP/ICMP")

    def matches(self, r: FlowRecord) -> bool:
        return (r.src_addr & self.src.mask == self.src.network
                and r.dst_addr & self.dst.mask == self.dst.network
                and self.sport.lo <= r.src_port <= self.sport.hi
                and self.dport.lo <= r.dst_port <= self.dport.hi
                and r.protocol in self.protos)

    def contains(self, other: "Match") -> bool:
        """True when every flow matched by ``other`` is matched by ``self``."""
        return (self.src.contains(other.src) and self.dst.contains(other.dst)
                and self.sport.contains(other.sport) and self.dport.contains(other.dport)
                and other.protos <= self.protos)


def _protos_str(protos: frozenset) -> str:
    if protos == ALL_PROTOCOLS:
        return "*"
    return ",".join(p.value.lower() for p in Protocol if p in protos)


def _parse_protos(text: str) -> frozenset:
    if text == "*":
        return ALL_PROTOCOLS
    return frozenset(Protocol(t.upper()) for t in text.split(","))


@dataclass
class Rule:
    id: int
    match: Match
    verdict: Verdict
    created_step: int = 0
    last_match_step: int | None = None
    match_count: int = 0

    def to_line(self) -> str:
        m = self.match
        return (f"{self.id} {self.verdict.value} {m.src} {m.dst} {m.sport} {m.dport} "
                f"{_protos_str(m.protos)}")


@dataclass
class RuleSet:
    rules: list[Rule] = field(default_factory=list)
    default_verdict: Verdict = Verdict.ALLOW

    def __post_init__(self):
        ids = [r.id for r in self.rules]
        if len(ids) != len(set(ids)):
            raise ValueError("rule ids must be unique within a rule set")

    def __len__(self):
        return len(self.rules)

    def ids(self) -> list[int]:
        return [r.id for r in self.rules]

    def index_of(self, rule_id: int) -> int:
        for i, r in enumerate(self.rules):
            if r.id == rule_id:
                return i
        raise DeltaError(rule_id)

    def get(self, rule_id: int) -> Rule:
        return self.rules[self.index_of(rule_id)]

    def next_id(self) -> int:
        return max((r.id for r in self.rules), default=0) + 1

    def copy(self) -> "RuleSet":
        return RuleSet([replace(r) for r in self.rules], self.default_verdict)


class DeltaKind(enum.Enum):
    INSERT = "INSERT"
    REMOVE = "REMOVE"
    UPDATE = "UPDATE"
    REORDER = "REORDER"
    NOOP = "NOOP"


@dataclass(frozen=True)
class RuleDelta:
    kind: DeltaKind
    rule: Rule | None = None
    target_id: int | None = None
    position: int | None = None
    match: Match | None = None

    def __post_init__(self):
        k = self.kind
        ok = {
            DeltaKind.NOOP: True,
            DeltaKind.INSERT: self.rule is not None,
            DeltaKind.REMOVE: self.target_id is not None,
            DeltaKind.UPDATE: self.target_id is not None and self.match is not None,
            DeltaKind.REORDER: self.target_id is not None and self.position is not None,
        }[k]
        if not ok:
            raise ValueError(f"payload inconsistent with {k.value} delta")

    @classmethod
    def noop(cls):
        return cls(DeltaKind.NOOP)

    @classmethod
    def insert(cls, rule: Rule, position: int = 0):
        return cls(DeltaKind.INSERT, rule=rule, position=position)

    @classmethod
    def remove(cls, rule_id: int):
        return cls(DeltaKind.REMOVE, target_id=rule_id)

    @classmethod
    def update(cls, rule_id: int, match: Match):
        return cls(DeltaKind.UPDATE, target_id=rule_id, match=match)

    @classmethod
    def reorder(cls, rule_id: int, position: int):
        return cls(DeltaKind.REORDER, target_id=rule_id, position=position)


def apply_delta(ruleset: RuleSet, delta: RuleDelta) -> RuleSet:
    """Return ``ruleset (+) delta`` as a new rule set; the input is left untouched.

    Raises DeltaError when a REMOVE/UPDATE/REORDER target id is absent or an
    INSERT reuses an existing id.
    """
    out = ruleset.copy()
    rules = out.rules
    kind = delta.kind
    if kind is DeltaKind.NOOP:
        return out
    if kind is DeltaKind.INSERT:
        if any(r.id == delta.rule.id for r in rules):
            raise DeltaError(delta.rule.id)
        pos = min(max(delta.position or 0, 0), len(rules))
        rules.insert(pos, replace(delta.rule))
        return out
    i = out.index_of(delta.target_id)
    if kind is DeltaKind.REMOVE:
        del rules[i]
    elif kind is DeltaKind.UPDATE:
        rules[i] = replace(rules[i], match=delta.match)
    else:
        rule = rules.pop(i)
        rules.insert(min(max(delta.position, 0), len(rules)), rule)
    return out


class Decision(NamedTuple):
    verdict: Verdict
    rule_id: int | None


def evaluate(ruleset: RuleSet, record: FlowRecord, step: int = 0) -> Decision:
    """First matching rule wins; updates that rule's match counters."""
    src, dst = record.src_addr, record.dst_addr
    sport, dport, proto = record.src_port, record.dst_port, record.protocol
    for rule in ruleset.rules:
        m = rule.match
        if (src & m.src.mask == m.src.network and dst & m.dst.mask == m.dst.network
                and m.sport.lo <= sport <= m.sport.hi and m.dport.lo <= dport <= m.dport.hi
                and proto in m.protos):
            rule.match_count += 1
            rule.last_match_step = step
            return Decision(rule.verdict, rule.id)
    return Decision(ruleset.default_verdict, None)


def timed_evaluate(ruleset: RuleSet, record: FlowRecord, step: int = 0) -> tuple[Decision, int]:
    """:func:`evaluate` plus the elapsed monotonic nanoseconds spent matching."""
    t0 = time.perf_counter_ns()
    decision = evaluate(ruleset, record, step)
    return decision, time.perf_counter_ns() - t0


class Redundancy(enum.Enum):
    SHADOWED = "SHADOWED"
    DUPLICATE = "DUPLICATE"


def redundancy_scan(ruleset: RuleSet) -> list[tuple[int, Redundancy]]:
    """Rules that can never be the first match.

    DUPLICATE: an earlier rule has identical predicates and verdict.
    SHADOWED: an earlier rule's predicates cover this rule's, whatever the verdict.
    """
    found = []
    rules = ruleset.rules
    for j, rule in enumerate(rules):
        earlier = rules[:j]
        if any(e.match == rule.match and e.verdict is rule.verdict for e in earlier):
            found.append((rule.id, Redundancy.DUPLICATE))
        elif any(e.match.contains(rule.match) for e in earlier):
            found.append((rule.id, Redundancy.SHADOWED))
    return found


def parse_rule(line: str) -> Rule:
    parts = line.split()
    if len(parts) != 7:
        raise ConfigError(f"expected 7 fields in rule line, got {len(parts)}: {line!r}")
    rid, verdict, src, dst, sport, dport, proto = parts
    try:
        match = Match(AddrMatch.parse(src), AddrMatch.parse(dst), PortMatch.parse(sport),
                      PortMatch.parse(dport), _parse_protos(proto))
        return Rule(int(rid), match, Verdict(verdict.upper()))
    except ValueError as exc:
        raise ConfigError(f"bad rule line {line!r}: {exc}") from exc


def dumps_ruleset(ruleset: RuleSet) -> str:
    lines = [f"# default {ruleset.default_verdict.value}"]
    lines += [r.to_line() for r in ruleset.rules]
    return "\n".join(lines) + "\n"


def loads_ruleset(text: str) -> RuleSet:
    default = Verdict.ALLOW
    rules = []
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            words = s[1:].split()
            if len(words) == 2 and words[0] == "default":
                default = Verdict(words[1].upper())
            continue
        rules.append(parse_rule(s))
    return RuleSet(rules, default)


def save_ruleset(path: str | Path, ruleset: RuleSet) -> None:
    Path(path).write_text(dumps_ruleset(ruleset))


def load_ruleset(path: str | Path) -> RuleSet:
    return loads_ruleset(Path(path).read_text())
