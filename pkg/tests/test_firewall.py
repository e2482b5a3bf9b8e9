import ipaddress
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynfw.errors import ConfigError, DeltaError
from dynfw.firewall import (AddrMatch, DeltaKind, Match, PortMatch, Redundancy, Rule, RuleDelta, RuleSet,
                            Verdict, apply_delta, dumps_ruleset, evaluate, load_ruleset,
                            loads_ruleset, parse_rule, redundancy_scan, save_ruleset,
                            timed_evaluate)
from dynfw.traffic import FlowRecord, Protocol, ip_to_int

from rulegen import BASE, rand_flow, rand_match, rand_ruleset

seeds = st.integers(0, 2**32 - 1)


def flow(src="10.0.0.1", dst="10.0.1.1", sport=1000, dport=80, proto=Protocol.TCP):
    return FlowRecord(0.0, ip_to_int(src), ip_to_int(dst), sport, dport, proto, 100, 1, 0.0)


def deny_src(rid, src):
    return Rule(rid, Match(src=AddrMatch.parse(src)), Verdict.DENY)


def snapshot(rs):
    return (rs.default_verdict, [(r.id, r.match, r.verdict, r.created_step, r.last_match_step,
                                  r.match_count) for r in rs.rules])


# -- reference matcher built from the text form only -------------------------------------

def _text_pred(field, kind):
    if field == "*":
        return lambda v: True
    if kind == "addr":
        net = ipaddress.ip_network(field if "/" in field else field + "/32")
        return lambda v: ipaddress.ip_address(v) in net
    if kind == "port":
        lo, _, hi = field.partition("-")
        lo, hi = int(lo), int(hi or lo)
        return lambda v: lo <= v <= hi
    names = {p.upper() for p in field.split(",")}
    return lambda v: v.value in names


def reference_first_match(ruleset, record):
    for line in dumps_ruleset(ruleset).splitlines()[1:]:
        rid, verdict, src, dst, sport, dport, proto = line.split()
        preds = [(_text_pred(src, "addr"), record.src_addr), (_text_pred(dst, "addr"), record.dst_addr),
                 (_text_pred(sport, "port"), record.src_port),
                 (_text_pred(dport, "port"), record.dst_port), (_text_pred(proto, "proto"), record.protocol)]
        if all(p(v) for p, v in preds):
            return verdict, int(rid)
    return ruleset.default_verdict.value, None


# -- evaluate ---------------------------------------------------------------------------

def test_empty_ruleset_uses_default():
    assert evaluate(RuleSet(), flow()) == (Verdict.ALLOW, None)
    assert evaluate(RuleSet(default_verdict=Verdict.DENY), flow()).verdict is Verdict.DENY


def test_first_match_order():
    rs = RuleSet([deny_src(1, "10.0.0.1"), Rule(2, Match(src=AddrMatch.parse("10.0.0.1")), Verdict.ALLOW)])
    assert evaluate(rs, flow(), step=7) == (Verdict.DENY, 1)
    assert rs.rules[0].match_count == 1 and rs.rules[0].last_match_step == 7
    assert rs.rules[1].match_count == 0


def test_prefix_and_port_predicates():
    rule = Rule(1, Match(src=AddrMatch.parse("10.0.0.0/24"), dport=PortMatch(80, 90),
                         protos=frozenset({Protocol.TCP})), Verdict.DENY)
    rs = RuleSet([rule])
    assert evaluate(rs, flow(src="10.0.0.200", dport=85)).rule_id == 1
    assert evaluate(rs, flow(src="10.0.1.1", dport=85)).rule_id is None
    assert evaluate(rs, flow(dport=91)).rule_id is None
    assert evaluate(rs, flow(proto=Protocol.UDP)).rule_id is None


def test_matches_reference_scan():
    rng = np.random.default_rng(11)
    for _ in range(100):
        rs = rand_ruleset(rng)
        for _ in range(100):
            rec = rand_flow(rng)
            d = evaluate(rs, rec)
            assert (d.verdict.value, d.rule_id) == reference_first_match(rs, rec)


@given(seeds)
@settings(max_examples=50)
def test_match_counts_never_decrease(seed):
    rng = np.random.default_rng(seed)
    rs = rand_ruleset(rng, n=8)
    prev = [0] * len(rs)
    for step in range(30):
        evaluate(rs, rand_flow(rng), step)
        now = [r.match_count for r in rs.rules]
        assert all(a >= b for a, b in zip(now, prev))
        prev = now
    assert sum(prev) <= 30


def test_timed_evaluate_agrees():
    rng = np.random.default_rng(2)
    rs = rand_ruleset(rng, n=15)
    d, ns = timed_evaluate(RuleSet(), flow())
    assert d == (Verdict.ALLOW, None) and ns >= 0
    for _ in range(50):
        rec = rand_flow(rng)
        (d1, t1), d2 = timed_evaluate(rs, rec), evaluate(rs, rec)
        assert d1 == d2 and t1 >= 0


# -- apply_delta ------------------------------------------------------------------------

def five_rules():
    return RuleSet([deny_src(i, f"10.0.0.{i}") for i in (10, 11, 12, 13, 14)])


def test_noop_is_identity():
    rs = five_rules()
    out = apply_delta(rs, RuleDelta.noop())
    assert out == rs and out is not rs


def test_insert_then_remove_restores():
    rs = five_rules()
    r = deny_src(99, "10.9.9.9")
    mid = apply_delta(rs, RuleDelta.insert(r, 0))
    assert mid.ids()[0] == 99
    assert apply_delta(mid, RuleDelta.remove(99)) == rs


def test_reorder_matches_list_splice():
    rs = five_rules()
    x = rs.ids()[3]
    out = apply_delta(rs, RuleDelta.reorder(x, 0))
    ids = rs.ids()
    assert out.ids() == [ids[3], ids[0], ids[1], ids[2], ids[4]]


def test_update_keeps_id_and_position():
    rs = five_rules()
    new = Match(src=AddrMatch.parse("10.0.0.0/24"))
    out = apply_delta(rs, RuleDelta.update(12, new))
    assert out.ids() == rs.ids()
    assert out.get(12).match == new and rs.get(12).match != new


def test_insert_position_clamped():
    rs = five_rules()
    assert apply_delta(rs, RuleDelta.insert(deny_src(50, "1.1.1.1"), 99)).ids()[-1] == 50
    assert apply_delta(rs, RuleDelta.insert(deny_src(51, "1.1.1.1"), -4)).ids()[0] == 51


def test_missing_targets_raise():
    rs = five_rules()
    for d in (RuleDelta.remove(7), RuleDelta.update(7, Match()), RuleDelta.reorder(7, 0)):
        with pytest.raises(DeltaError):
            apply_delta(rs, d)
    with pytest.raises(DeltaError):
        apply_delta(rs, RuleDelta.insert(deny_src(10, "1.1.1.1")))
    with pytest.raises(ValueError):
        RuleDelta(DeltaKind.REMOVE)


def _reference_apply(ids, delta):
    """Plain list manipulation on ids only."""
    ids = list(ids)
    k = delta.kind.value
    if k == "INSERT":
        ids.insert(min(max(delta.position, 0), len(ids)), delta.rule.id)
    elif k == "REMOVE":
        ids.remove(delta.target_id)
    elif k == "REORDER":
        ids.remove(delta.target_id)
        ids.insert(min(max(delta.position, 0), len(ids)), delta.target_id)
    return ids


@given(seeds)
@settings(max_examples=300)
def test_delta_algebra(seed):
    rng = np.random.default_rng(seed)
    rs = rand_ruleset(rng, n=int(rng.integers(1, 12)))
    before = snapshot(rs)
    target = int(rng.choice(rs.ids()))
    pos = int(rng.integers(-2, len(rs) + 3))
    new_rule = Rule(rs.next_id(), rand_match(rng), Verdict.DENY)
    deltas = [RuleDelta.noop(), RuleDelta.insert(new_rule, pos), RuleDelta.remove(target),
              RuleDelta.update(target, rand_match(rng)), RuleDelta.reorder(target, pos)]
    for d in deltas:
        out = apply_delta(rs, d)
        assert snapshot(rs) == before  # input untouched
        if d.kind.value != "UPDATE":
            assert out.ids() == _reference_apply(rs.ids(), d)
        if d.kind.value == "REORDER":
            key = lambda r: (r.id, r.match, r.verdict)
            assert sorted(map(key, out.rules)) == sorted(map(key, rs.rules))
    assert apply_delta(apply_delta(rs, deltas[1]), RuleDelta.remove(new_rule.id)) == rs
    assert apply_delta(rs, deltas[0]) == rs


# -- redundancy -------------------------------------------------------------------------

def test_duplicate_and_universal_shadow():
    a = deny_src(1, "10.0.0.1")
    rs = RuleSet([a, replace(a, id=2)])
    assert redundancy_scan(rs) == [(2, Redundancy.DUPLICATE)]
    rs = RuleSet([Rule(1, Match(), Verdict.DENY), deny_src(2, "10.0.0.1"),
                  Rule(3, Match(dport=PortMatch(22, 22)), Verdict.ALLOW)])
    assert redundancy_scan(rs) == [(2, Redundancy.SHADOWED), (3, Redundancy.SHADOWED)]
    assert redundancy_scan(five_rules()) == []


def _toy_points():
    """Exhaustive grid: every address/port the generator can name plus outside witnesses."""
    src = [BASE + i for i in range(16)] + [BASE + 100, (11 << 24) + 1]
    dst = [BASE + 256 + i for i in range(16)] + [BASE + 356, (12 << 24) + 1]
    ports = list(range(1, 9)) + [100]
    g = np.array(np.meshgrid(src, dst, ports, ports, range(3), indexing="ij")).reshape(5, -1)
    return g


def _match_vector(m, g):
    proto_ok = np.array([p in m.protos for p in Protocol])[g[4]]
    return ((g[0] & m.src.mask) == m.src.network) & ((g[1] & m.dst.mask) == m.dst.network) \
        & (g[2] >= m.sport.lo) & (g[2] <= m.sport.hi) & (g[3] >= m.dport.lo) \
        & (g[3] <= m.dport.hi) & proto_ok


def containment_oracle(rs, g):
    vecs = np.array([_match_vector(r.match, g) for r in rs.rules])
    report = []
    for j, r in enumerate(rs.rules):
        same = [i for i in range(j) if np.array_equal(vecs[i], vecs[j])
                and rs.rules[i].verdict is r.verdict]
        if same:
            report.append((r.id, Redundancy.DUPLICATE))
        elif j and (vecs[:j] | ~vecs[j]).all(axis=1).any():
            report.append((r.id, Redundancy.SHADOWED))
    return report


def test_redundancy_matches_toy_space_oracle():
    g = _toy_points()
    rng = np.random.default_rng(5)
    for _ in range(20):
        rs = rand_ruleset(rng, n=50)
        # sprinkle exact copies so DUPLICATE is exercised
        for k in rng.choice(40, 3, replace=False):
            rs.rules[int(k) + 5] = replace(rs.rules[int(k)], id=rs.rules[int(k) + 5].id)
        assert redundancy_scan(rs) == containment_oracle(rs, g)


# -- text format ------------------------------------------------------------------------

@given(seeds)
@settings(max_examples=100)
def test_text_round_trip(seed):
    rs = rand_ruleset(np.random.default_rng(seed))
    again = loads_ruleset(dumps_ruleset(rs))
    assert again == rs


def test_text_format_examples(tmp_path):
    text = "# default DENY\n\n# comment\n7 allow 10.0.0.0/24 * * 80-90 tcp,udp\n3 DENY 1.2.3.4 * 53 * *\n"
    rs = loads_ruleset(text)
    assert rs.default_verdict is Verdict.DENY and rs.ids() == [7, 3]
    assert rs.rules[0].match.protos == frozenset({Protocol.TCP, Protocol.UDP})
    assert rs.rules[1].match.sport == PortMatch(53, 53)
    save_ruleset(tmp_path / "r.txt", rs)
    assert load_ruleset(tmp_path / "r.txt") == rs
    assert dumps_ruleset(rs).splitlines()[1] == "7 ALLOW 10.0.0.0/24 * * 80-90 tcp,udp"


@pytest.mark.parametrize("line", ["1 DENY *", "x DENY * * * * *", "1 MAYBE * * * * *",
                                  "1 DENY 10.0.0.1/24 * * * *", "1 DENY * * 9-2 * *",
                                  "1 DENY * * * * sctp"])
def test_bad_rule_lines(line):
    with pytest.raises(ConfigError):
        parse_rule(line)


def test_invariants():
    with pytest.raises(ValueError):
        PortMatch(10, 5)
    with pytest.raises(ValueError):
        PortMatch(0, 70000)
    with pytest.raises(ValueError):
        RuleSet([deny_src(1, "1.1.1.1"), deny_src(1, "2.2.2.2")])
    with pytest.raises(ValueError):
        Match(protos=frozenset())
