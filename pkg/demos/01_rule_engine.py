"""Walk through the first-match rule engine: matching, deltas, redundancy, text form."""
# %%
from dynfw.firewall import (AddrMatch, Match, PortMatch, Rule, RuleDelta, RuleSet, Verdict,
                            apply_delta, dumps_ruleset, evaluate, loads_ruleset, redundancy_scan)
from dynfw.traffic import FlowRecord, Protocol, ip_to_int


def flow(src, dport=80, proto=Protocol.TCP):
    return FlowRecord(0.0, ip_to_int(src), ip_to_int("192.168.1.10"), 40000, dport, proto, 600, 4, 0.2)


# %% a small policy: block one host, allow ssh from the admin subnet, deny ssh otherwise
rules = loads_ruleset("""
# default ALLOW
1 DENY 10.0.0.66 * * * *
2 ALLOW 10.0.5.0/24 * * 22 tcp
3 DENY * * * 22 tcp
""")
print(dumps_ruleset(rules))

for src, port in [("10.0.0.66", 80), ("10.0.5.7", 22), ("10.0.9.1", 22), ("10.0.9.1", 443)]:
    d = evaluate(rules, flow(src, port))
    print(f"{src:>10}:{port:<4} -> {d.verdict.value:5} (rule {d.rule_id})")

# %% deltas return new rule sets; the original is never touched
widened = apply_delta(rules, RuleDelta.update(1, Match(src=AddrMatch.parse("10.0.0.0/24"))))
moved = apply_delta(widened, RuleDelta.reorder(3, 0))
print("original ids:", rules.ids(), " after reorder:", moved.ids())
print("10.0.0.12 before/after widening:",
      evaluate(rules, flow("10.0.0.12")).verdict.value, evaluate(widened, flow("10.0.0.12")).verdict.value)

# %% with the ssh deny at the head, the admin allow can never fire
for rid, reason in redundancy_scan(moved):
    print(f"rule {rid} is {reason.value}")

extra = Rule(9, Match(dport=PortMatch(22, 22), protos=frozenset({Protocol.TCP})), Verdict.DENY)
print(redundancy_scan(apply_delta(rules, RuleDelta.insert(extra, 99))))
