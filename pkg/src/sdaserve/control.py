"""Logically central controller.

The controller only reads its :class:`StateStore` (snapshots, registrations,
mirrored knob values) and only writes through set/reset actions, so every
decision it takes can be replayed from the store contents.
"""

from __future__ import annotations

import json
import math
import operator
import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from sdaserve.core import Granularity, Priority, PriorityClass, Request, SimTime
from sdaserve.metrics import AggregationKind, MetricsPlane, Snapshot
from sdaserve.runtime import KnobRegistry, UnknownParameter, ValueOutOfRange

ROUTING_WINDOW_MS = 1e12


class UnknownTarget(KeyError):
    pass


class UnknownKnob(KeyError):
    pass


class DuplicateRegistration(ValueError):
    pass


class InvalidIntent(ValueError):
    pass


class NoInstanceAvailable(LookupError):
    pass


class PolicyError(ValueError):
    pass


def agent_target(inst: str) -> str:
    return f"agent:{inst}"


def link_target(src: str, dst: str) -> str:
    return f"link:{src}->{dst}"


def parse_address(addr: str) -> Tuple[str, str]:
    """``"agent:<id>/<knob>"`` or ``"link:<src>-><dst>/<knob>"`` -> (target, knob)."""
    m = re.fullmatch(r"((?:agent|link):[^/]+)/([A-Za-z_][\w]*)", addr.strip())
    if not m:
        raise PolicyError(f"bad knob address {addr!r}")
    return m.group(1), m.group(2)


# -- predicates --------------------------------------------------------------

_CMP = {
    ">": operator.gt, ">=": operator.ge, "<": operator.lt, "<=": operator.le,
    "==": operator.eq, "!=": operator.ne,
}
_NEGATE = {">": "<=", ">=": "<", "<": ">=", "<=": ">", "==": "!=", "!=": "=="}
_REPLICA_AGG = {"mean": lambda v: math.fsum(v) / len(v), "max": max, "min": min, "sum": math.fsum}


@dataclass(frozen=True)
class MetricPredicate:
    """``aggregation(metric over window) <comparator> threshold`` at a node selector.

    ``node`` is an instance id, a role name (replicas combined with
    ``replica_agg``) or ``"*"``. ``between`` takes an open interval (lo, hi).
    """

    metric: str
    node: str
    comparator: str
    threshold: Any
    aggregation: str = "mean"
    window_ms: float = 1000.0
    replica_agg: str = "mean"

    def __post_init__(self):
        AggregationKind.parse(self.aggregation)
        if self.comparator == "between":
            lo, hi = self.threshold
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise PolicyError(f"bad interval {self.threshold!r}")
            object.__setattr__(self, "threshold", (float(lo), float(hi)))
        elif self.comparator in _CMP:
            if not math.isfinite(self.threshold):
                raise PolicyError("threshold must be finite")
        else:
            raise PolicyError(f"unknown comparator {self.comparator!r}")
        if self.replica_agg not in _REPLICA_AGG:
            raise PolicyError(f"unknown replica aggregation {self.replica_agg!r}")
        if not self.window_ms > 0:
            raise PolicyError("window_ms must be > 0")

    @property
    def view(self) -> Tuple[float, str]:
        return (float(self.window_ms), self.aggregation)

    def negated(self) -> "MetricPredicate":
        if self.comparator == "between":
            raise PolicyError("cannot negate an interval predicate")
        return replace(self, comparator=_NEGATE[self.comparator])

    def value(self, store: "StateStore") -> Optional[float]:
        snap = store.snapshots.get(self.view)
        if snap is None:
            return None
        nodes = store.resolve_nodes(self.node, snap)
        vals = [snap.entries[(n, self.metric)] for n in nodes if (n, self.metric) in snap.entries]
        if not vals:
            return None
        return _REPLICA_AGG[self.replica_agg](vals)

    def holds(self, store: "StateStore") -> bool:
        v = self.value(store)
        if v is None:
            return False
        if self.comparator == "between":
            lo, hi = self.threshold
            return lo < v < hi
        return _CMP[self.comparator](v, self.threshold)


ALWAYS = "always"


# -- rules and actions ---------------------------------------------------------

@dataclass(frozen=True)
class ControlAction:
    """One call of the two-function control API."""

    op: str  # "set" | "reset"
    target: str
    param: str
    value: Any = None
    rule_id: str = ""

    def __post_init__(self):
        if self.op not in ("set", "reset"):
            raise ValueError(f"unknown op {self.op!r}")

    def __str__(self) -> str:
        if self.op == "reset":
            return f"reset {self.target}/{self.param}"
        return f"set {self.target}/{self.param}={self.value}"


@dataclass(frozen=True)
class AgentLevelRule:
    id: str
    target: str
    knob: str
    condition: Union[MetricPredicate, str] = ALWAYS
    op: str = "set"
    value: Any = None
    dwell_ms: float = 1000.0

    def __post_init__(self):
        if self.dwell_ms < 0:
            raise PolicyError("dwell_ms must be >= 0")
        if self.op not in ("set", "reset"):
            raise PolicyError(f"unknown action {self.op!r}")
        if isinstance(self.condition, str) and self.condition != ALWAYS:
            raise PolicyError(f"unknown condition {self.condition!r}")


@dataclass(frozen=True)
class RequestMatch:
    priority_class: Optional[str] = None
    min_level: Optional[int] = None
    max_level: Optional[int] = None
    hop: Optional[str] = None
    session: Optional[str] = None

    def matches(self, r: Request, hop: Optional[str]) -> bool:
        if self.priority_class is not None:
            if PriorityClass[self.priority_class.upper()] != r.priority.klass:
                return False
        if self.min_level is not None and r.priority.level < self.min_level:
            return False
        if self.max_level is not None and r.priority.level > self.max_level:
            return False
        if self.hop is not None and self.hop != hop:
            return False
        if self.session is not None and self.session != r.session:
            return False
        return True


SELECTORS = ("least_queue_depth", "round_robin", "fixed", "kv_affinity")


@dataclass(frozen=True)
class RouteTo:
    selector: str = "least_queue_depth"
    instance: Optional[str] = None

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise PolicyError(f"unknown selector {self.selector!r}")
        if self.selector == "fixed" and not self.instance:
            raise PolicyError("fixed selector needs an instance")


@dataclass(frozen=True)
class BlockUntil:
    condition: MetricPredicate


@dataclass(frozen=True)
class SetPriority:
    level: int

    def __post_init__(self):
        if not 0 <= self.level <= 7:
            raise PolicyError("priority level outside [0, 7]")


@dataclass(frozen=True)
class RequestLevelRule:
    id: str
    match: RequestMatch
    action: Union[RouteTo, BlockUntil, SetPriority]


@dataclass(frozen=True)
class Constraint:
    metric: str
    comparator: str
    value: float
    scope: Optional[str] = None


@dataclass(frozen=True)
class Intent:
    objective: Optional[str] = None
    constraints: Tuple[Constraint, ...] = ()
    agent_rules: Tuple[AgentLevelRule, ...] = ()
    request_rules: Tuple[RequestLevelRule, ...] = ()


OBJECTIVES = ("max_throughput", "min_p90_latency")


# -- state ---------------------------------------------------------------------

@dataclass
class StateStore:
    snapshots: Dict[Tuple[float, str], Snapshot] = field(default_factory=dict)
    poll_time: Optional[SimTime] = None
    registry: Dict[str, KnobRegistry] = field(default_factory=dict)
    roles: Dict[str, List[str]] = field(default_factory=dict)
    agent_rules: Dict[str, AgentLevelRule] = field(default_factory=dict)
    request_rules: Dict[str, RequestLevelRule] = field(default_factory=dict)
    last_fire: Dict[Tuple[str, str], SimTime] = field(default_factory=dict)
    rule_fire: Dict[Tuple[str, str], SimTime] = field(default_factory=dict)
    kv_residency: Dict[str, str] = field(default_factory=dict)

    def resolve_nodes(self, selector: str, snap: Snapshot) -> List[str]:
        if selector == "*":
            return sorted({n for n, _ in snap.entries})
        if selector in self.roles:
            return list(self.roles[selector])
        return [selector]

    def knob_value(self, target: str, knob: str):
        return self.registry[target].values[knob]


def natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


@dataclass
class RouteDecision:
    instance: str
    hint: Optional[ControlAction] = None


class Controller:
    def __init__(self, store: Optional[StateStore] = None, default_selector: str = "least_queue_depth",
                 hints: bool = False):
        self.store = store if store is not None else StateStore()
        if default_selector not in SELECTORS:
            raise PolicyError(f"unknown selector {default_selector!r}")
        self.default_selector = default_selector
        self.hints = hints
        self._rr: Dict[str, int] = {}
        self.pending: List[Tuple[Request, MetricPredicate]] = []

    # -- registration ------------------------------------------------------

    def register_agent(self, target: str, knobs: KnobRegistry) -> None:
        if ":" not in target:
            target = agent_target(target)
        if target in self.store.registry:
            raise DuplicateRegistration(target)
        self.store.registry[target] = knobs.copy()

    def register_role(self, role: str, instances: Sequence[str]) -> None:
        self.store.roles[role] = sorted(instances, key=natural_key)

    def install_rule(self, rule: Union[AgentLevelRule, RequestLevelRule]) -> None:
        if isinstance(rule, AgentLevelRule):
            reg = self.store.registry.get(rule.target)
            if reg is None:
                raise UnknownTarget(rule.target)
            if rule.knob not in reg:
                raise UnknownKnob(f"{rule.target}/{rule.knob}")
            if rule.op == "set":
                try:
                    reg.spec(rule.knob).coerce(rule.value)
                except (ValueOutOfRange, ValueError) as e:
                    raise PolicyError(f"rule {rule.id}: {e}") from None
            self.store.agent_rules[rule.id] = rule
        else:
            a = rule.action
            if isinstance(a, RouteTo) and a.selector == "fixed":
                if agent_target(a.instance) not in self.store.registry:
                    raise UnknownTarget(a.instance)
            self.store.request_rules[rule.id] = rule

    def install(self, rules: Iterable[Union[AgentLevelRule, RequestLevelRule]]) -> None:
        for r in rules:
            self.install_rule(r)

    def uninstall_rule(self, rule_id: str) -> None:
        self.store.agent_rules.pop(rule_id, None)
        self.store.request_rules.pop(rule_id, None)

    # -- observation -------------------------------------------------------

    def views(self) -> List[Tuple[float, str]]:
        views = {(ROUTING_WINDOW_MS, "last")}
        for r in self.store.agent_rules.values():
            if isinstance(r.condition, MetricPredicate):
                views.add(r.condition.view)
        for r in self.store.request_rules.values():
            if isinstance(r.action, BlockUntil):
                views.add(r.action.condition.view)
        return sorted(views)

    def _metrics_for(self, view) -> List[str]:
        names = set()
        if view == (ROUTING_WINDOW_MS, "last"):
            names.add("queue_depth")
        for r in self.store.agent_rules.values():
            if isinstance(r.condition, MetricPredicate) and r.condition.view == view:
                names.add(r.condition.metric)
        for r in self.store.request_rules.values():
            if isinstance(r.action, BlockUntil) and r.action.condition.view == view:
                names.add(r.action.condition.metric)
        return sorted(names)

    def refresh(self, plane: MetricsPlane, now: SimTime, kv_residency: Optional[Dict[str, str]] = None) -> None:
        """Centralized poll: one snapshot per (window, aggregation) view the rules need."""
        for view in self.views():
            window, agg = view
            self.store.snapshots[view] = plane.poll(None, self._metrics_for(view), window, now, agg)
        self.store.poll_time = now
        if kv_residency is not None:
            self.store.kv_residency = dict(kv_residency)

    # -- decisions -----------------------------------------------------------

    def tick(self, now: SimTime) -> List[ControlAction]:
        """Evaluate agent-level rules; per knob the lowest-id rule whose condition holds wins."""
        store = self.store
        groups: Dict[Tuple[str, str], List[AgentLevelRule]] = {}
        for rid in sorted(store.agent_rules):
            r = store.agent_rules[rid]
            groups.setdefault((r.target, r.knob), []).append(r)
        actions: List[ControlAction] = []
        for key, rules in groups.items():
            winner = None
            for r in rules:
                if r.condition == ALWAYS or r.condition.holds(store):
                    winner = r
                    break
            if winner is None:
                continue
            last = store.last_fire.get(key)
            if last is not None and now - last < winner.dwell_ms:
                continue
            reg = store.registry[winner.target]
            spec = reg.spec(winner.knob)
            new = spec.coerce(winner.value) if winner.op == "set" else spec.default
            if reg.values[winner.knob] == new:
                continue
            reg.values[winner.knob] = new
            store.last_fire[key] = now
            store.rule_fire[(winner.id, winner.target)] = now
            actions.append(ControlAction(winner.op, winner.target, winner.knob,
                                         new if winner.op == "set" else None, winner.id))
        return actions

    def _rules_in_order(self) -> List[RequestLevelRule]:
        return [self.store.request_rules[k] for k in sorted(self.store.request_rules)]

    def admit(self, request: Request, entry_role: Optional[str] = None) -> Tuple[Request, Optional[MetricPredicate]]:
        """Apply entry-time request rules: priority rewrite and blocking."""
        prio_done = block = None
        for r in self._rules_in_order():
            if not r.match.matches(request, entry_role):
                continue
            if isinstance(r.action, SetPriority) and prio_done is None:
                prio_done = r
                p = request.priority
                request = replace(request, priority=Priority(p.klass, r.action.level))
            elif isinstance(r.action, BlockUntil) and block is None:
                block = r.action.condition
        if block is not None and not block.holds(self.store):
            self.pending.append((request, block))
            return request, block
        return request, None

    def release(self) -> List[Request]:
        """Requests whose blocking condition now holds, in arrival order."""
        out, keep = [], []
        for req, cond in self.pending:
            (out if cond.holds(self.store) else keep).append((req, cond))
        self.pending = keep
        return [r for r, _ in out]

    def route(self, request: Request, hop_role: str, instances: Optional[Sequence[str]] = None,
              kv_session: Optional[str] = None) -> RouteDecision:
        """Pick an instance for ``hop_role``; ``kv_session`` marks hops that reuse a KV cache."""
        if instances is None:
            instances = self.store.roles.get(hop_role, [])
        instances = sorted(instances, key=natural_key)
        if not instances:
            raise NoInstanceAvailable(hop_role)
        sel = RouteTo(self.default_selector)
        for r in self._rules_in_order():
            if isinstance(r.action, RouteTo) and r.match.matches(request, hop_role):
                sel = r.action
                break
        resident = self.store.kv_residency.get(kv_session) if kv_session else None
        if sel.selector == "fixed":
            chosen = sel.instance
        elif sel.selector == "round_robin":
            i = self._rr.get(hop_role, 0)
            self._rr[hop_role] = i + 1
            chosen = instances[i % len(instances)]
        elif sel.selector == "kv_affinity":
            chosen = resident if resident in instances else instances[0]
        else:
            snap = self.store.snapshots.get((ROUTING_WINDOW_MS, "last"))
            def depth(i):
                return snap.get(i, "queue_depth") or 0.0 if snap is not None else 0.0
            chosen = min(instances, key=lambda i: (depth(i), natural_key(i)))
        hint = None
        if self.hints and kv_session and resident is not None and resident != chosen:
            hint = ControlAction("set", agent_target(chosen), "kv_prefetch", kv_session, "hint")
        return RouteDecision(chosen, hint)


# -- intents -------------------------------------------------------------------

BUSY_HI, BUSY_LO = 0.8, 0.4
BAND_WINDOW_MS = 1000.0
GUARD_WINDOW_MS = 5000.0
_AGG_TOKEN = re.compile(r"^(?P<base>.+?)_(?P<agg>p\d{1,2}|mean|max|min|sum|count|last)(?P<unit>_[a-z]+)?$")


def constraint_metric(c: Constraint) -> Tuple[str, Optional[str]]:
    """``e2e_latency_p90_ms`` scoped ``interactive`` -> (``e2e_latency_interactive_ms``, ``p90``)."""
    m = _AGG_TOKEN.match(c.metric)
    base, agg, unit = (m.group("base"), m.group("agg"), m.group("unit") or "") if m else (c.metric, None, "")
    if not m and c.metric.endswith("_ms"):
        base, unit = c.metric[:-3], "_ms"
    scope = f"_{c.scope}" if c.scope and c.scope != "all" else ""
    return f"{base}{scope}{unit}", agg


def compile_intent(intent: Intent, links: Sequence[Tuple[str, str]],
                   dwell_ms: float = 1000.0) -> List[Union[AgentLevelRule, RequestLevelRule]]:
    """Expand an objective into ordinary rules on the given (src, dst) instance links.

    Explicit rules pass through untouched, ahead of the generated ones.
    """
    if intent.objective is None and not intent.agent_rules and not intent.request_rules:
        raise InvalidIntent("intent needs an objective or explicit rules")
    if intent.objective is not None and intent.objective not in OBJECTIVES:
        raise InvalidIntent(f"unknown objective {intent.objective!r}")
    rules: List[Union[AgentLevelRule, RequestLevelRule]] = list(intent.agent_rules) + list(intent.request_rules)
    n = 0

    def rid(tag: str) -> str:
        nonlocal n
        n += 1
        return f"~{n:04d}-{tag}"

    if intent.objective == "max_throughput":
        for src, dst in links:
            tgt = link_target(src, dst)
            busy = dict(metric="server_busy_fraction", node=dst, aggregation="mean", window_ms=BAND_WINDOW_MS)
            rules.append(AgentLevelRule(rid(f"{tgt}-hi"), tgt, "comm_mode",
                                        MetricPredicate(comparator=">=", threshold=BUSY_HI, **busy),
                                        value=Granularity.batch_all(), dwell_ms=dwell_ms))
            rules.append(AgentLevelRule(rid(f"{tgt}-lo"), tgt, "comm_mode",
                                        MetricPredicate(comparator="<=", threshold=BUSY_LO, **busy),
                                        value=Granularity.token_stream(16), dwell_ms=dwell_ms))
            rules.append(AgentLevelRule(rid(f"{tgt}-mid"), tgt, "comm_mode",
                                        MetricPredicate(comparator="between", threshold=(BUSY_LO, BUSY_HI), **busy),
                                        value=Granularity.per_function(), dwell_ms=dwell_ms))
    elif intent.objective == "min_p90_latency":
        for src, dst in links:
            tgt = link_target(src, dst)
            for c in intent.constraints:
                metric, agg = constraint_metric(c)
                ok = MetricPredicate(metric, "*", c.comparator, float(c.value), agg or "p90",
                                     GUARD_WINDOW_MS, replica_agg="max")
                rules.append(AgentLevelRule(rid(f"{tgt}-guard"), tgt, "comm_mode", ok.negated(),
                                            value=Granularity.batch_all(), dwell_ms=dwell_ms))
            rules.append(AgentLevelRule(rid(f"{tgt}-base"), tgt, "comm_mode", ALWAYS,
                                        value=Granularity.token_stream(16), dwell_ms=dwell_ms))
    return rules


# -- policy files ----------------------------------------------------------------

def _predicate(obj: dict) -> MetricPredicate:
    try:
        thr = obj["threshold"]
        return MetricPredicate(
            metric=obj["metric"], node=obj.get("node", "*"), comparator=obj["comparator"],
            threshold=tuple(thr) if isinstance(thr, list) else thr,
            aggregation=obj.get("aggregation", "mean"), window_ms=obj.get("window_ms", 1000.0),
            replica_agg=obj.get("replica_agg", "mean"),
        )
    except KeyError as e:
        raise PolicyError(f"predicate missing {e}") from None


def _agent_rule(obj: dict) -> AgentLevelRule:
    target, knob = parse_address(obj["target"])
    cond = obj.get("condition", ALWAYS)
    return AgentLevelRule(
        id=str(obj["id"]), target=target, knob=knob,
        condition=cond if cond == ALWAYS else _predicate(cond),
        op=obj.get("action", "set"), value=obj.get("value"), dwell_ms=obj.get("dwell_ms", 1000.0),
    )


def _request_rule(obj: dict) -> RequestLevelRule:
    m = obj.get("match", {})
    match = RequestMatch(m.get("priority_class"), m.get("min_level"), m.get("max_level"),
                         m.get("hop"), m.get("session"))
    a = obj["action"]
    if "route_to" in a:
        sel = a["route_to"]
        action = RouteTo("fixed", sel["fixed"]) if isinstance(sel, dict) else RouteTo(sel)
    elif "block_until" in a:
        action = BlockUntil(_predicate(a["block_until"]))
    elif "set_priority" in a:
        action = SetPriority(int(a["set_priority"]))
    else:
        raise PolicyError(f"unknown request action {a!r}")
    return RequestLevelRule(str(obj["id"]), match, action)


def intent_from_dict(obj: dict) -> Intent:
    allowed = {"objective", "constraints", "rules", "agent_rules", "request_rules"}
    extra = set(obj) - allowed
    if extra:
        raise PolicyError(f"unknown policy field(s): {sorted(extra)}")
    # "rules" mixes both kinds; request-level rules are the ones with a match clause
    mixed = obj.get("rules", [])
    agent = [r for r in mixed if "match" not in r] + list(obj.get("agent_rules", []))
    request = [r for r in mixed if "match" in r] + list(obj.get("request_rules", []))
    try:
        cons = tuple(Constraint(c["metric"], c["comparator"], float(c["value"]), c.get("scope"))
                     for c in obj.get("constraints", []))
        return Intent(
            objective=obj.get("objective"), constraints=cons,
            agent_rules=tuple(_agent_rule(r) for r in agent),
            request_rules=tuple(_request_rule(r) for r in request),
        )
    except KeyError as e:
        raise PolicyError(f"missing field {e}") from None


def load_policy(text: str) -> Intent:
    return intent_from_dict(json.loads(text))
