"""Experiment configuration loaded from JSON.

Every validation failure raises :class:`ConfigError` carrying the dotted path
of the offending field, e.g. ``links[0].dst``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from sdaserve.control import Intent, PolicyError, intent_from_dict
from sdaserve.core import Granularity, InvalidField, Priority, Request
from sdaserve.runtime import Admission, CostModel, ValueOutOfRange
from sdaserve.workload import Fixed, SizeDist, Uniform, parse_dist

LB_MODES = ("none", "post_hoc_transfer", "hints")
DEFAULT_LOAD_POINTS = (0.2, 0.4, 0.6, 0.8, 0.9, 1.0)


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass(frozen=True)
class RoleConfig:
    name: str
    replicas: int = 1
    # None at the entry role: output comes from the workload
    output_tokens: Optional[SizeDist] = None
    functions: int = 1
    max_num_seqs: int = 8
    admission: str = "all"
    context_tokens: int = 0
    cost_overrides: Tuple[Tuple[str, float], ...] = ()


@dataclass(frozen=True)
class LinkConfig:
    src: str
    dst: str
    network_delay_ms: float = 1.0
    pacing_gap_ms: float = 0.0


@dataclass(frozen=True)
class PolicyConfig:
    name: str
    static: Optional[Granularity] = None
    intent: Optional[Intent] = None
    initial_mode: Granularity = field(default_factory=Granularity.token_stream)
    dwell_ms: float = 1000.0

    @property
    def adaptive(self) -> bool:
        return self.intent is not None

    @property
    def start_mode(self) -> Granularity:
        return self.static if self.static is not None else self.initial_mode


@dataclass(frozen=True)
class KvConfig:
    prewarm_on: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    roles: Tuple[RoleConfig, ...] = (
        RoleConfig("developer", functions=4),
        RoleConfig("tester", output_tokens=Fixed(64)),
    )
    links: Tuple[LinkConfig, ...] = (LinkConfig("developer", "tester"),)
    cost: CostModel = CostModel()
    prompt_tokens: SizeDist = Uniform(64, 256)
    output_tokens: SizeDist = Fixed(128)
    interactive_fraction: float = 0.5
    sessions: Optional[int] = None
    slo_ms: Optional[float] = None
    load_points: Tuple[float, ...] = DEFAULT_LOAD_POINTS
    rates: Optional[Tuple[float, ...]] = None
    requests: Optional[Tuple[Request, ...]] = None
    policies: Tuple[PolicyConfig, ...] = (
        PolicyConfig("token_stream", static=Granularity.token_stream(16)),
        PolicyConfig("per_function", static=Granularity.per_function()),
        PolicyConfig("batch_all", static=Granularity.batch_all()),
    )
    load_balancing: str = "post_hoc_transfer"
    kv: KvConfig = KvConfig()
    seed: int = 1
    duration_ms: float = 60_000.0
    drain_ms: float = 30_000.0
    poll_ms: float = 100.0
    tick_ms: float = 100.0
    output: str = "out"

    def __post_init__(self):
        validate(self)

    # -- topology helpers --------------------------------------------------

    def role(self, name: str) -> RoleConfig:
        for r in self.roles:
            if r.name == name:
                return r
        raise KeyError(name)

    def cost_for(self, role: str) -> CostModel:
        return replace(self.cost, **dict(self.role(role).cost_overrides))

    def chain(self) -> List[str]:
        """Role names from the entry role to the final one."""
        nxt = {l.src: l.dst for l in self.links}
        has_in = {l.dst for l in self.links}
        entry = [r.name for r in self.roles if r.name not in has_in]
        out = [entry[0]]
        while out[-1] in nxt:
            out.append(nxt[out[-1]])
        return out

    def link_between(self, src: str, dst: str) -> LinkConfig:
        for l in self.links:
            if l.src == src and l.dst == dst:
                return l
        raise KeyError(f"{src}->{dst}")

    def instance_ids(self, role: str) -> List[str]:
        return [f"{role}-{k}" for k in range(self.role(role).replicas)]

    def policy(self, name: str) -> PolicyConfig:
        for p in self.policies:
            if p.name == name:
                return p
        raise KeyError(name)

    def with_policies(self, *names: str) -> "ExperimentConfig":
        return replace(self, policies=tuple(self.policy(n) for n in names))


def validate(cfg: ExperimentConfig) -> None:
    names = [r.name for r in cfg.roles]
    if not names:
        raise ConfigError("roles", "at least one role is required")
    for i, r in enumerate(cfg.roles):
        if names.count(r.name) > 1:
            raise ConfigError(f"roles[{i}].name", f"duplicate role {r.name!r}")
        if r.replicas < 1:
            raise ConfigError(f"roles[{i}].replicas", "must be >= 1")
        if r.functions < 1:
            raise ConfigError(f"roles[{i}].functions", "must be >= 1")
        if not 1 <= r.max_num_seqs <= 64:
            raise ConfigError(f"roles[{i}].max_num_seqs", "must lie in [1, 64]")
        if r.context_tokens < 0:
            raise ConfigError(f"roles[{i}].context_tokens", "must be >= 0")
        try:
            Admission.parse(r.admission)
        except ValueOutOfRange as e:
            raise ConfigError(f"roles[{i}].admission", str(e)) from None
    for i, l in enumerate(cfg.links):
        for end in ("src", "dst"):
            if getattr(l, end) not in names:
                raise ConfigError(f"links[{i}].{end}", f"unknown role {getattr(l, end)!r}")
        if l.network_delay_ms < 0 or l.pacing_gap_ms < 0:
            raise ConfigError(f"links[{i}]", "delays must be >= 0")
    _check_dag(cfg)
    outs: Dict[str, int] = {}
    ins: Dict[str, int] = {}
    for l in cfg.links:
        outs[l.src] = outs.get(l.src, 0) + 1
        ins[l.dst] = ins.get(l.dst, 0) + 1
    if any(v > 1 for v in outs.values()) or any(v > 1 for v in ins.values()):
        raise ConfigError("links", "only chain pipelines are supported")
    if len(names) - len(cfg.links) != 1:
        raise ConfigError("links", "roles must form a single connected chain")
    for i, r in enumerate(cfg.roles):
        if r.name != cfg.chain()[0] and r.output_tokens is None:
            raise ConfigError(f"roles[{i}].output_tokens", "required for non-entry roles")
    if cfg.load_balancing not in LB_MODES:
        raise ConfigError("load_balancing", f"must be one of {', '.join(LB_MODES)}")
    if cfg.kv.prewarm_on is not None:
        all_ids = {iid for r in cfg.roles for iid in cfg.instance_ids(r.name)}
        if cfg.kv.prewarm_on not in all_ids:
            raise ConfigError("kv.prewarm_on", f"unknown instance {cfg.kv.prewarm_on!r}")
    if not 0 <= cfg.interactive_fraction <= 1:
        raise ConfigError("workload.interactive_fraction", "must lie in [0, 1]")
    if cfg.sessions is not None and cfg.sessions < 1:
        raise ConfigError("workload.sessions", "must be >= 1")
    for i, x in enumerate(cfg.load_points):
        if not x > 0:
            raise ConfigError(f"load_points[{i}]", "must be > 0")
    for i, x in enumerate(cfg.rates or ()):
        if not x > 0:
            raise ConfigError(f"rates[{i}]", "must be > 0")
    for key in ("duration_ms", "poll_ms", "tick_ms"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(key, "must be > 0")
    if cfg.drain_ms < 0:
        raise ConfigError("drain_ms", "must be >= 0")
    pnames = [p.name for p in cfg.policies]
    for i, p in enumerate(cfg.policies):
        if pnames.count(p.name) > 1:
            raise ConfigError(f"policies[{i}].name", f"duplicate policy {p.name!r}")
        if (p.static is None) == (p.intent is None):
            raise ConfigError(f"policies[{i}]", "exactly one of static or adaptive is required")


def _check_dag(cfg: ExperimentConfig) -> None:
    adj: Dict[str, List[str]] = {r.name: [] for r in cfg.roles}
    for l in cfg.links:
        adj[l.src].append(l.dst)
    state: Dict[str, int] = {}

    def visit(n: str) -> None:
        state[n] = 1
        for m in adj[n]:
            if state.get(m) == 1:
                raise ConfigError("links", f"cycle through {m!r}")
            if m not in state:
                visit(m)
        state[n] = 2

    for n in adj:
        if n not in state:
            visit(n)


# -- JSON loading ----------------------------------------------------------------

def _take(obj: dict, path: str, allowed: Tuple[str, ...]) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(path or "<root>", "expected an object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


def _dist(obj, path: str) -> SizeDist:
    try:
        d = parse_dist(obj)
    except (ValueError, TypeError) as e:
        raise ConfigError(path, str(e)) from None
    lo = d.n if isinstance(d, Fixed) else d.lo
    if lo < 1 or (isinstance(d, Uniform) and d.hi < d.lo):
        raise ConfigError(path, "sizes must be >= 1 with lo <= hi")
    return d


def _gran(obj, path: str) -> Granularity:
    try:
        return Granularity.parse(obj)
    except InvalidField as e:
        raise ConfigError(path, e.reason) from None


def _num(obj: dict, key: str, path: str, default, kind=float):
    if key not in obj:
        return default
    v = obj[key]
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}{key}", "expected a number")
    if kind is int and not float(v).is_integer():
        raise ConfigError(f"{path}{key}", "expected an integer")
    return kind(v)


def _role(obj: dict, i: int) -> RoleConfig:
    p = f"roles[{i}]"
    _take(obj, p, ("name", "replicas", "output_tokens", "functions", "max_num_seqs", "admission",
                   "context_tokens", "cost"))
    if "name" not in obj:
        raise ConfigError(f"{p}.name", "required")
    over = obj.get("cost", {})
    _take(over, f"{p}.cost", _COST)
    try:
        CostModel(**{k: float(v) for k, v in over.items()})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{p}.cost", str(e)) from None
    return RoleConfig(
        name=str(obj["name"]),
        replicas=_num(obj, "replicas", p + ".", 1, int),
        output_tokens=_dist(obj["output_tokens"], f"{p}.output_tokens") if "output_tokens" in obj else None,
        functions=_num(obj, "functions", p + ".", 1, int),
        max_num_seqs=_num(obj, "max_num_seqs", p + ".", 8, int),
        admission=str(obj.get("admission", "all")),
        context_tokens=_num(obj, "context_tokens", p + ".", 0, int),
        cost_overrides=tuple(sorted((k, float(v)) for k, v in over.items())),
    )


def _link(obj, i: int) -> LinkConfig:
    p = f"links[{i}]"
    if isinstance(obj, list) and len(obj) == 2:
        return LinkConfig(str(obj[0]), str(obj[1]))
    _take(obj, p, ("src", "dst", "network_delay_ms", "pacing_gap_ms"))
    for k in ("src", "dst"):
        if k not in obj:
            raise ConfigError(f"{p}.{k}", "required")
    return LinkConfig(str(obj["src"]), str(obj["dst"]),
                      _num(obj, "network_delay_ms", p + ".", 1.0), _num(obj, "pacing_gap_ms", p + ".", 0.0))


def _policy(obj: dict, i: int) -> PolicyConfig:
    p = f"policies[{i}]"
    _take(obj, p, ("name", "static", "adaptive", "initial_mode", "dwell_ms"))
    static = _gran(obj["static"], f"{p}.static") if "static" in obj else None
    intent = None
    if "adaptive" in obj:
        try:
            intent = intent_from_dict(obj["adaptive"])
        except (PolicyError, ValueError, TypeError) as e:
            raise ConfigError(f"{p}.adaptive", str(e)) from None
    name = obj.get("name") or (str(static) if static is not None else f"adaptive{i}")
    init = _gran(obj.get("initial_mode", "token_stream(16)"), f"{p}.initial_mode")
    return PolicyConfig(str(name), static, intent, init, _num(obj, "dwell_ms", p + ".", 1000.0))


def _request(obj: dict, i: int) -> Request:
    p = f"requests[{i}]"
    _take(obj, p, ("arrival_ms", "prompt_tokens", "output_tokens", "priority", "level", "session", "slo_ms"))
    try:
        klass = obj.get("priority", "interactive")
        prio = Priority.interactive() if klass == "interactive" else Priority.background()
        if "level" in obj:
            prio = Priority(prio.klass, int(obj["level"]))
        arrival = float(obj.get("arrival_ms", 0.0))
        slo = obj.get("slo_ms")
        return Request(i, arrival, prio, int(obj["prompt_tokens"]), int(obj["output_tokens"]),
                       arrival + slo if slo is not None else None, obj.get("session"))
    except KeyError as e:
        raise ConfigError(f"{p}.{e.args[0]}", "required") from None
    except InvalidField as e:
        raise ConfigError(f"{p}.{e.name}", e.reason) from None


_TOP = ("name", "roles", "links", "cost", "workload", "load_points", "rates", "requests", "policies",
        "load_balancing", "kv", "seed", "duration_ms", "drain_ms", "poll_ms", "tick_ms", "output")
_COST = tuple(f.name for f in fields(CostModel))


def config_from_dict(obj: dict) -> ExperimentConfig:
    _take(obj, "", _TOP)
    kw: Dict[str, Any] = {}
    if "name" in obj:
        kw["name"] = str(obj["name"])
    if "roles" in obj:
        kw["roles"] = tuple(_role(r, i) for i, r in enumerate(obj["roles"]))
    if "links" in obj:
        kw["links"] = tuple(_link(l, i) for i, l in enumerate(obj["links"]))
    if "cost" in obj:
        _take(obj["cost"], "cost", _COST)
        try:
            kw["cost"] = CostModel(**{k: float(v) for k, v in obj["cost"].items()})
        except ValueError as e:
            raise ConfigError("cost", str(e)) from None
    w = obj.get("workload", {})
    _take(w, "workload", ("prompt_tokens", "output_tokens", "interactive_fraction", "sessions", "slo_ms"))
    if "prompt_tokens" in w:
        kw["prompt_tokens"] = _dist(w["prompt_tokens"], "workload.prompt_tokens")
    if "output_tokens" in w:
        kw["output_tokens"] = _dist(w["output_tokens"], "workload.output_tokens")
    if "interactive_fraction" in w:
        kw["interactive_fraction"] = _num(w, "interactive_fraction", "workload.", 0.5)
    if "sessions" in w:
        kw["sessions"] = _num(w, "sessions", "workload.", None, int)
    if "slo_ms" in w:
        kw["slo_ms"] = _num(w, "slo_ms", "workload.", None)
    for key in ("load_points", "rates"):
        if key in obj:
            vals = obj[key]
            if not isinstance(vals, list):
                raise ConfigError(key, "expected a list")
            kw[key] = tuple(_num({key: v}, key, "", 0.0) for v in vals)
    if "requests" in obj:
        kw["requests"] = tuple(_request(r, i) for i, r in enumerate(obj["requests"]))
    if "policies" in obj:
        kw["policies"] = tuple(_policy(p, i) for i, p in enumerate(obj["policies"]))
    if "load_balancing" in obj:
        kw["load_balancing"] = str(obj["load_balancing"])
    if "kv" in obj:
        _take(obj["kv"], "kv", ("prewarm_on",))
        kw["kv"] = KvConfig(obj["kv"].get("prewarm_on"))
    if "seed" in obj:
        kw["seed"] = _num(obj, "seed", "", 1, int)
    for key in ("duration_ms", "drain_ms", "poll_ms", "tick_ms"):
        if key in obj:
            kw[key] = _num(obj, key, "", 0.0)
    if "output" in obj:
        kw["output"] = str(obj["output"])
    return ExperimentConfig(**kw)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"<line {e.lineno}>", e.msg) from None
    return config_from_dict(obj)
