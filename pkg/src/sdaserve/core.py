"""Shared domain vocabulary: priorities, requests, granularities and envelopes.

Time is a plain ``float`` of milliseconds throughout the package.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Optional, Tuple

SimTime = float

INTERACTIVE_DEFAULT_LEVEL = 4
BACKGROUND_DEFAULT_LEVEL = 0


class InvalidField(ValueError):
    def __init__(self, name: str, reason: str):
        super().__init__(f"{name}: {reason}")
        self.name = name
        self.reason = reason


class PriorityClass(enum.IntEnum):
    BACKGROUND = 0
    INTERACTIVE = 1


@dataclass(frozen=True, order=True)
class Priority:
    """Ordered by (class, level); higher compares as more urgent."""

    klass: PriorityClass = PriorityClass.BACKGROUND
    level: int = BACKGROUND_DEFAULT_LEVEL

    def __post_init__(self):
        if not 0 <= self.level <= 7:
            raise InvalidField("level", f"{self.level} outside [0, 7]")

    @classmethod
    def interactive(cls, level: int = INTERACTIVE_DEFAULT_LEVEL) -> "Priority":
        return cls(PriorityClass.INTERACTIVE, level)

    @classmethod
    def background(cls, level: int = BACKGROUND_DEFAULT_LEVEL) -> "Priority":
        return cls(PriorityClass.BACKGROUND, level)

    @property
    def is_interactive(self) -> bool:
        return self.klass == PriorityClass.INTERACTIVE

    def __str__(self) -> str:
        return f"{self.klass.name.lower()}:{self.level}"


@dataclass(frozen=True)
class Request:
    id: int
    arrival: SimTime
    priority: Priority
    prompt_tokens: int
    output_tokens: int
    slo_deadline: Optional[SimTime] = None
    session: Optional[str] = None
    hops: Tuple[str, ...] = ()

    @property
    def session_key(self) -> str:
        return self.session if self.session is not None else f"req-{self.id}"


def validate_request(r: Request) -> None:
    """Raise :class:`InvalidField` naming the first violated field."""
    if r.arrival < 0:
        raise InvalidField("arrival", "must be non-negative")
    if not isinstance(r.prompt_tokens, int) or r.prompt_tokens < 1:
        raise InvalidField("prompt_tokens", "must be an integer >= 1")
    if not isinstance(r.output_tokens, int) or r.output_tokens < 1:
        raise InvalidField("output_tokens", "must be an integer >= 1")
    if r.slo_deadline is not None and not r.slo_deadline > r.arrival:
        raise InvalidField("slo_deadline", "must exceed arrival")


class GranularityKind(str, enum.Enum):
    TOKEN_STREAM = "token_stream"
    PER_FUNCTION = "per_function"
    BATCH_ALL = "batch_all"


DEFAULT_CHUNK_TOKENS = 16

_GRAN_RE = re.compile(r"^\s*(token_stream|stream|per_function|function|batch_all|batch)\s*(?:\(\s*(\d+)\s*\))?\s*$")
_ALIASES = {"stream": "token_stream", "function": "per_function", "batch": "batch_all"}


@dataclass(frozen=True)
class Granularity:
    kind: GranularityKind
    chunk_tokens: int = DEFAULT_CHUNK_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "kind", GranularityKind(self.kind))
        if self.kind == GranularityKind.TOKEN_STREAM and self.chunk_tokens < 1:
            raise InvalidField("chunk_tokens", "must be >= 1 for token_stream")

    @classmethod
    def token_stream(cls, chunk_tokens: int = DEFAULT_CHUNK_TOKENS) -> "Granularity":
        return cls(GranularityKind.TOKEN_STREAM, chunk_tokens)

    @classmethod
    def per_function(cls) -> "Granularity":
        return cls(GranularityKind.PER_FUNCTION)

    @classmethod
    def batch_all(cls) -> "Granularity":
        return cls(GranularityKind.BATCH_ALL)

    @classmethod
    def parse(cls, text) -> "Granularity":
        """Accepts ``"token_stream(16)"``, ``"per_function"``, ``"batch"`` and the like."""
        if isinstance(text, Granularity):
            return text
        m = _GRAN_RE.match(str(text))
        if not m:
            raise InvalidField("comm_mode", f"cannot parse granularity {text!r}")
        kind = _ALIASES.get(m.group(1), m.group(1))
        if m.group(2) is not None:
            if kind != "token_stream":
                raise InvalidField("comm_mode", f"{kind} takes no chunk size")
            return cls(GranularityKind(kind), int(m.group(2)))
        return cls(GranularityKind(kind))

    def __str__(self) -> str:
        if self.kind == GranularityKind.TOKEN_STREAM:
            return f"token_stream({self.chunk_tokens})"
        return self.kind.value


@dataclass(frozen=True)
class MessageEnvelope:
    id: int
    request_id: int
    link: Tuple[str, str]
    payload_tokens: int
    seq: int
    is_final: bool
    priority: Priority
    created: SimTime
    # kind of the granularity in force when the envelope was cut
    kind: GranularityKind = field(default=GranularityKind.BATCH_ALL)

    def __post_init__(self):
        # zero payload only for a bare terminator
        if self.payload_tokens < 0 or (self.payload_tokens == 0 and not self.is_final):
            raise InvalidField("payload_tokens", "must be positive")
