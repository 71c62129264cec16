"""Deterministic replay of booking streams under three strategies.

``greedy`` books each request on its best capacity-respecting chain and
never reroutes. ``online`` feeds every message through the service engine.
``offline`` sees all requests at once and solves one model over all their
enumerated chains.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from ..assignment import AssignConfig, Instrumentation, NO_CAPACITY, NOT_ROUTABLE, ROUTED
from ..model import NetworkState, Request
from ..optimize import build_model, solve
from ..search import SearchLimits, enumerate_chains, find_best_chain
from ..service.engine import ChainService
from ..service.schema import Message, MessageKind, RequestIn
from ..validation import CapacityMode

STRATEGIES = ("greedy", "online", "offline")


@dataclass
class RunResult:
    strategy: str
    bookings: int = 0
    routed: int = 0
    outcomes: Counter = field(default_factory=Counter)
    stages: Counter = field(default_factory=Counter)
    functions: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    truncated: bool = False
    optimal: Optional[bool] = None
    routed_ids: List[str] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.routed / self.bookings if self.bookings else 0.0

    def stage_share(self, stages: Iterable[str]) -> float:
        total = sum(self.stages.values())
        return sum(self.stages[s] for s in stages) / total if total else 0.0


def _bootstrap(messages: List[Message]) -> tuple:
    """Service with the init message applied, plus the remaining messages."""
    svc = ChainService()
    rest = list(messages)
    if rest and rest[0].kind is MessageKind.INIT_STATE:
        svc.process([rest.pop(0)])
    return svc, rest


def _bookings(svc: ChainService, messages: Iterable[Message]) -> List[Request]:
    out = []
    for m in messages:
        if m.kind is MessageKind.BOOK_REQUEST:
            out.append(RequestIn.model_validate(m.payload).to_model(svc.clock, svc.products))
    return out


def replay_greedy(messages: List[Message], limits: Optional[SearchLimits] = None) -> RunResult:
    svc, rest = _bootstrap(messages)
    st: NetworkState = svc.state
    res = RunResult("greedy")
    instr = Instrumentation()
    t0 = time.perf_counter()
    for r in _bookings(svc, rest):
        res.bookings += 1
        st.add_request(r)
        with instr.timer("best-chain"):
            out = find_best_chain(r, st, CapacityMode.RESPECT, limits or SearchLimits())
        res.truncated |= out.truncated and out.best is None
        if out.best is not None:
            st.assign(r.id, out.best)
            res.routed += 1
            res.routed_ids.append(r.id)
            res.outcomes[ROUTED] += 1
        else:
            res.outcomes[NO_CAPACITY if out.dominant_reason() == "capacity" else NOT_ROUTABLE] += 1
    res.seconds = time.perf_counter() - t0
    res.functions = dict(instr.seconds)
    return res


def replay_online(messages: List[Message], config: Optional[AssignConfig] = None) -> RunResult:
    svc = ChainService(config=config)
    res = RunResult("online")
    t0 = time.perf_counter()
    for m in messages:
        svc.process([m])
    res.seconds = time.perf_counter() - t0
    st = svc.state
    booked = [rid for rid, *_ in svc.outcome_log]
    res.bookings = len(dict.fromkeys(booked))
    res.routed_ids = sorted(rid for rid in st.chains if rid in st.requests)
    res.routed = len(res.routed_ids)
    res.outcomes = Counter(outcome for _, outcome, _ in svc.outcome_log)
    res.stages = Counter(svc.stats.stages)
    res.functions = dict(svc.instr.seconds)
    res.truncated = svc.stats.outcomes.get("timeout-partial", 0) > 0
    return res


def replay_offline(
    messages: List[Message], limits: Optional[SearchLimits] = None, budget: float = 300.0, rank_budget: Optional[float] = 2.0
) -> RunResult:
    svc, rest = _bootstrap(messages)
    st = svc.state
    res = RunResult("offline")
    instr = Instrumentation()
    t0 = time.perf_counter()
    reqs = _bookings(svc, rest)
    candidates = {}
    for r in reqs:
        st.add_request(r)
    for r in reqs:
        with instr.timer("enumerate-all"):
            out = enumerate_chains(r, st, CapacityMode.ISOLATED, limits or SearchLimits())
        res.truncated |= out.truncated
        candidates[r.id] = out.chains
    usable = [r for r in reqs if candidates[r.id]]
    with instr.timer("model-build"):
        model = build_model(usable, [], {r.id: candidates[r.id] for r in usable}, st)
    with instr.timer("model-solve"):
        a = solve(model, budget, rank_budget)
    res.bookings = len(reqs)
    res.routed = len(a.routed)
    res.routed_ids = sorted(a.routed)
    res.optimal = a.throughput_optimal
    res.outcomes = Counter({ROUTED: res.routed, NOT_ROUTABLE: len(reqs) - len(usable), NO_CAPACITY: len(usable) - res.routed})
    res.seconds = time.perf_counter() - t0
    res.functions = dict(instr.seconds)
    return res


def replay(messages: List[Message], strategy: str, **kwargs) -> RunResult:
    if strategy == "greedy":
        return replay_greedy(messages, **kwargs)
    if strategy == "online":
        return replay_online(messages, **kwargs)
    if strategy == "offline":
        return replay_offline(messages, **kwargs)
    raise ValueError(f"unknown strategy {strategy!r}")
