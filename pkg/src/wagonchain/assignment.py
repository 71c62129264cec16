"""Online chain assignment with local re-optimization.

A call walks four stages and stops at the first one whose optimization
routes every new request:

1. best chain per request in isolation (decides routable at all),
2. best chain per still-unrouted request respecting current capacities,
3. all chains per request respecting capacities,
4. all chains for the neighborhood (requests sharing a segment with any
   candidate) and one optimization over requests plus neighborhood.
"""

from __future__ import annotations

import hashlib
import logging
import time
from collections import Counter, defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

from .model import NetworkState, Request, StatusKind, TransportChain
from .optimize import Assignment, ModelError, build_model, solve
from .search import SearchLimits, SearchOutcome, TieBreak, enumerate_chains, find_best_chain, tiebreak_key
from .validation import CapacityMode, adjusted_segment_capacity, validate_chain

log = logging.getLogger(__name__)

ISOLATED_BFS = "isolated-bfs"
CAPACITY_BFS = "capacity-bfs"
ALL_CHAINS = "all-chains"
NEIGHBORHOOD = "neighborhood"
STAGES = (ISOLATED_BFS, CAPACITY_BFS, ALL_CHAINS, NEIGHBORHOOD)

ROUTED = "routed"
NOT_ROUTABLE = "not-routable"
NO_CAPACITY = "no-capacity"
TIMEOUT_PARTIAL = "timeout-partial"
OUTCOMES = (ROUTED, NOT_ROUTABLE, NO_CAPACITY, TIMEOUT_PARTIAL)


class Instrumentation:
    """Call counters and cumulative wall time per engine function."""

    def __init__(self) -> None:
        self.calls: Counter = Counter()
        self.seconds: Dict[str, float] = defaultdict(float)

    @contextmanager
    def timer(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.calls[name] += 1
            self.seconds[name] += time.perf_counter() - t0

    def reset(self) -> None:
        self.calls.clear()
        self.seconds.clear()


@dataclass
class AssignConfig:
    time_budget: float = 5.0
    limits: SearchLimits = field(default_factory=SearchLimits)
    key: TieBreak = field(default_factory=TieBreak)
    neighborhood_depth: int = 1
    solver_budget: float = 5.0
    use_cache: bool = True
    pickup_bucket: int = 15


@dataclass
class RequestResult:
    request: str
    outcome: str
    chain: Optional[TransportChain] = None
    stage: Optional[str] = None
    reason: Optional[str] = None


@dataclass
class AssignmentOutcome:
    results: Dict[str, RequestResult] = field(default_factory=dict)
    stage: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)
    rerouted: Dict[str, Tuple[TransportChain, TransportChain]] = field(default_factory=dict)
    searches: Counter = field(default_factory=Counter)
    models: int = 0
    capacity_violations: List[str] = field(default_factory=list)
    dropped_fixed: List[str] = field(default_factory=list)
    truncated: bool = False

    def histogram(self) -> Counter:
        return Counter(r.outcome for r in self.results.values())


# -- cache -----------------------------------------------------------------


class ChainCache:
    """Enumerated chains (capacity-blind) keyed by request similarity.

    Entries are tagged with the network version they were computed on and
    never served once the network changed. Served chains are re-validated
    for the asking request; capacities are checked by the caller's mode.
    """

    def __init__(self, pickup_bucket: int = 15):
        self.pickup_bucket = pickup_bucket
        self._entries: Dict[tuple, Tuple[int, List[TransportChain], frozenset]] = {}
        self.hits = 0
        self.misses = 0

    def key(self, r: Request, state: NetworkState) -> tuple:
        attrs = sorted(state.restricted_attributes)
        digest = hashlib.sha1(repr([(a, r.attribute(a)) for a in attrs]).encode()).hexdigest()[:16]
        prefix = hashlib.sha1("|".join(r.required_prefix).encode()).hexdigest()[:16]
        return (
            state.group(r.origin),
            state.group(r.destination),
            r.pickup_earliest // self.pickup_bucket,
            r.delivery_latest,
            digest,
            prefix,
        )

    def lookup(self, r: Request, state: NetworkState) -> Optional[Tuple[List[TransportChain], frozenset]]:
        hit = self._entries.get(self.key(r, state))
        if hit is None or hit[0] != state.network_version:
            self.misses += 1
            return None
        self.hits += 1
        return hit[1], hit[2]

    def store(self, r: Request, state: NetworkState, chains: Sequence[TransportChain], flags: Iterable[str] = ()) -> None:
        self._entries[self.key(r, state)] = (state.network_version, list(chains), frozenset(flags))

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


# -- neighborhood ---------------------------------------------------------


def neighborhood(chains: Iterable[TransportChain], state: NetworkState, exclude: Iterable[str] = ()) -> List[str]:
    """Assigned, non-manual requests whose chain shares a segment with ``chains``."""
    excluded = set(exclude)
    segments: Set[str] = set()
    for c in chains:
        for bid in c.blocks:
            b = state.blocks.get(bid)
            if b is not None:
                segments.update(b.segments)
    found: Set[str] = set()
    for sid in segments:
        for bid in state.blocks_on_segment(sid):
            for rid in state.holders(bid):
                if rid in excluded or rid in found:
                    continue
                st = state.status.get(rid)
                if st is None or st.kind is not StatusKind.ASSIGNED or state.requests[rid].manual:
                    continue
                found.add(rid)
    return sorted(found)


# -- engine ---------------------------------------------------------------


class Assigner:
    """Runs assignment calls against one state; owns cache and instrumentation."""

    def __init__(
        self,
        state: NetworkState,
        config: Optional[AssignConfig] = None,
        cache: Optional[ChainCache] = None,
        instrumentation: Optional[Instrumentation] = None,
    ):
        self.state = state
        self.config = config or AssignConfig()
        self.cache = cache if cache is not None else (ChainCache(self.config.pickup_bucket) if self.config.use_cache else None)
        self.instr = instrumentation or Instrumentation()

    # searches --------------------------------------------------------

    def best(self, r: Request, mode: CapacityMode, deadline: float) -> SearchOutcome:
        cfg = self.config
        with self.instr.timer("best-chain"):
            return find_best_chain(r, self.state, mode, cfg.limits, cfg.key, deadline=min(deadline, time.perf_counter() + cfg.limits.time_budget))

    def all_chains(self, r: Request, mode: CapacityMode, deadline: float) -> Tuple[List[TransportChain], Set[str]]:
        cfg = self.config
        dl = min(deadline, time.perf_counter() + cfg.limits.time_budget)
        with self.instr.timer("enumerate-all"):
            if self.cache is None:
                out = enumerate_chains(r, self.state, mode, cfg.limits, cfg.key, deadline=dl)
                return out.chains, out.flags
            hit = self.cache.lookup(r, self.state)
            if hit is None:
                out = enumerate_chains(r, self.state, CapacityMode.IGNORE, cfg.limits, cfg.key, deadline=dl)
                if "time-limit" not in out.flags:
                    self.cache.store(r, self.state, out.chains, out.flags)
                chains, flags = out.chains, set(out.flags)
            else:
                chains, flags = hit[0], set(hit[1])
            if mode is CapacityMode.IGNORE:
                return [c for c in chains if validate_chain(r, c, self.state, mode).ok], flags
            return [c for c in chains if validate_chain(r, c, self.state, mode).ok], flags

    # optimization ----------------------------------------------------

    def try_optimization(
        self, requests: Sequence[Request], candidates: Dict[str, List[TransportChain]], budget: Optional[float] = None
    ) -> Tuple[List[str], List[str], Optional[Assignment]]:
        """Run the model for ``requests``; returns (routed, unrouted, assignment)."""
        if not requests:
            return [], [], None
        st = self.state
        fixed = [r.id for r in requests if r.id in st.chains and st.status[r.id].kind is StatusKind.ASSIGNED]
        ranked = {rid: self._ranked(chains) for rid, chains in candidates.items()}
        try:
            with self.instr.timer("model-build"):
                model = build_model(requests, fixed, ranked, st)
            with self.instr.timer("model-solve"):
                a = solve(model, self.config.solver_budget if budget is None else budget)
        except (ModelError, RuntimeError) as exc:
            log.warning("optimization failed: %s", exc)
            return [], [r.id for r in requests], None
        return sorted(a.routed), list(a.unrouted), a

    def _ranked(self, chains: Iterable[TransportChain]) -> List[TransportChain]:
        uniq = list(dict.fromkeys(chains))
        return sorted(uniq, key=lambda c: tiebreak_key(c, self.state, self.config.key))

    # the algorithm ---------------------------------------------------

    def assign(self, new_requests: Sequence[Request], time_budget: Optional[float] = None) -> AssignmentOutcome:
        st = self.state
        cfg = self.config
        t_start = time.perf_counter()
        deadline = t_start + (cfg.time_budget if time_budget is None else time_budget)
        out = AssignmentOutcome()
        for r in new_requests:
            if r.manual:
                raise ValueError(f"request {r.id} is manual")
            if r.id not in st.requests:
                st.add_request(r)

        R: List[Request] = []
        C: Dict[str, List[TransportChain]] = {}
        isolated: Dict[str, TransportChain] = {}
        best: Optional[Assignment] = None
        best_requests: List[Request] = []

        def expired() -> bool:
            return time.perf_counter() >= deadline

        def attempt(reqs: List[Request], stage: str) -> bool:
            nonlocal best, best_requests
            out.models += 1
            routed, unrouted, a = self.try_optimization(reqs, {r.id: C[r.id] for r in reqs})
            if a is not None and (best is None or _weight(a, reqs) >= _weight(best, best_requests)):
                best, best_requests = a, reqs
            return a is not None and not [rid for rid in unrouted if rid in {r.id for r in R}]

        def finish(stage: str, timed_out: bool = False) -> AssignmentOutcome:
            out.stage = stage
            out.timings["total"] = time.perf_counter() - t_start
            self._apply(best, best_requests, R, out, stage, isolated, timed_out)
            return out

        # step 1: best chain in isolation
        t0 = time.perf_counter()
        for r in new_requests:
            if expired():
                out.results[r.id] = RequestResult(r.id, TIMEOUT_PARTIAL)
                out.truncated = True
                continue
            res = self.best(r, CapacityMode.ISOLATED, deadline)
            out.searches["best-isolated"] += 1
            if res.best is None:
                out.results[r.id] = RequestResult(r.id, NOT_ROUTABLE, reason=_reason(res))
                if r.id not in st.chains:
                    st.status[r.id] = _rejected(NOT_ROUTABLE)
                continue
            isolated[r.id] = res.best
            C[r.id] = [res.best]
            R.append(r)
        if not R:
            out.timings[ISOLATED_BFS] = time.perf_counter() - t0
            return finish(ISOLATED_BFS)
        if attempt(R, ISOLATED_BFS):
            out.timings[ISOLATED_BFS] = time.perf_counter() - t0
            return finish(ISOLATED_BFS)
        out.timings[ISOLATED_BFS] = time.perf_counter() - t0
        if expired():
            return finish(ISOLATED_BFS, True)

        # step 2: best chain respecting capacities for the unrouted ones
        t0 = time.perf_counter()
        neighborhood_search = True
        unrouted = [r for r in R if best is None or r.id not in best.routed]
        for r in unrouted:
            res = self.best(r, CapacityMode.RESPECT, deadline)
            out.searches["best-respect"] += 1
            if res.best is None:
                neighborhood_search = False
                break
            if res.best not in C[r.id]:
                C[r.id].append(res.best)
        if neighborhood_search:
            if attempt(R, CAPACITY_BFS):
                out.timings[CAPACITY_BFS] = time.perf_counter() - t0
                return finish(CAPACITY_BFS)
        out.timings[CAPACITY_BFS] = time.perf_counter() - t0
        if expired():
            return finish(CAPACITY_BFS, True)

        # step 3: all chains respecting capacities
        t0 = time.perf_counter()
        for r in R:
            chains, flags = self.all_chains(r, CapacityMode.RESPECT, deadline)
            out.searches["enumerate"] += 1
            out.truncated |= "time-limit" in flags
            for c in chains:
                if c not in C[r.id]:
                    C[r.id].append(c)
        if neighborhood_search:
            if attempt(R, ALL_CHAINS):
                out.timings[ALL_CHAINS] = time.perf_counter() - t0
                return finish(ALL_CHAINS)
        out.timings[ALL_CHAINS] = time.perf_counter() - t0
        if expired():
            return finish(ALL_CHAINS, True)

        # step 4: optimize including the neighborhood
        t0 = time.perf_counter()
        own = {r.id for r in R}
        members: List[str] = []
        frontier_chains = [c for r in R for c in C[r.id]]
        for _ in range(max(cfg.neighborhood_depth, 0)):
            ring = neighborhood(frontier_chains, st, exclude=own | set(members))
            if not ring:
                break
            frontier_chains = []
            for rid in ring:
                q = st.requests[rid]
                # members compete jointly, so only planned capacity screens here
                chains, flags = self.all_chains(q, CapacityMode.ISOLATED, deadline)
                out.searches["enumerate-neighborhood"] += 1
                out.truncated |= "time-limit" in flags
                C[rid] = list(chains)
                frontier_chains.extend(chains)
                members.append(rid)
                if expired():
                    break
            if expired():
                break
        reqs = R + [st.requests[rid] for rid in members]
        attempt(reqs, NEIGHBORHOOD)
        out.timings[NEIGHBORHOOD] = time.perf_counter() - t0
        return finish(NEIGHBORHOOD, expired())

    def _apply(
        self,
        a: Optional[Assignment],
        reqs: List[Request],
        R: List[Request],
        out: AssignmentOutcome,
        stage: str,
        isolated: Dict[str, TransportChain],
        timed_out: bool,
    ) -> None:
        st = self.state
        routed = dict(a.routed) if a is not None else {}
        changes = []
        for r in reqs:
            if r.id in routed:
                new = routed[r.id]
                old = st.chains.get(r.id)
                if old != new:
                    changes.append((r.id, old, new))
            elif r.id in st.chains and st.status[r.id].kind is StatusKind.ASSIGNED:
                out.dropped_fixed.append(r.id)
        touched = sorted({sid for _, _, new in changes for bid in new.flexible for sid in st.blocks[bid].segments})
        before = {sid: adjusted_segment_capacity(sid, st) for sid in touched}
        for rid, old, new in changes:
            st.assign(rid, new)
            if old is not None:
                out.rerouted[rid] = (old, new)
        for sid in touched:
            occ_w = occ_l = 0
            for bid in st.blocks_on_segment(sid):
                b = st.blocks[bid]
                u = st.block_usage.get(bid)
                w = (u.weight if u else 0) + b.manual_utilization.weight
                l = (u.length if u else 0) + b.manual_utilization.length
                occ_w += max(b.reservation.weight, w)
                occ_l += max(b.reservation.length, l)
            cap = before[sid]
            if occ_w > cap.weight or occ_l > cap.length:
                out.capacity_violations.append(sid)
        for r in R:
            if r.id in routed:
                out.results[r.id] = RequestResult(r.id, ROUTED, routed[r.id], stage)
            elif timed_out:
                out.results[r.id] = RequestResult(r.id, TIMEOUT_PARTIAL, stage=stage)
                out.truncated = True
            else:
                out.results[r.id] = RequestResult(r.id, NO_CAPACITY, stage=stage, reason="capacity")
                if r.id not in st.chains:
                    st.status[r.id] = _rejected(NO_CAPACITY)


def _weight(a: Assignment, reqs: Sequence[Request]) -> int:
    prio = {r.id: r.priority for r in reqs}
    return sum(prio[rid] for rid in a.routed)


def _reason(res: SearchOutcome) -> str:
    if res.flags:
        return ",".join(sorted(res.flags))
    return res.dominant_reason() or "no-chain"


def _rejected(outcome: str):
    from .model import RequestStatus

    return RequestStatus(StatusKind.REJECTED, outcome)


def try_optimization(
    requests: Sequence[Request],
    candidates: Dict[str, List[TransportChain]],
    state: NetworkState,
    config: Optional[AssignConfig] = None,
) -> Tuple[List[str], List[str], Optional[Assignment]]:
    return Assigner(state, config).try_optimization(requests, candidates)


def assign(
    new_requests: Sequence[Request],
    state: NetworkState,
    config: Optional[AssignConfig] = None,
) -> AssignmentOutcome:
    return Assigner(state, config).assign(new_requests)
