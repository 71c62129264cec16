"""Best-chain search and bounded enumeration of valid chains.

Both routines are best-first searches over blocks ordered by the
tie-break key. ``find_best_chain`` keeps a single label per block, which
is fast but blind to geographic loops; when its optimum loops, the
enumeration routine (which carries the visited station groups along every
partial chain) is run until its first chain.
"""

from __future__ import annotations

import heapq
import time
from bisect import bisect_left
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from .model import Block, BlockKind, ConnectionKind, NetworkState, Request, TransportChain
from .validation import (
    CapacityMode,
    CapacityView,
    Reason,
    loop_positions,
    transfer_issue,
    validate_chain,
    visited_groups,
)

TIME_CHECK_EVERY = 1024

TIME_LIMIT = "time-limit"
DEPTH_LIMIT = "depth-limit"
FRONTIER_LIMIT = "frontier-limit"
COUNT_LIMIT = "count-limit"

COMPONENTS = ("arrival", "departure", "blocks", "intermediate")
ARRIVAL_FIRST = COMPONENTS
DEPARTURE_FIRST = ("departure", "arrival", "blocks", "intermediate")


@dataclass(frozen=True)
class SearchLimits:
    time_budget: float = 5.0
    max_blocks: int = 7
    max_frontier: int = 10_000_000
    max_chains: int = 100

    def __post_init__(self) -> None:
        if min(self.time_budget, self.max_blocks, self.max_frontier, self.max_chains) <= 0:
            raise ValueError("search limits must be positive")


@dataclass(frozen=True)
class TieBreak:
    """Component order of the lexicographic chain key.

    The block-id sequence is always appended as the final component.
    ``blocks`` has to precede ``intermediate`` so that keys of partial
    chains bound the keys of their completions.
    """

    order: Tuple[str, ...] = ARRIVAL_FIRST

    def __post_init__(self) -> None:
        if sorted(self.order) != sorted(COMPONENTS):
            raise ValueError(f"tie-break order must permute {COMPONENTS}")
        if self.order.index("blocks") > self.order.index("intermediate"):
            raise ValueError("'blocks' must come before 'intermediate'")

    def build(self, arrival: int, departure: int, count: int, ints: Tuple[int, ...], ids: Tuple[str, ...]) -> tuple:
        values = {"arrival": arrival, "departure": departure, "blocks": count, "intermediate": ints}
        return tuple(values[c] for c in self.order) + (ids,)

    def label(self, departure: int, count: int, ints: Tuple[int, ...], ids: Tuple[str, ...]) -> tuple:
        values = {"departure": departure, "blocks": count, "intermediate": ints}
        return tuple(values[c] for c in self.order if c != "arrival") + (ids,)


LEGACY = TieBreak(DEPARTURE_FIRST)


def tiebreak_key(chain: TransportChain | Sequence[str], state: NetworkState, config: TieBreak = TieBreak()) -> tuple:
    ids = tuple(chain.blocks if isinstance(chain, TransportChain) else chain)
    if not ids:
        raise ValueError("tie-break key of an empty chain")
    blocks = [state.block(b) for b in ids]
    ints = tuple(state.first_departure(b) for b in blocks[1:])
    return config.build(blocks[-1].deboarding_ready, state.first_departure(blocks[0]), len(ids), ints, ids)


@dataclass
class SearchOutcome:
    chains: List[TransportChain] = field(default_factory=list)
    keys: List[tuple] = field(default_factory=list)
    flags: Set[str] = field(default_factory=set)
    capacity_mode: CapacityMode = CapacityMode.RESPECT
    diagnostics: Dict[str, int] = field(default_factory=dict)
    layers: List[str] = field(default_factory=list)
    fallback: bool = False

    @property
    def best(self) -> Optional[TransportChain]:
        return self.chains[0] if self.chains else None

    @property
    def truncated(self) -> bool:
        return bool(self.flags)

    def dominant_reason(self) -> Optional[str]:
        if not self.diagnostics:
            return None
        return max(sorted(self.diagnostics), key=lambda k: self.diagnostics[k])


class _Context:
    """Request-specific search setup shared by both routines."""

    def __init__(
        self,
        r: Request,
        state: NetworkState,
        mode: CapacityMode,
        limits: SearchLimits,
        key: TieBreak,
        deadline: Optional[float],
    ):
        if r.manual:
            raise ValueError(f"request {r.id} is manual and never searched")
        self.r = r
        self.state = state
        self.mode = mode
        self.limits = limits
        self.key = key
        self.view = CapacityView(state, mode, r)
        self.origin = state.group(r.origin)
        self.dest = state.group(r.destination)
        self.prefix: Tuple[Block, ...] = tuple(state.block(b) for b in r.required_prefix)
        self.seed: FrozenSet[str] = frozenset(visited_groups(self.prefix, state))
        self.deadline = deadline if deadline is not None else time.perf_counter() + limits.time_budget
        self.work = 0
        self.flags: Set[str] = set()
        self.reasons: Counter = Counter()
        self.layer_reasons: Dict[int, Counter] = defaultdict(Counter)
        self.extra_lb = self._extra_lower_bound()
        self._succ_cache: Dict[str, List[Block]] = {}

    def _extra_lower_bound(self) -> float:
        # an extra connection may jump back in time; completions reached
        # through one can arrive no earlier than its earliest target
        lb = float("inf")
        st = self.state
        for (a, b), kind in st.connections.items():
            if kind is ConnectionKind.EXTRA and b in st.blocks:
                lb = min(lb, st.blocks[b].deboarding_ready)
        return lb

    def arrival_bound(self, b: Block) -> float:
        return min(b.deboarding_ready, self.extra_lb)

    def out_of_time(self) -> bool:
        if time.perf_counter() >= self.deadline:
            self.flags.add(TIME_LIMIT)
            return True
        return False

    def tick(self) -> bool:
        """Count one unit of work; True once the budget is exhausted."""
        self.work += 1
        if self.work % TIME_CHECK_EVERY == 0:
            return self.out_of_time()
        return TIME_LIMIT in self.flags

    def reject(self, reason: str, depth: int) -> None:
        self.reasons[reason] += 1
        self.layer_reasons[depth][reason] += 1

    def admissible(self, c: Block, depth: int) -> bool:
        if c.restrictions and not all(res.passes(self.r.attribute(res.attribute)) for res in c.restrictions):
            self.reject("restriction", depth)
            return False
        if not self.view.block_fits(c, self.r.demand):
            self.reject("capacity", depth)
            return False
        return True

    def starts(self) -> List[Block]:
        st = self.state
        deps = st.departures_from(self.origin)
        i = bisect_left(deps, (self.r.pickup_earliest, ""))
        if not deps:
            self.reject("no-departure", 0)
        elif i == len(deps):
            self.reject("time", 0)
        out = []
        for _, bid in deps[i:]:
            if self.tick():
                break
            c = st.blocks[bid]
            if self.arrival_bound(c) > self.r.delivery_latest:
                self.reject("time", 0)
                continue
            if self.admissible(c, 0):
                out.append(c)
        return out

    def successors(self, b: Block, depth: int) -> List[Block]:
        cached = self._succ_cache.get(b.id)
        if cached is not None:
            return cached
        st = self.state
        excl = st.exclusive_target(b.id)
        if excl is not None:
            cands = [excl] if excl in st.blocks else []
        else:
            deps = st.departures_from(st.group(b.destination))
            i = bisect_left(deps, (b.deboarding_ready, ""))
            cands = [bid for _, bid in deps[i:]]
            extra = st.extra_targets(b.id)
            if extra:
                # a block reachable in time and by an extra connection counts once
                seen = set(cands)
                cands.extend(sorted(x for x in extra if x in st.blocks and x not in seen))
        out: List[Block] = []
        for bid in cands:
            if self.tick():
                break
            c = st.blocks[bid]
            if c.kind is BlockKind.MANUAL:
                continue
            if self.arrival_bound(c) > self.r.delivery_latest:
                # no completion through c can meet the delivery bound
                self.reject("time", depth)
                continue
            issue = transfer_issue(b, c, st)
            if issue is not None:
                self.reject("time" if issue == "time" else "transfer", depth)
                continue
            if self.admissible(c, depth):
                out.append(c)
        if TIME_LIMIT not in self.flags:
            self._succ_cache[b.id] = out
        return out

    def full(self, flex: Tuple[Block, ...]) -> Tuple[Block, ...]:
        return self.prefix + flex

    def complete(self, last: Block) -> bool:
        return self.state.group(last.destination) == self.dest and last.deboarding_ready <= self.r.delivery_latest

    def chain(self, flex: Sequence[Block]) -> TransportChain:
        return TransportChain(tuple(b.id for b in self.prefix) + tuple(b.id for b in flex), len(self.prefix))

    def exact_key(self, blocks: Tuple[Block, ...]) -> tuple:
        st = self.state
        ints = tuple(st.first_departure(b) for b in blocks[1:])
        return self.key.build(
            blocks[-1].deboarding_ready, st.first_departure(blocks[0]), len(blocks), ints, tuple(b.id for b in blocks)
        )

    def lower_key(self, blocks: Tuple[Block, ...]) -> tuple:
        st = self.state
        ints = tuple(st.first_departure(b) for b in blocks[1:])
        return self.key.build(
            self.arrival_bound(blocks[-1]),
            st.first_departure(blocks[0]),
            len(blocks) + 1,
            ints,
            tuple(b.id for b in blocks),
        )

    def finish(self, out: SearchOutcome) -> SearchOutcome:
        out.flags |= self.flags
        out.capacity_mode = self.mode
        if not out.chains:
            out.diagnostics = dict(self.reasons)
            out.layers = [
                max(sorted(c), key=lambda k: c[k]) for _, c in sorted(self.layer_reasons.items()) if c
            ]
        return out


def _degenerate(ctx: _Context) -> Optional[SearchOutcome]:
    if ctx.origin == ctx.dest:
        return SearchOutcome(capacity_mode=ctx.mode, diagnostics={Reason.DEGENERATE.value: 1}, layers=[Reason.DEGENERATE.value])
    return None


def _prefix_complete(ctx: _Context) -> bool:
    return bool(ctx.prefix) and ctx.state.group(ctx.prefix[-1].destination) == ctx.dest


def find_best_chain(
    r: Request,
    state: NetworkState,
    capacity_mode: CapacityMode = CapacityMode.RESPECT,
    limits: SearchLimits = SearchLimits(),
    key: TieBreak = TieBreak(),
    deadline: Optional[float] = None,
) -> SearchOutcome:
    """Key-minimal valid chain for ``r`` (at most one chain in the outcome).

    Single-label best-first search over blocks; a loopy optimum triggers
    the enumeration routine, stopped at its first chain.
    """
    ctx = _Context(r, state, capacity_mode, limits, key, deadline)
    early = _degenerate(ctx)
    if early is not None:
        return early
    if _prefix_complete(ctx):
        # the prefix alone competes with its extensions; enumeration orders both
        return _first(ctx)

    labels: Dict[str, tuple] = {}
    parent: Dict[str, Optional[str]] = {}
    heap: List[Tuple[tuple, str]] = []
    depth: Dict[str, int] = {}

    def relax(c: Block, lab: tuple, par: Optional[str], d: int) -> None:
        cur = labels.get(c.id)
        if cur is None or lab < cur:
            labels[c.id] = lab
            parent[c.id] = par
            depth[c.id] = d
            heapq.heappush(heap, (lab, c.id))
            if len(heap) > limits.max_frontier:
                ctx.flags.add(FRONTIER_LIMIT)

    st = state
    if ctx.prefix:
        tail = ctx.prefix[-1]
        pre_ids = tuple(b.id for b in ctx.prefix)
        dep0 = st.first_departure(ctx.prefix[0])
        pre_ints = tuple(st.first_departure(b) for b in ctx.prefix[1:])
        for c in ctx.successors(tail, 0):
            ints = pre_ints + (st.first_departure(c),)
            relax(c, key.label(dep0, len(pre_ids) + 1, ints, pre_ids + (c.id,)), None, 1)
    else:
        for c in ctx.starts():
            relax(c, key.label(st.first_departure(c), 1, (), (c.id,)), None, 1)

    best: Optional[Tuple[tuple, str]] = None
    while heap and not ctx.flags & {TIME_LIMIT, FRONTIER_LIMIT}:
        lab, bid = heapq.heappop(heap)
        if labels.get(bid) != lab:
            continue
        b = st.blocks[bid]
        if ctx.complete(b):
            full_key = _label_to_key(key, lab, b.deboarding_ready)
            if best is None or full_key < best[0]:
                best = (full_key, bid)
        if ctx.arrival_bound(b) > r.delivery_latest:
            continue
        succ = ctx.successors(b, depth[bid])
        if st.group(b.destination) == ctx.dest:
            # leaving the destination always loops; only its yard's connector may follow
            succ = [c for c in succ if c.is_phase_connector and st.group(c.origin) == ctx.dest]
        if depth[bid] >= limits.max_blocks:
            if succ:
                ctx.flags.add(DEPTH_LIMIT)
            continue
        values = dict(zip([c for c in key.order if c != "arrival"], lab[:-1]))
        ids = lab[-1]
        for c in succ:
            ints = values["intermediate"] + (st.first_departure(c),)
            relax(c, key.label(values["departure"], values["blocks"] + 1, ints, ids + (c.id,)), bid, depth[bid] + 1)
        if ctx.tick():
            break

    out = SearchOutcome()
    if best is not None:
        path: List[Block] = []
        cur: Optional[str] = best[1]
        while cur is not None:
            path.append(st.blocks[cur])
            cur = parent[cur]
        path.reverse()
        chain = ctx.chain(path)
        if validate_chain(r, chain, st, capacity_mode, ctx.view).ok:
            out.chains.append(chain)
            out.keys.append(best[0])
            return ctx.finish(out)
        if TIME_LIMIT not in ctx.flags:
            # loopy block-level optimum: fall back to loop-aware enumeration
            fb = _first(ctx)
            fb.fallback = True
            return fb
    return ctx.finish(out)


def _first(ctx: _Context) -> SearchOutcome:
    """Enumeration stopped at its first chain; stopping there is no truncation."""
    out = _enumerate(ctx, 1)
    out.flags.discard(COUNT_LIMIT)
    return out


def _label_to_key(key: TieBreak, lab: tuple, arrival: int) -> tuple:
    values = dict(zip([c for c in key.order if c != "arrival"], lab[:-1]))
    values["arrival"] = arrival
    return tuple(values[c] for c in key.order) + (lab[-1],)


def enumerate_chains(
    r: Request,
    state: NetworkState,
    capacity_mode: CapacityMode = CapacityMode.RESPECT,
    limits: SearchLimits = SearchLimits(),
    key: TieBreak = TieBreak(),
    deadline: Optional[float] = None,
) -> SearchOutcome:
    """Valid chains for ``r`` in key order, up to ``limits.max_chains``.

    Partial chains carry their visited station groups and never loop.
    Exhaustive whenever the outcome carries no truncation flag.
    """
    ctx = _Context(r, state, capacity_mode, limits, key, deadline)
    early = _degenerate(ctx)
    if early is not None:
        return early
    return _enumerate(ctx, limits.max_chains)


def _enumerate(ctx: _Context, max_chains: int) -> SearchOutcome:
    st = ctx.state
    r = ctx.r
    limits = ctx.limits
    out = SearchOutcome()
    # entries: (key, seq, is_complete, flex blocks, visited groups, used connector yards)
    heap: List[tuple] = []
    seq = 0

    def push(flex: Tuple[Block, ...], visited: FrozenSet[str], yards: FrozenSet[str]) -> None:
        nonlocal seq
        full = ctx.full(flex)
        last = flex[-1]
        if ctx.complete(last):
            heapq.heappush(heap, (ctx.exact_key(full), seq, True, flex, visited, yards))
            seq += 1
        if ctx.arrival_bound(last) <= r.delivery_latest:
            heapq.heappush(heap, (ctx.lower_key(full), seq, False, flex, visited, yards))
            seq += 1
        if len(heap) > limits.max_frontier:
            ctx.flags.add(FRONTIER_LIMIT)

    def step(c: Block, visited: FrozenSet[str], yards: FrozenSet[str], depth: int):
        g = st.group(c.destination)
        if c.is_phase_connector and st.group(c.origin) == g:
            if g in yards:
                ctx.reject("loop", depth)
                return None
            return visited, yards | {g}
        if g in visited:
            ctx.reject("loop", depth)
            return None
        return visited | {g}, yards

    if ctx.prefix:
        start_visited = ctx.seed
        if _prefix_complete(ctx):
            heapq.heappush(heap, (ctx.exact_key(ctx.prefix), seq, True, (), start_visited, frozenset()))
            seq += 1
        for c in ctx.successors(ctx.prefix[-1], 0):
            nxt = step(c, start_visited, frozenset(), 0)
            if nxt is not None:
                push((c,), *nxt)
    else:
        base = frozenset({ctx.origin})
        for c in ctx.starts():
            nxt = step(c, base, frozenset(), 0)
            if nxt is not None:
                push((c,), *nxt)

    while heap and not ctx.flags & {TIME_LIMIT, FRONTIER_LIMIT}:
        k, _, done, flex, visited, yards = heapq.heappop(heap)
        if done:
            chain = ctx.chain(flex)
            res = validate_chain(r, chain, st, ctx.mode, ctx.view)
            for reason in sorted(res.reasons):
                ctx.reject(reason.value, len(flex))
            if res.ok:
                out.chains.append(chain)
                out.keys.append(k)
                if len(out.chains) >= max_chains:
                    if heap:
                        ctx.flags.add(COUNT_LIMIT)
                    break
            continue
        d = len(flex)
        last = flex[-1]
        succ = ctx.successors(last, d)
        if d >= limits.max_blocks:
            if any(step(c, visited, yards, d) is not None for c in succ):
                ctx.flags.add(DEPTH_LIMIT)
            continue
        for c in succ:
            nxt = step(c, visited, yards, d)
            if nxt is not None:
                push(flex + (c,), *nxt)
        if ctx.tick():
            break
    return ctx.finish(out)


def brute_force_chains(
    r: Request,
    state: NetworkState,
    capacity_mode: CapacityMode = CapacityMode.IGNORE,
    max_blocks: int = 7,
    key: TieBreak = TieBreak(),
) -> List[TransportChain]:
    """Every valid chain by depth-first enumeration, sorted by key.

    Test oracle: walks all block sequences up to ``max_blocks`` flexible
    blocks and keeps those accepted by ``validate_chain``.
    """
    prefix = tuple(r.required_prefix)
    found: List[TransportChain] = []
    ids = sorted(b.id for b in state.blocks.values() if b.kind is not BlockKind.MANUAL)
    geo = {bid: (state.group(state.blocks[bid].origin), state.group(state.blocks[bid].destination)) for bid in ids}
    if prefix:
        chain = TransportChain(prefix, len(prefix))
        if validate_chain(r, chain, state, capacity_mode).ok:
            found.append(chain)
        start_at = state.group(state.block(prefix[-1]).destination)
    else:
        start_at = state.group(r.origin)

    def dfs(seq: Tuple[str, ...], at: str) -> None:
        if len(seq) >= max_blocks:
            return
        for bid in ids:
            if geo[bid][0] != at or bid in seq:
                continue
            nxt = seq + (bid,)
            chain = TransportChain(prefix + nxt, len(prefix))
            if validate_chain(r, chain, state, capacity_mode).ok:
                found.append(chain)
            if not loop_positions([state.blocks[b] for b in nxt], state, visited_groups([state.blocks[b] for b in prefix], state)):
                dfs(nxt, geo[bid][1])

    dfs((), start_at)
    return sorted(found, key=lambda c: tiebreak_key(c, state, key))
