"""Chainability, loop, restriction and capacity predicates over a state."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .model import (
    Block,
    Capacity,
    ConnectionKind,
    NetworkState,
    Request,
    TransportChain,
    ZERO,
)


class CapacityMode(str, Enum):
    """How capacities are screened during validation and search.

    ``ignore`` skips capacity checks entirely (dry-run semantics),
    ``isolated`` checks the request alone against planned segment
    capacities, ``respect`` checks it against everybody else's usage,
    reservations and the adjusted segment capacities.
    """

    IGNORE = "ignore"
    ISOLATED = "isolated"
    RESPECT = "respect"


class Reason(str, Enum):
    TIME_WINDOW = "time-window"
    RESTRICTION = "restriction"
    CAPACITY = "capacity"
    NOT_CHAINABLE = "not-chainable"
    GEOGRAPHIC_LOOP = "geographic-loop"
    ORIGIN_MISMATCH = "origin-mismatch"
    DESTINATION_MISMATCH = "destination-mismatch"
    DEGENERATE = "degenerate"
    EMPTY = "empty-chain"


@dataclass(frozen=True)
class Violation:
    reason: Reason
    position: Optional[int]
    detail: Tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"reason": self.reason.value, "position": self.position, "detail": list(self.detail)}


@dataclass
class ValidationResult:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def reasons(self) -> Set[Reason]:
        return {v.reason for v in self.violations}

    def __bool__(self) -> bool:
        return self.ok


# -- transfers ------------------------------------------------------------


def transfer_issue(b1: Block, b2: Block, state: NetworkState) -> Optional[str]:
    """Why ``b2`` cannot follow ``b1``, or None when the transfer is allowed."""
    if state.group(b1.destination) != state.group(b2.origin):
        return "geography"
    kind = state.connection(b1.id, b2.id)
    if kind is ConnectionKind.FORBIDDEN:
        return "forbidden"
    exclusive = state.exclusive_target(b1.id)
    if exclusive is not None and exclusive != b2.id:
        return "exclusive"
    if b1.deboarding_ready > b2.boarding_cutoff and kind is not ConnectionKind.EXTRA:
        return "time"
    return None


def chainable(b1: Block | str, b2: Block | str, state: NetworkState) -> bool:
    if isinstance(b1, str):
        b1 = state.block(b1)
    if isinstance(b2, str):
        b2 = state.block(b2)
    return transfer_issue(b1, b2, state) is None


# -- geography ------------------------------------------------------------


def loop_positions(blocks: Sequence[Block], state: NetworkState, seed: Iterable[str] = ()) -> List[int]:
    """Indices of blocks that revisit a station group.

    Visited groups are the origin of the first block followed by every
    block's destination. A phase connector stays inside its yard: it adds
    no new visit, but the same yard's connector cannot be used twice.
    """
    visited = set(seed)
    connectors: Set[str] = set()
    found: List[int] = []
    for i, b in enumerate(blocks):
        if i == 0 and not visited:
            visited.add(state.group(b.origin))
        dest = state.group(b.destination)
        if b.is_phase_connector and state.group(b.origin) == dest:
            if dest in connectors:
                found.append(i)
            connectors.add(dest)
            continue
        if dest in visited:
            found.append(i)
        visited.add(dest)
    return found


def is_loop_free(blocks: Sequence[Block | str], state: NetworkState) -> bool:
    resolved = [state.block(b) if isinstance(b, str) else b for b in blocks]
    return not loop_positions(resolved, state)


def visited_groups(blocks: Sequence[Block], state: NetworkState) -> Set[str]:
    out: Set[str] = set()
    for i, b in enumerate(blocks):
        if i == 0:
            out.add(state.group(b.origin))
        out.add(state.group(b.destination))
    return out


# -- restrictions ---------------------------------------------------------


def failed_restrictions(b: Block, r: Request) -> List[str]:
    return [res.attribute for res in b.restrictions if not res.passes(r.attribute(res.attribute))]


def block_admits(b: Block, r: Request) -> bool:
    return all(res.passes(r.attribute(res.attribute)) for res in b.restrictions)


# -- capacities -----------------------------------------------------------


def adjusted_segment_capacity(segment_id: str, state: NetworkState) -> Capacity:
    """Planned capacity, raised to current usage plus reservations if exceeded.

    Keeps any current over-booking feasible without adding new one.
    """
    seg = state.segment(segment_id)
    load = state.segment_load(segment_id)
    w, l = load.weight, load.length
    for bid in state.blocks_on_segment(segment_id):
        res = state.blocks[bid].reservation
        w += res.weight
        l += res.length
    return Capacity(max(seg.capacity.weight, w), max(seg.capacity.length, l))


class CapacityView:
    """Capacity accounting for one request against the current state.

    The request's own current usage (if it holds a chain) is taken out of
    the block loads, so the view answers "would the request fit here given
    everybody else". Adjusted segment capacities are computed from the
    state as it is.
    """

    def __init__(self, state: NetworkState, mode: CapacityMode, request: Optional[Request] = None):
        self.state = state
        self.mode = mode
        self._own: Dict[str, Tuple[int, int]] = {}
        if request is not None and request.id in state.chains:
            d = request.demand
            for bid, k in Counter(state.chains[request.id].blocks).items():
                self._own[bid] = (d.weight * k, d.length * k)
        self._adjusted: Dict[str, Tuple[int, int]] = {}
        self._base: Dict[str, Tuple[int, int]] = {}
        self._block_fit: Dict[Tuple[str, int, int], bool] = {}

    def load(self, block_id: str) -> Tuple[int, int]:
        b = self.state.blocks[block_id]
        u = self.state.block_usage.get(block_id, ZERO)
        own = self._own.get(block_id, (0, 0))
        mu = b.manual_utilization
        return (u.weight + mu.weight - own[0], u.length + mu.length - own[1])

    def occupied(self, block_id: str, extra: Tuple[int, int] = (0, 0)) -> Tuple[int, int]:
        """max(reservation, load + extra) per dimension: what the block takes off its segments."""
        res = self.state.blocks[block_id].reservation
        w, l = self.load(block_id)
        return (max(res.weight, w + extra[0]), max(res.length, l + extra[1]))

    def adjusted(self, segment_id: str) -> Tuple[int, int]:
        got = self._adjusted.get(segment_id)
        if got is None:
            got = adjusted_segment_capacity(segment_id, self.state).as_tuple()
            self._adjusted[segment_id] = got
        return got

    def base(self, segment_id: str) -> Tuple[int, int]:
        got = self._base.get(segment_id)
        if got is None:
            w = l = 0
            for bid in self.state.blocks_on_segment(segment_id):
                ow, ol = self.occupied(bid)
                w += ow
                l += ol
            got = (w, l)
            self._base[segment_id] = got
        return got

    def block_fits(self, block: Block, demand: Capacity) -> bool:
        """Whether adding ``demand`` to this single block keeps its segments feasible."""
        if self.mode is CapacityMode.IGNORE:
            return True
        key = (block.id, demand.weight, demand.length)
        hit = self._block_fit.get(key)
        if hit is not None:
            return hit
        ok = not self.violating_segments({block.id: (demand.weight, demand.length)}, block.segments)
        self._block_fit[key] = ok
        return ok

    def violating_segments(self, added: Dict[str, Tuple[int, int]], segments: Iterable[str]) -> List[str]:
        """Segments whose capacity breaks when ``added`` (per block) is booked on top."""
        bad: List[str] = []
        state = self.state
        for sid in segments:
            seg = state.segments[sid]
            if self.mode is CapacityMode.ISOLATED:
                w = l = 0
                for bid, (aw, al) in added.items():
                    if sid in state.blocks[bid].segments:
                        w += aw
                        l += al
                cap = seg.capacity
                if w > cap.weight or l > cap.length:
                    bad.append(sid)
                continue
            bw, bl = self.base(sid)
            for bid, extra in added.items():
                if sid not in state.blocks[bid].segments:
                    continue
                ow, ol = self.occupied(bid)
                nw, nl = self.occupied(bid, extra)
                bw += nw - ow
                bl += nl - ol
            aw, al = self.adjusted(sid)
            if bw > aw or bl > al:
                bad.append(sid)
        return bad


# -- full validation ------------------------------------------------------


def _resolve(chain: TransportChain | Sequence[str], state: NetworkState) -> Tuple[TransportChain, List[Block]]:
    if not isinstance(chain, TransportChain):
        chain = TransportChain(tuple(chain))
    return chain, [state.block(bid) for bid in chain.blocks]


def validate_chain(
    r: Request,
    chain: TransportChain | Sequence[str],
    state: NetworkState,
    capacity_mode: CapacityMode = CapacityMode.RESPECT,
    view: Optional[CapacityView] = None,
) -> ValidationResult:
    """Every reason the chain is not valid for ``r``, tagged with positions.

    Required positions only report restriction and capacity problems; gaps,
    loops and odd transitions inside the required prefix are tolerated.
    """
    chain, blocks = _resolve(chain, state)
    out: List[Violation] = []
    if state.group(r.origin) == state.group(r.destination):
        out.append(Violation(Reason.DEGENERATE, None))
    if not blocks:
        out.append(Violation(Reason.EMPTY, None))
        return ValidationResult(out)

    split = chain.split
    for i, b in enumerate(blocks):
        failed = failed_restrictions(b, r)
        if failed:
            out.append(Violation(Reason.RESTRICTION, i, tuple(failed)))

    if split == 0:
        first = blocks[0]
        if state.group(first.origin) != state.group(r.origin):
            out.append(Violation(Reason.ORIGIN_MISMATCH, 0))
        if r.pickup_earliest > first.boarding_cutoff:
            out.append(Violation(Reason.TIME_WINDOW, 0, ("pickup",)))
    for i in range(max(split, 1), len(blocks)):
        issue = transfer_issue(blocks[i - 1], blocks[i], state)
        if issue is not None:
            out.append(Violation(Reason.NOT_CHAINABLE, i, (issue,)))

    if split < len(blocks):
        seed = visited_groups(blocks[:split], state)
        pos = loop_positions(blocks[split:], state, seed)
        for p in pos:
            out.append(Violation(Reason.GEOGRAPHIC_LOOP, split + p))

    last = len(blocks) - 1
    if state.group(blocks[last].destination) != state.group(r.destination):
        out.append(Violation(Reason.DESTINATION_MISMATCH, last))
    if last >= split and blocks[last].deboarding_ready > r.delivery_latest:
        out.append(Violation(Reason.TIME_WINDOW, last, ("delivery",)))

    if capacity_mode is not CapacityMode.IGNORE:
        out.extend(capacity_violations(r, blocks, state, capacity_mode, view))
    out.sort(key=lambda v: (-1 if v.position is None else v.position, v.reason.value))
    return ValidationResult(out)


def capacity_violations(
    r: Request,
    blocks: Sequence[Block],
    state: NetworkState,
    mode: CapacityMode,
    view: Optional[CapacityView] = None,
) -> List[Violation]:
    if view is None or view.mode is not mode:
        view = CapacityView(state, mode, r)
    added: Dict[str, Tuple[int, int]] = {}
    for b in blocks:
        w, l = added.get(b.id, (0, 0))
        added[b.id] = (w + r.demand.weight, l + r.demand.length)
    segments = sorted({sid for b in blocks for sid in b.segments})
    bad = set(view.violating_segments(added, segments))
    out = []
    for i, b in enumerate(blocks):
        hit = tuple(sid for sid in b.segments if sid in bad)
        if hit:
            out.append(Violation(Reason.CAPACITY, i, hit))
    return out


def chain_arrival(chain: TransportChain | Sequence[str], state: NetworkState) -> int:
    blocks = chain.blocks if isinstance(chain, TransportChain) else chain
    return state.block(blocks[-1]).deboarding_ready
