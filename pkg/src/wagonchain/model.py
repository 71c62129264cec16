"""Domain objects and the mutable in-memory network state."""

from __future__ import annotations

from bisect import insort
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple

CAPACITY_BOUND = 10**9


class UnknownObjectError(LookupError):
    """Raised when an id does not resolve to an object in the state."""


@dataclass(frozen=True, slots=True)
class Capacity:
    """Weight (decitons) and length (decimeters)."""

    weight: int = 0
    length: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.weight <= CAPACITY_BOUND and 0 <= self.length <= CAPACITY_BOUND):
            raise ValueError(f"capacity components out of range: {self.weight}, {self.length}")

    def __add__(self, other: Capacity) -> Capacity:
        return Capacity(self.weight + other.weight, self.length + other.length)

    def __sub__(self, other: Capacity) -> Capacity:
        return Capacity(self.weight - other.weight, self.length - other.length)

    def __mul__(self, k: int) -> Capacity:
        return Capacity(self.weight * k, self.length * k)

    def __le__(self, other: Capacity) -> bool:  # type: ignore[override]
        return self.weight <= other.weight and self.length <= other.length

    def __ge__(self, other: Capacity) -> bool:  # type: ignore[override]
        return other <= self

    def max(self, other: Capacity) -> Capacity:
        return Capacity(max(self.weight, other.weight), max(self.length, other.length))

    def as_tuple(self) -> Tuple[int, int]:
        return (self.weight, self.length)

    @property
    def is_zero(self) -> bool:
        return self.weight == 0 and self.length == 0


ZERO = Capacity()


class StationKind(str, Enum):
    COMMERCIAL = "commercial"
    OPERATIONAL = "operational"


@dataclass(frozen=True, slots=True)
class Station:
    """A commercial or operational location.

    Commercial stations carry ``operational``, the operational station they
    map onto. Operational stations may belong to an operation-point group;
    transfers inside a group are free.
    """

    id: str
    kind: StationKind = StationKind.OPERATIONAL
    group: Optional[str] = None
    operational: Optional[str] = None


@dataclass(frozen=True, slots=True)
class Segment:
    id: str
    train: str
    origin: str
    destination: str
    departure: int
    arrival: int
    capacity: Capacity

    def __post_init__(self) -> None:
        if self.departure >= self.arrival:
            raise ValueError(f"segment {self.id}: departure must precede arrival")


class BlockKind(str, Enum):
    BOOKABLE = "bookable"
    MANUAL = "manual"
    PHASE_CONNECTOR = "phase-connector"


class RestrictionMode(str, Enum):
    ALLOW = "allow"
    FORBID = "forbid"


RESTRICTION_ATTRIBUTES = (
    "origin",
    "destination",
    "customer",
    "nhm-code",
    "product-type",
    "max-speed",
    "coupling",
)


@dataclass(frozen=True, slots=True)
class Restriction:
    attribute: str
    mode: RestrictionMode
    values: FrozenSet[str]

    def __post_init__(self) -> None:
        if self.attribute not in RESTRICTION_ATTRIBUTES:
            raise ValueError(f"unknown restriction attribute {self.attribute!r}")

    def passes(self, value: Optional[str]) -> bool:
        # a missing attribute never matches, whatever the mode
        if value is None:
            return False
        if self.mode is RestrictionMode.ALLOW:
            return value in self.values
        return value not in self.values


@dataclass(frozen=True, slots=True)
class Block:
    """Bookable boarding/deboarding unit over one or more segments.

    ``boarding_cutoff`` is the latest instant a wagon can be handed to the
    block, ``deboarding_ready`` the instant it is available at the
    destination (classification buffers included).
    """

    id: str
    segments: Tuple[str, ...]
    origin: str
    destination: str
    boarding_cutoff: int
    deboarding_ready: int
    restrictions: Tuple[Restriction, ...] = ()
    reservation: Capacity = ZERO
    manual_utilization: Capacity = ZERO
    kind: BlockKind = BlockKind.BOOKABLE

    def __post_init__(self) -> None:
        if not self.segments and self.kind is not BlockKind.PHASE_CONNECTOR:
            raise ValueError(f"block {self.id}: only phase connectors may have no segments")
        if self.boarding_cutoff > self.deboarding_ready:
            raise ValueError(f"block {self.id}: boarding cutoff after deboarding")

    @property
    def is_phase_connector(self) -> bool:
        return self.kind is BlockKind.PHASE_CONNECTOR


class ConnectionKind(str, Enum):
    FORBIDDEN = "forbidden"
    EXTRA = "extra"
    EXCLUSIVE = "exclusive"


@dataclass(frozen=True, slots=True)
class Connection:
    from_block: str
    to_block: str
    kind: ConnectionKind


@dataclass(frozen=True)
class Request:
    """Transportation demand for one or several wagons."""

    id: str
    origin: str
    destination: str
    pickup_earliest: int
    delivery_latest: int
    demand: Capacity
    attributes: Mapping[str, str] = field(default_factory=dict, hash=False)
    priority: int = 1
    required_prefix: Tuple[str, ...] = ()
    manual: bool = False

    def __post_init__(self) -> None:
        if self.pickup_earliest >= self.delivery_latest:
            raise ValueError(f"request {self.id}: pickup must precede delivery")
        if self.priority < 1:
            raise ValueError(f"request {self.id}: priority weight must be positive")

    def attribute(self, name: str) -> Optional[str]:
        if name == "origin":
            return self.origin
        if name == "destination":
            return self.destination
        return self.attributes.get(name)


@dataclass(frozen=True, slots=True)
class TransportChain:
    """Ordered blocks; positions before ``split`` are required."""

    blocks: Tuple[str, ...]
    split: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.split <= len(self.blocks):
            raise ValueError("split index out of range")

    @property
    def required(self) -> Tuple[str, ...]:
        return self.blocks[: self.split]

    @property
    def flexible(self) -> Tuple[str, ...]:
        return self.blocks[self.split :]

    def __len__(self) -> int:
        return len(self.blocks)


class StatusKind(str, Enum):
    UNASSIGNED = "unassigned"
    ASSIGNED = "assigned"
    PARTIAL = "partial"
    REJECTED = "rejected"
    MANUAL = "manual"


@dataclass(frozen=True, slots=True)
class RequestStatus:
    kind: StatusKind
    reason: Optional[str] = None


UNASSIGNED = RequestStatus(StatusKind.UNASSIGNED)
HOLDING = (StatusKind.ASSIGNED, StatusKind.PARTIAL, StatusKind.MANUAL)


class NetworkState:
    """Everything the engine knows, held in memory.

    Mutated only by the backend worker. ``version`` increments on every
    mutation, ``network_version`` only on changes to the train network
    (segments, blocks, connections, restrictions, reservations).
    """

    def __init__(self) -> None:
        self.stations: Dict[str, Station] = {}
        self.segments: Dict[str, Segment] = {}
        self.blocks: Dict[str, Block] = {}
        self.connections: Dict[Tuple[str, str], ConnectionKind] = {}
        self.requests: Dict[str, Request] = {}
        self.chains: Dict[str, TransportChain] = {}
        self.status: Dict[str, RequestStatus] = {}
        self.segment_usage: Dict[str, Capacity] = {}
        self.block_usage: Dict[str, Capacity] = {}
        self.version = 0
        self.network_version = 0

        self._train_segments: Dict[str, List[str]] = defaultdict(list)
        self._blocks_by_segment: Dict[str, Set[str]] = defaultdict(set)
        self._block_holders: Dict[str, Set[str]] = defaultdict(set)
        self._extra_from: Dict[str, Set[str]] = defaultdict(set)
        self._exclusive_from: Dict[str, str] = {}
        self._departures: Optional[Dict[str, List[Tuple[int, str]]]] = None
        self._restricted_attributes: Optional[FrozenSet[str]] = None

    # -- geography -------------------------------------------------------

    def operational(self, station_id: str) -> str:
        st = self.stations.get(station_id)
        if st is not None and st.kind is StationKind.COMMERCIAL:
            return st.operational or st.id
        return station_id

    def group(self, station_id: str) -> str:
        op = self.operational(station_id)
        st = self.stations.get(op)
        if st is not None and st.group:
            return st.group
        return op

    # -- lookups ---------------------------------------------------------

    def block(self, block_id: str) -> Block:
        try:
            return self.blocks[block_id]
        except KeyError:
            raise UnknownObjectError(f"unknown block {block_id!r}") from None

    def segment(self, segment_id: str) -> Segment:
        try:
            return self.segments[segment_id]
        except KeyError:
            raise UnknownObjectError(f"unknown segment {segment_id!r}") from None

    def request(self, request_id: str) -> Request:
        try:
            return self.requests[request_id]
        except KeyError:
            raise UnknownObjectError(f"unknown request {request_id!r}") from None

    def blocks_on_segment(self, segment_id: str) -> Set[str]:
        return self._blocks_by_segment.get(segment_id, set())

    def holders(self, block_id: str) -> Set[str]:
        return self._block_holders.get(block_id, set())

    def train_segments(self, train_id: str) -> List[str]:
        return list(self._train_segments.get(train_id, ()))

    @property
    def trains(self) -> List[str]:
        return [t for t, segs in self._train_segments.items() if segs]

    def connection(self, from_block: str, to_block: str) -> Optional[ConnectionKind]:
        return self.connections.get((from_block, to_block))

    def extra_targets(self, block_id: str) -> Set[str]:
        return self._extra_from.get(block_id, set())

    def exclusive_target(self, block_id: str) -> Optional[str]:
        return self._exclusive_from.get(block_id)

    @property
    def has_extra_connections(self) -> bool:
        return any(self._extra_from.values())

    def departures_from(self, group: str) -> List[Tuple[int, str]]:
        """Bookable and phase-connector blocks leaving ``group``, sorted by boarding cutoff."""
        if self._departures is None:
            index: Dict[str, List[Tuple[int, str]]] = defaultdict(list)
            for b in self.blocks.values():
                if b.kind is not BlockKind.MANUAL:
                    index[self.group(b.origin)].append((b.boarding_cutoff, b.id))
            for lst in index.values():
                lst.sort()
            self._departures = index
        return self._departures.get(group, [])

    @property
    def restricted_attributes(self) -> FrozenSet[str]:
        if self._restricted_attributes is None:
            self._restricted_attributes = frozenset(
                r.attribute for b in self.blocks.values() for r in b.restrictions
            )
        return self._restricted_attributes

    def first_departure(self, block: Block) -> int:
        if block.segments:
            return self.segments[block.segments[0]].departure
        return block.boarding_cutoff

    # -- network mutation ------------------------------------------------

    def _touch(self, network: bool = True) -> None:
        self.version += 1
        if network:
            self.network_version += 1
            self._departures = None
            self._restricted_attributes = None

    def add_station(self, station: Station) -> None:
        self.stations[station.id] = station
        self._touch()

    def upsert_segment(self, seg: Segment) -> None:
        old = self.segments.get(seg.id)
        if old is not None and old.train != seg.train:
            self._train_segments[old.train].remove(seg.id)
        self.segments[seg.id] = seg
        segs = self._train_segments[seg.train]
        if seg.id not in segs:
            insort(segs, seg.id, key=lambda s: self.segments[s].departure)
        else:
            segs.sort(key=lambda s: self.segments[s].departure)
        self._touch()

    def remove_segment(self, segment_id: str) -> List[str]:
        """Drop a segment and every block running over it; returns removed block ids."""
        seg = self.segment(segment_id)
        removed = sorted(self._blocks_by_segment.get(segment_id, set()))
        for bid in removed:
            self.remove_block(bid)
        self._train_segments[seg.train].remove(segment_id)
        del self.segments[segment_id]
        self.segment_usage.pop(segment_id, None)
        self._blocks_by_segment.pop(segment_id, None)
        self._touch()
        return removed

    def remove_train(self, train_id: str) -> List[str]:
        removed: List[str] = []
        for sid in list(self._train_segments.get(train_id, ())):
            removed.extend(self.remove_segment(sid))
        self._train_segments.pop(train_id, None)
        return removed

    def upsert_block(self, block: Block) -> None:
        for sid in block.segments:
            if sid not in self.segments:
                raise UnknownObjectError(f"block {block.id}: unknown segment {sid!r}")
        old = self.blocks.get(block.id)
        if old is not None:
            self._detach_holders(old)
            for sid in old.segments:
                self._blocks_by_segment[sid].discard(block.id)
        self.blocks[block.id] = block
        for sid in block.segments:
            self._blocks_by_segment[sid].add(block.id)
        # holders of a previously removed block with this id count again
        self._attach_holders(block.id)
        self._touch()

    def remove_block(self, block_id: str) -> None:
        block = self.block(block_id)
        self._detach_holders(block)
        for sid in block.segments:
            self._blocks_by_segment[sid].discard(block_id)
        del self.blocks[block_id]
        self.block_usage.pop(block_id, None)
        for key in [k for k in self.connections if block_id in k]:
            self.set_connection(key[0], key[1], None)
        self._touch()

    def set_connection(self, from_block: str, to_block: str, kind: Optional[ConnectionKind]) -> None:
        key = (from_block, to_block)
        old = self.connections.pop(key, None)
        if old is ConnectionKind.EXTRA:
            self._extra_from[from_block].discard(to_block)
        elif old is ConnectionKind.EXCLUSIVE and self._exclusive_from.get(from_block) == to_block:
            del self._exclusive_from[from_block]
        if kind is not None:
            if kind is ConnectionKind.EXCLUSIVE:
                other = self._exclusive_from.get(from_block)
                if other is not None and other != to_block:
                    raise ValueError(f"block {from_block} already has exclusive connection to {other}")
                self._exclusive_from[from_block] = to_block
            elif kind is ConnectionKind.EXTRA:
                self._extra_from[from_block].add(to_block)
            self.connections[key] = kind
        self._touch()

    def set_restrictions(self, block_id: str, restrictions: Iterable[Restriction]) -> None:
        self.upsert_block(replace(self.block(block_id), restrictions=tuple(restrictions)))

    def set_reservation(self, block_id: str, reservation: Capacity) -> None:
        self.upsert_block(replace(self.block(block_id), reservation=reservation))

    # -- requests and ledger ---------------------------------------------

    def add_request(self, request: Request) -> None:
        self.requests[request.id] = request
        if request.id not in self.status:
            self.status[request.id] = RequestStatus(StatusKind.MANUAL) if request.manual else UNASSIGNED
        self._touch(network=False)

    def replace_request(self, request: Request) -> None:
        """Swap request data, keeping its chain (demand changes re-book usage)."""
        chain = self.chains.get(request.id)
        status = self.status.get(request.id, UNASSIGNED)
        if chain is not None:
            self._book(request.id, chain, -1)
        self.requests[request.id] = request
        if chain is not None:
            self._book(request.id, chain, +1)
        self.status[request.id] = status
        self._touch(network=False)

    def remove_request(self, request_id: str) -> None:
        self.unassign(request_id)
        self.requests.pop(request_id, None)
        self.status.pop(request_id, None)
        self._touch(network=False)

    def assign(self, request_id: str, chain: TransportChain, status: StatusKind = StatusKind.ASSIGNED) -> None:
        if request_id not in self.requests:
            raise UnknownObjectError(f"unknown request {request_id!r}")
        for bid in chain.blocks:
            self.block(bid)
        if request_id in self.chains:
            self._book(request_id, self.chains[request_id], -1)
        self.chains[request_id] = chain
        self._book(request_id, chain, +1)
        self.status[request_id] = RequestStatus(status)
        self._touch(network=False)

    def unassign(self, request_id: str, status: RequestStatus = UNASSIGNED) -> Optional[TransportChain]:
        chain = self.chains.pop(request_id, None)
        if chain is not None:
            self._book(request_id, chain, -1)
        if request_id in self.requests:
            self.status[request_id] = status
        self._touch(network=False)
        return chain

    def _book(self, request_id: str, chain: TransportChain, sign: int) -> None:
        demand = self.requests[request_id].demand
        for bid in chain.blocks:
            if sign > 0:
                self._block_holders[bid].add(request_id)
            else:
                self._block_holders[bid].discard(request_id)
            block = self.blocks.get(bid)
            if block is not None:
                self._add_usage(block, demand, sign)

    def _add_usage(self, block: Block, demand: Capacity, sign: int) -> None:
        delta_w, delta_l = sign * demand.weight, sign * demand.length
        cur = self.block_usage.get(block.id, ZERO)
        self.block_usage[block.id] = Capacity(cur.weight + delta_w, cur.length + delta_l)
        for sid in block.segments:
            if sid not in self.segments:
                continue
            cur = self.segment_usage.get(sid, ZERO)
            self.segment_usage[sid] = Capacity(cur.weight + delta_w, cur.length + delta_l)

    def _detach_holders(self, block: Block) -> None:
        for rid in self._block_holders.get(block.id, ()):
            times = self.chains[rid].blocks.count(block.id)
            self._add_usage(block, self.requests[rid].demand * times, -1)

    def _attach_holders(self, block_id: str) -> None:
        block = self.blocks.get(block_id)
        if block is None:
            return
        for rid in self._block_holders.get(block_id, ()):
            times = self.chains[rid].blocks.count(block_id)
            self._add_usage(block, self.requests[rid].demand * times, +1)

    def recompute_ledger(self) -> Tuple[Dict[str, Capacity], Dict[str, Capacity]]:
        """From-scratch (segment usage, block usage) over all chain holders."""
        seg: Dict[str, Capacity] = {}
        blk: Dict[str, Capacity] = {}
        for rid, chain in self.chains.items():
            demand = self.requests[rid].demand
            for bid in chain.blocks:
                block = self.blocks.get(bid)
                if block is None:
                    continue
                blk[bid] = blk.get(bid, ZERO) + demand
                for sid in block.segments:
                    if sid in self.segments:
                        seg[sid] = seg.get(sid, ZERO) + demand
        return seg, blk

    def rebuild_ledger(self) -> None:
        """Reset usage and holder indexes from the chains (failure recovery)."""
        seg, blk = self.recompute_ledger()
        self.segment_usage, self.block_usage = seg, blk
        self._block_holders = defaultdict(set)
        for rid, chain in self.chains.items():
            for bid in chain.blocks:
                self._block_holders[bid].add(rid)
        self._touch(network=False)

    def ledger_consistent(self) -> bool:
        seg, blk = self.recompute_ledger()
        nz = lambda d: {k: v for k, v in d.items() if not v.is_zero}  # noqa: E731
        return nz(seg) == nz(self.segment_usage) and nz(blk) == nz(self.block_usage)

    def segment_load(self, segment_id: str) -> Capacity:
        """Request usage plus manual utilization of the blocks over the segment."""
        total = self.segment_usage.get(segment_id, ZERO)
        for bid in self._blocks_by_segment.get(segment_id, ()):
            mu = self.blocks[bid].manual_utilization
            if not mu.is_zero:
                total = total + mu
        return total

    def fingerprint(self) -> tuple:
        """Order-independent summary used to compare replays."""
        return (
            tuple(sorted(self.segments.items())),
            tuple(sorted(self.blocks.items())),
            tuple(sorted(self.connections.items())),
            tuple(sorted((k, v.blocks, v.split) for k, v in self.chains.items())),
            tuple(sorted((k, v.kind.value, v.reason or "") for k, v in self.status.items())),
            tuple(sorted((k, v) for k, v in self.segment_usage.items() if not v.is_zero)),
        )
