"""Wire models for the HTTP service and the simulator message streams.

Instants travel as ISO-8601 UTC strings and are converted to integer
minutes since a configurable epoch. Capacities are integer decitons and
decimeters.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..model import (
    Block,
    BlockKind,
    Capacity,
    ConnectionKind,
    Request,
    Restriction,
    RestrictionMode,
    Segment,
    Station,
    StationKind,
)

DEFAULT_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)


class Clock:
    """Converts between wire instants and engine minutes."""

    def __init__(self, epoch: datetime = DEFAULT_EPOCH):
        if epoch.tzinfo is None:
            epoch = epoch.replace(tzinfo=timezone.utc)
        self.epoch = epoch

    def minutes(self, value: datetime | str | int) -> int:
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            value = datetime.fromisoformat(value.replace("Z", "+00:00"))
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        delta = value - self.epoch
        return int(delta.total_seconds() // 60)

    def iso(self, minutes: int) -> str:
        t = self.epoch + timedelta(minutes=minutes)
        return t.strftime("%Y-%m-%dT%H:%M:%SZ")


class MessageKind(str, Enum):
    INIT_STATE = "init-state"
    UPSERT_TRAIN = "upsert-train"
    DELETE_TRAIN = "delete-train"
    UPSERT_BLOCK = "upsert-block"
    UPSERT_SEGMENT = "upsert-segment"
    UPSERT_CONNECTION = "upsert-connection"
    UPSERT_RESTRICTION = "upsert-restriction"
    UPSERT_RESERVATION = "upsert-reservation"
    BOOK_REQUEST = "book-request"
    UPDATE_REQUEST = "update-request"
    CANCEL_REQUEST = "cancel-request"
    MANUAL_CHAIN = "manual-chain"
    TRIGGER_COMPUTE = "trigger-compute"


class _Wire(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CapacityIn(_Wire):
    weight: int = Field(0, ge=0)
    length: int = Field(0, ge=0)

    def to_model(self) -> Capacity:
        return Capacity(self.weight, self.length)


class StationIn(_Wire):
    id: str
    kind: StationKind = StationKind.OPERATIONAL
    group: Optional[str] = None
    operational: Optional[str] = None

    def to_model(self) -> Station:
        return Station(self.id, self.kind, self.group, self.operational)


class SegmentIn(_Wire):
    id: str
    train: str
    origin: str
    destination: str
    departure: str
    arrival: str
    capacity: CapacityIn

    def to_model(self, clock: Clock) -> Segment:
        return Segment(
            self.id,
            self.train,
            self.origin,
            self.destination,
            clock.minutes(self.departure),
            clock.minutes(self.arrival),
            self.capacity.to_model(),
        )


class RestrictionIn(_Wire):
    attribute: str
    mode: RestrictionMode
    values: List[str]

    def to_model(self) -> Restriction:
        return Restriction(self.attribute, self.mode, frozenset(self.values))


class BlockIn(_Wire):
    id: str
    segments: List[str]
    origin: str
    destination: str
    boarding_cutoff: str
    deboarding_ready: str
    restrictions: List[RestrictionIn] = []
    reservation: CapacityIn = CapacityIn()
    manual_utilization: CapacityIn = CapacityIn()
    kind: BlockKind = BlockKind.BOOKABLE

    def to_model(self, clock: Clock) -> Block:
        return Block(
            self.id,
            tuple(self.segments),
            self.origin,
            self.destination,
            clock.minutes(self.boarding_cutoff),
            clock.minutes(self.deboarding_ready),
            tuple(r.to_model() for r in self.restrictions),
            self.reservation.to_model(),
            self.manual_utilization.to_model(),
            self.kind,
        )


class ConnectionIn(_Wire):
    from_block: str
    to_block: str
    kind: Optional[ConnectionKind] = None


class RequestIn(_Wire):
    id: str
    origin: str
    destination: str
    pickup_earliest: str
    delivery_latest: Optional[str] = None
    product: Optional[str] = None
    demand: CapacityIn
    attributes: Dict[str, str] = {}
    priority: int = Field(1, ge=1)
    required_prefix: List[str] = []
    manual: bool = False

    def to_model(self, clock: Clock, products: Optional[Dict[str, int]] = None) -> Request:
        pickup = clock.minutes(self.pickup_earliest)
        if self.delivery_latest is not None:
            delivery = clock.minutes(self.delivery_latest)
        else:
            window = (products or {}).get(self.product or "")
            if window is None:
                raise ValueError(f"request {self.id}: no delivery time and unknown product {self.product!r}")
            delivery = pickup + window
        attrs = dict(self.attributes)
        if self.product is not None:
            attrs.setdefault("product-type", self.product)
        return Request(
            self.id,
            self.origin,
            self.destination,
            pickup,
            delivery,
            self.demand.to_model(),
            attrs,
            self.priority,
            tuple(self.required_prefix),
            self.manual,
        )


class ChainIn(_Wire):
    request: str
    blocks: List[str]
    required: bool = True


class TrainIn(_Wire):
    id: str
    segments: List[SegmentIn]
    blocks: List[BlockIn] = []


class InitState(_Wire):
    stations: List[StationIn] = []
    segments: List[SegmentIn] = []
    blocks: List[BlockIn] = []
    connections: List[ConnectionIn] = []
    requests: List[RequestIn] = []
    chains: List[ChainIn] = []


class RestrictionsIn(_Wire):
    block: str
    restrictions: List[RestrictionIn]


class ReservationIn(_Wire):
    block: str
    reservation: CapacityIn


class IdIn(_Wire):
    id: str


PAYLOADS = {
    MessageKind.INIT_STATE: InitState,
    MessageKind.UPSERT_TRAIN: TrainIn,
    MessageKind.DELETE_TRAIN: IdIn,
    MessageKind.UPSERT_BLOCK: BlockIn,
    MessageKind.UPSERT_SEGMENT: SegmentIn,
    MessageKind.UPSERT_CONNECTION: ConnectionIn,
    MessageKind.UPSERT_RESTRICTION: RestrictionsIn,
    MessageKind.UPSERT_RESERVATION: ReservationIn,
    MessageKind.BOOK_REQUEST: RequestIn,
    MessageKind.UPDATE_REQUEST: RequestIn,
    MessageKind.CANCEL_REQUEST: IdIn,
    MessageKind.MANUAL_CHAIN: ChainIn,
    MessageKind.TRIGGER_COMPUTE: None,
}


class Message(_Wire):
    kind: MessageKind
    payload: Dict[str, Any] = {}
    defer: bool = False
    at: Optional[str] = None  # ingestion instant, informational

    def parsed(self) -> Optional[BaseModel]:
        model = PAYLOADS[self.kind]
        return None if model is None else model.model_validate(self.payload)


class ChainOut(BaseModel):
    blocks: List[str]
    split: int = 0


class ErrorBody(BaseModel):
    code: int
    reason: str
    details: List[Any] = []


class DryRunChainIn(_Wire):
    request: RequestIn
    blocks: List[str]
    required: bool = False


# -- outgoing helpers -----------------------------------------------------


def segment_out(seg: Segment, clock: Clock) -> dict:
    return {
        "id": seg.id,
        "train": seg.train,
        "origin": seg.origin,
        "destination": seg.destination,
        "departure": clock.iso(seg.departure),
        "arrival": clock.iso(seg.arrival),
        "capacity": {"weight": seg.capacity.weight, "length": seg.capacity.length},
    }


def block_out(b: Block, clock: Clock) -> dict:
    out = {
        "id": b.id,
        "segments": list(b.segments),
        "origin": b.origin,
        "destination": b.destination,
        "boarding_cutoff": clock.iso(b.boarding_cutoff),
        "deboarding_ready": clock.iso(b.deboarding_ready),
    }
    if b.restrictions:
        out["restrictions"] = [
            {"attribute": r.attribute, "mode": r.mode.value, "values": sorted(r.values)} for r in b.restrictions
        ]
    if not b.reservation.is_zero:
        out["reservation"] = {"weight": b.reservation.weight, "length": b.reservation.length}
    if not b.manual_utilization.is_zero:
        out["manual_utilization"] = {"weight": b.manual_utilization.weight, "length": b.manual_utilization.length}
    if b.kind is not BlockKind.BOOKABLE:
        out["kind"] = b.kind.value
    return out


def request_out(r: Request, clock: Clock) -> dict:
    out = {
        "id": r.id,
        "origin": r.origin,
        "destination": r.destination,
        "pickup_earliest": clock.iso(r.pickup_earliest),
        "delivery_latest": clock.iso(r.delivery_latest),
        "demand": {"weight": r.demand.weight, "length": r.demand.length},
    }
    if r.attributes:
        out["attributes"] = dict(r.attributes)
    if r.priority != 1:
        out["priority"] = r.priority
    if r.required_prefix:
        out["required_prefix"] = list(r.required_prefix)
    if r.manual:
        out["manual"] = True
    return out
