"""Synthetic hub-and-spoke scenarios and message streams.

Spokes hang off one home yard each. Local trains run spoke to yard and
yard to spoke, trunk trains run between every ordered pair of yards.
Capacities are sized from the generated demand so that ``tightness``
is the ratio of demand to capacity on the trunk corridors.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..model import Block, Capacity, Segment
from ..service.schema import Clock, Message, MessageKind, block_out, segment_out

DAY = 24 * 60


@dataclass
class ScenarioSpec:
    stations: int = 20
    yards: int = 2
    trains_per_day: int = 3
    local_trains_per_day: int = 2
    tightness: float = 0.9
    requests: int = 500
    days: int = 5
    seed: int = 0
    # lead time mixture: short (0..12 h), two-week contingent cluster, rest spread out
    lead_short_share: float = 0.55
    lead_cluster_share: float = 0.2
    lead_cluster_days: float = 14.0
    lead_cluster_sd_days: float = 1.0
    lead_max_days: float = 10.0
    products: Dict[str, float] = field(default_factory=lambda: {"express": 0.3, "standard": 0.5, "economy": 0.2})
    local_slack: float = 1.5
    min_weight_t: int = 20
    max_weight_t: int = 100

    def __post_init__(self) -> None:
        if self.yards < 1 or self.stations <= self.yards:
            raise ValueError("need at least one yard and more stations than yards")
        if not 0 < self.tightness <= 1:
            raise ValueError("tightness must lie in (0, 1]")
        if self.requests < 0 or self.days < 1 or self.trains_per_day < 1 or self.local_trains_per_day < 1:
            raise ValueError("counts must be positive")
        shares = (self.lead_short_share, self.lead_cluster_share)
        if min(shares) < 0 or sum(shares) > 1:
            raise ValueError("lead-time shares must form a distribution")
        if abs(sum(self.products.values()) - 1) > 1e-9 or any(v < 0 for v in self.products.values()):
            raise ValueError("product shares must sum to one")
        if not 0 < self.min_weight_t <= self.max_weight_t:
            raise ValueError("weight range invalid")

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


PRODUCT_HOURS = {"express": 29, "standard": 48, "economy": 72}


@dataclass
class Scenario:
    spec: ScenarioSpec
    segments: List[Segment]
    blocks: List[Block]
    bookings: List[dict]  # wire request payloads with "_at" minutes
    yards: List[str]
    spokes: Dict[str, str]  # spoke -> home yard

    def init_message(self, clock: Clock) -> Message:
        payload = {
            "segments": [segment_out(s, clock) for s in self.segments],
            "blocks": [block_out(b, clock) for b in self.blocks],
        }
        return Message(kind=MessageKind.INIT_STATE, payload=payload)

    def booking_messages(self, clock: Clock) -> List[Message]:
        out = []
        for b in self.bookings:
            payload = {k: v for k, v in b.items() if k != "_at"}
            out.append(Message(kind=MessageKind.BOOK_REQUEST, payload=payload, at=clock.iso(b["_at"])))
        return out

    def messages(self, clock: Optional[Clock] = None) -> List[Message]:
        clock = clock or Clock()
        return [self.init_message(clock)] + self.booking_messages(clock)


def _station_names(spec: ScenarioSpec) -> Tuple[List[str], Dict[str, str]]:
    yards = [f"Y{i}" for i in range(spec.yards)]
    spokes = {f"S{i:02d}": yards[i % spec.yards] for i in range(spec.stations - spec.yards)}
    return yards, spokes


def sample_lead_minutes(spec: ScenarioSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Lead times (minutes) from the short / contingent-cluster / spread mixture."""
    u = rng.random(n)
    short = rng.uniform(0, 12 * 60, n)
    cluster = rng.normal(spec.lead_cluster_days * DAY, spec.lead_cluster_sd_days * DAY, n)
    cluster = np.clip(cluster, 12 * 60, None)
    spread = rng.uniform(12 * 60, spec.lead_max_days * DAY, n)
    out = np.where(u < spec.lead_short_share, short, np.where(u < spec.lead_short_share + spec.lead_cluster_share, cluster, spread))
    return np.round(out).astype(int)


def generate(spec: ScenarioSpec) -> Scenario:
    rng = np.random.default_rng(spec.seed)
    yards, spokes = _station_names(spec)
    names = sorted(spokes)
    products = sorted(spec.products)
    probs = np.array([spec.products[p] for p in products])

    # requests first, capacities are derived from them
    raw = []
    for i in range(spec.requests):
        o, d = rng.choice(len(names), size=2, replace=False)
        product = products[int(rng.choice(len(products), p=probs))]
        pickup = int(rng.integers(0, spec.days * 24)) * 60
        weight = int(rng.integers(spec.min_weight_t, spec.max_weight_t + 1))
        length = int(rng.integers(14, 24)) * max(1, weight // 40 + 1)
        raw.append((f"R{i:05d}", names[o], names[d], product, pickup, weight, length))
    leads = sample_lead_minutes(spec, rng, spec.requests)

    trunk_load: Dict[Tuple[str, str], List[int]] = defaultdict(lambda: [0, 0])
    local_load: Dict[Tuple[str, str], List[int]] = defaultdict(lambda: [0, 0])
    for _, o, d, _, _, w, l in raw:
        yo, yd = spokes[o], spokes[d]
        for key in ((o, yo), (yd, d)):
            local_load[key][0] += w
            local_load[key][1] += l
        if yo != yd:
            trunk_load[(yo, yd)][0] += w
            trunk_load[(yo, yd)][1] += l

    span = spec.days + 4
    segments: List[Segment] = []
    blocks: List[Block] = []

    def cap(load: List[int], trains: int, slack: float) -> Capacity:
        w = math.ceil(load[0] / (trains * spec.tightness) * slack) if load[0] else spec.max_weight_t
        l = math.ceil(load[1] / (trains * spec.tightness) * slack) if load[1] else 100
        return Capacity(max(w, spec.max_weight_t) * 10, max(l, 50) * 10)

    def add_train(tid: str, origin: str, dest: str, dep: int, dur: int, capacity: Capacity, board: int, deboard: int) -> None:
        segments.append(Segment(f"{tid}:0", tid, origin, dest, dep, dep + dur, capacity))
        blocks.append(Block(f"{tid}:{origin}-{dest}", (f"{tid}:0",), origin, dest, dep - board, dep + dur + deboard))

    # local trains, both directions
    for s in names:
        y = spokes[s]
        offset = int(rng.integers(0, 6)) * 60
        for direction, (a, b) in enumerate(((s, y), (y, s))):
            c = cap(local_load[(a, b)], spec.local_trains_per_day * spec.days, spec.local_slack)
            for day in range(span):
                for k in range(spec.local_trains_per_day):
                    dep = day * DAY + offset + direction * 180 + k * (DAY // spec.local_trains_per_day)
                    dur = 60 + int(rng.integers(0, 4)) * 15
                    add_train(f"L{s}{'o' if direction == 0 else 'i'}{day:02d}{k}", a, b, dep, dur, c, 30, 60)

    # trunk trains between yards
    for ya in yards:
        for yb in yards:
            if ya == yb:
                continue
            c = cap(trunk_load[(ya, yb)], spec.trains_per_day * spec.days, 1.0)
            offset = int(rng.integers(0, 8)) * 30
            for day in range(span):
                for k in range(spec.trains_per_day):
                    dep = day * DAY + offset + k * (DAY // spec.trains_per_day)
                    dur = 180 + int(rng.integers(0, 7)) * 30
                    add_train(f"T{ya}{yb}{day:02d}{k}", ya, yb, dep, dur, c, 60, 90)

    bookings = []
    for (rid, o, d, product, pickup, w, l), lead in zip(raw, leads):
        bookings.append(
            {
                "id": rid,
                "origin": o,
                "destination": d,
                "pickup_earliest": Clock().iso(pickup),
                "product": product,
                "demand": {"weight": w * 10, "length": l * 10},
                "_at": pickup - int(lead),
            }
        )
    bookings.sort(key=lambda b: (b["_at"], b["id"]))
    return Scenario(spec, segments, blocks, bookings, yards, spokes)


# -- service logs --------------------------------------------------------


def service_log(
    spec: ScenarioSpec,
    n_messages: int,
    burst: int = 1200,
    burst_minutes: int = 5,
    clock: Optional[Clock] = None,
) -> List[Message]:
    """init-state plus ``n_messages`` mixed messages arriving in bursts.

    The mix is bookings, window or demand updates, cancellations and
    network updates (capacity changes, reservations, restrictions and
    forbidden connections), all referencing objects that exist.
    """
    clock = clock or Clock()
    scenario = generate(spec)
    rng = np.random.default_rng(spec.seed + 1_000_003)
    out: List[Message] = [scenario.init_message(clock)]
    pending = [dict(b) for b in scenario.bookings]
    booked: List[dict] = []
    cancelled = set()
    seg_by_id = {s.id: s for s in scenario.segments}
    trunk_blocks = [b for b in scenario.blocks if b.id.startswith("T")]
    yard_in: Dict[str, List[Block]] = defaultdict(list)
    yard_out: Dict[str, List[Block]] = defaultdict(list)
    for b in scenario.blocks:
        if b.destination in scenario.yards:
            yard_in[b.destination].append(b)
        if b.origin in scenario.yards:
            yard_out[b.origin].append(b)
    kinds = ["book", "update", "cancel", "segment", "reservation", "restriction", "connection"]
    weights = np.array([0.45, 0.12, 0.08, 0.15, 0.08, 0.06, 0.06])
    for i in range(n_messages):
        at = clock.iso((i // burst) * burst_minutes + (i % burst) * burst_minutes // burst - 7 * DAY)
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        live = [b for b in booked if b["id"] not in cancelled]
        if kind in ("update", "cancel") and not live:
            kind = "book"
        if kind == "book" and not pending:
            kind = "segment"
        if kind == "book":
            b = pending.pop(0)
            payload = {k: v for k, v in b.items() if k != "_at"}
            booked.append(payload)
            out.append(Message(kind=MessageKind.BOOK_REQUEST, payload=payload, at=at))
        elif kind == "update":
            b = dict(live[int(rng.integers(len(live)))])
            if rng.random() < 0.5:
                b["demand"] = {"weight": max(10, int(b["demand"]["weight"] * 0.8)), "length": b["demand"]["length"]}
            else:
                hours = {"express": 29, "standard": 48, "economy": 72}.get(b.get("product", ""), 48)
                pickup = clock.minutes(b["pickup_earliest"])
                b["delivery_latest"] = clock.iso(pickup + int(hours * 60 * rng.uniform(0.7, 1.0)))
            out.append(Message(kind=MessageKind.UPDATE_REQUEST, payload=b, at=at))
        elif kind == "cancel":
            b = live[int(rng.integers(len(live)))]
            cancelled.add(b["id"])
            out.append(Message(kind=MessageKind.CANCEL_REQUEST, payload={"id": b["id"]}, at=at))
        elif kind == "segment":
            s = scenario.segments[int(rng.integers(len(scenario.segments)))]
            factor = float(rng.choice([0.6, 0.8, 1.0, 1.2]))
            new = Capacity(int(s.capacity.weight * factor), int(s.capacity.length * factor))
            payload = segment_out(s, clock) | {"capacity": {"weight": new.weight, "length": new.length}}
            out.append(Message(kind=MessageKind.UPSERT_SEGMENT, payload=payload, at=at))
        elif kind == "reservation":
            b = trunk_blocks[int(rng.integers(len(trunk_blocks)))]
            seg = seg_by_id[b.segments[0]]
            share = float(rng.choice([0.0, 0.1, 0.2]))
            payload = {"block": b.id, "reservation": {"weight": int(seg.capacity.weight * share), "length": int(seg.capacity.length * share)}}
            out.append(Message(kind=MessageKind.UPSERT_RESERVATION, payload=payload, at=at))
        elif kind == "restriction":
            b = trunk_blocks[int(rng.integers(len(trunk_blocks)))]
            restrictions = [] if rng.random() < 0.5 else [{"attribute": "product-type", "mode": "forbid", "values": ["economy"]}]
            out.append(Message(kind=MessageKind.UPSERT_RESTRICTION, payload={"block": b.id, "restrictions": restrictions}, at=at))
        else:
            y = scenario.yards[int(rng.integers(len(scenario.yards)))]
            a = yard_in[y][int(rng.integers(len(yard_in[y])))]
            c = yard_out[y][int(rng.integers(len(yard_out[y])))]
            kind_value = None if rng.random() < 0.5 else "forbidden"
            out.append(
                Message(kind=MessageKind.UPSERT_CONNECTION, payload={"from_block": a.id, "to_block": c.id, "kind": kind_value}, at=at)
            )
    return out


# -- files ---------------------------------------------------------------


def write_stream(messages: List[Message], path: str | Path) -> None:
    with open(path, "w") as fh:
        for m in messages:
            fh.write(json.dumps(m.model_dump(mode="json", exclude_none=True), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_stream(path: str | Path) -> Iterator[Message]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield Message.model_validate_json(line)
