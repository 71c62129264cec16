"""Random instance generators and wire builders shared by the tests."""

from __future__ import annotations

import random
from contextlib import contextmanager
from typing import Dict, List, Optional, Tuple

from wagonchain.fixtures import fig2_state
from wagonchain.model import (
    Block,
    BlockKind,
    Capacity,
    ConnectionKind,
    NetworkState,
    Request,
    Restriction,
    RestrictionMode,
    Segment,
    Station,
    StationKind,
    TransportChain,
)
from wagonchain.search import brute_force_chains
from wagonchain.service.schema import Clock, block_out, segment_out
from wagonchain.validation import CapacityMode, validate_chain

GROUPS = ("A", "B", "C", "D")
PRODUCTS = ("express", "standard")


def random_network(rng: random.Random, n_blocks: Optional[int] = None) -> Tuple[NetworkState, Request]:
    """Small network over at most four station groups plus one request.

    Groups may hold two stations, blocks go back and forth between groups,
    some are phase connectors, and connections, restrictions and existing
    bookings are sprinkled in so every validity rule gets exercised.
    """
    st = NetworkState()
    stations: List[str] = []
    for g in GROUPS:
        stations.append(g)
        st.add_station(Station(g, StationKind.OPERATIONAL, g))
        if rng.random() < 0.4:
            other = g + "2"
            stations.append(other)
            st.add_station(Station(other, StationKind.OPERATIONAL, g))
    n = n_blocks if n_blocks is not None else rng.randint(3, 15)
    ids: List[str] = []
    for i in range(n):
        bid = f"k{i:02d}"
        if rng.random() < 0.12:
            yard = rng.choice(GROUPS)
            t = rng.randint(0, 900)
            st.upsert_block(Block(bid, (), yard, yard, t, t + rng.randint(0, 60), kind=BlockKind.PHASE_CONNECTOR))
            ids.append(bid)
            continue
        o, d = rng.sample(stations, 2)
        dep = rng.randint(0, 900)
        arr = dep + rng.randint(20, 240)
        seg = Segment(f"{bid}:s", f"t{i}", o, d, dep, arr, Capacity(rng.choice([200, 500, 1000]), 1000))
        st.upsert_segment(seg)
        restrictions = ()
        if rng.random() < 0.15:
            mode = rng.choice([RestrictionMode.ALLOW, RestrictionMode.FORBID])
            restrictions = (Restriction("product-type", mode, frozenset({rng.choice(PRODUCTS)})),)
        reservation = Capacity(rng.choice([0, 0, 300]), 0)
        st.upsert_block(
            Block(bid, (seg.id,), o, d, dep - rng.randint(0, 30), arr + rng.randint(0, 30), restrictions, reservation)
        )
        ids.append(bid)
    for _ in range(rng.randint(0, 4)):
        a, b = rng.sample(ids, 2)
        kind = rng.choice(list(ConnectionKind))
        if kind is ConnectionKind.EXCLUSIVE and st.exclusive_target(a) not in (None, b):
            continue
        st.set_connection(a, b, kind)
    # background bookings that eat capacity
    for j in range(rng.randint(0, 2)):
        bid = rng.choice(ids)
        blk = st.blocks[bid]
        bg = Request(f"bg{j}", blk.origin, blk.destination, 0, 10_000, Capacity(rng.choice([100, 400]), 10))
        st.add_request(bg)
        st.assign(bg.id, TransportChain((bid,), 1))
    o, d = rng.sample(GROUPS, 2)
    prefix: Tuple[str, ...] = ()
    if rng.random() < 0.15:
        prefix = (rng.choice(ids),)
    r = Request(
        "q",
        rng.choice([s for s in stations if st.group(s) == o]),
        rng.choice([s for s in stations if st.group(s) == d]),
        rng.randint(0, 300),
        rng.randint(600, 1400),
        Capacity(rng.choice([50, 150, 400]), 20),
        {"product-type": rng.choice(PRODUCTS)} if rng.random() < 0.8 else {},
        required_prefix=prefix,
    )
    st.add_request(r)
    return st, r


def random_opt_instance(rng: random.Random, total: int = 20) -> Tuple[NetworkState, List[Request], List[str], Dict[str, List[TransportChain]]]:
    """Random throughput model input with at most ``total`` candidate chains.

    Returns (state, model requests, fixed ids, candidates). Some model
    requests already hold chains (the fixed ones), others outside the
    model hold chains as untouchable background usage.
    """
    st = NetworkState()
    n_trains = rng.randint(1, 3)
    blocks: List[str] = []
    for t in range(n_trains):
        n_seg = rng.randint(1, 3)
        cap = Capacity(rng.choice([300, 400, 600, 800]), rng.choice([200, 400, 1000]))
        for s in range(n_seg):
            st.upsert_segment(Segment(f"T{t}:{s}", f"T{t}", f"S{s}", f"S{s + 1}", 100 * s, 100 * s + 50, cap))
        for i in range(n_seg):
            for j in range(i + 1, n_seg + 1):
                if rng.random() < 0.7 or (i, j) == (0, n_seg):
                    bid = f"T{t}:{i}-{j}"
                    res = Capacity(rng.choice([0, 0, 0, 150, 450]), rng.choice([0, 0, 100]))
                    manual = Capacity(rng.choice([0, 0, 0, 100]), 0)
                    segs = tuple(f"T{t}:{s}" for s in range(i, j))
                    st.upsert_block(Block(bid, segs, f"S{i}", f"S{j}", 100 * i - 10, 100 * j, reservation=res, manual_utilization=manual))
                    blocks.append(bid)
    n_req = rng.randint(0, 6)
    budget = total
    reqs: List[Request] = []
    cands: Dict[str, List[TransportChain]] = {}
    for k in range(n_req):
        if budget <= 0:
            break
        r = Request(f"r{k}", "S0", "S9", 0, 10_000, Capacity(rng.choice([50, 100, 200, 300]), rng.choice([10, 50, 100])), priority=rng.choice([1, 1, 1, 2, 3]))
        st.add_request(r)
        m = rng.randint(1, min(4, budget, len(blocks)))
        chains = []
        for _ in range(m):
            length = rng.randint(1, 2)
            chains.append(TransportChain(tuple(rng.sample(blocks, min(length, len(blocks))))))
        chains = list(dict.fromkeys(chains))
        budget -= len(chains)
        reqs.append(r)
        cands[r.id] = chains
    fixed = []
    for r in reqs:
        if rng.random() < 0.3:
            chain = rng.choice(cands[r.id])
            st.assign(r.id, chain)
            fixed.append(r.id)
    for j in range(rng.randint(0, 2)):
        bg = Request(f"bg{j}", "S0", "S9", 0, 10_000, Capacity(rng.choice([100, 250]), 20))
        st.add_request(bg)
        st.assign(bg.id, TransportChain((rng.choice(blocks),)))
    return st, reqs, fixed, cands


def rainbow_instance(rng: random.Random) -> Tuple[NetworkState, Request]:
    """Network whose key-minimal block path revisits a station group.

    A fast detour A->B->A reaches A's onward block early enough to beat the
    direct start, so the single-label search settles on a loopy label,
    while loop-free chains (direct or via decoys) exist.
    """
    st = NetworkState()
    base = rng.randint(0, 200)
    width = rng.randint(1, 4)

    def seg_block(bid: str, o: str, d: str, dep: int, arr: int, cutoff: Optional[int] = None) -> None:
        st.upsert_segment(Segment(bid + ":s", "t" + bid, o, d, dep, arr, Capacity(1000, 1000)))
        st.upsert_block(Block(bid, (bid + ":s",), o, d, dep if cutoff is None else cutoff, arr))

    # loop: A->B departs earliest, B->A brings it back before the A->C block
    seg_block("a_go", "A", "B", base, base + 30)
    seg_block("b_back", "B", "A", base + 40, base + 70)
    target = "C"
    seg_block("a_fin", "A", target, base + 100, base + 200 + rng.randint(0, 50))
    for i in range(width):
        # decoy loop-free detours via other groups, arriving later
        mid = f"M{i}"
        seg_block(f"a_m{i}", "A", mid, base + 5 + i, base + 60 + i)
        seg_block(f"m{i}_c", mid, target, base + 300 + i, base + 400 + 10 * i)
    r = Request("q", "A", target, base - 10, base + 2000, Capacity(10, 10))
    st.add_request(r)
    return st, r


def oracle_chains(r: Request, st: NetworkState, mode: CapacityMode, max_blocks: int = 7) -> List[TransportChain]:
    return brute_force_chains(r, st, mode, max_blocks)


def is_valid(r: Request, chain: TransportChain, st: NetworkState, mode: CapacityMode = CapacityMode.RESPECT) -> bool:
    return validate_chain(r, chain, st, mode).ok


# -- wire helpers -----------------------------------------------------------

CLOCK = Clock()


def iso(minutes: int) -> str:
    return CLOCK.iso(minutes)


def fig2_init_payload() -> dict:
    st = fig2_state(with_request=False)
    return {
        "segments": [segment_out(s, CLOCK) for s in sorted(st.segments.values(), key=lambda s: s.id)],
        "blocks": [block_out(b, CLOCK) for b in sorted(st.blocks.values(), key=lambda b: b.id)],
    }


def r1_payload(**changes) -> dict:
    body = {
        "id": "r1",
        "origin": "FBG",
        "destination": "COS",
        "pickup_earliest": iso(180),
        "delivery_latest": iso(14 * 60),
        "demand": {"weight": 800, "length": 600},
    }
    body.update(changes)
    return body


def msg(kind: str, payload: Optional[dict] = None, defer: bool = False) -> dict:
    return {"kind": kind, "payload": payload or {}, "defer": defer}


def random_booking_sequence(rng: random.Random, n_requests: Optional[int] = None) -> Tuple[NetworkState, List[Request]]:
    """Corridor A-B-C-D served by a few trains, plus requests arriving in order."""
    from wagonchain.fixtures import add_simple_train

    st = NetworkState()
    corridor = ["A", "B", "C", "D"]
    for t in range(rng.randint(2, 4)):
        start = rng.randint(0, 300)
        stops = []
        for i, s in enumerate(corridor):
            arr = start + 120 * i
            stops.append((s, arr, arr + 10))
        if rng.random() < 0.5:
            stops.reverse()
            stops = [(s, start + 120 * i, start + 120 * i + 10) for i, (s, _, _) in enumerate(stops)]
        add_simple_train(st, f"T{t}", stops, Capacity(rng.choice([300, 500, 800]), 1000), 20, 20)
    reqs = []
    for k in range(n_requests if n_requests is not None else rng.randint(1, 8)):
        o, d = rng.sample(corridor, 2)
        reqs.append(
            Request(
                f"q{k}",
                o,
                d,
                rng.randint(0, 400),
                rng.randint(600, 1200),
                Capacity(rng.choice([100, 200, 300]), 10),
            )
        )
    return st, reqs


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE_LINES: List[str] = []


@contextmanager
def criterion(cid: str, title: str):
    """Record one PASS/FAIL line for ``cid``; failures inside still raise."""
    detail: Dict[str, str] = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        line = f"{cid} FAIL {title}: {detail['text'] or type(exc).__name__}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"{cid} PASS {title}: {detail['text']}"
    ACCEPTANCE_LINES.append(line)
    print(line)
