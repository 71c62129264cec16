"""Small hand-checkable networks used by tests, docs and the CLI demo.

``fig2`` is the two-train network FBG-LQ-RBL / RBL-COS-LT with one
request FBG->COS. Times are minutes after midnight of the epoch day,
capacities are decitons and decimeters.
"""

from __future__ import annotations

from typing import Iterable, Optional

from .model import Block, Capacity, NetworkState, Request, Segment


def hm(clock: str) -> int:
    """'03:30' -> 210 minutes."""
    h, m = clock.split(":")
    return int(h) * 60 + int(m)


def tons(t: float, meters: float = 0) -> Capacity:
    return Capacity(round(t * 10), round(meters * 10))


def fig2_state(with_request: bool = True) -> NetworkState:
    st = NetworkState()
    st.upsert_segment(Segment("s1", "50476", "FBG", "LQ", hm("04:00"), hm("04:45"), tons(400, 300)))
    st.upsert_segment(Segment("s2", "50476", "LQ", "RBL", hm("05:00"), hm("07:00"), tons(400, 300)))
    st.upsert_segment(Segment("s3", "50208", "RBL", "COS", hm("10:00"), hm("12:00"), tons(500, 400)))
    st.upsert_segment(Segment("s4", "50208", "COS", "LT", hm("12:15"), hm("13:00"), tons(500, 400)))
    st.upsert_block(Block("b1", ("s1", "s2"), "FBG", "RBL", hm("03:30"), hm("08:00")))
    st.upsert_block(Block("b2", ("s2",), "LQ", "RBL", hm("04:15"), hm("08:00")))
    st.upsert_block(Block("b3", ("s3",), "RBL", "COS", hm("09:00"), hm("12:30")))
    st.upsert_block(Block("b4", ("s3", "s4"), "RBL", "LT", hm("09:00"), hm("13:30")))
    if with_request:
        st.add_request(r1())
    return st


def r1(**changes) -> Request:
    fields = dict(
        id="r1",
        origin="FBG",
        destination="COS",
        pickup_earliest=hm("03:00"),
        delivery_latest=hm("14:00"),
        demand=tons(80, 60),
    )
    fields.update(changes)
    return Request(**fields)


def request(
    rid: str,
    origin: str,
    destination: str,
    pickup: int,
    delivery: int,
    weight_t: float,
    length_m: float = 10,
    prefix: Iterable[str] = (),
    priority: int = 1,
    attributes: Optional[dict] = None,
) -> Request:
    return Request(
        rid,
        origin,
        destination,
        pickup,
        delivery,
        tons(weight_t, length_m),
        attributes or {},
        priority,
        tuple(prefix),
    )


def add_simple_train(
    st: NetworkState,
    train: str,
    stops: list,
    capacity: Capacity,
    board_buffer: int = 30,
    deboard_buffer: int = 30,
    all_pairs: bool = True,
) -> list:
    """Add a train through ``stops`` = [(station, arrival, departure), ...] and its blocks.

    Creates one segment per consecutive stop pair and one block per ordered
    stop pair (or only consecutive pairs with ``all_pairs=False``).
    Returns the created block ids.
    """
    seg_ids = []
    for i in range(len(stops) - 1):
        a, b = stops[i], stops[i + 1]
        sid = f"{train}:{i}"
        st.upsert_segment(Segment(sid, train, a[0], b[0], a[2], b[1], capacity))
        seg_ids.append(sid)
    out = []
    for i in range(len(stops)):
        for j in range(i + 1, len(stops)):
            if not all_pairs and j != i + 1:
                continue
            bid = f"{train}:{stops[i][0]}-{stops[j][0]}"
            st.upsert_block(
                Block(
                    bid,
                    tuple(seg_ids[i:j]),
                    stops[i][0],
                    stops[j][0],
                    stops[i][2] - board_buffer,
                    stops[j][1] + deboard_buffer,
                )
            )
            out.append(bid)
    return out
