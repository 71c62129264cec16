import random
import time
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as hs

from helpers import oracle_chains, rainbow_instance, random_network
from wagonchain.fixtures import add_simple_train, fig2_state, hm, r1, tons
from wagonchain.model import Block, Capacity, NetworkState, Request, Segment, TransportChain
from wagonchain.search import (
    COUNT_LIMIT,
    DEPTH_LIMIT,
    LEGACY,
    TIME_LIMIT,
    SearchLimits,
    TieBreak,
    brute_force_chains,
    enumerate_chains,
    find_best_chain,
    tiebreak_key,
)
from wagonchain.validation import CapacityMode, validate_chain

UNLIMITED = SearchLimits(max_chains=10**6)


def with_b3_prime(st):
    st.upsert_segment(Segment("s3p", "50210", "RBL", "COS", hm("10:30"), hm("12:40"), tons(500, 400)))
    st.upsert_block(Block("b3p", ("s3p",), "RBL", "COS", hm("09:00"), hm("13:00")))
    return st


# -- examples ---------------------------------------------------------------------


def test_limits_defaults_and_positivity():
    lim = SearchLimits()
    assert (lim.time_budget, lim.max_blocks, lim.max_frontier, lim.max_chains) == (5.0, 7, 10_000_000, 100)
    with pytest.raises(ValueError):
        SearchLimits(max_blocks=0)


def test_best_chain_fig2(fig2):
    out = find_best_chain(r1(), fig2, CapacityMode.RESPECT)
    assert out.best == TransportChain(("b1", "b3"))
    assert not out.flags


def test_best_chain_capacity_blocked(fig2):
    fig2.add_request(r1(id="hog", origin="RBL", demand=tons(500, 10)))
    fig2.assign("hog", TransportChain(("b3",)))
    blocked = find_best_chain(r1(), fig2, CapacityMode.RESPECT)
    assert blocked.best is None and not blocked.flags
    assert blocked.dominant_reason() == "capacity"
    assert find_best_chain(r1(), fig2, CapacityMode.IGNORE).best == TransportChain(("b1", "b3"))


def test_best_chain_degenerate(fig2):
    out = find_best_chain(r1(destination="FBG"), fig2)
    assert out.best is None and out.dominant_reason() == "degenerate"


def test_loopy_optimum_falls_back():
    st = NetworkState()
    for bid, o, d, dep, arr in [("ab", "A", "B", 0, 30), ("ba", "B", "A", 40, 70), ("ac", "A", "C", 100, 200)]:
        st.upsert_segment(Segment(bid, bid, o, d, dep, arr, Capacity(100, 100)))
        st.upsert_block(Block(bid, (bid,), o, d, dep, arr))
    r = Request("q", "A", "C", 0, 500, Capacity(1, 1))
    out = find_best_chain(r, st, CapacityMode.IGNORE)
    assert out.fallback
    assert out.best == TransportChain(("ac",))
    assert out.best == brute_force_chains(r, st)[0]


def test_enumerate_fig2(fig2):
    out = enumerate_chains(r1(), fig2)
    assert out.chains == [TransportChain(("b1", "b3"))]
    assert not out.flags


def test_enumerate_with_second_block_ordered_by_key(fig2):
    with_b3_prime(fig2)
    out = enumerate_chains(r1(), fig2)
    assert out.chains == [TransportChain(("b1", "b3")), TransportChain(("b1", "b3p"))]
    assert out.keys == sorted(out.keys)


def test_enumerate_count_limit(fig2):
    with_b3_prime(fig2)
    out = enumerate_chains(r1(), fig2, limits=SearchLimits(max_chains=1))
    assert out.chains == [TransportChain(("b1", "b3"))]
    assert COUNT_LIMIT in out.flags


def test_depth_limit_flag():
    st = NetworkState()
    add_simple_train(st, "T", [("A", 0, 0), ("B", 60, 70), ("C", 130, 140), ("D", 200, 200)], Capacity(100, 100), 0, 0, all_pairs=False)
    r = Request("q", "A", "D", 0, 1000, Capacity(1, 1))
    out = enumerate_chains(r, st, CapacityMode.IGNORE, SearchLimits(max_blocks=2))
    assert out.chains == [] and DEPTH_LIMIT in out.flags
    full = enumerate_chains(r, st, CapacityMode.IGNORE, SearchLimits(max_blocks=3))
    assert full.chains == [TransportChain(("T:A-B", "T:B-C", "T:C-D"))]


def test_manual_request_is_never_searched(fig2):
    with pytest.raises(ValueError):
        find_best_chain(r1(manual=True), fig2)


def test_required_prefix_is_honored(fig2):
    with_b3_prime(fig2)
    r = r1(required_prefix=("b1", "b3p"))
    out = enumerate_chains(r, fig2)
    assert out.chains == [TransportChain(("b1", "b3p"), 2)]
    partial = enumerate_chains(r1(required_prefix=("b1",)), fig2)
    assert [c.blocks for c in partial.chains] == [("b1", "b3"), ("b1", "b3p")]
    assert all(c.split == 1 for c in partial.chains)


def test_time_budget_respected():
    st = NetworkState()
    # a wide layered network with many equivalent paths
    for layer in range(6):
        for k in range(12):
            o, d = f"L{layer}", f"L{layer + 1}"
            sid = f"s{layer}_{k}"
            st.upsert_segment(Segment(sid, sid, o, d, 100 * layer + k, 100 * layer + 50 + k, Capacity(100, 100)))
            st.upsert_block(Block(sid, (sid,), o, d, 100 * layer + k, 100 * layer + 50 + k))
    r = Request("q", "L0", "L6", 0, 10_000, Capacity(1, 1))
    t0 = time.perf_counter()
    out = enumerate_chains(r, st, CapacityMode.IGNORE, SearchLimits(time_budget=0.05, max_chains=10**7))
    assert time.perf_counter() - t0 < 0.05 + 0.1
    assert TIME_LIMIT in out.flags


# -- tie-break ---------------------------------------------------------------------


def test_tiebreak_key_fig2(fig2):
    key = tiebreak_key(["b1", "b3"], fig2)
    assert key[:4] == (750, 240, 2, (600,))
    assert key[4] == ("b1", "b3")


def test_tiebreak_ids_break_full_ties():
    st = NetworkState()
    for bid in ("x2", "x1"):
        st.upsert_segment(Segment(bid, bid, "A", "B", 10, 20, Capacity(1, 1)))
        st.upsert_block(Block(bid, (bid,), "A", "B", 5, 25))
    assert tiebreak_key(["x1"], st) < tiebreak_key(["x2"], st)
    out = enumerate_chains(Request("q", "A", "B", 0, 100, Capacity(1, 1)), st, CapacityMode.IGNORE)
    assert [c.blocks for c in out.chains] == [("x1",), ("x2",)]


def test_legacy_order_swaps():
    """Early-departure/late-arrival vs late-departure/early-arrival."""
    st = NetworkState()
    st.upsert_segment(Segment("slow", "t1", "A", "B", 60, 600, Capacity(1, 1)))
    st.upsert_segment(Segment("fast", "t2", "A", "B", 120, 300, Capacity(1, 1)))
    st.upsert_block(Block("slow", ("slow",), "A", "B", 50, 610))
    st.upsert_block(Block("fast", ("fast",), "A", "B", 110, 310))
    r = Request("q", "A", "B", 0, 1000, Capacity(1, 1))
    default = enumerate_chains(r, st, CapacityMode.IGNORE)
    legacy = enumerate_chains(r, st, CapacityMode.IGNORE, key=LEGACY)
    assert [c.blocks for c in default.chains] == [("fast",), ("slow",)]
    assert [c.blocks for c in legacy.chains] == [("slow",), ("fast",)]
    assert find_best_chain(r, st, CapacityMode.IGNORE, key=LEGACY).best.blocks == ("slow",)


def test_tiebreak_config_validation():
    with pytest.raises(ValueError):
        TieBreak(("arrival", "departure", "intermediate", "blocks"))
    with pytest.raises(ValueError):
        TieBreak(("arrival", "departure"))
    with pytest.raises(ValueError):
        tiebreak_key([], NetworkState())


# -- properties over random networks --------------------------------------------------

seeds = hs.integers(0, 2**32 - 1)


@given(seeds, hs.sampled_from(list(CapacityMode)))
def test_enumeration_equals_oracle(seed, mode):
    st, r = random_network(random.Random(seed))
    out = enumerate_chains(r, st, mode, UNLIMITED)
    assert not out.flags
    assert out.chains == oracle_chains(r, st, mode)


@given(seeds, hs.sampled_from(list(CapacityMode)))
def test_best_chain_is_first_enumerated(seed, mode):
    st, r = random_network(random.Random(seed))
    best = find_best_chain(r, st, mode)
    full = enumerate_chains(r, st, mode, UNLIMITED)
    assert not best.flags and not full.flags
    assert best.best == (full.chains[0] if full.chains else None)


@given(seeds)
def test_enumerated_chains_are_valid_and_distinct(seed):
    st, r = random_network(random.Random(seed))
    out = enumerate_chains(r, st, CapacityMode.RESPECT, UNLIMITED)
    assert len({c.blocks for c in out.chains}) == len(out.chains)
    for c in out.chains:
        assert validate_chain(r, c, st, CapacityMode.RESPECT).ok
        assert c.blocks[: len(r.required_prefix)] == r.required_prefix
        assert c.split == len(r.required_prefix)


@given(seeds, hs.integers(0, 300), hs.integers(0, 600))
def test_relaxing_window_never_loses_chains(seed, earlier, later):
    st, r = random_network(random.Random(seed))
    base = enumerate_chains(r, st, CapacityMode.IGNORE, UNLIMITED)
    wide = replace(r, pickup_earliest=r.pickup_earliest - earlier, delivery_latest=r.delivery_latest + later)
    relaxed = enumerate_chains(wide, st, CapacityMode.IGNORE, UNLIMITED)
    assert not base.flags and not relaxed.flags
    assert {c.blocks for c in base.chains} <= {c.blocks for c in relaxed.chains}


@given(seeds)
def test_capacity_screening(seed):
    st, r = random_network(random.Random(seed))
    respect = enumerate_chains(r, st, CapacityMode.RESPECT, UNLIMITED)
    isolated = enumerate_chains(r, st, CapacityMode.ISOLATED, UNLIMITED)
    ignore = enumerate_chains(r, st, CapacityMode.IGNORE, UNLIMITED)
    assert {c.blocks for c in respect.chains} <= {c.blocks for c in ignore.chains}
    assert {c.blocks for c in isolated.chains} <= {c.blocks for c in ignore.chains}


@given(seeds)
def test_search_is_read_only(seed):
    st, r = random_network(random.Random(seed))
    before = (st.version, st.fingerprint())
    find_best_chain(r, st)
    enumerate_chains(r, st)
    assert (st.version, st.fingerprint()) == before


@given(seeds)
def test_rainbow_family_falls_back_to_loop_free_optimum(seed):
    st, r = rainbow_instance(random.Random(seed))
    out = find_best_chain(r, st, CapacityMode.IGNORE)
    assert out.fallback
    assert out.best == oracle_chains(r, st, CapacityMode.IGNORE)[0]


def test_fig2_oracle_matches():
    st = fig2_state()
    assert brute_force_chains(r1(), st, CapacityMode.RESPECT) == [TransportChain(("b1", "b3"))]
