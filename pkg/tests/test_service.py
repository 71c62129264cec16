import copy

import pytest
from fastapi.testclient import TestClient

from catalog import CATALOG, B3P_BLOCK, B3P_SEGMENT, boot, run, s3
from helpers import CLOCK, fig2_init_payload, iso, msg, r1_payload
from wagonchain.fixtures import hm
from wagonchain.service.app import create_app
from wagonchain.service.engine import ChainService, load_products
from wagonchain.service.queue import BackendQueue, Priority


@pytest.fixture
def svc():
    return boot()


@pytest.fixture
def client():
    service = ChainService(clock=CLOCK)
    with TestClient(create_app(service)) as c:
        assert c.post("/state/init", json=fig2_init_payload()).status_code == 200
        yield c


# -- bookings -------------------------------------------------------------------------


def test_booking_returns_chain_and_promise(client):
    res = client.post("/requests", json=r1_payload())
    assert res.status_code == 200
    body = res.json()
    assert body["outcome"] == "routed" and body["stage"] == "isolated-bfs"
    assert body["chain"] == ["b1", "b3"]
    assert body["arrival"] == "2024-01-01T12:30:00Z"


def test_shortening_update_keeps_chain(client):
    promise = client.post("/requests", json=r1_payload()).json()["arrival"]
    res = client.put("/requests/r1", json=r1_payload(delivery_latest=promise))
    assert res.status_code == 200
    assert res.json()["chain"] == ["b1", "b3"] and res.json()["status"] == "assigned"
    stats = client.get("/stats").json()
    assert stats["computations"].get("search:recomplete", 0) == 0


def test_heavy_request_is_not_routable(client):
    body = client.post("/requests", json=r1_payload(demand={"weight": 4500, "length": 600})).json()
    assert body["outcome"] == "not-routable"


def test_unserved_station_is_not_routable(client):
    body = client.post("/requests", json=r1_payload(destination="ZRH")).json()
    assert body["outcome"] == "not-routable" and "chain" not in body


def test_product_window_fills_delivery_time():
    products = load_products()
    assert products["express"] == 29 * 60
    svc = ChainService(clock=CLOCK)
    svc.process([msg("init-state", fig2_init_payload())])
    payload = r1_payload(product="express")
    del payload["delivery_latest"]
    [eff] = svc.process([msg("book-request", payload)])
    assert eff.result["chain"] == ["b1", "b3"]
    assert svc.state.requests["r1"].delivery_latest == hm("03:00") + 29 * 60


def test_unknown_product_without_delivery_rejected(svc):
    payload = r1_payload(id="r9", product="teleport")
    del payload["delivery_latest"]
    [eff] = svc.process([msg("book-request", payload)])
    assert eff.error["code"] == 422 and "r9" not in svc.state.requests


# -- revalidation -------------------------------------------------------------------------


@pytest.mark.parametrize("sc", CATALOG, ids=[sc.name for sc in CATALOG])
def test_revalidation_catalog(sc):
    got, service = run(sc)
    assert got == sc.expect
    assert service.stats.computations["search:recomplete"] == sc.recompletions
    assert service.state.ledger_consistent()


def test_capacity_reduction_never_overbooks(svc):
    svc.process([msg("upsert-segment", s3(500))])
    assert svc.state.segment_usage.get("s3") is None or svc.state.segment_usage["s3"].weight <= 500


def test_unaffected_request_not_searched(svc):
    svc.reset_stats()
    [eff] = svc.process([msg("upsert-segment", s3(4000))])
    assert eff.affected == ["r1"]
    svc.reset_stats()
    s4 = {**s3(100), "id": "s4", "origin": "COS", "destination": "LT", "departure": iso(hm("12:15")), "arrival": iso(hm("13:00"))}
    [eff] = svc.process([msg("upsert-segment", s4)])
    assert eff.affected == [] and not eff.tasks
    assert svc.stats.computations["revalidations"] == 0


def test_deferred_batch_runs_one_wave(svc):
    svc.reset_stats()
    batch = [msg("upsert-segment", s3(w), defer=True) for w in (4500, 4000, 3500)]
    svc.process(batch)
    assert svc.stats.computations["revalidations"] == 0
    assert svc.stats.computations["revalidation-waves"] == 0
    assert svc.parked_revalidation == {"r1"}
    [eff] = svc.process([msg("trigger-compute")])
    assert eff.affected == ["r1"]
    assert svc.stats.computations["revalidation-waves"] == 1
    assert svc.stats.computations["revalidations"] == 1
    assert svc.request_view("r1")["chain"] == ["b1", "b3"]


def test_deferred_booking_waits_for_trigger():
    svc = ChainService(clock=CLOCK)
    svc.process([msg("init-state", fig2_init_payload())])
    svc.process([msg("book-request", r1_payload(), defer=True)])
    assert "r1" not in svc.state.chains
    svc.process([msg("trigger-compute")])
    assert svc.state.chains["r1"].blocks == ("b1", "b3")


def test_messages_endpoint_defer_query(client):
    client.post("/requests", json=r1_payload())
    res = client.post("/messages", params={"defer": "true"}, json=[msg("upsert-segment", s3(500))])
    assert res.status_code == 200 and res.json()[0]["affected"] == ["r1"]
    assert client.get("/requests/r1").json()["chain"] == ["b1", "b3"]
    trig = client.post("/compute/trigger").json()
    assert trig["affected"] == ["r1"]
    assert client.get("/requests/r1").json() == {
        "request": "r1",
        "status": "partial",
        "reason": None,
        "chain": ["b1"],
        "split": 0,
        "arrival": "2024-01-01T08:00:00Z",
    }


# -- dry runs ----------------------------------------------------------------------------


def test_dryrun_search_is_pure(svc):
    st = svc.state
    before = (st.version, copy.deepcopy(st.segment_usage), copy.deepcopy(st.block_usage))
    out = svc.do_dryrun_search(st.requests["r1"])
    assert [c["blocks"] for c in out["chains"]] == [["b1", "b3"]]
    assert (st.version, st.segment_usage, st.block_usage) == before


def test_dryrun_endpoints(client):
    client.post("/requests", json=r1_payload())
    version = client.get("/stats").json()["state"]["version"]
    res = client.post("/dryrun/search", json=r1_payload(id="probe"))
    assert [c["blocks"] for c in res.json()["chains"]] == [["b1", "b3"]]
    bad = client.post("/dryrun/validate-chain", json={"request": r1_payload(), "blocks": ["b1", "b4"]}).json()
    assert not bad["ok"]
    assert "destination-mismatch" in {v["reason"] for v in bad["violations"]}
    gap = client.post("/dryrun/validate-chain", json={"request": r1_payload(), "blocks": ["b1", "b2", "b3"], "required": True}).json()
    assert gap["ok"]
    assert client.get("/stats").json()["state"]["version"] == version


def test_dryrun_reports_reason_when_nothing_found(client):
    res = client.post("/dryrun/search", params={"mode": "respect"}, json=r1_payload(demand={"weight": 4500, "length": 10})).json()
    assert res["chains"] == [] and res["dominant_reason"] == "capacity"


# -- manual chains ----------------------------------------------------------------------


def test_manual_chain_accepts_overbooking(svc):
    svc.process([msg("book-request", r1_payload(id="big", origin="RBL", demand={"weight": 4900, "length": 10}), defer=True)])
    [eff] = svc.process([msg("manual-chain", {"request": "big", "blocks": ["b3"]})])
    assert [v["reason"] for v in eff.result["violations"]] == ["capacity"]
    assert svc.state.chains["big"].blocks == ("b3",)
    assert svc.state.ledger_consistent()


# -- queue ---------------------------------------------------------------------------------


def test_interactive_before_background():
    q = BackendQueue()
    q.keep_history = True
    for k in range(5):
        q.submit(f"bg{k}", lambda: None, Priority.BACKGROUND)
    q.submit("booking", lambda: None, Priority.INTERACTIVE)
    q.drain()
    assert q.executed == ["booking", "bg0", "bg1", "bg2", "bg3", "bg4"]


def test_worker_thread_runs_tasks():
    q = BackendQueue()
    q.start()
    try:
        assert q.submit("x", lambda: 41 + 1).result(timeout=5) == 42
    finally:
        q.stop()
    assert not q.running


def test_failed_task_is_isolated(svc):
    def broken():
        svc.state.segment_usage.clear()
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        svc.call("broken", broken)
    assert svc.queue.failed == 1
    assert svc.state.ledger_consistent()
    [eff] = svc.process([msg("book-request", r1_payload(id="r2"))])
    assert eff.result["outcome"] == "routed"


# -- stats -------------------------------------------------------------------------------------


def test_stats_zero_when_fresh():
    s = ChainService().snapshot_stats()
    assert s["api_calls"] == {} and s["outcomes"] == {} and s["computations"] == {}
    assert s["functions"] == {} and s["state"]["requests"] == 0


def test_stats_after_booking(client):
    client.post("/requests", json=r1_payload())
    s = client.get("/stats").json()
    assert s["outcomes"] == {"routed": 1}
    assert s["computations"]["assignments"] == 1
    assert s["computations"]["search:best-isolated"] >= 1
    assert s["functions"]["best-chain"]["calls"] > 0
    assert s["invariants"] == {"capacity_violations": 0, "dropped_fixed": 0}


def test_stats_monotone(svc):
    seen = []
    for k in range(4):
        svc.process([msg("book-request", r1_payload(id=f"m{k}", demand={"weight": 100, "length": 10}))])
        seen.append(svc.snapshot_stats())
    for a, b in zip(seen, seen[1:]):
        for family in ("api_calls", "outcomes", "computations", "stages"):
            for key, n in a[family].items():
                assert b[family][key] >= n


# -- errors and reset ------------------------------------------------------------------------


def test_duplicate_booking_conflicts(client):
    client.post("/requests", json=r1_payload())
    res = client.post("/requests", json=r1_payload())
    assert res.status_code == 409 and res.json()["reason"] == "conflict"


def test_unknown_request_404(client):
    assert client.get("/requests/nope").status_code == 404
    assert client.delete("/requests/nope").status_code == 404
    assert client.put("/requests/nope", json=r1_payload(id="nope")).status_code == 404


def test_schema_error_422(client):
    res = client.post("/requests", json={"id": "x"})
    assert res.status_code == 422 and res.json()["reason"] == "schema"


def test_unknown_reference_leaves_state_untouched(svc):
    version = svc.state.version
    [eff] = svc.process([msg("upsert-block", {**B3P_BLOCK, "segments": ["missing"]})])
    assert eff.error["code"] == 404
    assert svc.state.version == version and "b3p" not in svc.state.blocks


def test_cancel_frees_capacity(client):
    client.post("/requests", json=r1_payload())
    assert client.delete("/requests/r1").status_code == 200
    s = client.get("/stats").json()["state"]
    assert s["requests"] == 0 and s["chains"] == 0


def test_init_state_resets(svc):
    svc.process([msg("init-state", {"segments": [B3P_SEGMENT], "blocks": [B3P_BLOCK]})])
    st = svc.state
    assert set(st.blocks) == {"b3p"} and not st.requests and not st.chains
    svc.process([msg("init-state", {"segments": [B3P_SEGMENT], "blocks": [B3P_BLOCK]})])
    assert set(svc.state.blocks) == {"b3p"}


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "ok" and body["worker"] is True


def test_replay_determinism():
    log = [msg("init-state", fig2_init_payload())]
    log += [msg("book-request", r1_payload(id=f"q{k}", pickup_earliest=iso(100 + k), demand={"weight": 700, "length": 10})) for k in range(8)]
    log += [msg("upsert-segment", s3(2500)), msg("cancel-request", {"id": "q1"})]
    runs = []
    for _ in range(2):
        service = ChainService(clock=CLOCK)
        service.process(log)
        runs.append((service.state.fingerprint(), sorted(service.outcome_log)))
    assert runs[0] == runs[1]
