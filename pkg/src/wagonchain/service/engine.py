"""Stateful chain service: messages in, chains and statistics out.

Every method prefixed ``do_`` mutates or reads the state and must run on
the backend worker (through :class:`BackendQueue`). The public facade
methods wrap them into tasks.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter, defaultdict
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set

from pydantic import ValidationError

from ..assignment import AssignConfig, Assigner, Instrumentation, ROUTED
from ..model import (
    ConnectionKind,
    NetworkState,
    Request,
    RequestStatus,
    StatusKind,
    TransportChain,
    UNASSIGNED,
    UnknownObjectError,
)
from ..search import enumerate_chains, find_best_chain
from ..validation import (
    CapacityMode,
    capacity_violations,
    failed_restrictions,
    transfer_issue,
    validate_chain,
)
from .queue import BackendQueue, Priority
from .schema import (
    BlockIn,
    ChainIn,
    Clock,
    ConnectionIn,
    IdIn,
    InitState,
    Message,
    MessageKind,
    RequestIn,
    ReservationIn,
    RestrictionsIn,
    SegmentIn,
    TrainIn,
)

log = logging.getLogger(__name__)

NETWORK_KINDS = {
    MessageKind.UPSERT_TRAIN,
    MessageKind.DELETE_TRAIN,
    MessageKind.UPSERT_BLOCK,
    MessageKind.UPSERT_SEGMENT,
    MessageKind.UPSERT_CONNECTION,
    MessageKind.UPSERT_RESTRICTION,
    MessageKind.UPSERT_RESERVATION,
}


def load_products(path: Optional[str] = None) -> Dict[str, int]:
    """Delivery window in minutes per product type."""
    if path is None:
        text = resources.files("wagonchain").joinpath("products.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    table = json.loads(text)
    return {name: int(round(float(hours) * 60)) for name, hours in table["window_hours"].items()}


class MessageRejected(Exception):
    def __init__(self, code: int, reason: str, details: Sequence[Any] = ()):
        super().__init__(f"{code} {reason}: {list(details)}")
        self.code = code
        self.reason = reason
        self.details = list(details)

    def body(self) -> dict:
        return {"code": self.code, "reason": self.reason, "details": self.details}


@dataclass
class Effects:
    kind: str
    changed: List[str] = field(default_factory=list)
    affected: List[str] = field(default_factory=list)
    tasks: List[str] = field(default_factory=list)
    result: Optional[dict] = None
    error: Optional[dict] = None

    def as_dict(self) -> dict:
        out = {"kind": self.kind, "changed": self.changed, "affected": self.affected, "tasks": self.tasks}
        if self.result is not None:
            out["result"] = self.result
        if self.error is not None:
            out["error"] = self.error
        return out


class Stats:
    """Monotone counters between resets."""

    def __init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.api_calls: Counter = Counter()
        self.backend_seconds: Dict[str, float] = defaultdict(float)
        self.outcomes: Counter = Counter()
        self.outcome_seconds: Dict[str, float] = defaultdict(float)
        self.stages: Counter = Counter()
        self.computations: Counter = Counter()
        self.capacity_violations = 0
        self.dropped_fixed = 0


class ChainService:
    def __init__(
        self,
        state: Optional[NetworkState] = None,
        config: Optional[AssignConfig] = None,
        clock: Optional[Clock] = None,
        products: Optional[Dict[str, int]] = None,
    ):
        self.config = config or AssignConfig()
        self.clock = clock or Clock()
        self.products = products if products is not None else load_products()
        self.instr = Instrumentation()
        self.stats = Stats()
        self.queue = BackendQueue(on_failure=self._recover)
        self.outcome_log: List[tuple] = []
        self._install(state or NetworkState())

    def _install(self, state: NetworkState) -> None:
        self.state = state
        self.assigner = Assigner(state, self.config, instrumentation=self.instr)
        self.promises: Dict[str, int] = {}
        self.parked_revalidation: Set[str] = set()
        self.parked_assignment: List[str] = []
        self.pending_revalidation: Set[str] = set()
        self.wave_scheduled = False

    def _recover(self, exc: BaseException) -> None:
        self.state.rebuild_ledger()

    # -- facade ------------------------------------------------------------

    def submit(self, kind: str, fn: Callable[[], Any], priority: Priority = Priority.INTERACTIVE) -> Future:
        self.stats.api_calls[kind] += 1
        return self.queue.submit(kind, self._timed(kind, fn), priority)

    def _timed(self, kind: str, fn: Callable[[], Any]) -> Callable[[], Any]:
        def run():
            t0 = time.perf_counter()
            try:
                return fn()
            finally:
                self.stats.backend_seconds[kind] += time.perf_counter() - t0

        return run

    def call(self, kind: str, fn: Callable[[], Any], priority: Priority = Priority.INTERACTIVE) -> Any:
        """Submit and wait; drains in this thread when no worker runs."""
        fut = self.submit(kind, fn, priority)
        if not self.queue.running:
            self.queue.drain()
        return fut.result()

    def process(self, messages: Iterable[Message | dict], defer: Optional[bool] = None) -> List[Effects]:
        """Apply messages in order and drain every follow-up task."""
        msgs = [m if isinstance(m, Message) else Message.model_validate(m) for m in messages]
        if defer is not None:
            msgs = [m.model_copy(update={"defer": defer}) for m in msgs]
        out = self.call("messages", lambda: [self.do_apply(m) for m in msgs])
        if not self.queue.running:
            self.queue.drain()
        return out

    # -- messages ------------------------------------------------------------

    def do_apply(self, m: Message) -> Effects:
        """Apply one message atomically; rejections leave the state untouched."""
        eff = Effects(m.kind.value)
        self.stats.computations["messages"] += 1
        try:
            try:
                payload = m.parsed()
            except ValidationError as exc:
                raise MessageRejected(422, "schema", [e["msg"] for e in exc.errors()]) from None
            handler = getattr(self, "_on_" + m.kind.value.replace("-", "_"))
            handler(payload, m, eff)
        except MessageRejected as exc:
            eff.error = exc.body()
        except (UnknownObjectError, ValueError) as exc:
            eff.error = {"code": 422, "reason": "invalid", "details": [str(exc)]}
        return eff

    def _network_effects(self, affected: Set[str], m: Message, eff: Effects) -> None:
        st = self.state
        targets = sorted(
            rid
            for rid in affected
            if rid in st.chains and not st.requests[rid].manual and st.status[rid].kind in (StatusKind.ASSIGNED, StatusKind.PARTIAL)
        )
        eff.affected = targets
        if not targets:
            return
        if m.defer:
            self.parked_revalidation.update(targets)
            return
        self.pending_revalidation.update(targets)
        eff.tasks.append(self._schedule_wave())

    def _schedule_wave(self) -> str:
        if not self.wave_scheduled:
            self.wave_scheduled = True
            self.submit("revalidation", self.do_revalidation_wave, Priority.BACKGROUND)
        return "revalidation"

    def _holders_over(self, segment_ids: Iterable[str]) -> Set[str]:
        st = self.state
        out: Set[str] = set()
        for sid in segment_ids:
            for bid in st.blocks_on_segment(sid):
                out |= st.holders(bid)
        return out

    def _on_init_state(self, p: InitState, m: Message, eff: Effects) -> None:
        st = NetworkState()
        for s in p.stations:
            st.add_station(s.to_model())
        for s in p.segments:
            st.upsert_segment(s.to_model(self.clock))
        for b in p.blocks:
            st.upsert_block(b.to_model(self.clock))
        for c in p.connections:
            self._check_connection(st, c)
            st.set_connection(c.from_block, c.to_block, c.kind)
        for r in p.requests:
            st.add_request(r.to_model(self.clock, self.products))
        for c in p.chains:
            self._manual_chain(st, c)
        self._install(st)
        self.assigner.cache and self.assigner.cache.clear()
        eff.changed = ["state"]

    def _on_upsert_segment(self, p: SegmentIn, m: Message, eff: Effects) -> None:
        seg = p.to_model(self.clock)
        self.state.upsert_segment(seg)
        eff.changed = [seg.id]
        self._network_effects(self._holders_over([seg.id]), m, eff)

    def _on_upsert_block(self, p: BlockIn, m: Message, eff: Effects) -> None:
        st = self.state
        b = p.to_model(self.clock)
        missing = [sid for sid in b.segments if sid not in st.segments]
        if missing:
            raise MessageRejected(404, "unknown-reference", missing)
        old = st.blocks.get(b.id)
        affected = self._holders_over(b.segments) | st.holders(b.id)
        if old is not None:
            affected |= self._holders_over(old.segments)
        st.upsert_block(b)
        eff.changed = [b.id]
        self._network_effects(affected, m, eff)

    def _on_upsert_train(self, p: TrainIn, m: Message, eff: Effects) -> None:
        st = self.state
        segs = [s.to_model(self.clock) for s in p.segments]
        blocks = [b.to_model(self.clock) for b in p.blocks]
        known = {s.id for s in segs}
        for s in segs:
            if s.train != p.id:
                raise MessageRejected(422, "invalid", [f"segment {s.id} belongs to train {s.train}"])
        missing = sorted({sid for b in blocks for sid in b.segments if sid not in known})
        if missing:
            raise MessageRejected(404, "unknown-reference", missing)
        old_segments = st.train_segments(p.id)
        affected = self._holders_over(old_segments)
        for b in blocks:
            affected |= st.holders(b.id)
        # replace the train, then restore connections touching surviving block ids
        saved = {k: v for k, v in st.connections.items() if any(bid in {b.id for b in blocks} for bid in k)}
        st.remove_train(p.id)
        for s in segs:
            st.upsert_segment(s)
        for b in blocks:
            st.upsert_block(b)
        for (a, b), kind in sorted(saved.items()):
            if a in st.blocks and b in st.blocks:
                st.set_connection(a, b, kind)
        affected |= self._holders_over(known)
        eff.changed = [p.id]
        self._network_effects(affected, m, eff)

    def _on_delete_train(self, p: IdIn, m: Message, eff: Effects) -> None:
        st = self.state
        segs = st.train_segments(p.id)
        if not segs:
            raise MessageRejected(404, "unknown-reference", [p.id])
        affected = self._holders_over(segs)
        st.remove_train(p.id)
        eff.changed = [p.id]
        self._network_effects(affected, m, eff)

    @staticmethod
    def _check_connection(st: NetworkState, c: ConnectionIn) -> None:
        missing = [bid for bid in (c.from_block, c.to_block) if bid not in st.blocks]
        if missing:
            raise MessageRejected(404, "unknown-reference", missing)
        if c.kind is ConnectionKind.EXCLUSIVE:
            other = st.exclusive_target(c.from_block)
            if other is not None and other != c.to_block:
                raise MessageRejected(409, "conflict", [f"{c.from_block} already exclusive to {other}"])

    def _on_upsert_connection(self, p: ConnectionIn, m: Message, eff: Effects) -> None:
        st = self.state
        self._check_connection(st, p)
        st.set_connection(p.from_block, p.to_block, p.kind)
        eff.changed = [f"{p.from_block}->{p.to_block}"]
        self._network_effects(set(st.holders(p.from_block)), m, eff)

    def _on_upsert_restriction(self, p: RestrictionsIn, m: Message, eff: Effects) -> None:
        st = self.state
        if p.block not in st.blocks:
            raise MessageRejected(404, "unknown-reference", [p.block])
        st.set_restrictions(p.block, [r.to_model() for r in p.restrictions])
        eff.changed = [p.block]
        self._network_effects(set(st.holders(p.block)), m, eff)

    def _on_upsert_reservation(self, p: ReservationIn, m: Message, eff: Effects) -> None:
        st = self.state
        if p.block not in st.blocks:
            raise MessageRejected(404, "unknown-reference", [p.block])
        st.set_reservation(p.block, p.reservation.to_model())
        eff.changed = [p.block]
        self._network_effects(self._holders_over(st.blocks[p.block].segments), m, eff)

    def _on_book_request(self, p: RequestIn, m: Message, eff: Effects) -> None:
        r = p.to_model(self.clock, self.products)
        if r.id in self.state.requests:
            raise MessageRejected(409, "conflict", [f"request {r.id} exists"])
        eff.changed = [r.id]
        if m.defer:
            self.state.add_request(r)
            self.parked_assignment.append(r.id)
            return
        eff.result = self.do_booking(r)

    def _on_update_request(self, p: RequestIn, m: Message, eff: Effects) -> None:
        st = self.state
        if p.id not in st.requests:
            raise MessageRejected(404, "unknown-reference", [p.id])
        r = p.to_model(self.clock, self.products)
        st.replace_request(r)
        eff.changed = [r.id]
        if r.manual:
            return
        if m.defer:
            if r.id in st.chains:
                self.parked_revalidation.add(r.id)
            else:
                self.parked_assignment.append(r.id)
            return
        if r.id in st.chains:
            self.do_revalidate([r.id])
            eff.result = self.request_view(r.id)
        else:
            eff.result = self.do_booking(r)

    def _on_cancel_request(self, p: IdIn, m: Message, eff: Effects) -> None:
        st = self.state
        if p.id not in st.requests:
            raise MessageRejected(404, "unknown-reference", [p.id])
        st.remove_request(p.id)
        self.promises.pop(p.id, None)
        self.pending_revalidation.discard(p.id)
        self.parked_revalidation.discard(p.id)
        eff.changed = [p.id]

    def _on_manual_chain(self, p: ChainIn, m: Message, eff: Effects) -> None:
        st = self.state
        if p.request not in st.requests:
            raise MessageRejected(404, "unknown-reference", [p.request])
        missing = [bid for bid in p.blocks if bid not in st.blocks]
        if missing:
            raise MessageRejected(404, "unknown-reference", missing)
        res = self._manual_chain(st, p)
        eff.changed = [p.request]
        eff.result = {"violations": [v.as_dict() for v in res.violations]}

    def _manual_chain(self, st: NetworkState, p: ChainIn):
        r = st.request(p.request)
        if p.required:
            r = replace(r, required_prefix=tuple(p.blocks))
            st.replace_request(r)
        chain = TransportChain(tuple(p.blocks), len(p.blocks) if p.required else 0)
        res = validate_chain(r, chain, st, CapacityMode.RESPECT)
        # planner chains are accepted as given, over-booking included
        st.assign(r.id, chain, StatusKind.MANUAL if r.manual else StatusKind.ASSIGNED)
        return res

    def _on_trigger_compute(self, p: None, m: Message, eff: Effects) -> None:
        st = self.state
        parked = sorted(rid for rid in self.parked_revalidation if rid in st.chains)
        self.parked_revalidation.clear()
        if parked:
            self.pending_revalidation.update(parked)
            eff.tasks.append(self._schedule_wave())
        eff.affected = parked
        todo, self.parked_assignment = self.parked_assignment, []
        for rid in todo:
            if rid in st.requests and rid not in st.chains:
                self.submit("assignment", lambda rid=rid: self._deferred_booking(rid), Priority.BACKGROUND)
                eff.tasks.append("assignment")

    def _deferred_booking(self, rid: str) -> Optional[dict]:
        if rid not in self.state.requests or rid in self.state.chains:
            return None
        return self.do_booking(self.state.requests[rid])

    # -- assignment ----------------------------------------------------------

    def do_booking(self, r: Request) -> dict:
        st = self.state
        if r.id not in st.requests:
            st.add_request(r)
        t0 = time.perf_counter()
        out = self.assigner.assign([st.requests[r.id]])
        dt = time.perf_counter() - t0
        self.stats.computations["assignments"] += 1
        for key, n in out.searches.items():
            self.stats.computations["search:" + key] += n
        self.stats.capacity_violations += len(out.capacity_violations)
        self.stats.dropped_fixed += len(out.dropped_fixed)
        res = out.results[r.id]
        self.stats.outcomes[res.outcome] += 1
        self.stats.outcome_seconds[res.outcome] += dt
        if out.stage:
            self.stats.stages[out.stage] += 1
        self.outcome_log.append((r.id, res.outcome, res.stage))
        for rid, (_, new) in out.rerouted.items():
            self.promises.setdefault(rid, st.blocks[new.blocks[-1]].deboarding_ready)
        body = {"request": r.id, "outcome": res.outcome, "stage": res.stage, "reason": res.reason}
        if res.outcome == ROUTED:
            arrival = st.blocks[res.chain.blocks[-1]].deboarding_ready
            self.promises[r.id] = arrival
            body["chain"] = list(res.chain.blocks)
            body["arrival"] = self.clock.iso(arrival)
        body["rerouted"] = sorted(out.rerouted)
        return body

    # -- revalidation --------------------------------------------------------

    def do_revalidation_wave(self) -> dict:
        self.wave_scheduled = False
        todo = sorted(self.pending_revalidation)
        self.pending_revalidation.clear()
        self.stats.computations["revalidation-waves"] += 1
        return self.do_revalidate(todo)

    def _promise(self, rid: str) -> int:
        got = self.promises.get(rid)
        if got is not None:
            return got
        chain = self.state.chains.get(rid)
        if chain is not None and chain.blocks and chain.blocks[-1] in self.state.blocks:
            return self.state.blocks[chain.blocks[-1]].deboarding_ready
        return self.state.requests[rid].delivery_latest

    def do_revalidate(self, request_ids: Iterable[str]) -> dict:
        """Walk, truncate and re-complete chains, earliest promise first.

        All walks happen before any re-completion so a still-valid chain is
        never displaced by another request's repair.
        """
        st = self.state
        ids = [
            rid
            for rid in set(request_ids)
            if rid in st.chains and not st.requests[rid].manual and st.status[rid].kind in (StatusKind.ASSIGNED, StatusKind.PARTIAL)
        ]
        ids.sort(key=lambda rid: (self._promise(rid), rid))
        old = {rid: st.chains[rid] for rid in ids}
        for rid in ids:
            st.unassign(rid)
        kept: Dict[str, tuple] = {}
        for rid in ids:
            k = self._walk(st.requests[rid], old[rid])
            kept[rid] = k
            if k:
                st.assign(rid, TransportChain(k, min(old[rid].split, len(k))), StatusKind.PARTIAL)
        summary: Dict[str, str] = {}
        requeue: List[str] = []
        for rid in ids:
            self.stats.computations["revalidations"] += 1
            r = st.requests[rid]
            k = kept[rid]
            split = min(old[rid].split, len(k))
            if k and st.group(st.blocks[k[-1]].destination) == st.group(r.destination):
                st.assign(rid, TransportChain(k, split))
                summary[rid] = "kept" if k == old[rid].blocks else "truncated"
                continue
            self.stats.computations["search:recomplete"] += 1
            probe = replace(r, required_prefix=k) if k else r
            with self.instr.timer("best-chain"):
                found = find_best_chain(probe, st, CapacityMode.RESPECT, self.config.limits, self.config.key).best
            if found is not None:
                chain = TransportChain(found.blocks, split if k else found.split)
                st.assign(rid, chain)
                summary[rid] = "recompleted"
            elif k:
                st.assign(rid, TransportChain(k, split), StatusKind.PARTIAL)
                summary[rid] = "partial"
            else:
                st.unassign(rid, UNASSIGNED)
                self.promises.pop(rid, None)
                summary[rid] = "unassigned"
                requeue.append(rid)
        for rid in requeue:
            self.submit("assignment", lambda rid=rid: self._deferred_booking(rid), Priority.BACKGROUND)
        return summary

    def _walk(self, r: Request, chain: TransportChain) -> tuple:
        """Longest feasible front part of ``chain`` for ``r`` against the current state."""
        st = self.state
        kept: List[str] = []
        visited: Set[str] = set()
        yards: Set[str] = set()
        flex: List = []
        for i, bid in enumerate(chain.blocks):
            b = st.blocks.get(bid)
            if b is None or failed_restrictions(b, r):
                break
            if i >= chain.split:
                if i == 0:
                    if st.group(b.origin) != st.group(r.origin) or r.pickup_earliest > b.boarding_cutoff:
                        break
                elif transfer_issue(st.blocks[kept[-1]], b, st) is not None:
                    break
                if b.deboarding_ready > r.delivery_latest:
                    break
                if not visited:
                    visited.add(st.group(b.origin))
                dest = st.group(b.destination)
                if b.is_phase_connector and st.group(b.origin) == dest:
                    if dest in yards:
                        break
                    yards.add(dest)
                elif dest in visited:
                    break
                else:
                    visited.add(dest)
                if capacity_violations(r, flex + [b], st, CapacityMode.RESPECT):
                    break
                flex.append(b)
            else:
                if not visited:
                    visited.add(st.group(b.origin))
                visited.add(st.group(b.destination))
            kept.append(bid)
        return tuple(kept)

    # -- dry runs ------------------------------------------------------------

    def do_dryrun_search(self, r: Request, mode: CapacityMode = CapacityMode.IGNORE) -> dict:
        st = self.state
        with self.instr.timer("enumerate-all"):
            out = enumerate_chains(r, st, mode, self.config.limits, self.config.key)
        return {
            "chains": [
                {"blocks": list(c.blocks), "split": c.split, "arrival": self.clock.iso(st.blocks[c.blocks[-1]].deboarding_ready)}
                for c in out.chains
            ],
            "flags": sorted(out.flags),
            "diagnostics": dict(out.diagnostics),
            "dominant_reason": out.dominant_reason() if not out.chains else None,
        }

    def do_validate_manual_chain(self, r: Request, blocks: Sequence[str], required: bool = False) -> dict:
        st = self.state
        missing = [bid for bid in blocks if bid not in st.blocks]
        if missing:
            raise MessageRejected(404, "unknown-reference", missing)
        chain = TransportChain(tuple(blocks), len(blocks) if required else 0)
        res = validate_chain(r, chain, st, CapacityMode.RESPECT)
        return {"ok": res.ok, "violations": [v.as_dict() for v in res.violations]}

    # -- views ---------------------------------------------------------------

    def request_view(self, rid: str) -> dict:
        st = self.state
        status = st.status.get(rid, UNASSIGNED)
        out = {"request": rid, "status": status.kind.value, "reason": status.reason}
        chain = st.chains.get(rid)
        if chain is not None:
            out["chain"] = list(chain.blocks)
            out["split"] = chain.split
            if chain.blocks and chain.blocks[-1] in st.blocks:
                out["arrival"] = self.clock.iso(st.blocks[chain.blocks[-1]].deboarding_ready)
        return out

    def snapshot_stats(self) -> dict:
        st = self.state
        s = self.stats
        return {
            "state": {
                "stations": len(st.stations),
                "trains": len(st.trains),
                "segments": len(st.segments),
                "blocks": len(st.blocks),
                "connections": len(st.connections),
                "requests": len(st.requests),
                "chains": len(st.chains),
                "version": st.version,
            },
            "api_calls": dict(s.api_calls),
            "backend_seconds": dict(s.backend_seconds),
            "outcomes": dict(s.outcomes),
            "outcome_seconds": dict(s.outcome_seconds),
            "stages": dict(s.stages),
            "computations": dict(s.computations),
            "functions": {
                name: {"calls": self.instr.calls[name], "seconds": self.instr.seconds[name]} for name in sorted(self.instr.calls)
            },
            "invariants": {"capacity_violations": s.capacity_violations, "dropped_fixed": s.dropped_fixed},
            "queue": {"pending": len(self.queue), "failed": self.queue.failed},
        }

    def reset_stats(self) -> None:
        self.stats.reset()
        self.instr.reset()
