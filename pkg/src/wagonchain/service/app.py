"""FastAPI front end; every state access goes through the backend queue."""

from __future__ import annotations

import asyncio
from contextlib import asynccontextmanager
from typing import Any, Callable, List, Optional

from fastapi import FastAPI, Query
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..model import UnknownObjectError
from ..validation import CapacityMode
from .engine import ChainService, MessageRejected
from .queue import Priority
from .schema import DryRunChainIn, InitState, Message, MessageKind, RequestIn


def create_app(service: Optional[ChainService] = None) -> FastAPI:
    svc = service or ChainService()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        svc.queue.start()
        try:
            yield
        finally:
            svc.queue.stop()

    app = FastAPI(title="wagonchain", lifespan=lifespan)
    app.state.service = svc

    async def run(kind: str, fn: Callable[[], Any], priority: Priority = Priority.INTERACTIVE) -> Any:
        fut = svc.submit(kind, fn, priority)
        if not svc.queue.running:
            svc.queue.drain()
        return await asyncio.wrap_future(fut)

    @app.exception_handler(MessageRejected)
    async def rejected(_, exc: MessageRejected):
        return JSONResponse(exc.body(), status_code=exc.code)

    @app.exception_handler(UnknownObjectError)
    async def unknown(_, exc: UnknownObjectError):
        return JSONResponse({"code": 404, "reason": "unknown-reference", "details": [str(exc)]}, status_code=404)

    @app.exception_handler(RequestValidationError)
    async def invalid(_, exc: RequestValidationError):
        details = [e.get("msg", "") for e in exc.errors()]
        return JSONResponse({"code": 422, "reason": "schema", "details": details}, status_code=422)

    @app.exception_handler(ValueError)
    async def bad_value(_, exc: ValueError):
        return JSONResponse({"code": 422, "reason": "invalid", "details": [str(exc)]}, status_code=422)

    def one(kind: MessageKind, payload: dict, defer: bool = False):
        return lambda: svc.do_apply(Message(kind=kind, payload=payload, defer=defer))

    async def apply(kind: MessageKind, payload: dict):
        eff = await run(kind.value, one(kind, payload))
        if eff.error is not None:
            raise MessageRejected(eff.error["code"], eff.error["reason"], eff.error["details"])
        return eff

    @app.post("/state/init")
    async def init_state(body: InitState):
        eff = await apply(MessageKind.INIT_STATE, body.model_dump(mode="json"))
        return eff.as_dict()

    @app.post("/messages")
    async def messages(body: List[Message], defer: Optional[bool] = Query(None)):
        msgs = [m.model_copy(update={"defer": defer}) if defer is not None else m for m in body]
        effects = await run("messages", lambda: [svc.do_apply(m) for m in msgs])
        return [e.as_dict() for e in effects]

    @app.post("/compute/trigger")
    async def trigger():
        eff = await apply(MessageKind.TRIGGER_COMPUTE, {})
        return eff.as_dict()

    @app.post("/requests")
    async def book(body: RequestIn):
        eff = await apply(MessageKind.BOOK_REQUEST, body.model_dump(mode="json"))
        return eff.result

    @app.put("/requests/{rid}")
    async def update(rid: str, body: RequestIn):
        if body.id != rid:
            raise MessageRejected(422, "invalid", [f"path id {rid} differs from body id {body.id}"])
        eff = await apply(MessageKind.UPDATE_REQUEST, body.model_dump(mode="json"))
        return eff.result

    @app.delete("/requests/{rid}")
    async def cancel(rid: str):
        eff = await apply(MessageKind.CANCEL_REQUEST, {"id": rid})
        return eff.as_dict()

    @app.get("/requests/{rid}")
    async def show(rid: str):
        view = await run("status", lambda: svc.request_view(rid) if rid in svc.state.requests else None)
        if view is None:
            raise MessageRejected(404, "unknown-reference", [rid])
        return view

    @app.post("/dryrun/search")
    async def dryrun_search(body: RequestIn, mode: CapacityMode = Query(CapacityMode.IGNORE)):
        r = body.to_model(svc.clock, svc.products)
        return await run("dryrun-search", lambda: svc.do_dryrun_search(r, mode))

    @app.post("/dryrun/validate-chain")
    async def dryrun_validate(body: DryRunChainIn):
        r = body.request.to_model(svc.clock, svc.products)
        return await run("dryrun-validate", lambda: svc.do_validate_manual_chain(r, body.blocks, body.required))

    @app.get("/stats")
    async def stats():
        return await run("stats", svc.snapshot_stats)

    @app.get("/health")
    async def health():
        return {"status": "ok", "queue": len(svc.queue), "worker": svc.queue.running}

    return app


def main() -> None:  # pragma: no cover - manual entry point
    import argparse

    import uvicorn

    ap = argparse.ArgumentParser(description="Run the chain service over HTTP.")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8000)
    args = ap.parse_args()
    uvicorn.run(create_app(), host=args.host, port=args.port)
