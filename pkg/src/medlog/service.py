"""HTTP surface of the collector: write-only ingestion, reads, admin.

Five per-kind write endpoints accept fragment envelopes as JSON (canonical
form is not required on the wire; the collector canonicalizes). Read
endpoints never share a path with ingestion. The OpenAPI document FastAPI
serves at /openapi.json is the machine-readable interface description; a
committed copy lives at the repository root.
"""

from __future__ import annotations

import asyncio
import json
import threading
from contextlib import asynccontextmanager
from typing import Any

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
from starlette.routing import Route as StarletteRoute

from .canonical import CanonicalizationError, parse_rfc3339
from .collector import CollectorCore, CollectorDrainingError
from .model import ConformanceProfile, RecordStatus
from .store import BadPageTokenError, ScanFilter

FRAGMENT_KINDS = ("start", "artifact", "output", "outcome", "feedback")

_INGEST_HTTP_STATUS = {
    "accepted": 200,
    "duplicate": 200,
    "quarantined": 202,
    "conflict": 409,
    "invalid": 422,
}


class ViolationModel(BaseModel):
    field: str
    rule: str


class IngestResponseModel(BaseModel):
    status: str = Field(description="accepted | duplicate | quarantined | conflict | invalid")
    event_id: str | None = None
    fragment_id: str | None = None
    dropped: bool = False
    violations: list[ViolationModel] = Field(default_factory=list)


class RecordResponseModel(BaseModel):
    event_id: str
    record: dict[str, Any] | None = None
    header: dict[str, Any] | None = None
    model: dict[str, Any] | None = None
    user: dict[str, Any] | None = None
    target: dict[str, Any] | None = None
    conformance: str
    digest: str
    summarized: bool = False
    summarized_at: str | None = None


class RunResponseModel(BaseModel):
    run_id: str
    roots: list[str]
    edges: dict[str, list[str]]
    records: list[RecordResponseModel]


class QueryResponseModel(BaseModel):
    records: list[RecordResponseModel]
    next_page_token: str | None = None


class HealthResponseModel(BaseModel):
    healthy: bool
    store_writable: bool
    draining: bool
    records: int
    orphan_fragments: int
    upgrade_buffered: int
    ingest_in_flight: int
    reason: str | None = None


class ReloadResponseModel(BaseModel):
    ok: bool
    error: str | None = None


class ErrorResponseModel(BaseModel):
    detail: str


_QUERY_PARAMS = {
    "model_id",
    "run_id",
    "status",
    "conformance",
    "from",
    "to",
    "page_token",
    "page_size",
}


def _bad_request(detail: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": detail})


def _settle(future: "asyncio.Future[None]") -> None:
    if not future.done():
        future.set_result(None)


def create_app(core: CollectorCore, expiry_interval: float = 30.0) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        stop = threading.Event()

        def expiry_loop() -> None:
            while not stop.wait(expiry_interval):
                try:
                    core.expire()
                except Exception:  # noqa: BLE001 - keep the janitor alive
                    pass

        janitor = threading.Thread(target=expiry_loop, name="medlog-expiry", daemon=True)
        janitor.start()
        try:
            yield
        finally:
            # Graceful drain: in-flight ingests finish, new ones get 503.
            core.begin_drain()
            stop.set()
            janitor.join(timeout=2.0)

    app = FastAPI(
        title="MedLog Collector",
        version="0.1.0",
        description="Write-only fragment ingestion and record query API (protocol medlog/0.1).",
        lifespan=lifespan,
    )

    async def _ingest_endpoint(request: Request) -> Response:
        # Hot path: a plain Starlette route placed ahead of the FastAPI
        # routes, so per-request dependency solving is skipped; body and
        # response JSON are handled by hand. The documented FastAPI stub
        # below carries the identical contract for /openapi.json.
        kind = request.path_params["kind"]
        if kind not in FRAGMENT_KINDS:
            return JSONResponse(
                status_code=404,
                content={"detail": f"unknown fragment kind {kind!r}; expected one of {', '.join(FRAGMENT_KINDS)}"},
            )
        try:
            body = json.loads(await request.body())
        except ValueError:
            return JSONResponse(
                status_code=422,
                content={"status": "invalid", "violations": [{"field": "body", "rule": "must be a JSON object"}], "dropped": False},
            )
        try:
            result = core.ingest(kind, body, wait_durable=False)
        except CollectorDrainingError:
            return JSONResponse(status_code=503, content={"detail": "collector is draining"})
        if result.durability_mark is not None:
            # Park a future until the group-commit fsync covers this frame;
            # the event loop keeps serving, so concurrent requests share one
            # fsync instead of queueing for their own.
            loop = asyncio.get_running_loop()
            settled: asyncio.Future[None] = loop.create_future()
            core.store.on_durable(
                result.durability_mark,
                lambda: loop.call_soon_threadsafe(_settle, settled),
            )
            await settled
        return Response(
            content=json.dumps(result.to_wire()),
            media_type="application/json",
            status_code=_INGEST_HTTP_STATUS[result.status],
        )

    @app.post(
        "/v1/fragments/{kind}",
        response_model=IngestResponseModel,
        responses={202: {"model": IngestResponseModel}, 409: {"model": IngestResponseModel}, 422: {"model": IngestResponseModel}},
    )
    async def ingest_fragment(kind: str, request: Request):
        return await _ingest_endpoint(request)

    app.router.routes.insert(0, StarletteRoute("/v1/fragments/{kind}", _ingest_endpoint, methods=["POST"]))

    @app.get(
        "/v1/records/{event_id}",
        response_model=RecordResponseModel,
        responses={404: {"model": ErrorResponseModel}},
    )
    def read_record(event_id: str):
        wire = core.read_record(event_id)
        if wire is None:
            return JSONResponse(status_code=404, content={"detail": f"no record for {event_id!r}"})
        return JSONResponse(content=wire)

    @app.get(
        "/v1/runs/{run_id}",
        response_model=RunResponseModel,
        responses={404: {"model": ErrorResponseModel}},
    )
    def read_run(run_id: str):
        wire = core.read_run(run_id)
        if wire is None:
            return JSONResponse(status_code=404, content={"detail": f"no records for run {run_id!r}"})
        return JSONResponse(content=wire)

    @app.get(
        "/v1/records",
        response_model=QueryResponseModel,
        responses={400: {"model": ErrorResponseModel}},
    )
    def query_records(request: Request):
        params = request.query_params
        unknown = sorted(set(params.keys()) - _QUERY_PARAMS)
        if unknown:
            return _bad_request(f"unknown query parameters: {', '.join(unknown)}")

        status = None
        if "status" in params:
            try:
                status = RecordStatus(params["status"])
            except ValueError:
                return _bad_request(
                    f"unknown status {params['status']!r}; expected one of "
                    + ", ".join(s.value for s in RecordStatus)
                )
        conformance = None
        if "conformance" in params:
            try:
                conformance = ConformanceProfile.from_token(params["conformance"])
            except ValueError as exc:
                return _bad_request(str(exc))
        invoked_from = invoked_to = None
        try:
            if "from" in params:
                invoked_from = parse_rfc3339(params["from"])
            if "to" in params:
                invoked_to = parse_rfc3339(params["to"])
        except CanonicalizationError as exc:
            return _bad_request(str(exc))
        page_size = 100
        if "page_size" in params:
            if not params["page_size"].isdigit() or not 1 <= int(params["page_size"]) <= 1000:
                return _bad_request("page_size must be an integer in [1, 1000]")
            page_size = int(params["page_size"])

        flt = ScanFilter(
            model_id=params.get("model_id"),
            run_id=params.get("run_id"),
            status=status,
            conformance=conformance,
            invoked_from=invoked_from,
            invoked_to=invoked_to,
        )
        try:
            wire = core.query(flt, page_size=page_size, page_token=params.get("page_token"))
        except BadPageTokenError as exc:
            return _bad_request(str(exc))
        return JSONResponse(content=wire)

    @app.get(
        "/v1/healthz",
        response_model=HealthResponseModel,
        responses={503: {"model": HealthResponseModel}},
    )
    def healthz():
        health = core.health()
        return JSONResponse(status_code=200 if health["healthy"] else 503, content=health)

    @app.post(
        "/v1/admin/policy:reload",
        response_model=ReloadResponseModel,
        responses={400: {"model": ReloadResponseModel}},
    )
    def reload_policy():
        ok, error = core.reload_policy()
        return JSONResponse(status_code=200 if ok else 400, content={"ok": ok, "error": error})

    return app
