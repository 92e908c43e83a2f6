"""HTTP front end: thin routes over the request handlers."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import TwoPhaseError
from . import handlers
from .schemas import (
    AllocationRequest,
    AllocationResponse,
    DesignRequest,
    DesignResponse,
    SimulateRequest,
    SimulateResponse,
)

app = FastAPI(title="twophase", version=__version__)


@app.exception_handler(TwoPhaseError)
async def _domain_error(request: Request, exc: TwoPhaseError):
    return JSONResponse(status_code=422, content=handlers.error_response(exc).model_dump())


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/allocation", response_model=AllocationResponse)
def allocation(req: AllocationRequest):
    return handlers.allocate(req)


@app.post("/design", response_model=DesignResponse)
def design(req: DesignRequest):
    return handlers.design(req)


@app.post("/simulate", response_model=SimulateResponse)
def simulate(req: SimulateRequest):
    return handlers.simulate(req)
