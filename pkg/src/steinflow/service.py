"""HTTP service wrapping the sampling engine.

All run execution and file writes happen inside this app; the CLI is a thin
client. Errors come back as machine-readable bodies with a stable ``code``
(usage / divergence / protocol) that clients map to exit codes.
"""

from __future__ import annotations

import os
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .errors import (
    BackendError,
    ConfigError,
    InversionDivergedError,
    ProtocolError,
    SamplingDivergedError,
    SteinflowError,
    TransportError,
)
from .runconfig import normalize_config
from .runner import run_extend, run_invert, run_metrics, run_sample

OUTPUT_ROOT_ENV = "STEINFLOW_OUTPUT_ROOT"


class RunRequest(BaseModel):
    """A run to execute: raw config plus optional key overrides."""

    config: dict
    overrides: list[str] = Field(default_factory=list)
    output_dir: str | None = None
    base_dir: str = "."


class ArtifactInfo(BaseModel):
    path: str
    sha256: str
    kind: str


class RunResponse(BaseModel):
    run_dir: str
    command: str
    config_hash: str
    seed: int
    wall_clock_s: float
    artifacts: list[ArtifactInfo]
    extras: dict


class MetricsRequest(BaseModel):
    run_dir: str


class MetricsResponse(BaseModel):
    command: str
    tables: dict[str, str]
    summary: dict = Field(default_factory=dict)


class HealthResponse(BaseModel):
    status: str
    version: str


app = FastAPI(title="steinflow", version=__version__)


def _error_payload(code: str, exc: Exception) -> dict:
    payload = {"code": code, "message": str(exc)}
    if isinstance(exc, SamplingDivergedError):
        payload["t"] = exc.t
        payload["particle"] = exc.particle
    if isinstance(exc, InversionDivergedError):
        payload["step"] = exc.step
    return {"error": payload}


@app.exception_handler(SteinflowError)
async def _steinflow_errors(request: Request, exc: SteinflowError):
    if isinstance(exc, ConfigError):
        return JSONResponse(status_code=400, content=_error_payload("usage", exc))
    if isinstance(exc, (SamplingDivergedError, InversionDivergedError)):
        return JSONResponse(status_code=500, content=_error_payload("divergence", exc))
    if isinstance(exc, (ProtocolError, TransportError, BackendError)):
        return JSONResponse(status_code=502, content=_error_payload("protocol", exc))
    return JSONResponse(status_code=500, content=_error_payload("internal", exc))


def _resolve_output(req: RunRequest, cfg: dict) -> Path:
    out = req.output_dir or cfg.get("output_dir")
    if out is None:
        raise ConfigError("no output directory: set output_dir in the config or request")
    path = Path(out)
    if not path.is_absolute():
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
        path = root / path
    return path


def _manifest_response(manifest) -> RunResponse:
    data = manifest.to_dict()
    return RunResponse(
        run_dir=str(manifest.run_dir),
        command=data["command"],
        config_hash=data["config_hash"],
        seed=data["seed"],
        wall_clock_s=data["wall_clock_s"],
        artifacts=[ArtifactInfo(**a) for a in data["artifacts"]],
        extras=data["extras"],
    )


@app.get("/v1/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/v1/sample", response_model=RunResponse)
def sample(req: RunRequest) -> RunResponse:
    cfg = normalize_config(req.config, req.overrides)
    return _manifest_response(run_sample(cfg, req.base_dir, _resolve_output(req, cfg)))


@app.post("/v1/extend", response_model=RunResponse)
def extend_run(req: RunRequest) -> RunResponse:
    cfg = normalize_config(req.config, req.overrides)
    return _manifest_response(run_extend(cfg, req.base_dir, _resolve_output(req, cfg)))


@app.post("/v1/invert", response_model=RunResponse)
def invert(req: RunRequest) -> RunResponse:
    cfg = normalize_config(req.config, req.overrides)
    return _manifest_response(run_invert(cfg, req.base_dir, _resolve_output(req, cfg)))


@app.post("/v1/metrics", response_model=MetricsResponse)
def metrics(req: MetricsRequest) -> MetricsResponse:
    out = run_metrics(req.run_dir)
    return MetricsResponse(command=out["command"], tables=out["tables"], summary=out.get("summary", {}))
