"""Command-line client for the sampling service.

Every run command speaks the HTTP API: against ``--server URL`` when given,
otherwise against an in-process instance of the app (no network involved).
Exit codes: 0 ok, 2 usage error, 3 runtime divergence, 4 protocol error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from .errors import ConfigError

EXIT_CODES = {"usage": 2, "divergence": 3, "protocol": 4}


def _make_client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _load_raw_config(path: str) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        click.echo(f"error: config file not found: {path}", err=True)
        sys.exit(2)
    except yaml.YAMLError as exc:
        click.echo(f"error: config is not valid YAML: {exc}", err=True)
        sys.exit(2)
    if not isinstance(raw, dict):
        click.echo("error: config root must be a mapping", err=True)
        sys.exit(2)
    return raw


def _post(server: str | None, route: str, payload: dict) -> dict:
    with _make_client(server) as client:
        response = client.post(route, json=payload)
    try:
        body = response.json()
    except ValueError:
        click.echo(f"error: service answered {response.status_code} without JSON", err=True)
        sys.exit(4)
    if response.status_code == 422:  # request-envelope validation
        click.echo(f"error: bad request: {json.dumps(body)}", err=True)
        sys.exit(2)
    if response.status_code != 200:
        err = body.get("error", {})
        click.echo(f"error ({err.get('code', '?')}): {err.get('message', body)}", err=True)
        sys.exit(EXIT_CODES.get(err.get("code"), 1))
    return body


def _run_command(route: str, config: str, output, seed, sets, flags, server):
    overrides = list(sets)
    if seed is not None:
        overrides.append(f"seed={seed}")
    overrides.extend(flags)
    payload = {
        "config": _load_raw_config(config),
        "overrides": overrides,
        "output_dir": output,
        "base_dir": str(Path(config).resolve().parent),
    }
    body = _post(server, route, payload)
    click.echo(json.dumps(body, indent=2, sort_keys=True))


_common = [
    click.option("--config", "-c", required=True, type=click.Path(), help="run config (YAML)"),
    click.option("--output", "-o", default=None, help="run directory (overrides config output_dir)"),
    click.option("--seed", type=int, default=None, help="override the config seed"),
    click.option("--set", "sets", multiple=True, help="override a config key, e.g. svgd.eta=0.01"),
    click.option("--server", default=None, help="service URL; default runs the app in-process"),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Annealed Stein variational sampler over products of flow experts."""


@main.command()
@_with_common
@click.option("--no-svgd-repulsion", is_flag=True, help="disable the kernel repulsion term")
@click.option("--no-context", is_flag=True, help="skip context conditioning entirely")
def sample(config, output, seed, sets, server, no_svgd_repulsion, no_context):
    """Draw samples from the composed target and write run artifacts."""
    flags = []
    if no_svgd_repulsion:
        flags.append("svgd.repulsion=false")
    if no_context:
        flags.append("context=null")
    _run_command("/v1/sample", config, output, seed, sets, flags, server)


@main.command()
@_with_common
@click.option("--no-context", is_flag=True, help="skip the first segment's configured context")
def extend(config, output, seed, sets, server, no_context):
    """Generate a segmented long sequence with pinned overlap frames."""
    flags = ["context=null"] if no_context else []
    _run_command("/v1/extend", config, output, seed, sets, flags, server)


@main.command()
@_with_common
def invert(config, output, seed, sets, server):
    """Compute and export context conditionals for the configured reference."""
    _run_command("/v1/invert", config, output, seed, sets, [], server)


@main.command()
@click.argument("run_dir", type=click.Path())
@click.option("--server", default=None, help="service URL; default runs the app in-process")
def metrics(run_dir, server):
    """Summarize a finished run into CSV tables."""
    body = _post(server, "/v1/metrics", {"run_dir": str(run_dir)})
    click.echo(json.dumps(body, indent=2, sort_keys=True))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the sampling service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


@main.command("stub-serve")
@click.option("--config", "-c", required=True, type=click.Path(), help="config holding the expert to serve")
@click.option("--expert", default=None, help="expert name to serve (default: first analytic expert)")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=0, show_default=True, type=int, help="0 picks a free port")
@click.option("--transport", type=click.Choice(["tcp", "stdio"]), default="tcp", show_default=True)
def stub_serve(config, expert, host, port, transport):
    """Serve an analytic expert over the backend wire protocol."""
    from .experts import GmmExpert
    from .runconfig import build_setup, load_config
    from .stub import StubServer, serve_stdio

    try:
        cfg = load_config(config)
        setup = build_setup(cfg, Path(config).resolve().parent)
    except ConfigError as exc:
        click.echo(f"error (usage): {exc}", err=True)
        sys.exit(2)
    analytic = [m for m, _, _ in setup.experts if isinstance(m, GmmExpert)]
    if expert is not None:
        analytic = [m for m in analytic if m.name == expert]
    if not analytic:
        click.echo(f"error (usage): no analytic expert {expert or ''!r} in config", err=True)
        sys.exit(2)

    if transport == "stdio":
        serve_stdio(analytic[0], setup.schedule)
        return
    server = StubServer(analytic[0], setup.schedule, host=host, port=port)
    click.echo(f"serving expert {analytic[0].name!r} on {server.address[0]}:{server.address[1]}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


if __name__ == "__main__":
    main()
