"""Command line client for the opflow service.

Every command except ``serve`` talks HTTP to a running server; ``serve``
hosts one.  Exit codes: 0 success, 1 workflow failed, 2 validation problem,
3 not found, 4 invalid state for the operation, 5 server unreachable.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import httpx

from .config import DEFAULT_SERVER, HOME_ENV, SERVER_ENV, opflow_home

EXIT_OK = 0
EXIT_WORKFLOW_FAILED = 1
EXIT_VALIDATION = 2
EXIT_NOT_FOUND = 3
EXIT_INVALID_STATE = 4
EXIT_TRANSPORT = 5

TERMINAL_WORDS = {"Succeeded", "Failed", "Skipped"}

API = "/api/v1"


def _die(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class Client:
    """Minimal HTTP wrapper that turns API errors into CLI exits."""

    def __init__(self, server: str) -> None:
        self.server = server.rstrip("/")

    def request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            response = httpx.request(
                method, f"{self.server}{path}", timeout=60.0, **kwargs
            )
        except httpx.HTTPError as exc:
            _die(EXIT_TRANSPORT, f"cannot reach opflow server at {self.server}: {exc}")
        if response.status_code < 400:
            return response
        detail = self._detail(response)
        if response.status_code == 404:
            _die(EXIT_NOT_FOUND, detail)
        if response.status_code == 409:
            _die(EXIT_INVALID_STATE, detail)
        if response.status_code == 422:
            self._print_diagnostics(response)
            sys.exit(EXIT_VALIDATION)
        _die(EXIT_WORKFLOW_FAILED, detail)
        raise AssertionError("unreachable")

    def get(self, path: str, **kwargs) -> httpx.Response:
        return self.request("GET", path, **kwargs)

    def post(self, path: str, **kwargs) -> httpx.Response:
        return self.request("POST", path, **kwargs)

    @staticmethod
    def _detail(response: httpx.Response) -> str:
        try:
            return str(response.json().get("detail", response.text))
        except Exception:
            return response.text or f"HTTP {response.status_code}"

    @staticmethod
    def _print_diagnostics(response: httpx.Response) -> None:
        try:
            body = response.json()
        except Exception:
            click.echo(f"error: {response.text}", err=True)
            return
        click.echo(f"error: {body.get('detail', 'validation failed')}", err=True)
        for entry in body.get("errors", []):
            click.echo(f"  {entry['location']}: {entry['message']}", err=True)


def _poll_until_terminal(client: Client, workflow_id: str, interval: float) -> str:
    while True:
        phase = client.get(f"{API}/workflows/{workflow_id}").json()["phase"]
        if phase in TERMINAL_WORDS:
            return phase
        time.sleep(interval)


def _parse_params(pairs: tuple[str, ...]) -> dict[str, str]:
    parameters = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name:
            _die(EXIT_VALIDATION, f"--param needs name=value, got {pair!r}")
        parameters[name] = value
    return parameters


def _read_spec(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        _die(EXIT_VALIDATION, f"cannot read spec file: {exc}")
        raise AssertionError("unreachable")


def _format_duration(seconds: float | None) -> str:
    if seconds is None:
        return "-"
    return f"{seconds:.1f}s"


@click.group()
@click.option(
    "--server",
    envvar=SERVER_ENV,
    default=DEFAULT_SERVER,
    show_default=True,
    help="Base URL of the opflow service.",
)
@click.pass_context
def main(ctx: click.Context, server: str) -> None:
    """Workflow engine client."""
    ctx.obj = Client(server)


@main.command()
@click.option("--home", envvar=HOME_ENV, default=None, help="Data directory.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8267, show_default=True, type=int)
@click.option("--parallelism", default=None, type=int, help="Default run parallelism.")
def serve(home: str | None, host: str, port: int, parallelism: int | None) -> None:
    """Host the opflow service over HTTP."""
    import uvicorn

    from .scheduler import RunConfig
    from .service import create_app

    config = RunConfig(parallelism=parallelism) if parallelism else None
    app = create_app(opflow_home(home), default_config=config)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.argument("spec_file", type=click.Path())
@click.option("--param", "params", multiple=True, metavar="NAME=VALUE",
              help="Override a workflow input parameter.")
@click.option("--reuse-from", default=None, metavar="WF_ID",
              help="Harvest reusable step outputs from this workflow.")
@click.option("--reuse-key", "reuse_keys", multiple=True, metavar="KEY",
              help="Limit reuse to these step keys.")
@click.option("--parallelism", default=None, type=int)
@click.option("--detach", is_flag=True, help="Print the id and return immediately.")
@click.option("--interval", default=0.5, show_default=True, type=float,
              help="Foreground poll interval in seconds.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_obj
def submit(
    client: Client,
    spec_file: str,
    params: tuple[str, ...],
    reuse_from: str | None,
    reuse_keys: tuple[str, ...],
    parallelism: int | None,
    detach: bool,
    interval: float,
    as_json: bool,
) -> None:
    """Submit a workflow; waits for it unless --detach is given."""
    body = {
        "spec_text": _read_spec(spec_file),
        "parameters": _parse_params(params),
        "parallelism": parallelism,
        "reuse_from": reuse_from,
        "reuse_keys": list(reuse_keys),
    }
    workflow_id = client.post(f"{API}/workflows", json=body).json()["workflow_id"]
    if detach:
        if as_json:
            click.echo(json.dumps({"workflow_id": workflow_id}))
        else:
            click.echo(workflow_id)
        return
    click.echo(workflow_id)
    phase = _poll_until_terminal(client, workflow_id, interval)
    if as_json:
        click.echo(json.dumps({"workflow_id": workflow_id, "phase": phase}))
    else:
        click.echo(phase)
    sys.exit(EXIT_OK if phase == "Succeeded" else EXIT_WORKFLOW_FAILED)


@main.command()
@click.argument("workflow_id")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def status(client: Client, workflow_id: str, as_json: bool) -> None:
    """Print the workflow's phase."""
    body = client.get(f"{API}/workflows/{workflow_id}").json()
    click.echo(json.dumps(body) if as_json else body["phase"])


@main.command()
@click.argument("workflow_id")
@click.option("--key", default=None, help="Show one step record in full.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def steps(client: Client, workflow_id: str, key: str | None, as_json: bool) -> None:
    """List step records, or show one record with --key."""
    if key is not None:
        record = client.get(f"{API}/workflows/{workflow_id}/steps/{key}").json()
        if as_json:
            click.echo(json.dumps(record, indent=2))
            return
        click.echo(f"key:      {record['key']}")
        click.echo(f"name:     {record['name']}")
        click.echo(f"template: {record['template']}")
        click.echo(f"type:     {record['type']}")
        click.echo(f"phase:    {record['phase']}")
        click.echo(f"attempt:  {record['attempt']}")
        click.echo(f"duration: {_format_duration(record['duration'])}")
        if record["failure"]:
            click.echo(
                f"failure:  [{record['failure']['kind']}] "
                f"{record['failure']['message']}"
            )
        for title, section in (
            ("inputs", record["input_parameters"]),
            ("outputs", record["output_parameters"]),
        ):
            if section:
                click.echo(f"{title}:")
                for name, value in section.items():
                    click.echo(f"  {name} ({value['type_tag']}): {value['text']}")
        for title, section in (
            ("input artifacts", record["input_artifacts"]),
            ("output artifacts", record["output_artifacts"]),
        ):
            if section:
                click.echo(f"{title}:")
                for name, location in section.items():
                    click.echo(f"  {name}: {location}")
        return
    rows = client.get(f"{API}/workflows/{workflow_id}/steps").json()
    if as_json:
        click.echo(json.dumps(rows, indent=2))
        return
    header = f"{'KEY':40s} {'NAME':20s} {'PHASE':10s} {'ATTEMPT':7s} DURATION"
    click.echo(header)
    for row in rows:
        click.echo(
            f"{row['key']:40s} {row['name']:20s} {row['phase']:10s} "
            f"{row['attempt']:<7d} {_format_duration(row['duration'])}"
        )


@main.command()
@click.argument("workflow_id")
@click.argument("key")
@click.option("--follow", is_flag=True, help="Keep streaming until the step ends.")
@click.option("--interval", default=0.5, show_default=True, type=float)
@click.pass_obj
def logs(client: Client, workflow_id: str, key: str, follow: bool, interval: float) -> None:
    """Print (or stream with --follow) a step's merged output log."""
    base = f"{API}/workflows/{workflow_id}/steps/{key}"
    offset = 0
    while True:
        chunk = client.get(f"{base}/log", params={"offset": offset}).text
        if chunk:
            click.echo(chunk, nl=False)
            offset += len(chunk.encode("utf-8"))
        if not follow:
            return
        phase = client.get(base).json()["phase"]
        if phase in ("Succeeded", "Failed", "Skipped", "Reused"):
            chunk = client.get(f"{base}/log", params={"offset": offset}).text
            if chunk:
                click.echo(chunk, nl=False)
            return
        time.sleep(interval)


@main.command()
@click.argument("workflow_id")
@click.option("--interval", default=0.5, show_default=True, type=float)
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def watch(client: Client, workflow_id: str, interval: float, as_json: bool) -> None:
    """Poll the workflow until it finishes; exit code mirrors the phase."""
    last = None
    while True:
        phase = client.get(f"{API}/workflows/{workflow_id}").json()["phase"]
        if phase != last:
            if as_json:
                click.echo(json.dumps({"workflow_id": workflow_id, "phase": phase}))
            else:
                click.echo(phase)
            last = phase
        if phase in TERMINAL_WORDS:
            sys.exit(EXIT_OK if phase == "Succeeded" else EXIT_WORKFLOW_FAILED)
        time.sleep(interval)


@main.command()
@click.argument("workflow_id")
@click.option("--parallelism", default=None, type=int)
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def retry(client: Client, workflow_id: str, parallelism: int | None, as_json: bool) -> None:
    """Resubmit a finished workflow, reusing its keyed step outputs."""
    body = {"parallelism": parallelism} if parallelism else {}
    response = client.post(f"{API}/workflows/{workflow_id}/retry", json=body)
    new_id = response.json()["workflow_id"]
    click.echo(json.dumps({"workflow_id": new_id}) if as_json else new_id)


@main.command()
@click.argument("spec_file", type=click.Path())
@click.option("--param", "params", multiple=True, metavar="NAME=VALUE")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def validate(client: Client, spec_file: str, params: tuple[str, ...], as_json: bool) -> None:
    """Check a workflow document; exits 2 when it has errors."""
    body = {"spec_text": _read_spec(spec_file), "parameters": _parse_params(params)}
    report = client.post(f"{API}/validate", json=body).json()
    if as_json:
        click.echo(json.dumps(report, indent=2))
    else:
        for entry in report["errors"]:
            click.echo(f"error: {entry['location']}: {entry['message']}", err=True)
        for entry in report["warnings"]:
            click.echo(f"warning: {entry['location']}: {entry['message']}", err=True)
        click.echo("OK" if report["ok"] else "INVALID")
    sys.exit(EXIT_OK if report["ok"] else EXIT_VALIDATION)


if __name__ == "__main__":
    main()
