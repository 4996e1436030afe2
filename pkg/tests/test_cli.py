"""CLI tests against a real served instance.

One uvicorn subprocess backs the whole module; each test drives the
``opflow`` command as its own subprocess so exit codes and stream
separation are measured exactly as a shell would see them.
"""

import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from test_service import BROKEN, PIPELINE, SLEEPER, WITH_INPUT

FAILING = """\
apiVersion: opflow/v1
name: failing
entrypoint: main
templates:
  boom:
    kind: script
    command: [bash, -e]
    script: |
      echo about to fail
      exit 1
  main:
    kind: steps
    body:
    - name: boom
      template: boom
"""


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    home = tmp_path_factory.mktemp("home")
    port = free_port()
    url = f"http://127.0.0.1:{port}"
    process = subprocess.Popen(
        [sys.executable, "-m", "opflow", "serve",
         "--home", str(home), "--port", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
    )
    try:
        import httpx

        deadline = time.monotonic() + 20
        while True:
            try:
                if httpx.get(f"{url}/health", timeout=1.0).status_code == 200:
                    break
            except httpx.HTTPError:
                pass
            if process.poll() is not None or time.monotonic() > deadline:
                out = process.stdout.read().decode(errors="replace")
                raise RuntimeError(f"server did not come up:\n{out}")
            time.sleep(0.1)
        yield url
    finally:
        process.send_signal(signal.SIGINT)
        try:
            process.wait(10)
        except subprocess.TimeoutExpired:
            process.kill()
            process.wait(10)


@pytest.fixture(scope="module")
def specs(tmp_path_factory):
    root = tmp_path_factory.mktemp("specs")
    paths = {}
    for name, text in (("pipeline", PIPELINE), ("broken", BROKEN),
                       ("failing", FAILING), ("sleeper", SLEEPER),
                       ("with_input", WITH_INPUT)):
        path = root / f"{name}.yaml"
        path.write_text(text)
        paths[name] = str(path)
    return paths


def opflow(server, *args, env_server=False, timeout=60):
    env = dict(os.environ)
    argv = [sys.executable, "-m", "opflow"]
    if env_server:
        env["OPFLOW_SERVER"] = server
    else:
        argv += ["--server", server]
    return subprocess.run(argv + list(args), capture_output=True, text=True,
                          timeout=timeout, env=env)


class TestSubmitAndWatch:
    def test_foreground_submit_succeeds(self, server, specs):
        proc = opflow(server, "submit", specs["pipeline"], "--interval", "0.1")
        assert proc.returncode == 0, proc.stderr
        lines = proc.stdout.splitlines()
        assert len(lines) == 2
        assert lines[1] == "Succeeded"

    def test_detach_then_watch_and_status(self, server, specs):
        proc = opflow(server, "submit", specs["pipeline"], "--detach")
        assert proc.returncode == 0, proc.stderr
        workflow_id = proc.stdout.strip()

        watch = opflow(server, "watch", workflow_id, "--interval", "0.1")
        assert watch.returncode == 0
        assert watch.stdout.splitlines()[-1] == "Succeeded"

        status = opflow(server, "status", workflow_id)
        assert status.returncode == 0
        assert status.stdout.strip() == "Succeeded"

    def test_failed_workflow_exits_one(self, server, specs):
        proc = opflow(server, "submit", specs["failing"], "--interval", "0.1")
        assert proc.returncode == 1
        assert proc.stdout.splitlines()[-1] == "Failed"

    def test_json_output(self, server, specs):
        proc = opflow(server, "submit", specs["pipeline"],
                      "--interval", "0.1", "--json")
        body = json.loads(proc.stdout.splitlines()[-1])
        assert body["phase"] == "Succeeded"

    def test_parameter_override(self, server, specs):
        proc = opflow(server, "submit", specs["with_input"],
                      "--param", "n=5", "--interval", "0.1")
        assert proc.returncode == 0
        workflow_id = proc.stdout.splitlines()[0]
        detail = opflow(server, "steps", workflow_id, "--key", "main", "--json")
        record = json.loads(detail.stdout)
        assert record["output_parameters"]["final"]["text"] == "10"

    def test_bad_parameter_syntax_exits_two(self, server, specs):
        proc = opflow(server, "submit", specs["pipeline"], "--param", "oops")
        assert proc.returncode == 2
        assert "name=value" in proc.stderr

    def test_invalid_spec_exits_two_with_diagnostics(self, server, specs):
        proc = opflow(server, "submit", specs["broken"])
        assert proc.returncode == 2
        assert "spec validation failed" in proc.stderr
        assert "ghost" in proc.stderr

    def test_missing_spec_file_exits_two(self, server, specs):
        proc = opflow(server, "submit", "/nonexistent/spec.yaml")
        assert proc.returncode == 2
        assert "cannot read spec file" in proc.stderr

    def test_server_env_variable(self, server, specs):
        proc = opflow(server, "status", "demo-ffffffff", env_server=True)
        assert proc.returncode == 3  # reached the real server, got a 404


@pytest.fixture(scope="module")
def finished(server, specs):
    proc = opflow(server, "submit", specs["pipeline"], "--interval", "0.1")
    assert proc.returncode == 0
    return proc.stdout.splitlines()[0]


class TestStepsAndLogs:
    def test_steps_table(self, server, finished):
        proc = opflow(server, "steps", finished)
        assert proc.returncode == 0
        lines = proc.stdout.splitlines()
        assert lines[0].split() == ["KEY", "NAME", "PHASE", "ATTEMPT", "DURATION"]
        keys = [line.split()[0] for line in lines[1:]]
        assert keys == ["main", "stage-one", "main--double"]
        assert all("Succeeded" in line for line in lines[1:])

    def test_steps_json(self, server, finished):
        proc = opflow(server, "steps", finished, "--json")
        rows = json.loads(proc.stdout)
        assert [row["key"] for row in rows] == [
            "main", "stage-one", "main--double",
        ]

    def test_single_step_detail(self, server, finished):
        proc = opflow(server, "steps", finished, "--key", "stage-one")
        assert proc.returncode == 0
        assert "phase:    Succeeded" in proc.stdout
        assert "out (int): 21" in proc.stdout

    def test_logs(self, server, finished):
        proc = opflow(server, "logs", finished, "stage-one")
        assert proc.returncode == 0
        assert "hello from produce" in proc.stdout

    def test_logs_follow_on_finished_step(self, server, finished):
        proc = opflow(server, "logs", finished, "stage-one",
                      "--follow", "--interval", "0.1")
        assert proc.returncode == 0
        assert "hello from produce" in proc.stdout

    def test_unknown_step_exits_three(self, server, finished):
        proc = opflow(server, "steps", finished, "--key", "nope")
        assert proc.returncode == 3
        assert "error:" in proc.stderr


class TestRetry:
    def test_retry_running_workflow_exits_four(self, server, specs):
        submitted = opflow(server, "submit", specs["sleeper"], "--detach")
        workflow_id = submitted.stdout.strip()
        proc = opflow(server, "retry", workflow_id)
        assert proc.returncode == 4
        assert "retry needs a finished workflow" in proc.stderr
        opflow(server, "watch", workflow_id, "--interval", "0.1")

    def test_retry_finished_workflow_reuses_keys(self, server, specs):
        first = opflow(server, "submit", specs["pipeline"], "--interval", "0.1")
        first_id = first.stdout.splitlines()[0]

        retried = opflow(server, "retry", first_id)
        assert retried.returncode == 0
        second_id = retried.stdout.strip()
        assert second_id != first_id

        watch = opflow(server, "watch", second_id, "--interval", "0.1")
        assert watch.returncode == 0

        rows = json.loads(opflow(server, "steps", second_id, "--json").stdout)
        phases = {row["key"]: row["phase"] for row in rows}
        assert phases["stage-one"] == "Reused"

    def test_retry_unknown_workflow_exits_three(self, server):
        proc = opflow(server, "retry", "demo-ffffffff")
        assert proc.returncode == 3


class TestValidate:
    def test_valid_spec_prints_ok(self, server, specs):
        proc = opflow(server, "validate", specs["pipeline"])
        assert proc.returncode == 0
        assert proc.stdout.strip() == "OK"

    def test_invalid_spec_exits_two(self, server, specs):
        proc = opflow(server, "validate", specs["broken"])
        assert proc.returncode == 2
        assert proc.stdout.strip() == "INVALID"
        assert "ghost" in proc.stderr

    def test_validate_json(self, server, specs):
        proc = opflow(server, "validate", specs["broken"], "--json")
        body = json.loads(proc.stdout)
        assert body["ok"] is False
        assert body["errors"]


class TestTransport:
    def test_unreachable_server_exits_five(self, specs):
        url = f"http://127.0.0.1:{free_port()}"
        proc = opflow(url, "status", "demo-ffffffff")
        assert proc.returncode == 5
        assert "cannot reach opflow server" in proc.stderr
