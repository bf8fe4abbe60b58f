"""``taoslite`` command line: serve, replay, queue, kill, reload, metrics."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from taoslite.config import ConfigError, load_config
from taoslite.engine import CONTROL_ENV, Engine, control_path, control_request
from taoslite.metrics import MODES, MetricsRecorder, ScalingHarness, p95, parse_range

logger = logging.getLogger("taoslite")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(args: argparse.Namespace, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _control(args: argparse.Namespace) -> Path:
    if args.control:
        return Path(args.control)
    if os.environ.get(CONTROL_ENV):
        return Path(os.environ[CONTROL_ENV])
    if args.config:
        try:
            return control_path(load_config(args.config))
        except (ConfigError, OSError) as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    raise UsageError(f"no control socket: pass --control, -c CONFIG or set {CONTROL_ENV}")


def _request(args: argparse.Namespace, request: dict) -> dict:
    path = _control(args)
    try:
        return control_request(path, request)
    except OSError as exc:
        raise ConnectionError(f"cannot reach engine at {path}: {exc}") from exc


# -- commands -------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    engine = Engine(config)
    try:
        engine.start()
    except OSError as exc:
        print(f"error: cannot start engine: {exc}", file=sys.stderr)
        engine.shutdown(grace=0)
        return EXIT_FAIL

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGHUP, lambda *_: threading.Thread(target=_reload_quietly, args=(engine,)).start())

    host, port = engine.webhook_server.address if engine.webhook_server else config.listen
    print(f"listening on {host}:{port}", flush=True)
    print(f"control socket {control_path(config)}", flush=True)
    while not stop.wait(0.5):
        pass
    logger.info("shutting down")
    engine.shutdown()
    return EXIT_OK


def _reload_quietly(engine: Engine) -> None:
    try:
        engine.reload()
    except (ConfigError, OSError) as exc:
        logger.error("SIGHUP reload failed: %s", exc)


def _load_replay_file(path: str) -> tuple[dict, str]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read replay file {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("headers"), dict) or not isinstance(data.get("body"), str):
        raise UsageError(f"{path}: expected an object with 'headers' (object) and 'body' (string)")
    return data["headers"], data["body"]


def cmd_replay(args: argparse.Namespace) -> int:
    headers, body = _load_replay_file(args.file)
    resp = _request(args, {"cmd": "replay", "headers": headers, "body": body})
    response = resp.get("response", {})
    if "job_id" in response:
        text = f"accepted: job {response['job_id']}"
    elif "ignored" in response:
        text = f"accepted, ignored: {response['ignored']}"
    else:
        text = f"rejected ({resp.get('status')}): {response.get('error') or resp.get('error')}"
    _emit(args, resp, text)
    return EXIT_OK if resp.get("ok") else EXIT_FAIL


def cmd_queue(args: argparse.Namespace) -> int:
    resp = _request(args, {"cmd": "queue"})
    q = resp["queue"]
    lines = [f"run queue {len(q['running'])}/{q['max_run_queue']}"]
    for j in q["running"]:
        lines.append(f"  running  #{j['id']:<5} {j['repo']}#{j['change_id']} {j['head_sha'][:12]} prio={j['priority']}")
    lines.append(f"wait queue {len(q['waiting'])}")
    for j in q["waiting"]:
        lines.append(f"  waiting  #{j['id']:<5} {j['repo']}#{j['change_id']} {j['head_sha'][:12]}")
    _emit(args, q, "\n".join(lines))
    return EXIT_OK


def cmd_kill(args: argparse.Namespace) -> int:
    resp = _request(args, {"cmd": "kill", "id": args.job_id})
    if not resp.get("ok"):
        print(f"error: {resp.get('error')}", file=sys.stderr)
        return EXIT_FAIL
    _emit(args, resp, f"killed job {args.job_id}")
    return EXIT_OK


def cmd_reload(args: argparse.Namespace) -> int:
    request: dict = {"cmd": "reload"}
    if args.path:
        request["path"] = str(Path(args.path).resolve())
    resp = _request(args, request)
    if not resp.get("ok"):
        print(f"reload rejected: {resp.get('error')}", file=sys.stderr)
        if args.json:
            print(json.dumps(resp, indent=2, sort_keys=True))
        return EXIT_FAIL
    info = resp["reload"]
    _emit(args, resp, f"{resp['delta_text']}\nplan v{info['plan_version']}, {info['active_count']} active plugins")
    return EXIT_OK


def cmd_metrics_export(args: argparse.Namespace) -> int:
    resp = _request(args, {"cmd": "metrics"})
    recorder = MetricsRecorder.from_dict(resp["metrics"])
    try:
        recorder.export_csv(args.path)
        figures = [] if args.no_plot else _render(args.path, recorder)
    except OSError as exc:
        print(f"error: cannot write {args.path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _emit(args, {"csv": str(args.path), "figures": [str(f) for f in figures], "samples": len(recorder.samples)},
          "\n".join([f"wrote {args.path}", *(f"wrote {f}" for f in figures)]))
    return EXIT_OK


def _render(csv_path: str, recorder: MetricsRecorder) -> list[Path]:
    from taoslite.figures import render_alongside

    return render_alongside(Path(csv_path), recorder.samples, recorder.scaling)


def cmd_metrics_scaling(args: argparse.Namespace) -> int:
    try:
        n_values = parse_range(args.n)
    except ValueError as exc:
        raise UsageError(f"--n: {exc}") from exc
    if any(n < 0 for n in n_values):
        raise UsageError("--n values must be >= 0")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    modes = MODES if args.mode == "both" else (args.mode,)
    recorder = MetricsRecorder()
    payload: dict = {"setup_ms": args.setup_ms, "repeat": args.repeat, "rows": []}
    lines = [f"{'mode':<7} {'n':>3} {'total_ms':>10} {'per_module_ms':>14}"]
    with ScalingHarness() as harness:
        if args.calibrate:
            costs = harness.calibrate_spawn(args.calibrate)
            payload["p95_spawn_ms"] = p95(costs)
        for mode in modes:
            for n in n_values:
                row = harness.run(n, mode, args.setup_ms, args.repeat)
                recorder.record_scaling([row])
                payload["rows"].append({"n_modules": n, "mode": mode, "total_ms": round(row.total_ms, 3),
                                        "per_module_ms": round(row.per_module_ms, 3)})
                lines.append(f"{mode:<7} {n:>3} {row.total_ms:>10.1f} {row.per_module_ms:>14.1f}")
    if "p95_spawn_ms" in payload:
        lines.append(f"p95 single-spawn cost: {payload['p95_spawn_ms']:.2f} ms")
    if args.out:
        try:
            recorder.export_csv(args.out)
            figures = [] if args.no_plot else _render(args.out, recorder)
        except OSError as exc:
            print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_FAIL
        payload["csv"] = str(args.out)
        payload["figures"] = [str(f) for f in figures]
        lines += [f"wrote {args.out}", *(f"wrote {f}" for f in figures)]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taoslite", description="Lightweight modular CI engine.")
    parser.add_argument("--log-level", default=os.environ.get("TAOSLITE_LOG", "WARNING"))
    sub = parser.add_subparsers(dest="command", required=True)

    def client(p: argparse.ArgumentParser, json_flag: bool = True) -> None:
        p.add_argument("-c", "--config", help="engine config (used to locate the control socket)")
        p.add_argument("--control", help=f"control socket path (default: ${CONTROL_ENV} or <workspace_root>/control.sock)")
        if json_flag:
            p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("serve", help="run the engine until SIGTERM")
    p.add_argument("-c", "--config", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="inject a recorded webhook into a running engine")
    p.add_argument("file")
    client(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("queue", help="show wait and run queues")
    client(p)
    p.set_defaults(func=cmd_queue)

    p = sub.add_parser("kill", help="kill a waiting or running job")
    p.add_argument("job_id", type=int)
    client(p)
    p.set_defaults(func=cmd_kill)

    p = sub.add_parser("reload", help="re-read the config file and apply plug-in/plug-out changes")
    p.add_argument("path", nargs="?", help="config file to load instead of the one the engine started with")
    client(p)
    p.set_defaults(func=cmd_reload)

    metrics = sub.add_parser("metrics", help="metrics export and the scaling harness")
    msub = metrics.add_subparsers(dest="metrics_command", required=True)

    p = msub.add_parser("export", help="write the engine's memory samples as CSV (+ figure)")
    p.add_argument("path")
    p.add_argument("--no-plot", action="store_true")
    client(p)
    p.set_defaults(func=cmd_metrics_export)

    p = msub.add_parser("scaling", help="time a phase with n no-op plugins in shared vs naive context")
    p.add_argument("--n", default="1..12", help="module counts, e.g. 1..12 or 1,4,8")
    p.add_argument("--mode", choices=(*MODES, "both"), default="both")
    p.add_argument("--setup-ms", type=int, default=200)
    p.add_argument("--repeat", type=int, default=1, help="runs per row; the median total is reported")
    p.add_argument("--calibrate", type=int, default=0, metavar="SAMPLES",
                   help="also measure the p95 single-spawn cost over SAMPLES runs")
    p.add_argument("--out", help="CSV output path; figures are written alongside")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_metrics_scaling)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConnectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
