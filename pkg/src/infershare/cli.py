"""Command-line entry point.

Exit status: 0 on success, 2 on a usage error, 1 on a runtime error (the
error class name and message go to stderr).
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from .config import load_scenario, scenario_path
from .controller import Controller
from .errors import ConfigInvalid, InferShareError, ManifestError, ModelUnavailable
from .executor import execute_model, generate_weights, read_tensor_csv, write_tensor_csv
from .manifest import TensorShape, bundled_manifest, bundled_manifest_names, parse_manifest, serialize_manifest
from .predictor import reference_profiles
from .protocol import Kind
from .server import Connection, ControllerServer, RemoteError, WorkerServer, decode_tensor, encode_tensor, parse_address
from .sim.engine import Simulation, trace_lines
from .sim.metrics import compute_report, read_trace

DEFAULT_CONTROLLER = "127.0.0.1:7700"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="infershare", description="Multi-tenant DNN inference serving")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ctl = sub.add_parser("controller", help="run the controller process")
    ctl_sub = ctl.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = ctl_sub.add_parser("run", help="serve until interrupted")
    run.add_argument("--listen", default=DEFAULT_CONTROLLER, help="host:port (default %(default)s)")
    run.add_argument("--journal", help="append-only registry journal; replayed on start")
    run.add_argument("--heartbeat-ms", type=float, default=500.0)
    run.add_argument("--demand-window-ms", type=float, default=1000.0)
    run.add_argument("--no-autoscale", action="store_true")

    wrk = sub.add_parser("worker", help="run a worker process")
    wrk_sub = wrk.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = wrk_sub.add_parser("run", help="serve until interrupted")
    run.add_argument("--profile", required=True, help="device profile name")
    run.add_argument("--config", help="scenario/cluster file whose [profiles] extend the built-in ones")
    run.add_argument("--id", dest="worker_id", help="worker id (default: worker-<port>)")
    run.add_argument("--listen", default="127.0.0.1:0")
    run.add_argument("--controller", default=DEFAULT_CONTROLLER)
    run.add_argument("--host-cache-bytes", type=int, default=64 * 10**9)
    run.add_argument("--policy", choices=("fifo", "srpt", "edf", "min-avg-latency"), default="fifo")
    run.add_argument("--fair", action="store_true")
    run.add_argument("--batching", action="store_true")
    run.add_argument("--heartbeat-ms", type=float, default=500.0)

    sim = sub.add_parser("simulate", help="run a scenario in virtual time")
    sim.add_argument("--scenario", required=True, help="scenario file or bundled name")
    sim.add_argument("--seed", type=int, help="override the scenario seed")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--noise", choices=("on", "off"), help="override the scenario noise flag")

    up = sub.add_parser("upload", help="register a model with the controller")
    up.add_argument("--manifest", required=True, help="manifest file or bundled name")
    up.add_argument("--tenant", default="default")
    up.add_argument("--model-id")
    up.add_argument("--replicas", type=int)
    up.add_argument("--controller", default=DEFAULT_CONTROLLER)

    inf = sub.add_parser("infer", help="send one inference request")
    inf.add_argument("--model", required=True)
    inf.add_argument("--input", required=True, help="CSV, one row per batch item")
    inf.add_argument("--deadline", type=float, help="relative deadline in ms")
    inf.add_argument("--tenant", default="default")
    inf.add_argument("--controller", default=DEFAULT_CONTROLLER)

    st = sub.add_parser("stats", help="print controller and worker state")
    st.add_argument("--controller", default=DEFAULT_CONTROLLER)

    rep = sub.add_parser("report", help="recompute a report from a trace file")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--format", choices=("csv", "json", "utilization"), default="csv")

    ex = sub.add_parser("exec", help="run a manifest on the reference executor")
    ex.add_argument("--manifest", required=True, help="manifest file or bundled name")
    ex.add_argument("--input", required=True, help="CSV, one row per batch item")
    ex.add_argument("--output", help="write the output CSV here instead of stdout")
    return p


def _read_manifest(ref: str):
    if ref in bundled_manifest_names() and not Path(ref).exists():
        return bundled_manifest(ref)
    return parse_manifest(Path(ref).read_text(encoding="utf-8"))


def _manifest_text(ref: str) -> str:
    return serialize_manifest(_read_manifest(ref))


async def _call(address: str, kind: Kind, payload: dict | None = None) -> dict:
    conn = await Connection.open(address)
    try:
        return await conn.call(kind, payload)
    finally:
        await conn.close()


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, default=list))


def cmd_controller(args) -> int:
    core = Controller(heartbeat_ms=args.heartbeat_ms, journal=args.journal)
    service = ControllerServer(core, demand_window_ms=args.demand_window_ms, autoscale=not args.no_autoscale)
    host, port = parse_address(args.listen)
    _serve(service, host, port)
    return 0


def cmd_worker(args) -> int:
    profiles = dict(reference_profiles())
    if args.config:
        profiles.update(load_scenario(args.config).cluster.profiles)
    if args.profile not in profiles:
        raise ConfigInvalid(f"unknown profile {args.profile!r}; known: {', '.join(sorted(profiles))}")
    host, port = parse_address(args.listen)
    service = WorkerServer(args.worker_id or f"worker-{port}", profiles[args.profile], args.host_cache_bytes,
                           controller=args.controller, heartbeat_ms=args.heartbeat_ms,
                           policy=args.policy, fair=args.fair, batching=args.batching)
    _serve(service, host, port)
    return 0


def _serve(service, host: str, port: int) -> None:
    async def main():
        await service.start(host, port)
        print(f"listening on {service.address}", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await service.close()
    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    noise = None if args.noise is None else args.noise == "on"
    base_dir = scenario_path(args.scenario).parent
    result = Simulation(scenario, seed=args.seed, noise=noise, base_dir=base_dir).run()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = result.report
    (out / "report.csv").write_text(rep.to_csv())
    (out / "utilization.csv").write_text(rep.utilization_csv())
    (out / "report.json").write_text(rep.to_json())
    with open(out / "trace.jsonl", "w") as fh:
        fh.writelines(trace_lines(result.trace))
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{rep.scenario} seed={rep.seed}: {rep.arrivals} arrivals, "
          f"{rep.outcomes.get('done', 0)} done, {rep.throughput:.1f} inf/s -> {out}")
    return 0


def cmd_upload(args) -> int:
    try:
        text = _manifest_text(args.manifest)
    except ManifestError as exc:
        print(f"{type(exc).__name__}: manifest {args.manifest} is invalid", file=sys.stderr)
        for finding in getattr(exc, "findings", None) or [exc]:
            print(f"  {finding}", file=sys.stderr)
        return 1
    payload = {"tenant": args.tenant, "manifest": text}
    if args.model_id:
        payload["model_id"] = args.model_id
    if args.replicas:
        payload["replicas"] = args.replicas
    res = asyncio.run(_call(args.controller, Kind.UPLOAD_MODEL, payload))
    print(f"{res['model_id']} on {', '.join(res['replicas']) or '(loading)'}")
    return 0


def cmd_infer(args) -> int:
    text = Path(args.input).read_text()

    async def go():
        conn = await Connection.open(args.controller)
        try:
            models = (await conn.call(Kind.LIST_MODELS))["models"]
            if args.model not in models:
                raise ModelUnavailable(args.model)
            # the input's sample shape comes from the registered manifest
            shape = TensorShape.parse(models[args.model]["input"])
            payload = {"model_id": args.model, "tenant": args.tenant,
                       "input": encode_tensor(read_tensor_csv(text, shape))}
            if args.deadline is not None:
                payload["deadline_ms"] = args.deadline
            return await conn.call(Kind.INFER, payload)
        finally:
            await conn.close()

    res = asyncio.run(go())
    print(f"# {res['request_id']} on {res['worker_id']} ({res['residency']}): "
          f"latency {res['latency_ms']:.3f} ms, estimate {res['estimate_ms']:.3f} ms", file=sys.stderr)
    if "output" in res:
        sys.stdout.write(write_tensor_csv(decode_tensor(res["output"])))
    return 0


def cmd_stats(args) -> int:
    doc = asyncio.run(_call(args.controller, Kind.GET_STATS))
    doc.pop("id", None)
    doc.pop("v", None)
    _print_json(doc)
    return 0


def cmd_report(args) -> int:
    with open(args.trace) as fh:
        rep = compute_report(read_trace(fh))
    if args.format == "json":
        sys.stdout.write(rep.to_json())
    elif args.format == "utilization":
        sys.stdout.write(rep.utilization_csv())
    else:
        sys.stdout.write(rep.to_csv())
    return 0


def cmd_exec(args) -> int:
    manifest = _read_manifest(args.manifest)
    x = read_tensor_csv(Path(args.input).read_text(), manifest.input_shape)
    y = execute_model(manifest, generate_weights(manifest), x)
    text = write_tensor_csv(y)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "controller": cmd_controller,
    "worker": cmd_worker,
    "simulate": cmd_simulate,
    "upload": cmd_upload,
    "infer": cmd_infer,
    "stats": cmd_stats,
    "report": cmd_report,
    "exec": cmd_exec,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RemoteError as exc:
        print(f"{exc.error}: {exc.payload.get('message', '')}", file=sys.stderr)
        for finding in exc.payload.get("findings", ()):
            print(f"  {finding}", file=sys.stderr)
        return 1
    except InferShareError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
