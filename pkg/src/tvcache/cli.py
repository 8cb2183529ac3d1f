"""Operator command line: serve the cache, inspect graphs, export DOT, run
backend conformance checks, and drive benchmarks.

Exit codes: 0 success, 2 usage, 3 connection failure, 4 check failed.
"""

from __future__ import annotations

import argparse
import http.client
import json
import sys
from pathlib import Path
from urllib.parse import quote, urlparse

from . import bench
from .sandbox import contract_suite, make_backend
from .server import CacheServer, ServerConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONNECTION = 3
EXIT_CHECK_FAILED = 4


def _request(server: str, method: str, path: str, body: dict | None = None) -> tuple[int, dict | str]:
    url = urlparse(server if "//" in server else f"http://{server}")
    conn = http.client.HTTPConnection(url.hostname or "127.0.0.1", url.port or 8077, timeout=10.0)
    try:
        payload = json.dumps(body) if body is not None else None
        conn.request(method, path, payload, {"Content-Type": "application/json"})
        response = conn.getresponse()
        raw = response.read()
    finally:
        conn.close()
    text = raw.decode("utf-8", "replace")
    content_type = response.getheader("Content-Type", "")
    if content_type.startswith("application/json"):
        return response.status, json.loads(text)
    return response.status, text


def cmd_serve(args: argparse.Namespace) -> int:
    overrides: dict = {}
    if args.listen:
        overrides["listen"] = args.listen
    if args.persist_dir:
        overrides["persist_dir"] = args.persist_dir
    if args.shards:
        overrides["shard_count"] = args.shards
    if args.shard_index is not None:
        overrides["shard_index"] = args.shard_index
    if args.budget:
        overrides["default_snapshot_budget"] = args.budget
    if args.lease_ttl is not None:
        overrides["lease_ttl_s"] = args.lease_ttl
    if args.persist_interval is not None:
        overrides["persist_interval_s"] = args.persist_interval
    if args.request_log:
        overrides["request_log"] = args.request_log
    if args.config:
        config = ServerConfig.from_file(args.config, **overrides)
    else:
        config = ServerConfig.from_env(**overrides)
    server = CacheServer(config)
    print(f"serving on {config.listen} (shard {config.shard_index}/{config.shard_count})",
          file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    try:
        status, payload = _request(args.server, "GET", "/stats")
    except OSError as exc:
        print(f"cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    if status != 200:
        print(f"server error {status}: {payload}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    if args.json:
        print(json.dumps(payload, indent=None, separators=(",", ":")))
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        status, payload = _request(args.server, "GET", "/stats")
    except OSError as exc:
        print(f"cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    if status != 200 or not isinstance(payload, dict):
        print(f"server error {status}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    tasks = payload.get("tasks", {})
    if args.task is not None:
        tasks = {k: v for k, v in tasks.items() if k == args.task}
    if args.json:
        print(json.dumps(tasks, separators=(",", ":"), sort_keys=True))
        return EXIT_OK
    if not tasks:
        print("no tasks")
        return EXIT_OK
    for task_id in sorted(tasks):
        stats = tasks[task_id]
        print(
            f"{task_id}: nodes={stats['nodes']} snapshots={stats['snapshots']} "
            f"hits={stats['hits']} misses={stats['misses']} evictions={stats['evictions']}"
        )
    return EXIT_OK


def cmd_export_dot(args: argparse.Namespace) -> int:
    try:
        status, payload = _request(args.server, "GET", f"/graph?task_id={quote(args.task)}")
    except OSError as exc:
        print(f"cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    if status != 200:
        print(f"server error {status}: {payload}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    assert isinstance(payload, str)
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    return EXIT_OK


def cmd_persist_now(args: argparse.Namespace) -> int:
    try:
        status, payload = _request(args.server, "POST", "/persist_now", {})
    except OSError as exc:
        print(f"cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    if status != 200:
        print(f"server error {status}: {payload}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    assert isinstance(payload, dict)
    print(f"persisted {payload.get('written', 0)} graph(s)")
    return EXIT_OK


def cmd_contract_check(args: argparse.Namespace) -> int:
    try:
        backend = make_backend(args.backend, **json.loads(args.options))
    except KeyError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    report = contract_suite(backend, workloads=args.workloads, seed=args.seed)
    if args.json:
        print(json.dumps(report.as_dict(), separators=(",", ":")))
    else:
        for check in report.checks:
            mark = "PASS" if check.passed else "FAIL"
            detail = f"  ({check.detail})" if check.detail else ""
            print(f"{mark} {check.name}{detail}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_bench_run(args: argparse.Namespace) -> int:
    spec = bench.WorkloadSpec.from_json(json.loads(Path(args.spec).read_text("utf-8")))
    report = bench.run(spec, cached=args.cached)
    payload = report.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    else:
        print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_bench_sweep(args: argparse.Namespace) -> int:
    rps_levels = [float(x) for x in args.rps.split(",")]
    shard_counts = [int(x) for x in args.shards.split(",")]
    cells = bench.latency_sweep(
        rps_levels, shard_counts, args.keys, duration_s=args.duration, base_port=args.base_port
    )
    rows = [cell.as_dict() for cell in cells]
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2), encoding="utf-8")
        bench.sweep_to_csv(cells, Path(args.out).with_suffix(".csv"))
    for row in rows:
        sat = " SATURATED" if row["saturated"] else ""
        print(
            f"shards={row['shards']} rps={row['offered_rps']}: "
            f"achieved={row['achieved_rps']:.1f} p95={row['p95_ms']:.2f}ms "
            f"errors={row['errors']}{sat}"
        )
    return EXIT_OK


def cmd_bench_compare(args: argparse.Namespace) -> int:
    report_a = bench.BenchReport.from_json(json.loads(Path(args.a).read_text("utf-8")))
    report_b = bench.BenchReport.from_json(json.loads(Path(args.b).read_text("utf-8")))
    uncached = report_a if report_a.cached is False else report_b
    cached = report_b if report_b.cached else report_a
    if cached.median_tool_ms_cached is None or uncached.median_tool_ms_uncached is None:
        print("need one cached and one uncached report", file=sys.stderr)
        return EXIT_USAGE
    merged = bench.merge_reports(uncached, cached)
    print("metric                       no-cache      cache    speedup")
    print(
        f"median per-tool-call (ms)  {merged.median_tool_ms_uncached:10.2f} "
        f"{merged.median_tool_ms_cached:10.2f} {merged.speedup:9.2f}x"
    )
    if args.out:
        Path(args.out).write_text(json.dumps(merged.to_json(), indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_bench_plotdata(args: argparse.Namespace) -> int:
    report = bench.BenchReport.from_json(json.loads(Path(args.report).read_text("utf-8")))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "hit_rate_by_epoch.csv").write_text(
        "epoch,hit_rate\n"
        + "\n".join(f"{i},{r:.6f}" for i, r in enumerate(report.hit_rate_by_epoch))
        + "\n",
        encoding="utf-8",
    )
    (out_dir / "rollout_wall_ms.csv").write_text(
        "rollout,wall_ms\n"
        + "\n".join(f"{i},{v:.3f}" for i, v in enumerate(report.rollout_wall_ms))
        + "\n",
        encoding="utf-8",
    )
    (out_dir / "batch_wall_ms.csv").write_text(
        "batch,wall_ms\n"
        + "\n".join(f"{i},{v:.3f}" for i, v in enumerate(report.batch_wall_ms))
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote CSVs to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvcache", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a cache shard")
    serve.add_argument("--listen", default=None, help="host:port (default 127.0.0.1:8077)")
    serve.add_argument("--persist-dir", default=None)
    serve.add_argument("--shards", type=int, default=None)
    serve.add_argument("--shard-index", type=int, default=None)
    serve.add_argument("--budget", type=int, default=None, help="snapshot budget per task")
    serve.add_argument("--lease-ttl", type=float, default=None)
    serve.add_argument("--persist-interval", type=float, default=None)
    serve.add_argument("--request-log", default=None, help="path or 'off'")
    serve.add_argument("--config", default=None, help="key-value config file")
    serve.set_defaults(func=cmd_serve)

    for name, func in (("stats", cmd_stats),):
        cmd = sub.add_parser(name, help="dump server statistics")
        cmd.add_argument("--server", default="127.0.0.1:8077")
        cmd.add_argument("--json", action="store_true")
        cmd.set_defaults(func=func)

    inspect = sub.add_parser("inspect", help="per-task node/snapshot/hit counts")
    inspect.add_argument("--server", default="127.0.0.1:8077")
    inspect.add_argument("--task", default=None)
    inspect.add_argument("--json", action="store_true")
    inspect.set_defaults(func=cmd_inspect)

    export = sub.add_parser("export-dot", help="write a task graph as DOT")
    export.add_argument("--server", default="127.0.0.1:8077")
    export.add_argument("--task", required=True)
    export.add_argument("--out", default=None)
    export.set_defaults(func=cmd_export_dot)

    persist_now = sub.add_parser("persist-now", help="force a persistence cycle")
    persist_now.add_argument("--server", default="127.0.0.1:8077")
    persist_now.set_defaults(func=cmd_persist_now)

    check = sub.add_parser("contract-check", help="run the sandbox conformance suite")
    check.add_argument("--backend", required=True)
    check.add_argument("--options", default="{}", help="backend constructor options as JSON")
    check.add_argument("--workloads", type=int, default=8)
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--json", action="store_true")
    check.set_defaults(func=cmd_contract_check)

    bench_cmd = sub.add_parser("bench", help="workload replay and latency sweeps")
    bench_sub = bench_cmd.add_subparsers(dest="bench_command", required=True)

    brun = bench_sub.add_parser("run", help="replay a workload spec")
    brun.add_argument("--spec", required=True)
    group = brun.add_mutually_exclusive_group(required=True)
    group.add_argument("--cached", dest="cached", action="store_true")
    group.add_argument("--no-cache", dest="cached", action="store_false")
    brun.add_argument("--out", default=None)
    brun.set_defaults(func=cmd_bench_run)

    bsweep = bench_sub.add_parser("sweep", help="open-loop latency sweep")
    bsweep.add_argument("--rps", default="1,64,256")
    bsweep.add_argument("--shards", default="1")
    bsweep.add_argument("--keys", type=int, default=8000)
    bsweep.add_argument("--duration", type=float, default=10.0)
    bsweep.add_argument("--base-port", type=int, default=8200)
    bsweep.add_argument("--out", default=None)
    bsweep.set_defaults(func=cmd_bench_sweep)

    bcompare = bench_sub.add_parser("compare", help="speedup table from two reports")
    bcompare.add_argument("a")
    bcompare.add_argument("b")
    bcompare.add_argument("--out", default=None)
    bcompare.set_defaults(func=cmd_bench_compare)

    bplot = bench_sub.add_parser("plotdata", help="render a report to flat CSVs")
    bplot.add_argument("report")
    bplot.add_argument("--out-dir", required=True)
    bplot.set_defaults(func=cmd_bench_plotdata)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
