# -*- coding: utf-8 -*-
"""Command-line front end: ``run``, ``sweep``, ``verify-chain``, ``ddid bench`` and ``replay``."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import aiofiles
import humanize

from . import metrics
from .bench import run_bench
from .engine import RunResult, replay, run_scenario
from .errors import ConfigError, CorruptArtifact, TincException
from .ledger import load_export, verify_export
from .scenario import PARAM_ALIASES, load_scenario, parse_scenario, parse_values, with_override
from .simnet import load_trace

__log__ = logging.getLogger(__name__)

SWEEP_EXTRA = ("param", "value", "seed")

_handler: Optional[logging.Handler] = None


def setup_logging(level: str, filename: str = "") -> None:
    global _handler
    logger = logging.getLogger()
    logger.setLevel(level)
    if _handler is not None:
        logger.removeHandler(_handler)
    if filename:
        _handler = logging.FileHandler(filename=filename, encoding='utf-8', mode='w')
    else:
        _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s %(message)s'))
    logger.addHandler(_handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinc", description="Sharded consortium blockchain simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write a results bundle")
    run.add_argument("--config", required=True, help="scenario file")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--epochs", type=int, default=None)
    run.add_argument("--out", default=None, help="results directory")
    run.add_argument("--trace", action="store_true", help="also write trace.ndjson")

    sweep = sub.add_parser("sweep", help="run a scenario over parameter values and seeds")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True, help="name=v1,v2,... e.g. shards=2,4,8")
    sweep.add_argument("--seeds", type=int, default=1)
    sweep.add_argument("--epochs", type=int, default=None)
    sweep.add_argument("--out", default=None)

    verify = sub.add_parser("verify-chain", help="re-validate an exported shard ledger")
    verify.add_argument("export")

    ddid = sub.add_parser("ddid", help="DDID registry tools")
    ddid_sub = ddid.add_subparsers(dest="ddid_command", required=True)
    bench = ddid_sub.add_parser("bench", help="time DDID operations")
    bench.add_argument("--ops", type=int, default=None)
    bench.add_argument("--out", default=None, help="CSV path (stdout when omitted)")

    rep = sub.add_parser("replay", help="re-execute a dumped trace and compare")
    rep.add_argument("trace")
    return parser


async def write_text(path: str, text: str) -> None:
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(text)


async def write_ndjson(path: str, records: Sequence[dict]) -> int:
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        for record in records:
            await f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
    return len(records)


def _assignments_csv(rows: Sequence[dict]) -> str:
    lines = ["epoch,tx,shard,rule,external_deps,cross_shard"]
    for r in rows:
        lines.append(f"{r['epoch']},{r['tx']},{r['shard']},{r['rule']},{r['external_deps']},{r['cross_shard']}")
    return "\n".join(lines) + "\n"


async def write_bundle(result: RunResult, out: str, *, trace: bool = False) -> List[str]:
    """Write the results bundle of one run; returns the written paths."""
    os.makedirs(os.path.join(out, "ledgers"), exist_ok=True)
    files = {
        "plan.json": result.plan.to_json(),
        "metrics.csv": result.metrics_csv(),
        "summary.json": json.dumps(result.summary, indent=2, sort_keys=True) + "\n",
        "assignments.csv": _assignments_csv(result.assignments),
    }
    written = []
    for name, text in files.items():
        path = os.path.join(out, name)
        await write_text(path, text)
        written.append(path)
    for shard, ledger in sorted(result.ledgers.items()):
        path = os.path.join(out, "ledgers", f"shard-{shard}.ndjson")
        await write_ndjson(path, ledger.export())
        written.append(path)
    if trace:
        path = os.path.join(out, "trace.ndjson")
        await write_ndjson(path, result.trace_records())
        written.append(path)
    return written


async def cmd_run(args, config: dict) -> int:
    scenario = load_scenario(args.config)
    trace = args.trace or config["TINC_TRACE"]
    out = args.out or os.path.join(config["TINC_OUT_DIR"], scenario.name)
    loop = asyncio.get_running_loop()
    started = time.perf_counter()
    result = await loop.run_in_executor(None, lambda: run_scenario(scenario, args.seed, epochs=args.epochs,
                                                                   trace=trace))
    written = await write_bundle(result, out, trace=trace)
    s = result.summary
    print(f"{scenario.name}: {s['committed']}/{s['admitted']} committed, throughput {s['throughput']:.1f} tx/s, "
          f"failure rate {s['failure_rate']:.4f} "
          f"({humanize.precisedelta(time.perf_counter() - started, minimum_unit='milliseconds')} wall)")
    print(f"wrote {len(written)} files to {out}")
    return 0


def sweep_cell(data: Dict[str, Any], param: str, value: Any, seed: int, epochs: Optional[int]) -> Tuple[str, dict]:
    """One (value, seed) cell of a sweep; runs in a worker process."""
    scenario = with_override(parse_scenario(data), param, value)
    result = run_scenario(scenario, seed, epochs=epochs)
    csv_text = metrics.to_csv(result.rows, extra=list(zip(SWEEP_EXTRA, (param, value, seed))))
    return csv_text, result.summary


def _split_param(raw: str) -> Tuple[str, List[Any]]:
    name, sep, values = raw.partition("=")
    if not sep or not name.strip():
        raise ConfigError(f"--param expects name=v1,v2 (got {raw!r})", "param")
    return name.strip(), parse_values(values)


async def cmd_sweep(args, config: dict) -> int:
    scenario = load_scenario(args.config)
    param, values = _split_param(args.param)
    # reject an unknown parameter before any worker starts
    for value in values:
        with_override(scenario, param, value)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1", "seeds")
    seeds = [scenario.seed + k for k in range(args.seeds)]
    data = scenario.model_dump(mode="json")
    out = args.out or os.path.join(config["TINC_OUT_DIR"], f"{scenario.name}-sweep")
    os.makedirs(out, exist_ok=True)
    cells = [(v, s) for v in values for s in seeds]
    workers = config["TINC_SWEEP_WORKERS"] or None
    loop = asyncio.get_running_loop()
    __log__.info(f"sweep {PARAM_ALIASES.get(param, param)} over {values} x {len(seeds)} seeds "
                 f"({len(cells)} runs)")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = await asyncio.gather(*[
            loop.run_in_executor(pool, sweep_cell, data, param, v, s, args.epochs) for v, s in cells
        ])
    lines: List[str] = []
    summaries = []
    for (value, seed), (csv_text, summary) in zip(cells, results):
        rows = csv_text.splitlines()
        if not lines:
            lines.append(rows[0])
        lines.extend(rows[1:])
        summaries.append({"param": param, "value": value, "seed": seed, **summary})
    await write_text(os.path.join(out, "sweep.csv"), "\n".join(lines) + "\n")
    await write_text(os.path.join(out, "summary.json"), json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    print(f"{len(cells)} runs, {len(lines) - 1} rows written to {os.path.join(out, 'sweep.csv')}")
    return 0


def cmd_verify_chain(args) -> int:
    records = load_export(args.export)
    try:
        n = verify_export(records)
    except CorruptArtifact as e:
        print(f"FAIL {args.export}: {e}")
        return 1
    print(f"PASS {args.export}: {n} blocks")
    return 0


async def cmd_bench(args, config: dict) -> int:
    ops = args.ops or config["TINC_BENCH_OPS"]
    loop = asyncio.get_running_loop()
    report = await loop.run_in_executor(None, lambda: run_bench(ops, seed=config["TINC_BENCH_SEED"],
                                                                threads=config["TINC_BENCH_THREADS"]))
    if args.out:
        directory = os.path.dirname(args.out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        await write_text(args.out, report.to_csv())
        print(report.describe())
    else:
        print(report.to_csv(), end="")
    return 0


def cmd_replay(args) -> int:
    try:
        records = load_trace(args.trace)
    except (OSError, ValueError) as e:
        raise CorruptArtifact(f"{args.trace}: unreadable trace ({e})")
    report = replay(records)
    if report.ok:
        print(f"PASS {args.trace}: summary and {len(records) - 1} trace records reproduced")
        return 0
    diff = sorted(k for k in set(report.expected) | set(report.actual)
                  if report.expected.get(k) != report.actual.get(k))
    print(f"FAIL {args.trace}: summary {'matches' if report.summary_matches else 'differs in ' + ', '.join(diff)}; "
          f"first trace divergence at record {report.first_divergence}")
    return 1


async def dispatch(args, config: dict) -> int:
    if args.command == "run":
        return await cmd_run(args, config)
    if args.command == "sweep":
        return await cmd_sweep(args, config)
    if args.command == "verify-chain":
        return cmd_verify_chain(args)
    if args.command == "ddid":
        return await cmd_bench(args, config)
    return cmd_replay(args)


def main(argv: Optional[Sequence[str]] = None, config: Optional[dict] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if config is None:
            from config_loader import load_config
            config = load_config()
        setup_logging(config["TINC_LOG"], config.get("TINC_LOG_FILE", ""))
        return asyncio.run(dispatch(args, config))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TincException as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
