#!/usr/bin/env python3
"""Closed-loop telemetry simulator command line.

    telemetry_sim.py simulate     --config config.yaml [--seed N] [--out DIR] [--quiet]
    telemetry_sim.py oracle       --config config.yaml [--seed N] [--out DIR]
    telemetry_sim.py sketch-bench [--config config.yaml] [--dimensions D] [--records N]

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()

import oracle
import sketch_bench
import workload
from settings import ConfigError, derive_seed, load_config


def setup_logging(quiet: bool = False) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        force=True,
    )
    log_file = os.getenv("TELEMETRY_LOG_FILE")
    if log_file:
        handler = logging.FileHandler(log_file, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
        logging.getLogger().addHandler(handler)


def _write_manifest(path, config, command, outputs):
    manifest = {"command": command, "seed": config.seed, "outputs": outputs, "config": config.to_dict()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _run_with_outputs(paths, body):
    """Run `body`; on any failure remove the (partial) output files."""
    try:
        body()
        return 0
    except Exception:
        for path in paths:
            if os.path.exists(path):
                os.remove(path)
        raise


def cmd_simulate(args) -> int:
    config = load_config(args.config, args.seed, args.out)
    os.makedirs(config.output_dir, exist_ok=True)
    trace_path = os.path.join(config.output_dir, "trace.csv")
    manifest_path = os.path.join(config.output_dir, "manifest.json")
    paths = [trace_path, manifest_path]

    def body():
        trace = workload.replay(config)
        trace.to_csv(trace_path)
        outputs = ["trace.csv"]
        for pmap in trace.partitions:
            name = f"partition_v{pmap.version}.txt"
            paths.append(os.path.join(config.output_dir, name))
            with open(paths[-1], "w", encoding="utf-8") as f:
                f.write(pmap.to_text())
            outputs.append(name)
        _write_manifest(manifest_path, config, "simulate", outputs)
        if not args.quiet:
            workload.print_summary(trace.summary)
        logging.info("trace written to %s (%d partition maps)", trace_path, len(trace.partitions))

    return _run_with_outputs(paths, body)


def cmd_oracle(args) -> int:
    config = load_config(args.config, args.seed, args.out)
    os.makedirs(config.output_dir, exist_ok=True)
    trace_path = os.path.join(config.output_dir, "oracle.csv")
    manifest_path = os.path.join(config.output_dir, "oracle_manifest.json")

    def body():
        oracle.run_oracle(config).to_csv(trace_path)
        _write_manifest(manifest_path, config, "oracle", ["oracle.csv"])
        logging.info("oracle trace written to %s", trace_path)

    return _run_with_outputs([trace_path, manifest_path], body)


def cmd_sketch_bench(args) -> int:
    config = load_config(args.config, args.seed, args.out)
    spec = sketch_bench.skew_mix(args.dimensions, args.records, derive_seed(config.seed, "workload"))
    os.makedirs(config.output_dir, exist_ok=True)
    report_path = os.path.join(config.output_dir, "bench.csv")

    def body():
        frame = sketch_bench.run_bench(config.geometry(), spec, derive_seed(config.seed, "sampling"))
        frame.to_csv(report_path, index=False, float_format="%.10g")
        if not args.quiet:
            print(sketch_bench.format_report(frame))

    return _run_with_outputs([report_path], body)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Closed-loop in-network telemetry simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (default: built-in reference scenario)")
    common.add_argument("--seed", type=int, help="Override the config seed (unsigned 64-bit)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="Run the closed-loop replay").set_defaults(func=cmd_simulate)
    sub.add_parser("oracle", parents=[common], help="Exact-count trace of the same stream").set_defaults(func=cmd_oracle)
    bench = sub.add_parser("sketch-bench", parents=[common], help="Merged vs separate sketch microbenchmark")
    bench.add_argument("--dimensions", type=int, default=4, help="Number of dimensions in the skew mix")
    bench.add_argument("--records", type=int, default=200_000, help="Stream length")
    bench.set_defaults(func=cmd_sketch_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.quiet)
    try:
        return args.func(args)
    except ConfigError as e:
        logging.error("invalid configuration: %s", e)
        print(str(e), file=sys.stderr)
        return 2
    except Exception as e:
        logging.exception("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
