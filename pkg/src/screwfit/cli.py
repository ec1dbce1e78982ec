"""Command-line entry point: run one scenario, a batch of scenarios, or
export the flow cloud a scenario would start from."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .flow import save_flow_cloud
from .runner import (
    build_flow_cloud,
    export_summary,
    export_trace,
    load_config,
    run_batch,
    run_scenario,
)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    summary, records = run_scenario(cfg, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_trace(records, out / f"{cfg.name}_trace.csv")
    export_summary(summary, out / f"{cfg.name}_summary.json")
    status = "success" if summary.success else "FAILED"
    print(
        f"{cfg.name}: {status}  opened {summary.opening_fraction:.1%} in {summary.steps} steps, "
        f"{summary.n_optimizations} optimizations ({summary.avg_opt_ms:.1f} ms avg), "
        f"{summary.n_force_factors} force factors"
    )
    if summary.error:
        print(f"  error: {summary.error}", file=sys.stderr)
    return 0 if summary.success else 1


def _cmd_batch(args) -> int:
    paths = sorted(Path(args.scenarios).glob("*.toml")) if Path(args.scenarios).is_dir() else [Path(args.scenarios)]
    if not paths:
        print(f"no scenario files under {args.scenarios}", file=sys.stderr)
        return 2
    configs = [load_config(p) for p in paths]
    report, traces = run_batch(configs, parallelism=args.parallelism, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, summary in report.summaries:
        export_summary(summary, out / f"{name}_summary.json")
        export_trace(traces[name], out / f"{name}_trace.csv")
        status = "success" if summary.success else "FAILED"
        print(f"{name:24s} {status:8s} opened {summary.opening_fraction:6.1%}  "
              f"avg {summary.avg_opt_ms:7.1f} ms  worst {summary.worst_opt_ms:7.1f} ms")
    (out / "batch_report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(f"success rate {report.success_rate:.1%}, mean opt {report.mean_opt_ms:.1f} ms, "
          f"worst {report.worst_opt_ms:.1f} ms")
    return 0


def _cmd_gen_cloud(args) -> int:
    cfg = load_config(args.config)
    cloud = build_flow_cloud(cfg, seed=args.seed)
    save_flow_cloud(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="screwfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out-dir", default=".")
    p_run.set_defaults(func=_cmd_run)

    p_batch = sub.add_parser("batch", help="run every *.toml scenario in a directory")
    p_batch.add_argument("scenarios")
    p_batch.add_argument("--seed", type=int, default=None)
    p_batch.add_argument("--out-dir", default=".")
    p_batch.add_argument("--parallelism", type=int, default=1)
    p_batch.set_defaults(func=_cmd_batch)

    p_gen = sub.add_parser("gen-cloud", help="export the flow cloud a scenario starts from")
    p_gen.add_argument("config")
    p_gen.add_argument("out")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=_cmd_gen_cloud)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
