"""Command-line front end: partition, train, tune, report.

Exit codes: 0 success, 1 usage or config error, 2 training divergence.
Every subcommand writes byte-identical outputs for identical inputs; the
effective config is echoed next to the results so any run can be reproduced
from its own output directory.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys

from .cluster import Cluster, build_dataset, save_checkpoint
from .config import ExperimentConfig, load_config
from .controller import AdaptiveController, ControllerConfig
from .data import make_partition_plan, plan_to_json, skew_report
from .errors import ConfigError, FormatError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_bytes(path: str, blob: bytes) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for key in ("seed_data", "seed_init", "seed_sampling"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return cfg.replace(**overrides) if overrides else cfg


def _parse_grid(specs: list[str]) -> list[dict]:
    """Expands repeated key=v1,v2,... flags into a cartesian product."""
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {spec!r}")
        key, _, values = spec.partition("=")
        parsed = []
        for token in values.split(","):
            token = token.strip()
            if token.lower() in ("true", "false"):
                parsed.append(token.lower() == "true")
                continue
            try:
                parsed.append(int(token))
            except ValueError:
                try:
                    parsed.append(float(token))
                except ValueError:
                    parsed.append(token)
        if not parsed:
            raise ConfigError(f"--grid axis {key!r} has no values")
        axes.append((key.strip(), parsed))
    combos = []
    for values in itertools.product(*(vals for _, vals in axes)):
        combos.append({key: value for (key, _), value in zip(axes, values)})
    return combos


def _grid_dir_name(combo: dict) -> str:
    return "_".join(f"{k}={v}" for k, v in combo.items())


def _skew_table(shares, plan) -> str:
    k, c = shares.shape
    width = 7
    header = "part".ljust(6) + "".join(f"l{l}".rjust(width) for l in range(c))
    lines = [header]
    for p in range(k):
        row = f"p{p}".ljust(6) + "".join(f"{shares[p, l]:.3f}".rjust(width) for l in range(c))
        lines.append(row)
    sizes = [len(plan.partition_indices(p)) for p in range(k)]
    lines.append("sizes ".ljust(6) + "".join(f"{s}".rjust(width) for s in sizes))
    return "\n".join(lines) + "\n"


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    dataset = build_dataset(cfg)
    plan = make_partition_plan(dataset, cfg.nodes, cfg.skew_fraction, cfg.seed_data)
    shares = skew_report(plan, dataset)
    out = args.out
    _write(os.path.join(out, "config.json"), cfg.to_json())
    _write(os.path.join(out, "plan.json"), plan_to_json(plan))
    table = _skew_table(shares, plan)
    _write(os.path.join(out, "skew_report.txt"), table)
    if not args.quiet:
        print(table, end="")
    return EXIT_OK


def _summarize_savings(summary: dict, baseline_path: str | None) -> None:
    if baseline_path is None:
        return
    with open(baseline_path, "r", encoding="utf-8") as fh:
        base = json.load(fh)
    base_total = base.get("total_values_sent_with_travel", base.get("total_values_sent", 0))
    ours = summary.get("total_values_sent_with_travel", summary.get("total_values_sent", 0))
    summary["comm_savings"] = math.inf if ours == 0 else base_total / ours
    summary["baseline_tag"] = base.get("tag", "")


def _run_one(cfg: ExperimentConfig, out: str, args, controller_cfg: ControllerConfig | None) -> int:
    cluster = Cluster(cfg)
    driver = None
    hook = None
    if controller_cfg is not None:
        driver = AdaptiveController(cluster, controller_cfg)
        hook = driver.on_superstep
    log = cluster.run(event_hook=hook)
    if driver is not None:
        driver.finalize(log)
    _summarize_savings(log.summary, args.baseline_ledger)
    _write(os.path.join(out, "config.json"), cfg.to_json())
    _write(os.path.join(out, "metrics.csv"), log.csv_text())
    _write(os.path.join(out, "summary.json"), log.summary_text())
    if cluster.diverged and cluster._last_good is not None:
        _write_bytes(os.path.join(out, "final.ckpt"), cluster._last_good)
    else:
        save_checkpoint(cluster, os.path.join(out, "final.ckpt"))
    if not args.quiet:
        acc = log.summary.get("final_val_acc", math.nan)
        sent = log.summary.get("total_values_sent", 0)
        status = "diverged" if cluster.diverged else "ok"
        print(f"{log.summary.get('tag', '')}: {status} val_acc={acc:.4f} values_sent={sent}")
    return EXIT_DIVERGED if cluster.diverged else EXIT_OK


def _run_gridded(args, controller_cfg: ControllerConfig | None) -> int:
    cfg = _load_config(args)
    if not args.grid:
        return _run_one(cfg, args.out, args, controller_cfg)
    worst = EXIT_OK
    for combo in _parse_grid(args.grid):
        point = cfg.replace(**combo)
        out = os.path.join(args.out, _grid_dir_name(combo))
        code = _run_one(point, out, args, controller_cfg)
        worst = max(worst, code)
    return worst


def cmd_train(args) -> int:
    return _run_gridded(args, None)


def cmd_tune(args) -> int:
    grid = ()
    if args.theta_grid:
        tokens = [t.strip() for t in args.theta_grid.split(",") if t.strip()]
        grid = tuple(int(t) if t.isdigit() else float(t) for t in tokens)
    controller_cfg = ControllerConfig(
        tuner=args.tuner,
        lambda_al=args.lambda_al,
        lambda_c=args.lambda_c,
        sigma_al=args.sigma_al,
        travel_period=args.travel_period,
        theta_grid=grid,
        sa_temp0=args.sa_temp0,
        sa_decay=args.sa_decay,
        aggregate=args.aggregate,
        seed=args.controller_seed,
    )
    return _run_gridded(args, controller_cfg)


def _format_float(v, digits=4) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def cmd_report(args) -> int:
    summaries = []
    for path in args.summaries:
        if not os.path.exists(path):
            raise FormatError(f"missing summary file: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            summaries.append(json.load(fh))
    base = summaries[0]
    if args.baseline is not None:
        matches = [s for s in summaries if s.get("tag") == args.baseline]
        if not matches:
            raise ConfigError(f"no summary has tag {args.baseline!r}")
        base = matches[0]
    base_acc = base.get("final_val_acc", math.nan)
    base_sent = base.get("total_values_sent_with_travel", base.get("total_values_sent", 0))
    header = ["tag", "arch", "algo", "skew", "final_acc", "acc_delta", "comm_savings", "notes"]
    rows = []
    for s in summaries:
        acc = s.get("final_val_acc", math.nan)
        sent = s.get("total_values_sent_with_travel", s.get("total_values_sent", 0))
        is_base = s is base
        if is_base or len(summaries) == 1:
            delta = ""
            savings = "1.0x" if len(summaries) > 1 else ""
        else:
            delta = f"{(acc - base_acc) * 100:+.1f}%"
            savings = "inf" if sent == 0 else f"{base_sent / sent:.1f}x"
        notes = ""
        if s.get("arch") != base.get("arch") or s.get("model_size") != base.get("model_size"):
            notes = "arch differs from baseline"
        rows.append([
            str(s.get("tag", "")),
            str(s.get("arch", "")),
            str(s.get("algo", "")),
            _format_float(s.get("skew_fraction"), 2),
            _format_float(acc),
            delta,
            savings,
            notes,
        ])
    csv_lines = [",".join(header)]
    for row in rows:
        csv_lines.append(",".join(row))
    csv_text = "\n".join(csv_lines) + "\n"
    widths = [max(len(header[i]), max((len(r[i]) for r in rows), default=0)) for i in range(len(header))]
    txt_lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip()]
    for row in rows:
        txt_lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    txt = "\n".join(txt_lines) + "\n"
    if args.out:
        _write(os.path.join(args.out, "report.csv"), csv_text)
        _write(os.path.join(args.out, "report.txt"), txt)
    if not args.quiet:
        print(txt, end="")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        p.add_argument("config", help="experiment config JSON")
        p.add_argument("--seed-data", type=int, dest="seed_data")
        p.add_argument("--seed-init", type=int, dest="seed_init")
        p.add_argument("--seed-sampling", type=int, dest="seed_sampling")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skewsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="materialize the partition plan and skew table")
    _add_common(p)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("train", help="run one training experiment")
    _add_common(p)
    p.add_argument("--grid", action="append", default=[],
                   help="key=v1,v2,... sweep axis; repeatable, one output dir per point")
    p.add_argument("--baseline-ledger", help="baseline summary.json for comm_savings")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("tune", help="run training under the adaptive controller")
    _add_common(p)
    p.add_argument("--grid", action="append", default=[])
    p.add_argument("--baseline-ledger", help="baseline summary.json for comm_savings")
    p.add_argument("--tuner", default="hill_climb",
                   choices=("hill_climb", "stochastic_hill_climb", "simulated_annealing"))
    p.add_argument("--lambda-al", type=float, default=50.0, dest="lambda_al")
    p.add_argument("--lambda-c", type=float, default=1.0, dest="lambda_c")
    p.add_argument("--sigma-al", type=float, default=0.05, dest="sigma_al")
    p.add_argument("--travel-period", type=int, default=500, dest="travel_period")
    p.add_argument("--theta-grid", dest="theta_grid",
                   help="comma-separated knob values, conservative first")
    p.add_argument("--sa-temp0", type=float, default=1.0, dest="sa_temp0")
    p.add_argument("--sa-decay", type=float, default=0.9, dest="sa_decay")
    p.add_argument("--aggregate", default="max", choices=("max", "mean"))
    p.add_argument("--controller-seed", type=int, default=0, dest="controller_seed")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("report", help="join summaries into a comparison table")
    p.add_argument("summaries", nargs="+", help="summary.json paths")
    p.add_argument("--baseline", help="tag of the baseline row (default: first)")
    p.add_argument("--out", default="", help="also write report.csv/.txt here")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
