"""Command-line front end.

Subcommands::

    sgpbft run       --config scenario.yaml [--out DIR] [--seed S]
    sgpbft sweep     [--config base.yaml] [--protocols P,..] [--n 8,16,..] [--parallel K]
    sgpbft formulas  [--n 4,8,1000]
    sgpbft auth-demo [--config scenario.yaml] [--out DIR] [--seed S]

Exit codes: 0 success, 2 configuration error, 3 liveness failure (some
request never completed within the tick budget).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence

import yaml

from .config import ScenarioConfig, load_config
from .metrics_bench import (
    CSV_HEADER,
    ProtocolKind,
    analytic_record,
    formula_messages,
    max_f,
    record_from_report,
)
from .pbft_engine import ConfigError

logger = logging.getLogger("sgpbft")

EXIT_OK, EXIT_CONFIG, EXIT_LIVENESS = 0, 2, 3

DEFAULT_SWEEP_N = (8, 16, 32, 64, 128, 256, 512, 1000)
DEFAULT_SWEEP_REQUESTS = 200
# per-cell cap on simulated protocol messages; large PBFT cells run fewer requests
DEFAULT_MESSAGE_BUDGET = 5_000_000
MIN_SWEEP_REQUESTS = 10

AUTH_BASE = {"protocol": "SGPBFT", "n": 8, "f": 1}


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _protocol_list(text: str) -> List[ProtocolKind]:
    return [ProtocolKind(x.strip().upper().replace("-", "")) for x in text.split(",") if x.strip()]


def csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.row())
    return buf.getvalue()


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load(args, base=None) -> ScenarioConfig:
    return load_config(args.config, base=base, seed=args.seed)


# --- run -----------------------------------------------------------------------


def cmd_run(args) -> int:
    from .simnet import run_scenario

    cfg = _load(args)
    report = run_scenario(cfg)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, f"report-{cfg.sid}.txt"), report.to_text())
    text = csv_text([record_from_report(report)])
    _write(os.path.join(args.out, "results.csv"), text)
    sys.stdout.write(text)
    if not report.all_completed:
        logger.error("%d of %d requests did not complete", cfg.requests - len(report.completed),
                     cfg.requests)
        return EXIT_LIVENESS
    return EXIT_OK


# --- sweep ---------------------------------------------------------------------


def sweep_cells(base: ScenarioConfig, protocols: Sequence[ProtocolKind], ns: Sequence[int],
                message_budget: int = DEFAULT_MESSAGE_BUDGET) -> List[tuple]:
    """Cells in deterministic (protocol, n) order.

    All protocols at a given n share one f: the largest the SG-PBFT
    consensus set tolerates, so simulated columns are directly comparable.
    """
    cells = []
    for proto in protocols:
        for n in ns:
            f = max(1, max_f(ProtocolKind.SGPBFT, n))
            requests = base.requests
            if proto in (ProtocolKind.PBFT, ProtocolKind.SGPBFT):
                try:
                    per = formula_messages(proto, n)
                    requests = min(requests, max(MIN_SWEEP_REQUESTS, message_budget // per))
                except ConfigError:
                    pass
            cells.append((proto.value, n, f, requests))
    return cells


def run_cell(base: ScenarioConfig, cell: tuple):
    """Returns ``(record, report_text, error)``; never raises on bad cells."""
    from .simnet import run_scenario

    proto, n, f, requests = cell
    try:
        if proto in (ProtocolKind.GPBFT.value, ProtocolKind.CPBFT.value):
            lat = base.latency()
            return analytic_record(proto, n, f, lat.mean(), lat.per_message_overhead,
                                   requests), None, None
        cfg = base.with_(protocol=proto, n=n, f=f, requests=requests, scenario_id="",
                         faults=()).validate()
        report = run_scenario(cfg)
        err = None if report.all_completed else "liveness"
        return record_from_report(report), report.to_text(), err
    except ConfigError as exc:
        return None, None, f"config: {exc}"


def _run_cell_star(job):
    return run_cell(*job)


def run_sweep(base: ScenarioConfig, cells: Sequence[tuple], parallel: int = 1) -> list:
    jobs = [(base, c) for c in cells]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_cell_star, jobs))
    return [_run_cell_star(j) for j in jobs]


def write_plots(records, out: str) -> List[str]:
    """Static SVG charts; failures degrade to a warning."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception as exc:  # pragma: no cover - depends on the environment
        logger.warning("plotting unavailable (%s); CSV only", exc)
        return []
    charts = (("delay.svg", "mean_delay_ticks", "mean transaction delay (ticks)", False),
              ("throughput.svg", "throughput_per_kilotick", "requests per 1000 ticks", False),
              ("messages.svg", "messages_formula", "messages per consensus", True))
    written = []
    try:
        for name, attr, label, logy in charts:
            fig, ax = plt.subplots(figsize=(6, 4))
            for proto in ProtocolKind:
                pts = sorted((r.n, getattr(r, attr)) for r in records
                             if r.protocol == proto.value and getattr(r, attr) is not None)
                if not pts:
                    continue
                analytic = any(r.source == "analytic" for r in records if r.protocol == proto.value)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                        linestyle="--" if analytic else "-",
                        label=proto.value + (" (analytic)" if analytic else ""))
            ax.set_xlabel("nodes n")
            ax.set_ylabel(label)
            if logy:
                ax.set_yscale("log")
            ax.grid(True, alpha=0.3)
            ax.legend()
            fig.tight_layout()
            path = os.path.join(out, name)
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    except Exception as exc:
        logger.warning("plotting failed (%s); CSV only", exc)
    return written


def cmd_sweep(args) -> int:
    base = _load(args, base={"requests": DEFAULT_SWEEP_REQUESTS, "protocol": "PBFT"})
    protocols = _protocol_list(args.protocols)
    ns = _int_list(args.n)
    cells = sweep_cells(base, protocols, ns, args.message_budget)
    results = run_sweep(base, cells, args.parallel)
    os.makedirs(args.out, exist_ok=True)
    records, failures = [], []
    for cell, (rec, report_text, err) in zip(cells, results):
        if rec is not None:
            records.append(rec)
        if report_text is not None:
            _write(os.path.join(args.out, f"report-{rec.scenario_id}.txt"), report_text)
        if err is not None:
            failures.append(f"{cell[0]} n={cell[1]}: {err}")
            logger.warning("cell %s n=%d failed: %s", cell[0], cell[1], err)
    _write(os.path.join(args.out, "results.csv"), csv_text(records))
    if failures:
        _write(os.path.join(args.out, "failures.txt"), "\n".join(failures) + "\n")
    write_plots(records, args.out)
    logger.info("wrote %d rows to %s", len(records), os.path.join(args.out, "results.csv"))
    return EXIT_LIVENESS if any(f.endswith("liveness") for f in failures) else EXIT_OK


# --- formulas --------------------------------------------------------------------


def formulas_table(ns: Sequence[int]) -> str:
    if not ns:
        return ""
    rows = [["n"] + [p.value for p in ProtocolKind]]
    for n in ns:
        row = [str(n)]
        for p in ProtocolKind:
            try:
                row.append(f"{formula_messages(p, n):,}")
            except ConfigError as exc:
                row.append(f"invalid ({exc})")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in rows)


def cmd_formulas(args) -> int:
    sys.stdout.write(formulas_table(_int_list(args.n)))
    return EXIT_OK


# --- auth demo -------------------------------------------------------------------


def cmd_auth_demo(args) -> int:
    from .iov_auth import run_demo

    cfg = _load(args, base=AUTH_BASE)
    if cfg.protocol != "SGPBFT":
        raise ConfigError("auth-demo runs on SGPBFT")
    result = run_demo(cfg)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "ledger.txt"), result.ledger_text)
    transcript = result.transcript()
    _write(os.path.join(args.out, "transcript.txt"), transcript)
    sys.stdout.write(transcript)
    sys.stdout.write(result.ledger_text)
    if any(out.accepted is None for _, out in result.outcomes):
        return EXIT_LIVENESS
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgpbft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML scenario file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p = sub.add_parser("run", help="run one scenario")
    common(p, config_required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="compare protocols across n")
    common(p)
    p.add_argument("--protocols", default="PBFT,SGPBFT,GPBFT,CPBFT")
    p.add_argument("--n", default=",".join(map(str, DEFAULT_SWEEP_N)))
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--message-budget", type=int, default=DEFAULT_MESSAGE_BUDGET,
                   help="cap on simulated protocol messages per cell")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("formulas", help="print closed-form message counts")
    p.add_argument("--n", default="4,8,16,32,64,128,256,512,1000")
    p.set_defaults(func=cmd_formulas)

    p = sub.add_parser("auth-demo", help="vehicle authentication through SG-PBFT")
    common(p)
    p.set_defaults(func=cmd_auth_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError, OSError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
