"""Command-line entry point: ``urbanwage {generate,prepare,decompose,verify}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 estimation error,
4 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import pandas as pd

from .config import load_config
from .errors import ConfigError, UrbanWageError, VerificationError

log = logging.getLogger("urbanwage")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urbanwage", description="Urban wage growth premium decomposition")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="INI configuration file")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--threads", type=int, help="worker threads (outputs do not depend on it)")

    common(sub.add_parser("generate", help="write a synthetic panel with ground truth"))
    sp = sub.add_parser("prepare", help="filter, deflate and pair a raw panel")
    common(sp)
    sp.add_argument("--panel", type=Path, required=True, help="directory with panel.csv, cz.csv, cpi.csv")
    sp = sub.add_parser("decompose", help="run the specification grid and write the report")
    common(sp)
    sp.add_argument("--panel", type=Path, required=True, help="raw panel directory or the output of prepare")
    sp.add_argument("--only", help="single cell: controls[:dv[:sample]], e.g. baseline")
    common(sub.add_parser("verify", help="run the oracle and planted-recovery checks"), out_required=False)
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        cfg = cfg.with_threads(args.threads)
    return cfg


def cmd_generate(cfg, out: Path) -> None:
    from .synthgen import simulate_panel, write_panel

    sp = simulate_panel(cfg.generate, threads=cfg.run.threads)
    try:
        write_panel(sp, out)
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from exc
    log.info("wrote %d records to %s", sp.report["records_emitted"], out)


def cmd_verify(cfg, out: Path | None) -> None:
    from .verify import run_all

    results = run_all(cfg, report=lambda r: print(r.line(), flush=True))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([asdict(r) for r in results]).drop(columns="seconds").to_csv(out / "verify_report.csv", index=False, lineterminator="\n")
    failed = [r.number for r in results if not r.passed]
    if failed:
        raise VerificationError(f"criteria failed: {failed}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "prepare":
            from .pipeline import cmd_prepare

            cmd_prepare(cfg, args.panel, args.out)
        elif args.command == "decompose":
            from .decomposition import SpecId
            from .pipeline import cmd_decompose

            if args.only:
                try:
                    SpecId.parse(args.only)
                except ValueError as exc:
                    raise ConfigError(f"--only: {exc}") from exc
            cmd_decompose(cfg, args.panel, args.out, only=args.only)
        else:
            cmd_verify(cfg, args.out)
    except UrbanWageError as exc:
        print(f"urbanwage {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
