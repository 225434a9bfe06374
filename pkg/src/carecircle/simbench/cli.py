"""Command line: gen, eval, report, verify-chain.

Exit codes: 0 success, 1 evaluation failure (a leak or a missed gate),
2 usage or input error.
"""
from __future__ import annotations

import argparse
import copy
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from ..caregraph import AccessLevel, Role
from ..vault.audit import AuditLedger, verify_path
from .config import ConfigError, SimConfig, load_config
from .corpus import CorpusError, calibration, generate_corpus, load_corpus, write_corpus
from .evals import draw_mutation, run_compat_eval, run_exposure_eval, run_fidelity_eval, run_misconfig_eval
from .report import EvalReport, render_tables
from .world import build_world

SUITES = ("exposure", "misconfig", "fidelity", "compat")
REPORT_NAME = "eval_report.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> SimConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "circles", None) is not None:
        cfg = cfg.with_overrides(n_circles=args.circles)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carecircle", description="Care-circle simulation benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--config", default=None, help="JSON config (default: packaged)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--circles", type=int, default=None, help="override n_circles")

    g = sub.add_parser("gen", help="generate a corpus directory")
    common(g)

    e = sub.add_parser("eval", help="run evaluation suites and write an EvalReport")
    common(e)
    e.add_argument("--suite", choices=SUITES + ("all",), default="all")
    e.add_argument("--corpus", default=None, help="load this corpus instead of generating one")
    e.add_argument("--inject", type=int, default=None,
                   help="misconfig injections (default 12); with the exposure suite, provision that many "
                        "mutated template fields")
    e.add_argument("--runs", type=int, default=120, help="misconfig runs")
    e.add_argument("--controls", type=int, default=6, help="label-rename negative controls")
    e.add_argument("--turns", type=int, default=10000, help="fidelity query turns")
    e.add_argument("--fabrication-rate", type=float, default=0.06)
    e.add_argument("--corruption-rate", type=float, default=0.0)

    r = sub.add_parser("report", help="render an EvalReport as text tables")
    r.add_argument("path", help="report JSON or a directory holding " + REPORT_NAME)

    v = sub.add_parser("verify-chain", help="verify an audit chain file or ledger directory")
    v.add_argument("path")
    return p


def cmd_gen(args) -> int:
    if not args.out:
        raise UsageError("gen needs --out")
    corpus = generate_corpus(_config(args))
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.circles)} circles to {args.out}")
    return 0


def _exposure_templates(world, n: int, seed: int):
    """Reference templates with ``n`` mutated fields, drawn like misconfig injections."""
    templates = copy.deepcopy(world.reference)
    rng = np.random.default_rng([seed, 1])
    circles = sorted(world.corpus.circles, key=lambda c: c.id)
    for i in range(n):
        inj = draw_mutation(world, rng, i, circles[i % len(circles)])
        templates[Role(inj.role)][inj.field] = AccessLevel.parse(inj.after)
    return templates


def run_eval(cfg: SimConfig, suites: tuple[str, ...], out: Path | None = None, corpus=None, inject: int | None = None,
             runs: int = 120, controls: int = 6, turns: int = 10000, r: float = 0.06, q: float = 0.0) -> EvalReport:
    needs_world = any(s in suites for s in ("exposure", "misconfig", "fidelity"))
    if corpus is None and needs_world:
        corpus = generate_corpus(cfg)
    seed = cfg.seed if corpus is None else corpus.config.seed
    config_hash = cfg.hash if corpus is None else corpus.config.hash
    report = EvalReport({"seed": seed, "config_hash": config_hash, "suites": list(suites)})
    if corpus is not None:
        report.meta["n_circles"] = len(corpus.circles)
        report.corpus = calibration(corpus)
    if out is not None and (out / "audit").is_dir():
        shutil.rmtree(out / "audit")  # a fresh run starts fresh chains
    ledger = AuditLedger(out / "audit") if out is not None else AuditLedger()
    world = build_world(corpus, ledger=ledger) if needs_world else None
    try:
        if "exposure" in suites:
            if inject:
                mutated = _exposure_templates(world, inject, seed)
                probe = build_world(corpus, role_templates=mutated, ledger=ledger, stores=world.stores,
                                    index_evidence=False)
                try:
                    report.exposure = run_exposure_eval(probe)
                finally:
                    probe.close()
                report.meta["exposure_injections"] = inject
            else:
                report.exposure = run_exposure_eval(world)
        if "misconfig" in suites:
            report.misconfig = run_misconfig_eval(world, 12 if inject is None else inject, runs, seed, controls)
        if "fidelity" in suites:
            fresh = build_world(corpus, ledger=ledger, stores=world.stores)
            try:
                report.fidelity = run_fidelity_eval(fresh, turns, r, q, seed)
            finally:
                fresh.close()
        if "compat" in suites:
            report.compat = run_compat_eval()
    finally:
        if world is not None:
            world.close()
    if out is not None:
        report.write(out / REPORT_NAME)
    return report


def cmd_eval(args) -> int:
    cfg = _config(args)
    suites = SUITES if args.suite == "all" else (args.suite,)
    corpus = load_corpus(args.corpus) if args.corpus else None
    if corpus is not None and (args.seed is not None or args.config or args.circles is not None):
        raise UsageError("--corpus carries its own config; drop --seed/--config/--circles")
    for name in ("fabrication_rate", "corruption_rate"):
        if not 0.0 <= getattr(args, name) <= 1.0:
            raise UsageError(f"--{name.replace('_', '-')} must lie in [0, 1]")
    if args.turns < 0 or args.runs < 1 or (args.inject is not None and args.inject < 0):
        raise UsageError("counts must be non-negative")
    out = Path(args.out) if args.out else None
    report = run_eval(cfg, suites, out, corpus, args.inject, args.runs, args.controls, args.turns,
                      args.fabrication_rate, args.corruption_rate)
    print(render_tables(report), end="")
    return 1 if report.failures() else 0


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / REPORT_NAME
    if not path.exists():
        raise UsageError(f"no report at {path}")
    report = EvalReport.load(path)
    print(render_tables(report), end="")
    return 1 if report.failures() else 0


def cmd_verify_chain(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise UsageError(f"no audit chain at {path}")
    verdicts = verify_path(path)
    if not verdicts:
        raise UsageError(f"no chain files under {path}")
    bad = 0
    for name, v in sorted(verdicts.items()):
        if v:
            print(f"{name}: ok")
        else:
            bad += 1
            print(f"{name}: TAMPERED at seq {v.first_bad_seq}: {v.reason}")
    return 1 if bad else 0


COMMANDS = {"gen": cmd_gen, "eval": cmd_eval, "report": cmd_report, "verify-chain": cmd_verify_chain}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.CRITICAL,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"carecircle: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CorpusError, ValueError, OSError) as exc:
        print(f"carecircle: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
