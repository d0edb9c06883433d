"""Command line: run, sweep-kshot, validate, gen-data.

Exit status: 0 success, 1 usage or config error, 2 a run failed,
3 a validation check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentSpec, SpecError, load_spec
from .datagen import save_bundle

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_VALIDATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    """``0,1,2`` or ranges such as ``0-4``."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if not part.startswith("-") else (part, "")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return tuple(out)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pseudopilot", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-cell progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--config", type=Path, help="YAML experiment file")
        sp.add_argument("--out", type=Path, default=None, help=f"output directory (default {out_default})")
        sp.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2 or 0-4")

    for name, help_ in (("run", "train every (method, seed) cell and summarize"),
                        ("sweep-kshot", "accuracy against labeled target samples per class")):
        sp = sub.add_parser(name, help=help_)
        common(sp, "from config")
        sp.add_argument("--methods", type=_str_list, help="comma-separated method names")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        if name == "sweep-kshot":
            sp.add_argument("--k-shots", type=_int_list, help="labeled target samples per class")

    sp = sub.add_parser("gen-data", help="write generated dataset files, one per seed")
    common(sp, "data")

    sub.add_parser("validate", help="run the invariant and oracle checks")
    return p


def _load(args) -> ExperimentSpec:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    changes = {}
    if getattr(args, "seeds", None):
        changes["seeds"] = args.seeds
    if getattr(args, "methods", None):
        changes["methods"] = args.methods
    if getattr(args, "k_shots", None):
        changes["k_shots"] = args.k_shots
    if args.out is not None:
        changes["out"] = str(args.out)
    if changes:
        import dataclasses
        spec = dataclasses.replace(spec, **changes)
    return spec


def _cmd_grid(args, fn) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    spec = _load(args)
    records = fn(spec, spec.out, jobs=args.jobs)
    failed = [r for r in records if r["status"] != "ok"]
    print(f"{len(records) - len(failed)}/{len(records)} cells ok; results in {spec.out}")
    for r in failed:
        print(f"failed: {r['method']} seed {r['seed']} k {r['k']}: {r['error']}", file=sys.stderr)
    return EXIT_RUN if failed else EXIT_OK


def _cmd_gen_data(args) -> int:
    from .experiment import bundle_for

    spec = _load(args)
    if spec.data.path is not None:
        raise UsageError("config names an existing data file; nothing to generate")
    out = Path(args.out) if args.out is not None else Path("data")
    out.mkdir(parents=True, exist_ok=True)
    for seed in spec.seeds:
        path = out / f"bundle-seed{seed}.txt"
        save_bundle(bundle_for(spec.data, seed), path)
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            from .validate import run_checks
            return EXIT_OK if run_checks(sys.stdout) else EXIT_VALIDATION
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        from .experiment import cmd_run, cmd_sweep_kshot
        return _cmd_grid(args, cmd_run if args.command == "run" else cmd_sweep_kshot)
    except (SpecError, UsageError, FileNotFoundError) as exc:
        print(f"pseudopilot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
