"""Command-line interface: ``run``, ``validate`` and ``presets`` subcommands."""

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, catalog, load, load_raw, preset_names, \
    preset_path, resolve, validate
from .runner import THREADS_ENV, run

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def config_source(name):
    """A config file path, or the bundled preset of that name."""
    p = Path(name)
    if p.exists() or name not in preset_names():
        return p
    return preset_path(name)


def _cmd_run(args):
    try:
        cfg = load(config_source(args.config), args.override)
    except ConfigError as exc:
        for path, msg in exc.violations:
            print(f"{path}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = run(cfg, args.out_dir, args.threads)
    for stem, files in manifest["outputs"].items():
        print(f"{stem}: {', '.join(files)} ({manifest['timings'][stem]} s)")
    for stem, fail in manifest["failures"].items():
        print(f"{stem}: FAILED {fail['error']}", file=sys.stderr)
    return EXIT_OK if manifest["status"] == "ok" else EXIT_RUNTIME


def _cmd_validate(args):
    try:
        raw = apply_overrides(load_raw(config_source(args.config)), args.override)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ConfigError as exc:
        viol = exc.violations
    else:
        viol = validate(resolve(raw))
    for path, msg in viol:
        print(f"{path}: {msg}")
    print(f"{len(viol)} violation(s)")
    return EXIT_INVALID if viol else EXIT_OK


def _cmd_presets(args):
    for name, desc in catalog():
        print(f"{name}\t{desc}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="qmetasurf",
                                 description="Quantum metasurface emitter experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run a config or preset"),
                           ("validate", "check a config without running it")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="config JSON path or preset name")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dot-path override, e.g. geometry.n_l=20 (repeatable)")
    sub.choices["run"].add_argument("--out-dir", default=None, help="output directory")
    sub.choices["run"].add_argument("--threads", type=int, default=None,
                                    help=f"worker threads (default ${THREADS_ENV} or 1)")
    sub.add_parser("presets", help="list bundled presets")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "validate": _cmd_validate, "presets": _cmd_presets}
    return handler[args.command](args)
