"""``pocket`` command line.

Exit codes: 0 evaluable outcome(s), 1 validation or user error,
2 orchestration failure (the model was never reached or could not be).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pocket.arena import ScenarioError, load_scenario
from pocket.backend import OrchestrationError, ScriptedBackend, load_script, resolve_backend
from pocket.dispatcher import run_trial
from pocket.package import PackageError, Registry, RegistryError, load_library, load_package, register
from pocket.trace import (
    DATASET_MANIFEST,
    HASH_FILE,
    analyze,
    format_table,
    hash_dataset,
    verify_dataset,
    verify_trial,
    write_orchestration_failure,
    write_trial,
)

EXIT_OK, EXIT_USER, EXIT_ORCHESTRATION = 0, 1, 2
DEFAULT_SCENARIO = "scenarios/darkside_small.json"

log = logging.getLogger("pocket")


def _emit(args: argparse.Namespace, text_lines: Sequence[str], payload: object) -> None:
    if args.format == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _load_scenario(path: str, seed: int | None):
    scenario = load_scenario(path)
    return scenario.with_seed(seed) if seed is not None else scenario


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        pkg = load_package(args.dir)
    except PackageError as exc:
        _emit(args, [str(v) for v in exc.violations],
              {"ok": False, "violations": [{"code": v.code, "message": v.message} for v in exc.violations]})
        return EXIT_USER
    _emit(args, [], {"ok": True, "agent_id": pkg.agent_id, "violations": []})
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    out = Path(args.out)
    trial_id = args.trial_id or out.name
    try:
        pkg = load_package(args.agent)
        scenario = _load_scenario(args.scenario, args.seed)
    except PackageError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return EXIT_USER
    except ScenarioError as exc:
        print(f"scenario: {exc}", file=sys.stderr)
        return EXIT_USER

    config = {"agent_id": pkg.agent_id, "backend_id": args.backend, "mode": args.mode}
    try:
        backend = resolve_backend(args.backend)
        if backend.backend_id != pkg.manifest.model_backend and not args.override_backend:
            print(
                f"backend {backend.backend_id!r} differs from manifest model_backend "
                f"{pkg.manifest.model_backend!r}; pass --override-backend to run anyway",
                file=sys.stderr,
            )
            return EXIT_USER
        config["backend_id"] = backend.backend_id
        run = run_trial(trial_id, scenario, register(Registry(), pkg), pkg.agent_id, backend, args.mode)
    except OrchestrationError as exc:
        write_orchestration_failure(out, trial_id, str(exc), config)
        print(f"orchestration error: {exc}", file=sys.stderr)
        return EXIT_ORCHESTRATION

    record = write_trial(run, out)
    m = record.measurement
    _emit(
        args,
        [f"{trial_id}\t{m.o.value}\th={m.h}\tf={m.f}\tdelta={m.delta if m.delta is not None else '--'}"],
        {"trial_id": trial_id, "configuration": record.configuration, "measurement": m.to_json()},
    )
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    fixtures = Path(args.fixtures)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        print(f"{out}: output directory is not empty", file=sys.stderr)
        return EXIT_USER
    try:
        registry = load_library(fixtures / "agents")
        scenario = _load_scenario(args.scenario, args.seed)
    except (PackageError, RegistryError) as exc:
        print(f"agents: {exc}", file=sys.stderr)
        return EXIT_USER
    except ScenarioError as exc:
        print(f"scenario: {exc}", file=sys.stderr)
        return EXIT_USER

    scripts = sorted((fixtures / "trials").glob("*/script.json"))
    if args.only_backend:
        scripts = [p for p in scripts if load_script(p).backend_id == args.only_backend]
    if not scripts:
        print(f"{fixtures}: no trial scripts", file=sys.stderr)
        return EXIT_USER

    lines, rows = [], []
    for path in scripts:
        try:
            script = load_script(path)
            run = run_trial(script.trial_id, scenario, registry, script.agent_id, ScriptedBackend(script),
                            args.mode or script.mode)
        except OrchestrationError as exc:
            print(f"{path.parent.name}: orchestration error: {exc}; batch aborted", file=sys.stderr)
            return EXIT_ORCHESTRATION
        record = write_trial(run, out / script.trial_id)
        m = record.measurement
        lines.append(f"{script.trial_id}\t{m.o.value}\th={m.h}\tf={m.f}\tdelta={m.delta if m.delta is not None else '--'}")
        rows.append({"trial_id": script.trial_id, **m.to_json()})
    digest = hash_dataset(out)
    lines.append(f"{DATASET_MANIFEST}\t{digest}")
    _emit(args, lines, {"trials": rows, "dataset_digest": digest})
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        print(f"{root}: not a directory", file=sys.stderr)
        return EXIT_USER
    summary = analyze(root)
    if args.format == "json":
        print(json.dumps(summary.to_json(), indent=2, sort_keys=True))
    else:
        sys.stdout.write(format_table(summary))
    if args.figures and summary.overall.total:
        from pocket import figures

        for path in figures.render(summary, args.figures):
            log.info("wrote %s", path)
    if summary.overall.total == 0:
        print("no verifiable trials", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK if summary.ok else EXIT_USER


def cmd_hash_verify(args: argparse.Namespace) -> int:
    root = Path(args.dir)
    if (root / DATASET_MANIFEST).is_file():
        problems = verify_dataset(root)
    elif (root / HASH_FILE).is_file():
        problems = verify_trial(root)
    else:
        print(f"{root}: no {DATASET_MANIFEST} or {HASH_FILE}", file=sys.stderr)
        return EXIT_USER
    _emit(args, problems or ["ok"], {"ok": not problems, "problems": problems})
    return EXIT_OK if not problems else EXIT_USER


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands re-declare the global flags with SUPPRESS so they don't clobber top-level values
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(None), help="override the scenario seed (default: scenario file, 7)")
    p.add_argument("--format", choices=("table", "json"), default=d("table"))
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(
        prog="pocket", description=__doc__, parents=[_global_flags(suppress=False)],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="validate an agent package directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", parents=[common], help="run one closed-loop trial")
    p.add_argument("--scenario", default=DEFAULT_SCENARIO)
    p.add_argument("--agent", required=True, help="agent package directory")
    p.add_argument("--backend", required=True, help="'live' or 'scripted:<script.json>'")
    p.add_argument("--mode", choices=("runtime", "post_hoc"), default="runtime")
    p.add_argument("--out", required=True, help="trial directory to write")
    p.add_argument("--trial-id", default=None)
    p.add_argument("--override-backend", action="store_true",
                   help="allow a backend other than the manifest's model_backend")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", parents=[common], help="replay every fixture trial into a dataset")
    p.add_argument("--fixtures", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", default=DEFAULT_SCENARIO)
    p.add_argument("--mode", choices=("runtime", "post_hoc"), default=None, help="override each script's mode")
    p.add_argument("--only-backend", default=None, help="replay only scripts for this backend")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", parents=[common], help="verify and tabulate a dataset")
    p.add_argument("dir")
    p.add_argument("--figures", default=None, help="also write PNG figures to this directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("hash-verify", parents=[common], help="verify DATASET.sha256 or a trial's hashes")
    p.add_argument("dir")
    p.set_defaults(func=cmd_hash_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


def entrypoint() -> None:
    sys.exit(main())
