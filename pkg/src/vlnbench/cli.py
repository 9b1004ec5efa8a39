"""Command-line entry point: gen, stats, validate, decompose, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from vlnbench.episode import AnnotationError, EpisodeError
from vlnbench.harness import (
    MODEL_POLICIES,
    POLICY_KINDS,
    STAMP_FILE,
    RunManifest,
    evaluate,
    load_results,
)
from vlnbench.kinematics import load_config
from vlnbench.metrics import FORMATS, aggregate, render_report
from vlnbench.model_client import CannedBackend, ConfigurationError, ModelClient, ModelError, client_from_env
from vlnbench.prompts import TemplateError, stl_template
from vlnbench.subtasks import (
    DecompositionError,
    Verdict,
    decompose,
    validate_particle,
)
from vlnbench.synth import GeneratorSpec, compute_stats, generate, load_dataset, render_stats, validate_dataset, write_dataset

logger = logging.getLogger("vlnbench")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _canned_client(path: str | None) -> ModelClient | None:
    if path is None:
        return None
    script = json.loads(Path(path).read_text())
    if not isinstance(script, list) or not all(isinstance(s, str) for s in script):
        raise ConfigurationError(f"{path}: canned replies must be a JSON array of strings")
    return CannedBackend(script)


def cmd_gen(args: argparse.Namespace) -> int:
    data = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.n is not None:
        data["n_episodes"] = args.n
    if args.style is not None:
        data["instruction_style"] = args.style
    spec = GeneratorSpec.from_json(data)
    episodes = generate(spec, load_config(args.config))
    index = write_dataset(episodes, args.out, spec)
    print(f"wrote {len(episodes)} episodes to {index.parent}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    episodes = load_dataset(args.dataset)
    if not episodes:
        print("0 episodes", file=sys.stderr)
        return EXIT_FAILURE
    sys.stdout.write(render_stats(compute_stats(episodes), args.format))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    verdicts = validate_dataset(args.dataset)
    if not verdicts:
        print(f"warning: 0 episodes in {args.dataset}", file=sys.stderr)
        return EXIT_OK
    bad = 0
    for path, error in verdicts:
        if error is None:
            print(f"ok       {path.name}")
        else:
            bad += 1
            print(f"INVALID  {path.name}: {error}")
    print(f"{len(verdicts) - bad}/{len(verdicts)} episodes valid")
    return EXIT_FAILURE if bad else EXIT_OK


def cmd_decompose(args: argparse.Namespace) -> int:
    if not args.instruction.strip():
        print("error: instruction must not be empty", file=sys.stderr)
        return EXIT_USAGE
    client = _canned_client(args.canned_replies) or client_from_env()
    template = stl_template(args.stl_template)
    try:
        result = decompose(args.instruction, client, template, check_particle=not args.no_particle)
    except DecompositionError as exc:
        print(json.dumps({"error": str(exc), "raw_reply": exc.raw_reply}, indent=2))
        return EXIT_FAILURE
    reports = list(result.reports)
    if args.no_particle:
        reports.append(validate_particle(result.subtasks, None, template))
    print(json.dumps({"subtasks": result.subtasks.to_json(), "reports": [r.to_json() for r in reports]}, indent=2))
    if args.strict and any(r.verdict is Verdict.FLAGGED for r in reports):
        flagged = ", ".join(r.principle for r in reports if r.verdict is Verdict.FLAGGED)
        print(f"strict mode: {flagged} principle failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    overrides = {"parallelism": args.parallelism, "resume": args.resume}
    if args.stamp:
        manifest = RunManifest.from_stamp(json.loads(Path(args.stamp).read_text()), args.out, **overrides)
    else:
        if not args.dataset:
            print("error: --dataset is required (or --stamp)", file=sys.stderr)
            return EXIT_USAGE
        manifest = RunManifest(
            dataset=args.dataset,
            policy=args.policy,
            out_dir=args.out,
            kinematics=load_config(args.config),
            stl_template=args.stl_template,
            dm_template=args.dm_template,
            seed=args.seed if args.seed is not None else 0,
            history_k=args.history_k,
            strict=args.strict,
            **overrides,
        )
    client = _canned_client(args.canned_replies)
    if client is not None and manifest.policy in MODEL_POLICIES:
        # a scripted backend is order-sensitive
        manifest.parallelism = 1
    report = evaluate(manifest, client)
    sys.stdout.write(render_report(report, args.format).decode("utf-8"))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    results = load_results(args.results)
    if not results:
        print(f"error: no results under {args.results}", file=sys.stderr)
        return EXIT_FAILURE
    sys.stdout.write(render_report(aggregate(results), args.format).decode("utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlnbench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="generator spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of episodes")
    p.add_argument("--style", choices=("concise", "noisy"))
    p.add_argument("--config", help="kinematics config JSON")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=FORMATS, default="table_text")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="validate every manifest in a dataset")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("decompose", help="decompose one instruction into a subtask list")
    p.add_argument("instruction")
    p.add_argument("--strict", action="store_true", help="nonzero exit when any principle is flagged")
    p.add_argument("--stl-template")
    p.add_argument("--no-particle", action="store_true", help="skip the re-decomposition check")
    p.add_argument("--canned-replies", help="JSON array of scripted replies instead of a live backend")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="evaluate a policy over a dataset")
    p.add_argument("--dataset")
    p.add_argument("--policy", choices=POLICY_KINDS, default="oracle")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="kinematics config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--format", choices=FORMATS, default="table_text")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--resume", action="store_true", help="skip episodes that already have results")
    p.add_argument("--stl-template")
    p.add_argument("--dm-template")
    p.add_argument("--history-k", type=int, default=3, help="decision records shown to the model (0 disables)")
    p.add_argument("--stamp", help=f"re-run from a {STAMP_FILE}")
    p.add_argument("--canned-replies", help="JSON array of scripted replies instead of a live backend")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-render the report of an eval output directory")
    p.add_argument("--results", required=True)
    p.add_argument("--format", choices=FORMATS, default="table_text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, TemplateError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EpisodeError, AnnotationError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ModelError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
