"""
Command-line entry point.

    python cli.py run --pool builtin:synthetic:200 --budget 1500 --seed 7 --run-dir runs/seed7
    python cli.py noiselab exact --n 20 --acc 0.70,0.69,0.68
    python cli.py noiselab sweep --budget 600 --splits 10x60,20x30,30x20,60x10 --trials 50000 --seed 1
    python cli.py replay runs/seed7
    python cli.py report runs/seed7 --iteration 3
    python cli.py serve --runs-root runs

Exit codes: 0 success, 1 replay divergence or integrity error, 2 usage or
configuration error, 3 plugin startup error.
"""

import argparse
import logging
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

from config import load_run_config
from engine import MODE_DEFAULT, MODE_KOTH
from errors import ArityError, ConfigError, IntegrityError, PluginError
from noiselab import (BRACKET_CHAIN, BRACKETS, DEFAULT_ACCURACIES, DEFAULT_TRIALS, TOP1_MODES,
                      NoiseLabConfig, budget_sweep, elo_ranking_accuracy, exact_summary,
                      exact_top1_probability, parse_splits, reference_deviations,
                      render_sweep_csv, render_sweep_text, single_elim_accuracy)
from plugins import BUILTIN_SYNTHETIC
from rating import DEFAULT_K_FACTOR
from run_service import format_standings, launch_run, render_stored_report, verify_run
from store import RUNS_ROOT

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_USAGE = 2
EXIT_STARTUP = 3

MODE_ALIASES = {"default": MODE_DEFAULT, MODE_DEFAULT: MODE_DEFAULT, MODE_KOTH: MODE_KOTH}


def _accuracies(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated probabilities, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Budget-constrained agent evolution.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="evolve agents into a new run directory")
    run.add_argument("--config", help="JSON config document")
    run.add_argument("--pool", required=True, help="pool JSON file or builtin:synthetic:N")
    run.add_argument("--evaluator", default=BUILTIN_SYNTHETIC, help="evaluator command")
    run.add_argument("--mutator", default=BUILTIN_SYNTHETIC, help="mutator command")
    run.add_argument("--run-dir", help="output directory (must be empty or absent)")
    run.add_argument("--budget", type=int)
    run.add_argument("--sample-size", type=int)
    run.add_argument("--mode", choices=sorted(MODE_ALIASES))
    run.add_argument("--deep-focus", type=int, choices=(0, 1))
    run.add_argument("--seed", type=int)
    run.add_argument("--k-factor", type=float)
    run.add_argument("--clone-penalty", type=float)
    run.add_argument("--parallelism", type=int)
    run.add_argument("--max-mutation-failures", type=int)
    run.add_argument("--seed-artifact", help="seed agent artifact directory")
    run.add_argument("--seed-accuracy", type=float, help="synthetic seed agent accuracy")
    run.add_argument("--clone-rate", type=float, help="synthetic mutator clone probability")

    lab = commands.add_parser("noiselab", help="selection-noise statistics")
    lab_modes = lab.add_subparsers(dest="lab_command", required=True)

    exact = lab_modes.add_parser("exact", help="exact single-round tie and top-1 probabilities")
    exact.add_argument("--n", type=int, default=20)
    exact.add_argument("--acc", type=_accuracies, default=list(DEFAULT_ACCURACIES))
    exact.add_argument("--mode", choices=TOP1_MODES, help="only this top-1 mode")

    for name, help_text in (("sweep", "Elo vs single elimination across budget splits"),
                            ("mc", "Monte Carlo estimates for one configuration")):
        sub = lab_modes.add_parser(name, help=help_text)
        sub.add_argument("--acc", type=_accuracies, default=list(DEFAULT_ACCURACIES))
        sub.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--workers", type=int, default=1)
        sub.add_argument("--k-factor", type=float, default=DEFAULT_K_FACTOR)
        sub.add_argument("--bracket", choices=BRACKETS, default=BRACKET_CHAIN)
        if name == "sweep":
            sub.add_argument("--budget", type=int, default=600)
            sub.add_argument("--splits", default="10x60,20x30,30x20,60x10", help="ROUNDSxN,...")
            sub.add_argument("--csv", action="store_true", help="CSV instead of a table")
        else:
            sub.add_argument("--n", type=int, default=20)
            sub.add_argument("--rounds", type=int, default=30)

    replay = commands.add_parser("replay", help="verify a stored run")
    replay.add_argument("run_dir")

    report = commands.add_parser("report", help="re-render a stored comparative report")
    report.add_argument("run_dir")
    report.add_argument("--iteration", type=int)
    report.add_argument("--byte-cap", type=int)

    serve = commands.add_parser("serve", help="read-only JSON API over run directories")
    serve.add_argument("--runs-root", default=RUNS_ROOT)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=5000)
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    overrides = {
        "budget": args.budget,
        "sample_size": args.sample_size,
        "mode": MODE_ALIASES[args.mode] if args.mode else None,
        "deep_focus_rounds": args.deep_focus,
        "rng_seed": args.seed,
        "k_factor": args.k_factor,
        "clone_penalty": args.clone_penalty,
        "parallelism": args.parallelism,
        "max_mutation_failures": args.max_mutation_failures,
    }
    config = load_run_config(args.config, overrides)
    changes = {"seed_artifact": args.seed_artifact, "seed_accuracy": args.seed_accuracy,
               "clone_rate": args.clone_rate}
    config = replace(config, **{k: v for k, v in changes.items() if v is not None})

    run_dir = Path(args.run_dir or Path(RUNS_ROOT) / datetime.now().strftime("run-%Y%m%d-%H%M%S"))
    try:
        result = launch_run(run_dir, config, args.pool, args.evaluator, args.mutator)
    except IntegrityError as exc:
        # only a non-empty or locked target directory reaches here
        raise ConfigError(str(exc))

    print(format_standings(list(result.agents.values()), result.best.agent_id))
    print()
    print(f"iterations: {len(result.iterations)}  spent: {result.ledger.spent}/{result.ledger.total}"
          f"  stopped: {result.stop_reason}")
    print(f"best agent: {result.best.agent_id} ({result.best.rating:.2f}) "
          f"at {run_dir / result.best.artifact_dir}")
    return EXIT_OK


def cmd_noiselab(args: argparse.Namespace) -> int:
    if args.lab_command == "exact":
        if args.mode:
            print(f"top1 {args.mode}: {exact_top1_probability(args.n, args.acc, args.mode):.4f}")
            return EXIT_OK
        summary = exact_summary(args.n, args.acc)
        print(f"n={args.n} accuracies={','.join(f'{p:g}' for p in args.acc)}")
        for key, value in summary.items():
            print(f"{key:<18} {value:.4f}")
        return EXIT_OK

    if args.lab_command == "sweep":
        splits = parse_splits(args.splits)
        rows = budget_sweep(args.budget, splits, args.acc, args.trials, args.seed,
                            args.k_factor, args.workers, args.bracket)
        if args.csv:
            sys.stdout.write(render_sweep_csv(rows))
        else:
            print(render_sweep_text(rows, args.bracket, reference_deviations(rows, args.budget, args.acc)))
        return EXIT_OK

    config = NoiseLabConfig(tuple(args.acc), args.n, args.rounds, args.k_factor, args.trials,
                            args.seed, args.workers, args.bracket)
    elo = elo_ranking_accuracy(config)
    single = single_elim_accuracy(config)
    print(f"{config.rounds} rounds x {config.n} tasks, {config.trials} trials")
    print(f"elo          {elo.p:.4f} +/- {elo.se:.4f}")
    print(f"single_elim  {single.p:.4f} +/- {single.se:.4f}  ({config.bracket})")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    ok, message = verify_run(Path(args.run_dir))
    print(message)
    return EXIT_OK if ok else EXIT_DIVERGED


def cmd_report(args: argparse.Namespace) -> int:
    ok, text = render_stored_report(Path(args.run_dir), args.iteration, args.byte_cap)
    if not ok:
        print(text, file=sys.stderr)
        return EXIT_DIVERGED
    print(text)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from app import create_app

    logger.info("Serving run directories under %s", args.runs_root)
    create_app(args.runs_root).run(host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "noiselab": cmd_noiselab,
    "replay": cmd_replay,
    "report": cmd_report,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ArityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PluginError as exc:
        print(f"plugin error: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
