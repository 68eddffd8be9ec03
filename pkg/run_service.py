"""
Run Service Module - Operations over run directories
Launches runs, verifies and re-renders stored runs, and answers the read-only queries
behind the JSON API. Read operations return (ok, payload-or-message) tuples.
"""

import logging
import re
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from config import RunConfig, load_pool
from engine import AgentRecord, RunResult, best_agent
from engine import run as run_engine
from errors import ArityError, ConfigError, EngineError, IntegrityError
from noiselab import exact_summary, exact_top1_probability
from plugins import BUILTIN_SYNTHETIC, resolve_evaluator, resolve_mutator, write_synthetic_seed
from replay import replay_run
from reports import ComparativeReport, render_text
from store import CONFIG_FILE, RunStore

logger = logging.getLogger(__name__)

RUN_ID_PATTERN = re.compile(r"^[A-Za-z0-9_.-]+$")


def launch_run(run_dir: Path, config: RunConfig, pool_source: str, evaluator_command: str,
               mutator_command: str) -> RunResult:
    """
    Execute one evolution into an empty run directory.
    Pool and plugins are resolved before the directory is created, so configuration
    and startup errors leave nothing behind.
    """
    pool = load_pool(pool_source)
    engine_config = config.engine
    evaluator = resolve_evaluator(evaluator_command, engine_config.rng_seed, config.batch_timeout)
    mutator = resolve_mutator(mutator_command, engine_config.rng_seed, config.clone_rate,
                              config.create_timeout, config.refine_timeout)
    task = config.task_settings()

    if config.seed_artifact is None and evaluator_command != BUILTIN_SYNTHETIC:
        raise ConfigError("seed_artifact is required with an external evaluator.")
    if config.seed_artifact is not None and not Path(config.seed_artifact).is_dir():
        raise ConfigError(f"Seed artifact directory not found: {config.seed_artifact}")

    store = RunStore.create(Path(run_dir), config.to_document(), pool)
    try:
        with tempfile.TemporaryDirectory() as scratch:
            seed = (Path(config.seed_artifact) if config.seed_artifact is not None
                    else write_synthetic_seed(Path(scratch) / "seed", config.seed_accuracy))
            result = run_engine(engine_config, pool, seed, evaluator, mutator, store, task)
    finally:
        store.release_lock()
    logger.info("Run finished in %s: best %s at %.2f (%s)", run_dir, result.best.agent_id,
                result.best.rating, result.stop_reason)
    return result


def format_standings(agents: Sequence[AgentRecord], best_id: Optional[str] = None) -> str:
    ordered = sorted(agents, key=lambda a: (-a.rating, a.created_iteration, a.agent_id))
    lines = [f"{'agent':<12} {'rating':>9}  notes"]
    for agent in ordered:
        notes = []
        if agent.agent_id == best_id:
            notes.append("best")
        if agent.clone:
            notes.append("clone")
        lines.append(f"{agent.agent_id:<12} {agent.rating:>9.2f}  {', '.join(notes)}".rstrip())
    return "\n".join(lines)


def verify_run(run_dir: Path) -> Tuple[bool, str]:
    """Replay a stored run against its snapshots."""
    try:
        report = replay_run(Path(run_dir))
    except IntegrityError as exc:
        return False, f"integrity error: {exc}"
    return report.ok, report.summary()


def render_stored_report(run_dir: Path, iteration: Optional[int] = None,
                         byte_cap: Optional[int] = None) -> Tuple[bool, str]:
    """Re-render an iteration's comparative report, by default the last one."""
    try:
        store = RunStore.open(Path(run_dir))
        indices = store.list_iterations()
        if not indices:
            return False, "Run has no completed iterations."
        index = indices[-1] if iteration is None else iteration
        if index not in indices:
            return False, f"Iteration {index} not found."
        report = ComparativeReport.from_dict(store.read_report(index))
        if byte_cap is None:
            byte_cap = store.read_config().get("task", {}).get("byte_cap")
    except IntegrityError as exc:
        return False, f"integrity error: {exc}"
    if byte_cap is None:
        return True, render_text(report)
    return True, render_text(report, byte_cap)


# ---- read-only queries for the JSON API ---------------------------------------

def list_runs(runs_root: Path) -> List[str]:
    root = Path(runs_root)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / CONFIG_FILE).is_file())


def _open_run(runs_root: Path, run_id: str) -> RunStore:
    if not RUN_ID_PATTERN.match(run_id) or run_id in (".", ".."):
        raise IntegrityError(f"Invalid run id: {run_id}")
    return RunStore.open(Path(runs_root) / run_id)


def _load_agents(store: RunStore) -> Dict[str, AgentRecord]:
    return {a: AgentRecord.from_dict(store.read_agent(a)) for a in store.list_agents()}


def get_run_standings(runs_root: Path, run_id: str) -> Tuple[bool, Union[Dict, str]]:
    try:
        store = _open_run(runs_root, run_id)
        agents = _load_agents(store)
    except IntegrityError as exc:
        return False, str(exc)
    ordered = sorted(agents.values(), key=lambda a: (-a.rating, a.created_iteration, a.agent_id))
    try:
        best = best_agent(agents).agent_id
    except ArityError:
        best = None
    return True, {
        "run_id": run_id,
        "best_agent_id": best,
        "agents": [a.to_dict() for a in ordered],
    }


def get_iteration_detail(runs_root: Path, run_id: str, index: int) -> Tuple[bool, Union[Dict, str]]:
    try:
        store = _open_run(runs_root, run_id)
        if index not in store.list_iterations():
            return False, f"Iteration {index} not found."
        detail = {"record": store.read_iteration(index), "elo": store.read_elo_snapshot(index)}
        if (store.iteration_dir(index) / "report.json").is_file():
            detail["report"] = store.read_report(index)
    except IntegrityError as exc:
        return False, str(exc)
    return True, detail


def get_ledger(runs_root: Path, run_id: str) -> Tuple[bool, Union[Dict, str]]:
    try:
        store = _open_run(runs_root, run_id)
        return True, store.read_ledger().to_dict()
    except IntegrityError as exc:
        return False, str(exc)


def exact_probabilities(n: int, accuracies: Sequence[float],
                        mode: Optional[str] = None) -> Tuple[bool, Union[Dict, str]]:
    """Exact single-round statistics; every top-1 mode unless one is named."""
    try:
        if mode is None:
            return True, dict(exact_summary(n, accuracies), n=n, accuracies=list(accuracies))
        return True, {"n": n, "accuracies": list(accuracies), "mode": mode,
                      "top1": exact_top1_probability(n, accuracies, mode)}
    except EngineError as exc:
        return False, str(exc)
