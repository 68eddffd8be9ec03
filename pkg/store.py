"""
Run store module for the evolution engine.
Handles all run-directory reads and writes.

Layout under a run root:
    config.json            run configuration (schema_version, engine, task)
    pool.json              example pool
    ledger.json            budget ledger
    events.jsonl           append-only event log, one JSON object per line
    run.lock               advisory writer lock
    agents/<id>/           agent.json, artifact/, outcomes.jsonl
    iterations/<index>/    iteration.json, examples.json, outcomes.json,
                           elo.json, report.json, report.md, diagnostics/, deep_focus/
    sessions/<id>/         mutator workspaces
"""

import json
import os
import shutil
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from errors import IntegrityError
from evaluation import BudgetLedger, EvalOutcome, ExampleRef
from reports import DIAGNOSTICS_DIR, diagnostics_locator, diagnostics_text

SCHEMA_VERSION = 1
RUNS_ROOT = "runs"

CONFIG_FILE = "config.json"
POOL_FILE = "pool.json"
LEDGER_FILE = "ledger.json"
EVENTS_FILE = "events.jsonl"
LOCK_FILE = "run.lock"


def write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IntegrityError(f"Missing record: {path}")
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"Corrupted record {path}: {exc}")


class RunStore:
    """One run directory. Writers hold run.lock; readers never take it."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._lock = threading.Lock()
        self._seq = 0
        self._owns_lock = False

    # ---- lifecycle -------------------------------------------------------

    @classmethod
    def create(cls, root: Path, config: Dict, pool: Iterable[ExampleRef]) -> "RunStore":
        root = Path(root)
        if root.exists() and any(root.iterdir()):
            raise IntegrityError(f"Run directory is not empty: {root}")
        store = cls(root)
        root.mkdir(parents=True, exist_ok=True)
        store.acquire_lock()
        write_json(root / CONFIG_FILE, dict(config, schema_version=SCHEMA_VERSION))
        write_json(root / POOL_FILE, [e.to_dict() for e in pool])
        (root / EVENTS_FILE).write_text("", encoding="utf-8")
        return store

    @classmethod
    def open(cls, root: Path) -> "RunStore":
        store = cls(root)
        if not (store.root / CONFIG_FILE).is_file():
            raise IntegrityError(f"Not a run directory (no {CONFIG_FILE}): {root}")
        store._seq = len(store.read_events())
        return store

    def acquire_lock(self) -> None:
        try:
            fd = os.open(self.root / LOCK_FILE, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise IntegrityError(f"Run directory is locked by another writer: {self.root}")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._owns_lock = True

    def release_lock(self) -> None:
        if self._owns_lock:
            (self.root / LOCK_FILE).unlink(missing_ok=True)
            self._owns_lock = False

    def resolve(self, locator: str) -> Path:
        return self.root / locator

    # ---- configuration ---------------------------------------------------

    def read_config(self) -> Dict:
        return read_json(self.root / CONFIG_FILE)

    def read_pool(self) -> List[ExampleRef]:
        return [ExampleRef.from_dict(e) for e in read_json(self.root / POOL_FILE)]

    def write_ledger(self, ledger: BudgetLedger) -> None:
        write_json(self.root / LEDGER_FILE, ledger.to_dict())

    def read_ledger(self) -> BudgetLedger:
        return BudgetLedger.from_dict(read_json(self.root / LEDGER_FILE))

    # ---- event log -------------------------------------------------------

    def append_event(self, event: Dict) -> None:
        with self._lock:
            record = dict(event, seq=self._seq)
            with open(self.root / EVENTS_FILE, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
            self._seq += 1

    def read_events(self) -> List[Dict]:
        path = self.root / EVENTS_FILE
        if not path.is_file():
            raise IntegrityError(f"Missing event log: {path}")
        events = []
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"Corrupted event at line {number}: {exc}")
        return events

    # ---- agents ----------------------------------------------------------

    def agent_dir(self, agent_id: str) -> Path:
        return self.root / "agents" / agent_id

    def artifact_locator(self, agent_id: str) -> str:
        return f"agents/{agent_id}/artifact"

    def install_artifact(self, agent_id: str, source: Path) -> str:
        """Copy an artifact directory into the store, replacing any previous version."""
        target = self.resolve(self.artifact_locator(agent_id))
        if target.exists():
            shutil.rmtree(target)
        shutil.copytree(source, target)
        return self.artifact_locator(agent_id)

    def write_agent(self, record: Dict) -> None:
        write_json(self.agent_dir(record["agent_id"]) / "agent.json", record)

    def read_agent(self, agent_id: str) -> Dict:
        return read_json(self.agent_dir(agent_id) / "agent.json")

    def list_agents(self) -> List[str]:
        agents_root = self.root / "agents"
        if not agents_root.is_dir():
            return []
        return sorted(p.name for p in agents_root.iterdir() if (p / "agent.json").is_file())

    # ---- outcome cache ---------------------------------------------------

    def append_outcomes(self, agent_id: str, outcomes: Iterable[EvalOutcome]) -> None:
        path = self.agent_dir(agent_id) / "outcomes.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock, open(path, "a", encoding="utf-8") as fh:
            for outcome in outcomes:
                fh.write(json.dumps(outcome.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")

    def load_outcome_cache(self) -> Dict[Tuple[str, str], EvalOutcome]:
        cache = {}
        for path in sorted((self.root / "agents").glob("*/outcomes.jsonl")):
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    outcome = EvalOutcome.from_dict(json.loads(line))
                    cache.setdefault((outcome.agent_id, outcome.example_id), outcome)
        return cache

    def discard_outcomes(self, agent_id: str) -> None:
        """Move a draft's outcomes aside so they no longer serve as cache entries."""
        path = self.agent_dir(agent_id) / "outcomes.jsonl"
        if not path.is_file():
            return
        with self._lock:
            draft = path.with_name("draft_outcomes.jsonl")
            with open(draft, "a", encoding="utf-8") as fh:
                fh.write(path.read_text(encoding="utf-8"))
            path.unlink()

    # ---- iterations ------------------------------------------------------

    def iteration_dir(self, index: int) -> Path:
        return self.root / "iterations" / f"{index:04d}"

    def list_iterations(self) -> List[int]:
        root = self.root / "iterations"
        if not root.is_dir():
            return []
        return sorted(int(p.name) for p in root.iterdir() if (p / "iteration.json").is_file())

    def write_outcomes(self, directory: Path, outcomes: Mapping[str, List[EvalOutcome]]) -> None:
        write_json(directory / "outcomes.json",
                   {agent: [o.to_dict() for o in outs] for agent, outs in outcomes.items()})

    def diagnostics_root(self, directory: Path) -> str:
        """Locator prefix, relative to the run root, of the diagnostics under directory."""
        return (Path(directory) / DIAGNOSTICS_DIR).relative_to(self.root).as_posix()

    def write_diagnostics(self, directory: Path, outcomes: Mapping[str, List[EvalOutcome]]) -> None:
        root = self.diagnostics_root(directory)
        for agent, outs in outcomes.items():
            for outcome in outs:
                path = self.resolve(diagnostics_locator(agent, outcome.example_id, root))
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(diagnostics_text(outcome), encoding="utf-8")

    def read_outcomes(self, directory: Path) -> Dict[str, List[EvalOutcome]]:
        data = read_json(directory / "outcomes.json")
        return {agent: [EvalOutcome.from_dict(o) for o in outs] for agent, outs in data.items()}

    def write_iteration(self, record: Dict, outcomes: Mapping[str, List[EvalOutcome]],
                        report: Optional[Dict], report_text: Optional[str],
                        population: Mapping[str, float]) -> None:
        directory = self.iteration_dir(record["index"])
        write_json(directory / "examples.json", record["example_ids"])
        self.write_outcomes(directory, outcomes)
        self.write_diagnostics(directory, outcomes)
        write_json(directory / "elo.json", {
            "before": record["elo_before"],
            "after": record["elo_after"],
            "population": dict(population),
        })
        if report is not None:
            write_json(directory / "report.json", report)
            (directory / "report.md").write_text(report_text or "", encoding="utf-8")
        write_json(directory / "iteration.json", record)

    def read_iteration(self, index: int) -> Dict:
        return read_json(self.iteration_dir(index) / "iteration.json")

    def read_elo_snapshot(self, index: int) -> Dict:
        return read_json(self.iteration_dir(index) / "elo.json")

    def read_report(self, index: int) -> Dict:
        return read_json(self.iteration_dir(index) / "report.json")

    def session_dir(self, agent_id: str) -> Path:
        return self.root / "sessions" / agent_id
