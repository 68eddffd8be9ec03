"""
Evaluator and mutator plugins.

Two families live here: subprocess plugins speaking the JSON protocol, and the
builtin synthetic pair used for desk-scale runs. The engine only sees the
duck-typed interfaces:

    evaluator.evaluate(agent_id, artifact_dir, examples) -> list of reply dicts
    mutator.run(session_dir, phase) -> None   (raises MutationError)
"""

import hashlib
import json
import logging
import shlex
import shutil
import subprocess
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from errors import EvaluatorError, MutationError, PluginError
from evaluation import ExampleRef

logger = logging.getLogger(__name__)

BUILTIN_SYNTHETIC = "builtin:synthetic"
SYNTHETIC_POOL_PREFIX = "builtin:synthetic:"

PHASE_CREATE = "create"
PHASE_REFINE = "refine"

DEFAULT_BATCH_TIMEOUT = 600.0
DEFAULT_CREATE_TIMEOUT = 1800.0
DEFAULT_REFINE_TIMEOUT = 900.0

AGENT_FILE = "agent.json"


def stable_unit(*parts) -> float:
    """Uniform draw in [0, 1) fixed by its key parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")


def synthetic_pool(size: int) -> List[ExampleRef]:
    if size < 1:
        raise ValueError("Synthetic pool size must be positive.")
    return [ExampleRef(f"ex-{i:04d}", f"synthetic://ex-{i:04d}") for i in range(size)]


def write_synthetic_seed(directory: Path, accuracy: float) -> Path:
    """Seed artifact for the synthetic evaluator."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / AGENT_FILE).write_text(json.dumps({"true_accuracy": accuracy}, sort_keys=True),
                                        encoding="utf-8")
    return directory


def _split_command(command: str) -> List[str]:
    argv = shlex.split(command)
    if not argv:
        raise PluginError("Empty plugin command.")
    exe = argv[0]
    if shutil.which(exe) is None and not Path(exe).is_file():
        raise PluginError(f"Plugin executable not found: {exe}")
    return argv


class SubprocessEvaluator:
    """One process per batch: JSON request on stdin, one JSON reply per stdout line."""

    def __init__(self, argv: Sequence[str], timeout: float = DEFAULT_BATCH_TIMEOUT):
        self.argv = list(argv)
        self.timeout = timeout

    def evaluate(self, agent_id: str, artifact_dir: Path, examples: Sequence[ExampleRef]) -> List[Dict]:
        request = {"artifact_dir": str(artifact_dir), "examples": [e.to_dict() for e in examples]}
        try:
            proc = subprocess.run(
                self.argv, input=json.dumps(request), capture_output=True,
                text=True, encoding="utf-8", errors="replace", timeout=self.timeout,
            )
        except subprocess.TimeoutExpired:
            raise EvaluatorError(f"timed out after {self.timeout:g} s")
        except OSError as exc:
            raise EvaluatorError(f"could not launch evaluator: {exc}")

        if proc.stderr:
            logger.debug("evaluator stderr for %s: %s", agent_id, proc.stderr.strip())
        if proc.returncode != 0:
            tail = proc.stderr.strip()[-200:]
            raise EvaluatorError(f"exit code {proc.returncode}" + (f": {tail}" if tail else ""))

        replies = []
        for line in proc.stdout.splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                replies.append(json.loads(line))
            except ValueError:  # includes integers past the digit limit
                logger.warning("Skipping non-JSON evaluator line for %s: %.80s", agent_id, line)
        return replies


class SubprocessMutator:
    """Invoked as `<command> <session_dir> <phase>`; exit code 0 means success."""

    def __init__(self, argv: Sequence[str], create_timeout: float = DEFAULT_CREATE_TIMEOUT,
                 refine_timeout: float = DEFAULT_REFINE_TIMEOUT):
        self.argv = list(argv)
        self.timeouts = {PHASE_CREATE: create_timeout, PHASE_REFINE: refine_timeout}

    def run(self, session_dir: Path, phase: str) -> None:
        timeout = self.timeouts[phase]
        try:
            proc = subprocess.run(
                self.argv + [str(session_dir), phase], capture_output=True,
                text=True, encoding="utf-8", errors="replace", timeout=timeout,
            )
        except subprocess.TimeoutExpired:
            raise MutationError(f"{phase} phase timed out after {timeout:g} s")
        except OSError as exc:
            raise MutationError(f"could not launch mutator: {exc}")
        if proc.returncode != 0:
            tail = proc.stderr.strip()[-200:]
            raise MutationError(f"{phase} phase exited with {proc.returncode}" + (f": {tail}" if tail else ""))


class SyntheticEvaluator:
    """
    Test double: an agent is a true accuracy. Each (run seed, behaviour, example)
    maps to a fixed uniform draw; the agent is correct when the draw falls below
    its accuracy. The fingerprint is the Bernoulli outcome itself.
    """

    def __init__(self, run_seed: int):
        self.run_seed = run_seed

    def evaluate(self, agent_id: str, artifact_dir: Path, examples: Sequence[ExampleRef]) -> List[Dict]:
        try:
            settings = json.loads((Path(artifact_dir) / AGENT_FILE).read_text(encoding="utf-8"))
            accuracy = float(settings["true_accuracy"])
        except (OSError, ValueError, KeyError) as exc:
            raise EvaluatorError(f"unreadable synthetic artifact: {exc}")
        behaviour = settings.get("behavior_id") or agent_id

        replies = []
        for example in examples:
            draw = stable_unit(self.run_seed, behaviour, example.example_id)
            correct = draw < accuracy
            replies.append({
                "example_id": example.example_id,
                "score": 1.0 if correct else 0.0,
                "fingerprint": "1" if correct else "0",
                "diagnostics": f"{example.example_id}: {'correct' if correct else 'incorrect'} "
                               f"(draw {draw:.4f} vs accuracy {accuracy:.4f})",
                "agent_stdout": f"[{agent_id}] attempted {example.payload_ref or example.example_id}",
            })
        return replies


class SyntheticMutator:
    """
    Test double for the evolution step. A created child inherits the previous
    winner's accuracy plus a N(0.01, 0.02) draw clipped to [0, 1]; refinement
    adds 0.005 half of the time. With clone_rate > 0 a child may copy the
    winner's behaviour outright.
    """

    def __init__(self, run_seed: int, clone_rate: float = 0.0):
        if not 0.0 <= clone_rate <= 1.0:
            raise ValueError("clone_rate must be in [0, 1].")
        self.run_seed = run_seed
        self.clone_rate = clone_rate

    def _rng(self, agent_id: str, phase: str) -> np.random.Generator:
        return np.random.default_rng([self.run_seed, stable_int(agent_id), 0 if phase == PHASE_CREATE else 1])

    def run(self, session_dir: Path, phase: str) -> None:
        session_dir = Path(session_dir)
        session = json.loads((session_dir / "session.json").read_text(encoding="utf-8"))
        agent_id = session["agent_id"]
        artifact = session_dir / "artifact"
        if phase == PHASE_CREATE:
            self._create(session_dir, session, agent_id, artifact)
        elif phase == PHASE_REFINE:
            self._refine(agent_id, artifact)
        else:
            raise MutationError(f"unknown phase {phase!r}")

    def _create(self, session_dir: Path, session: Dict, agent_id: str, artifact: Path) -> None:
        parent_id = session["competitor_ids"][0]
        parent = json.loads((session_dir / "competitors" / parent_id / AGENT_FILE).read_text(encoding="utf-8"))
        rng = self._rng(agent_id, PHASE_CREATE)
        step = float(rng.normal(0.01, 0.02))
        copy_parent = self.clone_rate > 0 and rng.random() < self.clone_rate

        if copy_parent:
            child = {"true_accuracy": parent["true_accuracy"],
                     "behavior_id": parent.get("behavior_id") or parent_id}
            note = f"Copied {parent_id} unchanged."
        else:
            accuracy = float(np.clip(parent["true_accuracy"] + step, 0.0, 1.0))
            child = {"true_accuracy": accuracy}
            note = f"Mutated {parent_id}: accuracy {parent['true_accuracy']:.4f} -> {accuracy:.4f}."
        child["parent_id"] = parent_id

        artifact.mkdir(parents=True, exist_ok=True)
        (artifact / AGENT_FILE).write_text(json.dumps(child, sort_keys=True), encoding="utf-8")
        (session_dir / "reasoning.md").write_text(f"# {agent_id}\n\n{note}\n", encoding="utf-8")

    def _refine(self, agent_id: str, artifact: Path) -> None:
        rng = self._rng(agent_id, PHASE_REFINE)
        if rng.random() >= 0.5:
            return
        path = artifact / AGENT_FILE
        child = json.loads(path.read_text(encoding="utf-8"))
        child["true_accuracy"] = float(np.clip(child["true_accuracy"] + 0.005, 0.0, 1.0))
        path.write_text(json.dumps(child, sort_keys=True), encoding="utf-8")


def resolve_evaluator(command: str, run_seed: int, timeout: float = DEFAULT_BATCH_TIMEOUT):
    if command == BUILTIN_SYNTHETIC:
        return SyntheticEvaluator(run_seed)
    return SubprocessEvaluator(_split_command(command), timeout)


def resolve_mutator(command: str, run_seed: int, clone_rate: float = 0.0,
                    create_timeout: float = DEFAULT_CREATE_TIMEOUT,
                    refine_timeout: float = DEFAULT_REFINE_TIMEOUT):
    if command == BUILTIN_SYNTHETIC:
        return SyntheticMutator(run_seed, clone_rate)
    return SubprocessMutator(_split_command(command), create_timeout, refine_timeout)
